//! 8-bit grayscale images and binary PGM (P5) files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, one byte per pixel.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid(format!("degenerate image {width}×{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Invalid(format!(
                "{} pixels for a {width}×{height} image",
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Quarter turn clockwise (`+90°`).
    pub fn rotate_cw(&self) -> GrayImage {
        let (w, h) = (self.height, self.width);
        let mut pixels = vec![0; w * h];
        for y in 0..h {
            for x in 0..w {
                pixels[y * w + x] = self.get(y, self.height - 1 - x);
            }
        }
        GrayImage { width: w, height: h, pixels }
    }

    /// Quarter turn counter-clockwise (`−90°`).
    pub fn rotate_ccw(&self) -> GrayImage {
        let (w, h) = (self.height, self.width);
        let mut pixels = vec![0; w * h];
        for y in 0..h {
            for x in 0..w {
                pixels[y * w + x] = self.get(self.width - 1 - y, x);
            }
        }
        GrayImage { width: w, height: h, pixels }
    }

    /// Bilinear resize with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Result<GrayImage> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid(format!("degenerate target size {width}×{height}")));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let src: Vec<f64> = self.pixels.iter().map(|&p| p as f64).collect();
        let out = resample(&src, self.width, self.height, width, height);
        Ok(GrayImage {
            width,
            height,
            pixels: out.iter().map(|&v| to_byte(v)).collect(),
        })
    }

    /// Pixels mapped to `[−1, 1]` as a `[height, width, 1]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 127.5 - 1.0).collect();
        Tensor::new(&[self.height, self.width, 1], data).unwrap()
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<GrayImage> {
        let bad = |msg: &str| Error::Format {
            what: "PGM image",
            expected: "P5 header with maxval 255".into(),
            found: msg.into(),
        };
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad(&format!("magic {:?}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("field {s:?}")));
        let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad(&format!("maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() != w * h {
            return Err(bad(&format!("{} raster bytes for {w}×{h}", raster.len())));
        }
        GrayImage::new(w, h, raster.to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<GrayImage> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        GrayImage::from_pgm(&bytes).map_err(|e| match e {
            Error::Format { what, expected, found } => Error::Format {
                what,
                expected,
                found: format!("{found} in {}", path.display()),
            },
            other => other,
        })
    }
}

pub(crate) fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear resampling of a row-major float raster.
pub fn resample(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let sx = sw as f64 / dw as f64;
    let sy = sh as f64 / dh as f64;
    let mut out = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f64;
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bottom = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GrayImage {
        GrayImage::new(3, 2, vec![1, 2, 3, 4, 5, 6]).unwrap()
    }

    #[test]
    fn quarter_turns() {
        let cw = sample().rotate_cw();
        assert_eq!((cw.width, cw.height), (2, 3));
        assert_eq!(cw.pixels, vec![4, 1, 5, 2, 6, 3]);
        assert_eq!(cw.rotate_ccw(), sample());
        assert_eq!(sample().rotate_ccw().rotate_cw(), sample());
    }

    #[test]
    fn pgm_round_trip() {
        let img = sample();
        let bytes = img.to_pgm();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(GrayImage::from_pgm(&bytes).unwrap(), img);
        assert!(GrayImage::from_pgm(&bytes[..bytes.len() - 1]).is_err());
        assert!(GrayImage::from_pgm(b"P2\n1 1\n255\n\x00").is_err());
    }

    #[test]
    fn resize_constant_image() {
        let img = GrayImage::filled(7, 5, 90).unwrap();
        let r = img.resize(16, 3).unwrap();
        assert!(r.pixels.iter().all(|&p| p == 90));
        assert!(img.resize(0, 3).is_err());
    }

    #[test]
    fn normalization_range() {
        let t = GrayImage::new(2, 1, vec![0, 255]).unwrap().to_tensor();
        assert_eq!(t.data(), &[-1.0, 1.0]);
    }
}
