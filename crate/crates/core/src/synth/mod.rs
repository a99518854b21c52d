//! Deterministic synthetic word images.
//!
//! Text is laid out in font units (one unit per font pixel, glyph pitch 6),
//! warped by one of four distortions and supersampled straight into the
//! target raster. Every per-sample random quantity is drawn in a fixed order
//! whatever the mode, so modes with degenerate parameters coincide exactly.

pub mod font;
mod words;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{to_byte, GrayImage};
use crate::rng::{self, indexed_stream};
use crate::vocab::CharVocab;
use font::{glyph, ink, GLYPH_HEIGHT, GLYPH_WIDTH};

const PITCH: usize = GLYPH_WIDTH + 1;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distortion {
    None,
    Rotate,
    Perspective,
    Arc,
}

impl Distortion {
    pub const ALL: [Distortion; 4] = [Distortion::None, Distortion::Rotate, Distortion::Perspective, Distortion::Arc];

    pub fn as_str(self) -> &'static str {
        match self {
            Distortion::None => "none",
            Distortion::Rotate => "rotate",
            Distortion::Perspective => "perspective",
            Distortion::Arc => "arc",
        }
    }
}

impl std::str::FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Distortion::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown distortion `{s}` (none, rotate, perspective, arc)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Each sample picks one of these uniformly.
    pub modes: Vec<Distortion>,
    /// Largest rotation magnitude in degrees.
    pub rotation_deg: f64,
    /// Largest corner displacement as a fraction of the text box height.
    pub perspective: f64,
    /// Largest total bend of arc-placed text in degrees.
    pub arc_deg: f64,
    /// Gaussian noise standard deviation in gray levels.
    pub noise_std: f64,
    /// Box blur radius is drawn from `0..=blur_radius`.
    pub blur_radius: usize,
    /// Text height as a fraction of the padded canvas height.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Probability of a uniform random string instead of a dictionary word.
    pub random_prob: f64,
    /// Dictionary words in use: an evenly spaced subset of the built-in list,
    /// the same for every seed. 0 keeps the whole list.
    pub lexicon_size: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            min_len: 1,
            max_len: 10,
            modes: Distortion::ALL.to_vec(),
            rotation_deg: 35.0,
            perspective: 0.25,
            arc_deg: 90.0,
            noise_std: 6.0,
            blur_radius: 1,
            scale_min: 0.6,
            scale_max: 0.85,
            random_prob: 0.5,
            lexicon_size: 0,
            width: 64,
            height: 32,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("word length range {}..={} is empty", self.min_len, self.max_len));
        }
        if self.modes.is_empty() {
            return bad("no distortion modes".into());
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return bad(format!("scale range {}..{} outside (0, 1]", self.scale_min, self.scale_max));
        }
        if !(0.0..=1.0).contains(&self.random_prob) {
            return bad(format!("random_prob {} outside [0, 1]", self.random_prob));
        }
        if self.noise_std < 0.0 || self.rotation_deg < 0.0 || self.arc_deg < 0.0 || !(0.0..0.5).contains(&self.perspective) {
            return bad("distortion and noise ranges must be non-negative (perspective < 0.5)".into());
        }
        if self.arc_deg >= 360.0 {
            return bad(format!("arc_deg {} must stay below a full turn", self.arc_deg));
        }
        if self.width == 0 || self.height == 0 {
            return bad("output size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: GrayImage,
    pub label: String,
}

/// Draws a label: a dictionary word in a random case style, or a uniform
/// random string over the whole vocabulary.
pub fn sample_word(spec: &SynthSpec, rng: &mut impl Rng) -> String {
    let random = rng.gen_bool(spec.random_prob);
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    let style = rng.gen_range(0..4);
    let fitting = lexicon(spec);
    let pick = rng.gen_range(0..fitting.len().max(1));
    let vocab = CharVocab::new();
    let chars: String = (0..len).map(|_| *vocab.chars().choose(rng).unwrap()).collect();
    if random || fitting.is_empty() {
        return chars;
    }
    let w = fitting[pick];
    match style {
        0 | 1 => w.to_string(),
        2 => w[..1].to_uppercase() + &w[1..],
        _ => w.to_uppercase(),
    }
}

/// Dictionary words eligible under `spec`, independent of its seed.
pub fn lexicon(spec: &SynthSpec) -> Vec<&'static str> {
    let fitting: Vec<&str> = words::WORDS
        .iter()
        .copied()
        .filter(|w| (spec.min_len..=spec.max_len).contains(&w.len()))
        .collect();
    if spec.lexicon_size == 0 || spec.lexicon_size >= fitting.len() {
        return fitting;
    }
    (0..spec.lexicon_size)
        .map(|i| fitting[i * fitting.len() / spec.lexicon_size])
        .collect()
}

/// Per-sample rendering parameters, all drawn up front.
#[derive(Clone, Debug)]
struct Draw {
    mode: Distortion,
    angle: f64,
    corners: [(f64, f64); 4],
    bend: f64,
    scale: f64,
    blur: usize,
    background: f64,
    foreground: f64,
}

impl Draw {
    fn new(spec: &SynthSpec, rng: &mut impl Rng) -> Self {
        let mode = *spec.modes.choose(rng).unwrap();
        let angle = rng.gen_range(-1.0..=1.0) * spec.rotation_deg.to_radians();
        let mut corners = [(0.0, 0.0); 4];
        for c in &mut corners {
            *c = (
                rng.gen_range(-1.0..=1.0) * spec.perspective,
                rng.gen_range(-1.0..=1.0) * spec.perspective,
            );
        }
        let bend = rng.gen_range(-1.0..=1.0) * spec.arc_deg.to_radians();
        let scale = rng.gen_range(spec.scale_min..=spec.scale_max);
        let blur = rng.gen_range(0..=spec.blur_radius);
        let background = rng.gen_range(160.0..240.0);
        let foreground = rng.gen_range(10.0..90.0);
        Draw {
            mode,
            angle,
            corners,
            bend,
            scale,
            blur,
            background,
            foreground,
        }
    }
}

/// Text-to-canvas map; text coordinates are centered on the word.
#[derive(Clone, Debug)]
enum Warp {
    Identity,
    Rotate { cos: f64, sin: f64 },
    Homography { fwd: [f64; 9], inv: [f64; 9] },
    /// Text follows a circle of signed radius `r` (positive bulges upward).
    Arc { r: f64 },
}

impl Warp {
    fn forward(&self, u: f64, v: f64) -> (f64, f64) {
        match *self {
            Warp::Identity => (u, v),
            // positive angles turn the baseline counter-clockwise on screen
            Warp::Rotate { cos, sin } => (u * cos + v * sin, -u * sin + v * cos),
            Warp::Homography { fwd, .. } => apply_h(&fwd, u, v),
            Warp::Arc { r } => {
                let a = u / r;
                let rho = r - v;
                (rho * a.sin(), r - rho * a.cos())
            }
        }
    }

    fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            Warp::Identity => (x, y),
            Warp::Rotate { cos, sin } => (x * cos - y * sin, x * sin + y * cos),
            Warp::Homography { inv, .. } => apply_h(&inv, x, y),
            Warp::Arc { r } => {
                // centre sits at (0, r); for r < 0 both ρ and the angle flip sign
                let (dx, dy) = (x, r - y);
                let rho = r.signum() * dx.hypot(dy);
                let a = (dx * r.signum()).atan2(dy * r.signum());
                (a * r, r - rho)
            }
        }
    }
}

fn apply_h(h: &[f64; 9], x: f64, y: f64) -> (f64, f64) {
    let w = h[6] * x + h[7] * y + h[8];
    ((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w)
}

/// Homography taking each `src[i]` to `dst[i]` (h₈ = 1).
fn homography(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> [f64; 9] {
    let mut m = [[0.0; 9]; 8];
    for i in 0..4 {
        let ((x, y), (u, v)) = (src[i], dst[i]);
        m[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        m[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let pivot = (col..8).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
        m.swap(col, pivot);
        for row in 0..8 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..9 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    let mut h = [1.0; 9];
    for i in 0..8 {
        h[i] = m[i][8] / m[i][i];
    }
    h
}

fn invert3(h: &[f64; 9]) -> [f64; 9] {
    let [a, b, c, d, e, f, g, k, l] = *h;
    let det = a * (e * l - f * k) - b * (d * l - f * g) + c * (d * k - e * g);
    [
        (e * l - f * k) / det,
        (c * k - b * l) / det,
        (b * f - c * e) / det,
        (f * g - d * l) / det,
        (a * l - c * g) / det,
        (c * d - a * f) / det,
        (d * k - e * g) / det,
        (b * g - a * k) / det,
        (a * e - b * d) / det,
    ]
}

/// Ink coverage in `[0, 1]` on the target raster, before shading and noise.
fn coverage(word: &[&'static [u8; 5]], draw: &Draw, width: usize, height: usize) -> Vec<f64> {
    let text_w = (word.len() * PITCH - 1) as f64;
    let text_h = GLYPH_HEIGHT as f64;
    let margin = text_h * (1.0 / draw.scale - 1.0) / 2.0;
    let (hw, hh) = (text_w / 2.0 + margin, text_h / 2.0 + margin);
    let warp = match draw.mode {
        Distortion::None => Warp::Identity,
        Distortion::Rotate => Warp::Rotate {
            cos: draw.angle.cos(),
            sin: draw.angle.sin(),
        },
        Distortion::Perspective => {
            let src = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)];
            let mut dst = src;
            for (d, &(jx, jy)) in dst.iter_mut().zip(&draw.corners) {
                d.0 += jx * 2.0 * hh;
                d.1 += jy * 2.0 * hh;
            }
            let fwd = homography(&src, &dst);
            Warp::Homography { fwd, inv: invert3(&fwd) }
        }
        Distortion::Arc if draw.bend != 0.0 => Warp::Arc { r: text_w / draw.bend },
        Distortion::Arc => Warp::Identity,
    };
    // canvas = bounding box of the warped padded text box
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    let steps = 64;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let edge = [
            (-hw + 2.0 * hw * t, -hh),
            (-hw + 2.0 * hw * t, hh),
            (-hw, -hh + 2.0 * hh * t),
            (hw, -hh + 2.0 * hh * t),
        ];
        for (u, v) in edge {
            let (x, y) = warp.forward(u, v);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    let (sx, sy) = ((x1 - x0) / width as f64, (y1 - y0) / height as f64);
    let mut out = vec![0.0; width * height];
    let n = SUPERSAMPLE as f64;
    for py in 0..height {
        for px in 0..width {
            let mut hits = 0usize;
            for j in 0..SUPERSAMPLE {
                for i in 0..SUPERSAMPLE {
                    let x = x0 + (px as f64 + (i as f64 + 0.5) / n) * sx;
                    let y = y0 + (py as f64 + (j as f64 + 0.5) / n) * sy;
                    let (u, v) = warp.inverse(x, y);
                    if inked(word, u + text_w / 2.0, v + text_h / 2.0) {
                        hits += 1;
                    }
                }
            }
            out[py * width + px] = hits as f64 / (n * n);
        }
    }
    out
}

/// Nearest-neighbour lookup of the font raster at text position `(u, v)`.
fn inked(word: &[&'static [u8; 5]], u: f64, v: f64) -> bool {
    if u < 0.0 || v < 0.0 {
        return false;
    }
    let (col, row) = (u as usize, v as usize);
    let (g, x) = (col / PITCH, col % PITCH);
    g < word.len() && x < GLYPH_WIDTH && row < GLYPH_HEIGHT && ink(word[g], x, row)
}

fn box_blur(src: &[f64], width: usize, height: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return src.to_vec();
    }
    let r = radius as isize;
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..height as isize {
            for x in 0..width as isize {
                let mut acc = 0.0;
                for d in -r..=r {
                    let (xx, yy) = if horizontal { (x + d, y) } else { (x, y + d) };
                    let xx = xx.clamp(0, width as isize - 1) as usize;
                    let yy = yy.clamp(0, height as isize - 1) as usize;
                    acc += src[yy * width + xx];
                }
                out[y as usize * width + x as usize] = acc / (2 * r + 1) as f64;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Renders `word` with parameters drawn from `rng`.
pub fn render(word: &str, spec: &SynthSpec, rng: &mut impl Rng) -> Result<Sample> {
    spec.validate()?;
    let vocab = CharVocab::new();
    vocab.encode(word)?;
    let len = word.chars().count();
    if !(spec.min_len..=spec.max_len).contains(&len) {
        return Err(Error::Invalid(format!(
            "word {word:?} has length {len} outside {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    let glyphs: Vec<_> = word.chars().map(|c| glyph(c).unwrap()).collect();
    let draw = Draw::new(spec, rng);
    let (w, h) = (spec.width, spec.height);
    let cov = box_blur(&coverage(&glyphs, &draw, w, h), w, h, draw.blur);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let pixels = cov
        .iter()
        .map(|&c| to_byte(draw.background + (draw.foreground - draw.background) * c + noise.sample(rng)))
        .collect();
    Ok(Sample {
        image: GrayImage::new(w, h, pixels)?,
        label: word.to_string(),
    })
}

/// Sample `index` of the stream defined by `spec.seed`.
pub fn generate_sample(spec: &SynthSpec, index: u64) -> Result<Sample> {
    let mut rng = indexed_stream(spec.seed, "synth", index);
    let word = sample_word(spec, &mut rng);
    render(&word, spec, &mut rng)
}

pub fn generate_samples(n: usize, spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..n as u64).map(|i| generate_sample(spec, i)).collect()
}

pub const MANIFEST: &str = "labels.tsv";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the dataset directory.
    pub path: PathBuf,
    pub label: String,
}

/// Writes `n` samples as `images/*.pgm` plus `labels.tsv`.
pub fn generate_dataset(n: usize, spec: &SynthSpec, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    if n == 0 {
        return Err(Error::Invalid("dataset size must be at least 1".into()));
    }
    spec.validate()?;
    let images = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let width = n.to_string().len().max(5);
    let mut manifest = Vec::with_capacity(n);
    for i in 0..n {
        let sample = generate_sample(spec, i as u64)?;
        let rel = PathBuf::from(IMAGE_DIR).join(format!("{i:0width$}.pgm"));
        sample.image.save(&out_dir.join(&rel))?;
        manifest.push(ManifestEntry {
            path: rel,
            label: sample.label,
        });
    }
    let path = out_dir.join(MANIFEST);
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut text = String::new();
    for e in &manifest {
        text.push_str(&format!("{}\t{}\n", e.path.display(), e.label));
    }
    file.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let vocab = CharVocab::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse {
            path: path.clone(),
            line: i + 1,
            msg,
        };
        let (file, label) = line
            .split_once('\t')
            .ok_or_else(|| parse("expected `<path>\\t<label>`".into()))?;
        if file.is_empty() || label.is_empty() {
            return Err(parse("empty path or label".into()));
        }
        vocab.encode(label).map_err(|e| parse(e.to_string()))?;
        out.push(ManifestEntry {
            path: PathBuf::from(file),
            label: label.to_string(),
        });
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            Ok(Sample {
                image: GrayImage::load(&dir.join(&e.path))?,
                label: e.label,
            })
        })
        .collect()
}

/// Stream name under which a dataset seed is derived from a run seed.
pub fn data_seed(seed: u64, split: &str) -> u64 {
    rng::stream(seed, &format!("data/{split}")).gen()
}
