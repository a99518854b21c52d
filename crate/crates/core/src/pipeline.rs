//! Inference: rotation candidates, beam search, direction selection and
//! attention heatmaps.

use std::path::{Path, PathBuf};

use crate::bidir::{select, Direction, Scored};
use crate::decoder::{AttentionRecord, Decoder, Memory};
use crate::error::{Error, Result};
use crate::image::{resample, to_byte, GrayImage};
use crate::model::Recognizer;
use crate::params::ParamStore;
use crate::vocab::{CharVocab, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamConfig {
    pub k: usize,
    pub max_len: usize,
}

impl BeamConfig {
    pub const DEFAULT_K: usize = 5;

    pub fn new(k: usize, max_len: usize) -> Result<Self> {
        if k == 0 || max_len == 0 {
            return Err(Error::Config(format!("beam width {k} and max_len {max_len} must be positive")));
        }
        Ok(BeamConfig { k, max_len })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted classes, ending in EOS unless cut at `max_len`.
    pub tokens: Vec<usize>,
    pub logprob_sum: f64,
    pub finished: bool,
    pub records: Vec<AttentionRecord>,
}

impl Hypothesis {
    fn empty() -> Self {
        Hypothesis {
            tokens: Vec::new(),
            logprob_sum: 0.0,
            finished: false,
            records: Vec::new(),
        }
    }

    /// Length-normalized log-probability (EOS counts as an emitted token).
    pub fn score(&self) -> f64 {
        self.logprob_sum / self.tokens.len().max(1) as f64
    }

    /// Character classes without the terminating EOS.
    pub fn chars(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Every finished hypothesis, best normalized score first.
    pub pool: Vec<Hypothesis>,
}

/// Beam search that prunes by accumulated log-probability among equal-length
/// expansions and ranks finished hypotheses by normalized score.
pub fn beam_search(decoder: &Decoder, store: &ParamStore, memory: &Memory, beam: BeamConfig) -> Result<BeamResult> {
    let max_len = beam.max_len.min(decoder.config.max_len);
    let mut live = vec![Hypothesis::empty()];
    let mut pool = Vec::new();
    while !live.is_empty() {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let steps = decoder.decode_step(store, memory, &prefixes)?;
        let mut expansions: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * steps[0].log_probs.len());
        for (h, step) in steps.iter().enumerate() {
            for (c, lp) in step.log_probs.iter().enumerate() {
                expansions.push((live[h].logprob_sum + lp, h, c));
            }
        }
        // stable: ties keep parent order, then class order
        expansions.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::with_capacity(beam.k);
        for &(sum, h, c) in expansions.iter().take(beam.k) {
            let parent = &live[h];
            let mut tokens = parent.tokens.clone();
            tokens.push(c);
            let mut records = parent.records.clone();
            records.push(steps[h].record.clone());
            let finished = c == EOS || tokens.len() >= max_len;
            let hyp = Hypothesis {
                tokens,
                logprob_sum: sum,
                finished,
                records,
            };
            if finished {
                pool.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }
    pool.sort_by(|a, b| b.score().total_cmp(&a.score()));
    Ok(BeamResult {
        best: pool[0].clone(),
        pool,
    })
}

/// Argmax decoding until EOS or `max_len`.
pub fn greedy(decoder: &Decoder, store: &ParamStore, memory: &Memory, max_len: usize) -> Result<Hypothesis> {
    let max_len = max_len.min(decoder.config.max_len);
    let mut hyp = Hypothesis::empty();
    while !hyp.finished {
        let step = decoder.decode_step(store, memory, &[hyp.tokens.clone()])?.remove(0);
        let (c, lp) = step
            .log_probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &lp)| if lp > best.1 { (c, lp) } else { best });
        hyp.tokens.push(c);
        hyp.logprob_sum += lp;
        hyp.records.push(step.record);
        hyp.finished = c == EOS || hyp.tokens.len() >= max_len;
    }
    Ok(hyp)
}

/// Resized input candidates: the image itself, plus both quarter turns when
/// it is more than twice as tall as wide.
pub fn preprocess(image: &GrayImage, width: usize, height: usize) -> Result<Vec<GrayImage>> {
    if image.width == 0 || image.height == 0 || image.pixels.len() != image.width * image.height {
        return Err(Error::Invalid(format!("degenerate image {}×{}", image.width, image.height)));
    }
    let mut out = vec![image.resize(width, height)?];
    if needs_rotation(image) {
        out.push(image.rotate_ccw().resize(width, height)?);
        out.push(image.rotate_cw().resize(width, height)?);
    }
    Ok(out)
}

pub fn needs_rotation(image: &GrayImage) -> bool {
    image.height > 2 * image.width
}

#[derive(Clone, Debug)]
pub struct Recognition {
    pub text: String,
    pub score: f64,
    /// Index into the [`preprocess`] candidates.
    pub candidate: usize,
    pub direction: Direction,
    pub hypothesis: Hypothesis,
    /// Feature grid the attention records refer to.
    pub grid: (usize, usize),
}

/// Best reading over every rotation candidate and configured direction.
pub fn recognize(model: &Recognizer, image: &GrayImage, beam: BeamConfig) -> Result<Recognition> {
    let e = &model.config.encoder;
    let candidates = preprocess(image, e.input_width, e.input_height)?;
    let tensors: Vec<_> = candidates.iter().map(GrayImage::to_tensor).collect();
    let memories = model.encode(&tensors)?;
    let vocab = CharVocab::new();
    let mut best: Option<Recognition> = None;
    for (i, mem) in memories.iter().enumerate() {
        let mut per_dir = Vec::new();
        for (dir, dec) in model.decoders() {
            let hyp = beam_search(dec, &model.store, mem, beam)?.best;
            let text = vocab.decode(&dir.orient(hyp.chars()));
            per_dir.push((*dir, hyp, text));
        }
        let (dir, hyp, text) = if per_dir.len() == 2 {
            let scored = |k: usize| Scored {
                text: per_dir[k].2.clone(),
                score: per_dir[k].1.score(),
            };
            let (_, d) = select(scored(0), scored(1));
            per_dir.into_iter().find(|p| p.0 == d).unwrap()
        } else {
            per_dir.pop().unwrap()
        };
        if best.as_ref().is_none_or(|b| hyp.score() > b.score) {
            best = Some(Recognition {
                text,
                score: hyp.score(),
                candidate: i,
                direction: dir,
                grid: (mem.featmap.height, mem.featmap.width),
                hypothesis: hyp,
            });
        }
    }
    Ok(best.unwrap())
}

/// Head-averaged weights of one step as a `height × width` map upsampled
/// bilinearly from the feature grid.
pub fn heatmap(record: &AttentionRecord, grid: (usize, usize), width: usize, height: usize) -> Result<Vec<f64>> {
    let mean = record.mean_over_heads();
    aggregate_map(&mean, grid, width, height)
}

fn aggregate_map(weights: &[f64], grid: (usize, usize), width: usize, height: usize) -> Result<Vec<f64>> {
    if weights.len() != grid.0 * grid.1 {
        return Err(Error::Shape {
            op: "heatmap",
            lhs: vec![weights.len()],
            rhs: vec![grid.0, grid.1],
        });
    }
    Ok(resample(weights, grid.1, grid.0, width, height))
}

/// Sum of the head-averaged maps over steps, renormalized to unit mass.
pub fn aggregate_weights(records: &[AttentionRecord]) -> Vec<f64> {
    let mut acc = vec![0.0; records.first().map_or(0, |r| r.keys)];
    for r in records {
        acc.iter_mut().zip(r.mean_over_heads()).for_each(|(a, w)| *a += w);
    }
    let total: f64 = acc.iter().sum();
    if total > 0.0 {
        acc.iter_mut().for_each(|a| *a /= total);
    }
    acc
}

fn to_heat_image(map: &[f64], width: usize, height: usize) -> Result<GrayImage> {
    let max = map.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    GrayImage::new(width, height, map.iter().map(|&v| to_byte(v * scale)).collect())
}

/// Writes `<stem>_step<t>.pgm` for every step and `<stem>_agg.pgm`, each at
/// the size of `image`. Returns the written paths.
pub fn export_attention(records: &[AttentionRecord], grid: (usize, usize), image: &GrayImage, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = (image.width, image.height);
    let mut paths = Vec::with_capacity(records.len() + 1);
    for (t, r) in records.iter().enumerate() {
        let path = dir.join(format!("{stem}_step{t}.pgm"));
        to_heat_image(&heatmap(r, grid, w, h)?, w, h)?.save(&path)?;
        paths.push(path);
    }
    let path = dir.join(format!("{stem}_agg.pgm"));
    to_heat_image(&aggregate_map(&aggregate_weights(records), grid, w, h)?, w, h)?.save(&path)?;
    paths.push(path);
    Ok(paths)
}
