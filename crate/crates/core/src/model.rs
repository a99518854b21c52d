//! Encoder plus one or two direction-specific decoders sharing a parameter store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bidir::{Direction, DirectionMode};
use crate::decoder::{Decoder, DecoderConfig, Memory};
use crate::encoder::{self, EncoderConfig, ScalePreset};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{NormMode, RunningStats, Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS, NUM_CHARS, PAD};

pub const ENCODER_PREFIX: &str = "enc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub direction: DirectionMode,
}

impl ModelConfig {
    pub fn preset(preset: ScalePreset) -> Self {
        ModelConfig {
            encoder: EncoderConfig::preset(preset),
            decoder: match preset {
                ScalePreset::Full => DecoderConfig::full(),
                ScalePreset::Desk => DecoderConfig::desk(),
            },
            direction: DirectionMode::Bidirectional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.feature_dim != self.decoder.d_model {
            return Err(Error::Config(format!(
                "encoder feature_dim {} differs from decoder d {}",
                self.encoder.feature_dim, self.decoder.d_model
            )));
        }
        if self.encoder.holistic_branch != self.decoder.use_holistic {
            return Err(Error::Config(
                "encoder holistic branch and decoder holistic input must be switched together".into(),
            ));
        }
        if self.decoder.use_holistic && self.encoder.holistic_dim != self.decoder.embed_dim() {
            return Err(Error::Config(format!(
                "holistic_dim {} must equal d/2 = {}",
                self.encoder.holistic_dim,
                self.decoder.embed_dim()
            )));
        }
        Ok(())
    }
}

/// Batched losses on one tape.
#[derive(Clone, Debug)]
pub struct Losses {
    pub total: Var,
    pub per_direction: Vec<(Direction, Var)>,
    /// Batch-norm statistics to commit after a training step.
    pub stat_updates: Vec<(String, RunningStats)>,
}

#[derive(Clone, Debug)]
pub struct Recognizer {
    pub config: ModelConfig,
    pub store: ParamStore,
    decoders: Vec<(Direction, Decoder)>,
}

impl Recognizer {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        encoder::init_params(&config.encoder, ENCODER_PREFIX, &mut store, rng)?;
        let decoders = Self::build_decoders(&config)?;
        for (_, d) in &decoders {
            d.init_params(&mut store, rng)?;
        }
        Ok(Recognizer { config, store, decoders })
    }

    /// Wraps an existing store after checking it holds exactly the expected
/// tensors and batch-norm statistics.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), &mut crate::rng::stream(0, "shape-check"))?;
        let expected: Vec<(&str, &[usize])> = reference.store.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: Vec<(&str, &[usize])> = store.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != found {
            let first = expected
                .iter()
                .zip(&found)
                .find(|(a, b)| a != b)
                .map(|(a, _)| a.0.to_string())
                .unwrap_or_else(|| "parameter count".into());
            return Err(Error::Format {
                what: "parameter set",
                expected: format!("{} tensors matching the configuration", expected.len()),
                found: format!("{} tensors, first mismatch at {first}", found.len()),
            });
        }
        let expected: Vec<(&str, usize)> = reference.store.iter_stats().map(|(n, s)| (n, s.mean.len())).collect();
        let found: Vec<(&str, usize)> = store.iter_stats().map(|(n, s)| (n, s.mean.len())).collect();
        if expected != found {
            return Err(Error::Format {
                what: "batch-norm statistics",
                expected: format!("{} channel sets matching the configuration", expected.len()),
                found: format!("{} sets", found.len()),
            });
        }
        Ok(Recognizer {
            decoders: reference.decoders,
            config,
            store,
        })
    }

    fn build_decoders(config: &ModelConfig) -> Result<Vec<(Direction, Decoder)>> {
        config
            .direction
            .directions()
            .iter()
            .map(|&d| Ok((d, Decoder::new(config.decoder.clone(), d.prefix())?)))
            .collect()
    }

    pub fn decoders(&self) -> &[(Direction, Decoder)] {
        &self.decoders
    }

    pub fn decoder(&self, direction: Direction) -> Option<&Decoder> {
        self.decoders.iter().find(|(d, _)| *d == direction).map(|(_, d)| d)
    }

    pub fn stack(&self, images: &[Tensor]) -> Result<Tensor> {
        let e = &self.config.encoder;
        let shape = [e.input_height, e.input_width, e.input_channels];
        let mut data = Vec::with_capacity(images.len() * shape.iter().product::<usize>());
        for img in images {
            if img.shape() != shape {
                return Err(Error::Shape {
                    op: "image batch",
                    lhs: img.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            data.extend_from_slice(img.data());
        }
        Tensor::new(&[images.len(), shape[0], shape[1], shape[2]], data)
    }

    /// Eval-mode encoder outputs for each image.
    pub fn encode(&self, images: &[Tensor]) -> Result<Vec<Memory>> {
        let mut tape = Tape::inference();
        let x = tape.constant(self.stack(images)?);
        let out = encoder::encode(&mut tape, &self.config.encoder, ENCODER_PREFIX, &self.store, x, NormMode::Eval)?;
        Ok(encoder::extract(&tape, &out)
            .into_iter()
            .map(|(featmap, holistic)| Memory { featmap, holistic })
            .collect())
    }

    /// Teacher-forced cross-entropy summed over the configured directions.
    /// `labels` hold character classes only, in reading order.
    pub fn loss(&self, tape: &mut Tape, images: &[Tensor], labels: &[Vec<usize>], mode: NormMode) -> Result<Losses> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Invalid(format!(
                "{} images for {} labels",
                images.len(),
                labels.len()
            )));
        }
        let max_len = self.config.decoder.max_len;
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() || l.len() + 1 > max_len {
                return Err(Error::Invalid(format!(
                    "sample {i}: label length {} outside [1, {}]",
                    l.len(),
                    max_len - 1
                )));
            }
            if let Some(&t) = l.iter().find(|&&t| t >= NUM_CHARS) {
                return Err(Error::Invalid(format!("sample {i}: token {t} is not a character")));
            }
        }
        let x = tape.constant(self.stack(images)?);
        let enc = encoder::encode(tape, &self.config.encoder, ENCODER_PREFIX, &self.store, x, mode)?;
        let steps = labels.iter().map(Vec::len).max().unwrap() + 1;
        let mut per_direction = Vec::new();
        for (dir, dec) in &self.decoders {
            let (inputs, targets) = teacher_batch(labels, *dir, steps);
            let out = dec.forward(tape, &self.store, &inputs, enc.featmap, enc.holistic)?;
            per_direction.push((*dir, tape.cross_entropy(out.logits, &targets, PAD)?));
        }
        let mut total = per_direction[0].1;
        for &(_, l) in &per_direction[1..] {
            total = tape.add(total, l)?;
        }
        Ok(Losses {
            total,
            per_direction,
            stat_updates: enc.stat_updates,
        })
    }
}

/// Decoder inputs (BOS-shifted) and PAD-padded targets for one direction.
pub fn teacher_batch(labels: &[Vec<usize>], dir: Direction, steps: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(labels.len());
    let mut targets = Vec::with_capacity(labels.len() * steps);
    for l in labels {
        let mut t = dir.orient(l);
        t.push(EOS);
        let mut inp = Vec::with_capacity(steps);
        inp.push(BOS);
        inp.extend_from_slice(&t[..t.len() - 1]);
        // filler inputs only feed PAD targets, which the causal mask keeps downstream
        inp.resize(steps, EOS);
        t.resize(steps, PAD);
        inputs.push(inp);
        targets.extend(t);
    }
    (inputs, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_batch_layout() {
        let (inp, tgt) = teacher_batch(&[vec![1, 2, 3], vec![4]], Direction::Reversed, 4);
        assert_eq!(inp, vec![vec![BOS, 3, 2, 1], vec![BOS, 4, EOS, EOS]]);
        assert_eq!(tgt, vec![3, 2, 1, EOS, 4, EOS, PAD, PAD]);
    }

    #[test]
    fn mismatched_holistic_switches_rejected() {
        let mut c = ModelConfig::preset(ScalePreset::Desk);
        c.decoder.use_holistic = false;
        assert!(c.validate().is_err());
        c.encoder.holistic_branch = false;
        c.validate().unwrap();
    }
}
