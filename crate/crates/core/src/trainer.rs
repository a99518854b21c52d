//! Teacher-forced training with ADADELTA or SGD, evaluation metrics and
//! JSON-lines logging.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bidir::Direction;
use crate::encoder::apply_stat_updates;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::model::{ModelConfig, Recognizer};
use crate::params::ParamStore;
use crate::pipeline::{recognize, BeamConfig};
use crate::rng::{self, Rng};
use crate::synth::Sample;
use crate::tape::{NormMode, Tape};
use crate::tensor::Tensor;
use crate::vocab::CharVocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adadelta,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adadelta" => Ok(OptimizerKind::Adadelta),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (adadelta, sgd)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Total optimizer steps.
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub rho: f64,
    pub eps: f64,
    /// Step size for SGD; scales the ADADELTA update (1.0 is the plain rule).
    pub lr: f64,
    /// Evaluation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn full() -> Self {
        TrainConfig {
            batch_size: 160,
            ..Self::desk()
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 2000,
            optimizer: OptimizerKind::Adadelta,
            rho: 0.9,
            eps: 1e-6,
            lr: 1.0,
            eval_every: 500,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.rho) || self.eps <= 0.0 || self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "need 0 <= rho < 1, eps > 0, lr > 0 (got {}, {}, {})",
                self.rho, self.eps, self.lr
            )));
        }
        Ok(())
    }
}

/// One ADADELTA update in place.
pub fn adadelta_update(param: &mut [f64], grad: &[f64], eg2: &mut [f64], edx2: &mut [f64], rho: f64, eps: f64, lr: f64) {
    for i in 0..param.len() {
        let g = grad[i];
        eg2[i] = rho * eg2[i] + (1.0 - rho) * g * g;
        let dx = -((edx2[i] + eps).sqrt() / (eg2[i] + eps).sqrt()) * g;
        edx2[i] = rho * edx2[i] + (1.0 - rho) * dx * dx;
        param[i] += lr * dx;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
    /// Per parameter, in store order: `(E[g²], E[Δx²])`. Empty for SGD.
    pub state: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(config: &TrainConfig, store: &ParamStore) -> Self {
        let state = match config.optimizer {
            OptimizerKind::Adadelta => store
                .iter()
                .map(|(_, t)| (vec![0.0; t.numel()], vec![0.0; t.numel()]))
                .collect(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Optimizer {
            kind: config.optimizer,
            rho: config.rho,
            eps: config.eps,
            lr: config.lr,
            state,
        }
    }

    /// Applies the accumulated gradients in `store`; parameters without a
    /// gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) {
        for (i, (_, t)) in store.iter_mut().enumerate() {
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            match self.kind {
                OptimizerKind::Adadelta => {
                    let (eg2, edx2) = &mut self.state[i];
                    adadelta_update(t.data_mut(), &grad, eg2, edx2, self.rho, self.eps, self.lr);
                }
                OptimizerKind::Sgd => {
                    t.data_mut().iter_mut().zip(&grad).for_each(|(p, g)| *p -= self.lr * g);
                }
            }
        }
    }
}

/// A sample ready for the encoder.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Tensor,
    pub label: Vec<usize>,
}

pub fn prepare(samples: &[Sample], config: &ModelConfig) -> Result<Vec<Example>> {
    let vocab = CharVocab::new();
    let (w, h) = (config.encoder.input_width, config.encoder.input_height);
    samples
        .iter()
        .map(|s| {
            Ok(Example {
                image: s.image.resize(w, h)?.to_tensor(),
                label: vocab.encode(&s.label)?,
            })
        })
        .collect()
}

/// Shuffled pass order over the training set, reshuffled every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOrder {
    pub rng: Rng,
    pub perm: Vec<usize>,
    pub cursor: usize,
}

impl BatchOrder {
    pub fn new(seed: u64) -> Self {
        BatchOrder {
            rng: rng::stream(seed, "train-order"),
            perm: Vec::new(),
            cursor: 0,
        }
    }

    pub fn next_batch(&mut self, n: usize, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch.min(n) {
            if self.cursor >= self.perm.len() || self.perm.len() != n {
                self.perm = (0..n).collect();
                self.perm.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.perm[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub edit_distance: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Recognizer,
    pub config: TrainConfig,
    pub optimizer: Optimizer,
    pub step: u64,
    pub order: BatchOrder,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Recognizer::new(model_config, &mut rng::stream(config.seed, "init"))?;
        let optimizer = Optimizer::new(&config, &model.store);
        Ok(Trainer {
            order: BatchOrder::new(config.seed),
            model,
            config,
            optimizer,
            step: 0,
        })
    }

    /// Fills the store's gradients for one batch and returns the loss terms.
    pub fn gradients(&mut self, batch: &[&Example]) -> Result<(f64, Vec<(Direction, f64)>)> {
        let images: Vec<Tensor> = batch.iter().map(|e| e.image.clone()).collect();
        let labels: Vec<Vec<usize>> = batch.iter().map(|e| e.label.clone()).collect();
        let mut tape = Tape::new();
        let losses = self.model.loss(&mut tape, &images, &labels, NormMode::Train)?;
        tape.backward(losses.total)?;
        self.model.store.zero_grad();
        tape.accumulate_param_grads(&mut self.model.store);
        apply_stat_updates(&mut self.model.store, losses.stat_updates)?;
        let parts = losses
            .per_direction
            .iter()
            .map(|&(d, v)| Ok((d, tape.value(v).item()?)))
            .collect::<Result<_>>()?;
        Ok((tape.value(losses.total).item()?, parts))
    }

    /// Forward, backward and one optimizer update; returns the batch loss.
    pub fn train_step(&mut self, batch: &[&Example]) -> Result<f64> {
        let (loss, _) = self.gradients(batch)?;
        self.optimizer.step(&mut self.model.store);
        self.model.store.zero_grad();
        self.step += 1;
        Ok(loss)
    }

    /// Draws the next batch from `data` and trains on it.
    pub fn step_on(&mut self, data: &[Example]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Invalid("empty training set".into()));
        }
        let idx = self.order.next_batch(data.len(), self.config.batch_size);
        let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
        self.train_step(&batch)
    }

    /// Trains until `config.steps`, evaluating on `eval` every `eval_every`
    /// steps and at the end. Each evaluation is passed to `log`.
    pub fn fit(&mut self, data: &[Example], eval: Option<&[Sample]>, beam: BeamConfig, mut log: impl FnMut(&Metrics) -> Result<()>) -> Result<Vec<Metrics>> {
        let start = Instant::now();
        let mut out = Vec::new();
        let mut recent = Vec::new();
        while (self.step as usize) < self.config.steps {
            recent.push(self.step_on(data)?);
            let done = self.step as usize == self.config.steps;
            let due = self.config.eval_every > 0 && (self.step as usize).is_multiple_of(self.config.eval_every);
            if done || due {
                let (accuracy, edit_distance) = match eval {
                    Some(set) => {
                        let r = evaluate(set, &self.model, beam)?;
                        (r.accuracy, r.edit_distance)
                    }
                    None => (f64::NAN, f64::NAN),
                };
                let m = Metrics {
                    step: self.step,
                    loss: recent.iter().sum::<f64>() / recent.len() as f64,
                    accuracy,
                    edit_distance,
                    wall_time: start.elapsed().as_secs_f64(),
                };
                recent.clear();
                log(&m)?;
                out.push(m);
            }
        }
        Ok(out)
    }
}

/// Appends one JSON object per line.
pub fn write_metrics_line(w: &mut impl Write, m: &Metrics) -> std::io::Result<()> {
    let line = serde_json::to_string(m).map_err(std::io::Error::other)?;
    writeln!(w, "{line}")
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over `max(len(truth), len(pred))`; 0 for two empty strings.
pub fn normalized_edit_distance(truth: &str, pred: &str) -> f64 {
    let (a, b): (Vec<char>, Vec<char>) = (truth.chars().collect(), pred.chars().collect());
    let denom = a.len().max(b.len());
    if denom == 0 {
        0.0
    } else {
        levenshtein(&a, &b) as f64 / denom as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub edit_distance: f64,
    pub predictions: Vec<String>,
}

/// Metrics from full recognition of every sample (rotation rule included).
pub fn evaluate(dataset: &[Sample], model: &Recognizer, beam: BeamConfig) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let predictions = dataset
        .iter()
        .map(|s| Ok(recognize(model, &s.image, beam)?.text))
        .collect::<Result<Vec<_>>>()?;
    Ok(score_predictions(dataset.iter().map(|s| s.label.as_str()), &predictions))
}

pub fn score_predictions<'a>(truths: impl Iterator<Item = &'a str>, predictions: &[String]) -> EvalReport {
    let (mut hits, mut dist, mut n) = (0usize, 0.0, 0usize);
    for (t, p) in truths.zip(predictions) {
        hits += usize::from(t == p);
        dist += normalized_edit_distance(t, p);
        n += 1;
    }
    EvalReport {
        samples: n,
        accuracy: hits as f64 / n as f64,
        edit_distance: dist / n as f64,
        predictions: predictions.to_vec(),
    }
}

/// Image as the encoder sees it, for callers holding raw samples.
pub fn encoder_input(image: &GrayImage, config: &ModelConfig) -> Result<Tensor> {
    Ok(image
        .resize(config.encoder.input_width, config.encoder.input_height)?
        .to_tensor())
}
