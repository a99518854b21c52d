//! Decoder timing: the parallel attention decoder against a recurrent
//! GRU decoder of the same width, both teacher-forced over identical
//! encoder features.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;

use crate::decoder::{Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::params::{lecun, normal, ParamStore};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{BOS, NUM_CHARS, NUM_CLASSES, NUM_INPUT_TOKENS, PAD};

/// Recurrent baseline: embedding plus holistic fusion feeds a GRU cell whose
/// state queries the feature map once per step; the prediction head reads
/// `state + context`.
#[derive(Clone, Debug)]
pub struct RnnBaselineDecoder {
    pub config: DecoderConfig,
    pub prefix: String,
}

impl RnnBaselineDecoder {
    pub fn new(config: DecoderConfig, prefix: impl Into<String>) -> Result<Self> {
        config.validate()?;
        Ok(RnnBaselineDecoder {
            config,
            prefix: prefix.into(),
        })
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let d = self.config.d_model;
        store.insert(self.name("embed"), normal(&[NUM_INPUT_TOKENS, self.config.embed_dim()], 1.0, rng))?;
        for w in ["w_ir", "w_iz", "w_in", "w_hr", "w_hz", "w_hn"] {
            store.insert(self.name(&format!("gru.{w}")), lecun(&[d, d], d, rng))?;
        }
        for b in ["b_r", "b_z", "b_in", "b_hn"] {
            store.insert(self.name(&format!("gru.{b}")), Tensor::zeros(&[d]))?;
        }
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(self.name(&format!("attn.{w}")), lecun(&[d, d], d, rng))?;
        }
        store.insert(self.name("head.w"), normal(&[d, NUM_CLASSES], 0.01, rng))?;
        store.insert(self.name("head.b"), Tensor::zeros(&[NUM_CLASSES]))?;
        Ok(())
    }

    /// Sequential teacher-forced pass. `inputs` are BOS-prefixed rows of one
    /// length T, `featmap` is `[batch·M × d]`, `holistic` is `[batch × d/2]`.
    /// Returns `[batch·T × NUM_CLASSES]` logits, rows grouped by sample.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: &[Vec<usize>], featmap: Var, holistic: Option<Var>) -> Result<Var> {
        let c = &self.config;
        let (d, heads) = (c.d_model, c.heads);
        let dh = c.head_dim();
        let batch = inputs.len();
        let steps = inputs.first().map_or(0, Vec::len);
        if batch == 0 || steps == 0 || inputs.iter().any(|r| r.len() != steps) {
            return Err(Error::Invalid("recurrent decoder needs equal-length, non-empty inputs".into()));
        }
        let ids: Vec<usize> = inputs.iter().flatten().copied().collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= NUM_INPUT_TOKENS) {
            return Err(Error::Invalid(format!("token {bad} is not a valid decoder input")));
        }
        let fm_shape = tape.shape(featmap).to_vec();
        if fm_shape.len() != 2 || fm_shape[1] != d || !fm_shape[0].is_multiple_of(batch) {
            return Err(Error::Shape {
                op: "recurrent decoder memory",
                lhs: fm_shape,
                rhs: vec![batch, d],
            });
        }
        let cells = fm_shape[0] / batch;

        let table = tape.param(store, &self.name("embed"))?;
        let emb = tape.embedding(table, &ids)?;
        let global = match (c.use_holistic, holistic) {
            (true, Some(h)) => {
                let rows: Vec<usize> = (0..batch).flat_map(|b| std::iter::repeat_n(b, steps)).collect();
                tape.gather_rows(h, &rows)?
            }
            (true, None) => return Err(Error::Invalid("decoder expects a holistic vector".into())),
            (false, _) => tape.constant(Tensor::zeros(&[batch * steps, c.embed_dim()])),
        };
        let x = tape.concat(&[emb, global], 1)?;

        let p = |tape: &mut Tape, n: &str| tape.param(store, &self.name(n));
        let (w_ir, w_iz, w_in) = (p(tape, "gru.w_ir")?, p(tape, "gru.w_iz")?, p(tape, "gru.w_in")?);
        let (w_hr, w_hz, w_hn) = (p(tape, "gru.w_hr")?, p(tape, "gru.w_hz")?, p(tape, "gru.w_hn")?);
        let (b_r, b_z) = (p(tape, "gru.b_r")?, p(tape, "gru.b_z")?);
        let (b_in, b_hn) = (p(tape, "gru.b_in")?, p(tape, "gru.b_hn")?);
        let (wq, wk, wv, wo) = (p(tape, "attn.wq")?, p(tape, "attn.wk")?, p(tape, "attn.wv")?, p(tape, "attn.wo")?);

        // input projections and key/value projections do not depend on the state
        let xr = tape.linear(x, w_ir, Some(b_r))?;
        let xz = tape.linear(x, w_iz, Some(b_z))?;
        let xn = tape.linear(x, w_in, Some(b_in))?;
        let k = tape.matmul(featmap, wk)?;
        let v = tape.matmul(featmap, wv)?;
        let k = split(tape, k, batch, cells, heads)?;
        let v = split(tape, v, batch, cells, heads)?;

        let mut h = tape.constant(Tensor::zeros(&[batch, d]));
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let rows: Vec<usize> = (0..batch).map(|b| b * steps + t).collect();
            let hr = tape.matmul(h, w_hr)?;
            let hz = tape.matmul(h, w_hz)?;
            let hn = tape.linear(h, w_hn, Some(b_hn))?;
            let xr_t = tape.gather_rows(xr, &rows)?;
            let xz_t = tape.gather_rows(xz, &rows)?;
            let xn_t = tape.gather_rows(xn, &rows)?;
            let r = tape.add(xr_t, hr)?;
            let r = tape.sigmoid(r)?;
            let z = tape.add(xz_t, hz)?;
            let z = tape.sigmoid(z)?;
            let gated = tape.mul(r, hn)?;
            let n = tape.add(xn_t, gated)?;
            let n = tape.tanh(n)?;
            // (1 − z)·n + z·h
            let diff = tape.sub(h, n)?;
            let zd = tape.mul(z, diff)?;
            h = tape.add(n, zd)?;

            let q = tape.matmul(h, wq)?;
            let q = tape.reshape(q, &[batch * heads, 1, dh])?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, c.scale())?;
            let w = tape.softmax(scores, 2)?;
            let ctx = tape.batch_matmul(w, v, false)?;
            let ctx = tape.reshape(ctx, &[batch, d])?;
            let ctx = tape.matmul(ctx, wo)?;
            outs.push(tape.add(h, ctx)?);
        }
        let stacked = tape.concat(&outs, 0)?;
        let stacked = tape.reshape(stacked, &[steps, batch, d])?;
        let stacked = tape.permute(stacked, &[1, 0, 2])?;
        let stacked = tape.reshape(stacked, &[batch * steps, d])?;
        let w = p(tape, "head.w")?;
        let b = p(tape, "head.b")?;
        tape.linear(stacked, w, Some(b))
    }
}

fn split(tape: &mut Tape, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
    let d = tape.shape(x)[1];
    let x = tape.reshape(x, &[batch, len, heads, d / heads])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch * heads, len, d / heads])
}

/// Teacher-forced logits of the recurrent baseline for one label.
pub fn rnn_decode_train_pass(decoder: &RnnBaselineDecoder, store: &ParamStore, targets: &[usize], featmap: &Tensor, holistic: Option<&Tensor>) -> Result<Tensor> {
    if targets.is_empty() {
        return Err(Error::Invalid("empty target sequence".into()));
    }
    let mut input = vec![BOS];
    input.extend_from_slice(&targets[..targets.len() - 1]);
    let mut tape = Tape::inference();
    let d = decoder.config.d_model;
    let fm = tape.constant(featmap.clone().reshaped(&[featmap.numel() / d, d])?);
    let hol = match holistic {
        Some(h) => Some(tape.constant(h.clone().reshaped(&[1, h.numel()])?)),
        None => None,
    };
    let logits = decoder.forward(&mut tape, store, &[input], fm, hol)?;
    Ok(tape.value(logits).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DecoderKind {
    Attention,
    Recurrent,
}

impl DecoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderKind::Attention => "attention",
            DecoderKind::Recurrent => "gru",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Backward,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kind: DecoderKind,
    pub seq_len: usize,
    pub batch: usize,
    pub phase: Phase,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
}

pub const CSV_HEADER: &str = "kind,seq_len,batch,phase,median_ms,p10_ms,p90_ms,params";
pub const DEFAULT_LENGTHS: [usize; 4] = [5, 10, 20, 40];
pub const DEFAULT_BATCH: usize = 20;
pub const MIN_REPEATS: usize = 20;
const WARMUP: usize = 2;

/// Speedup of the attention decoder over the baseline at one length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Speedup {
    pub seq_len: usize,
    pub forward: f64,
    pub backward: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.4},{:.4},{:.4},{}",
                r.kind.as_str(),
                r.seq_len,
                r.batch,
                r.phase.as_str(),
                r.median_ms,
                r.p10_ms,
                r.p90_ms,
                r.params
            );
        }
        s
    }

    fn median(&self, kind: DecoderKind, seq_len: usize, batch: usize, phase: Phase) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.kind == kind && r.seq_len == seq_len && r.batch == batch && r.phase == phase)
            .map(|r| r.median_ms)
    }

    /// Baseline median over attention median, per length, for one batch size.
    pub fn speedups(&self, batch: usize) -> Vec<Speedup> {
        let mut lengths: Vec<usize> = self.rows.iter().filter(|r| r.batch == batch).map(|r| r.seq_len).collect();
        lengths.sort_unstable();
        lengths.dedup();
        lengths
            .into_iter()
            .filter_map(|t| {
                let ratio = |p| Some(self.median(DecoderKind::Recurrent, t, batch, p)? / self.median(DecoderKind::Attention, t, batch, p)?);
                Some(Speedup {
                    seq_len: t,
                    forward: ratio(Phase::Forward)?,
                    backward: ratio(Phase::Backward)?,
                })
            })
            .collect()
    }
}

/// Adjacent pairs where the sequence decreases.
pub fn monotonic_violations(values: &[f64]) -> Vec<usize> {
    values.windows(2).enumerate().filter(|(_, w)| w[1] < w[0]).map(|(i, _)| i).collect()
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Shared random inputs for one `(T, batch)` configuration.
pub struct BenchInputs {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
    pub featmap: Tensor,
    pub holistic: Tensor,
}

impl BenchInputs {
    pub fn random(config: &DecoderConfig, cells: usize, seq_len: usize, batch: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &format!("bench/{seq_len}/{batch}"));
        let mut inputs = Vec::with_capacity(batch);
        let mut targets = Vec::with_capacity(batch * seq_len);
        for _ in 0..batch {
            let label: Vec<usize> = (0..seq_len).map(|_| rng.gen_range(0..NUM_CHARS)).collect();
            let mut row = vec![BOS];
            row.extend_from_slice(&label[..seq_len - 1]);
            inputs.push(row);
            targets.extend(label);
        }
        let d = config.d_model;
        let featmap = Tensor::from_fn(&[batch * cells, d], |_| rng.gen_range(-1.0..1.0));
        let holistic = Tensor::from_fn(&[batch, config.embed_dim()], |_| rng.gen_range(-1.0..1.0));
        BenchInputs {
            inputs,
            targets,
            featmap,
            holistic,
        }
    }
}

/// Builds the loss for one decoder kind on a fresh tape.
pub fn bench_loss(tape: &mut Tape, kind: DecoderKind, attn: &Decoder, rnn: &RnnBaselineDecoder, store: &ParamStore, x: &BenchInputs) -> Result<Var> {
    let fm = tape.constant(x.featmap.clone());
    let hol = tape.constant(x.holistic.clone());
    let logits = match kind {
        DecoderKind::Attention => attn.forward(tape, store, &x.inputs, fm, Some(hol))?.logits,
        DecoderKind::Recurrent => rnn.forward(tape, store, &x.inputs, fm, Some(hol))?,
    };
    tape.cross_entropy(logits, &x.targets, PAD)
}

/// Times forward (tape construction through the loss) and backward passes of
/// both decoders. `cells` is the feature-grid size fed as memory.
pub fn run_bench(lengths: &[usize], batches: &[usize], repeats: usize, config: &DecoderConfig, cells: usize, seed: u64) -> Result<BenchReport> {
    if repeats == 0 || lengths.is_empty() || batches.is_empty() || lengths.contains(&0) || batches.contains(&0) || cells == 0 {
        return Err(Error::Invalid("bench needs positive lengths, batches, repeats and cells".into()));
    }
    let mut config = config.clone();
    config.max_len = config.max_len.max(*lengths.iter().max().unwrap());
    let attn = Decoder::new(config.clone(), "attn")?;
    let rnn = RnnBaselineDecoder::new(config.clone(), "rnn")?;
    let mut store = ParamStore::new();
    let mut init = rng::stream(seed, "init");
    attn.init_params(&mut store, &mut init)?;
    rnn.init_params(&mut store, &mut init)?;
    let params = |prefix: &str| store.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.numel()).sum::<usize>();
    let counts = [(DecoderKind::Attention, params("attn.")), (DecoderKind::Recurrent, params("rnn."))];

    let mut rows = Vec::new();
    for &batch in batches {
        for &t in lengths {
            let x = BenchInputs::random(&config, cells, t, batch, seed);
            // alternate the two decoders so that drift in machine speed hits both alike
            let mut times = vec![(Vec::with_capacity(repeats), Vec::with_capacity(repeats)); counts.len()];
            for rep in 0..WARMUP + repeats {
                for (&(kind, _), (fwd, bwd)) in counts.iter().zip(times.iter_mut()) {
                    let mut tape = Tape::new();
                    let start = Instant::now();
                    let loss = bench_loss(&mut tape, kind, &attn, &rnn, &store, &x)?;
                    let mid = Instant::now();
                    tape.backward(loss)?;
                    let end = Instant::now();
                    if rep >= WARMUP {
                        fwd.push((mid - start).as_secs_f64() * 1e3);
                        bwd.push((end - mid).as_secs_f64() * 1e3);
                    }
                }
            }
            for (&(kind, n_params), (fwd, bwd)) in counts.iter().zip(times) {
                for (phase, mut times) in [(Phase::Forward, fwd), (Phase::Backward, bwd)] {
                    times.sort_by(f64::total_cmp);
                    rows.push(BenchRow {
                        kind,
                        seq_len: t,
                        batch,
                        phase,
                        median_ms: percentile(&times, 0.5),
                        p10_ms: percentile(&times, 0.1),
                        p90_ms: percentile(&times, 0.9),
                        params: n_params,
                    });
                }
            }
        }
    }
    Ok(BenchReport { repeats, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_and_violations() {
        let v: Vec<f64> = (0..21).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 10.0);
        assert_eq!(percentile(&v, 0.1), 2.0);
        assert_eq!(percentile(&v, 0.9), 18.0);
        assert_eq!(monotonic_violations(&[1.0, 2.0, 1.5, 3.0, 2.0]), vec![1, 3]);
        assert!(monotonic_violations(&[1.0, 1.0, 2.0]).is_empty());
    }
}
