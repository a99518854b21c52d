//! Non-recurrent attention decoder.
//!
//! Each input position is `[embed(prev) + PE(p) ; holistic]`. A block is
//! masked self-attention, 2D attention over the flattened feature map and a
//! point-wise feed-forward layer, each wrapped as `layernorm(x + f(x))`.
//! Training feeds all shifted-right targets in one pass; inference
//! re-runs the same pass on the growing prefix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureMap2D, HolisticVector};
use crate::error::{Error, Result};
use crate::params::{kaiming, lecun, normal, ParamStore};
use crate::tape::{Tape, Var, LAYERNORM_EPS};
use crate::tensor::Tensor;
use crate::vocab::{BOS, NUM_CLASSES, NUM_INPUT_TOKENS};

/// Denominator of the attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionScale {
    /// `1/√(d/H)`: each head's own width.
    PerHead,
    /// `1/√d`: the model width.
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Number `N` of stacked blocks.
    pub layers: usize,
    /// Number `H` of attention heads.
    pub heads: usize,
    /// Model width `d`.
    pub d_model: usize,
    /// Feed-forward inner width `d′`.
    pub d_ff: usize,
    pub max_len: usize,
    pub use_self_attention: bool,
    pub use_holistic: bool,
    pub attention_scale: AttentionScale,
}

impl DecoderConfig {
    pub fn full() -> Self {
        DecoderConfig {
            layers: 1,
            heads: 16,
            d_model: 1024,
            d_ff: 2048,
            max_len: 32,
            use_self_attention: true,
            use_holistic: true,
            attention_scale: AttentionScale::PerHead,
        }
    }

    pub fn desk() -> Self {
        DecoderConfig {
            layers: 1,
            heads: 4,
            d_model: 64,
            d_ff: 128,
            max_len: 32,
            use_self_attention: true,
            use_holistic: true,
            attention_scale: AttentionScale::PerHead,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(2) || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d = {} must be even and divisible by H = {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.d_model / 2
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Factor applied to attention logits.
    pub fn scale(&self) -> f64 {
        match self.attention_scale {
            AttentionScale::PerHead => 1.0 / (self.head_dim() as f64).sqrt(),
            AttentionScale::Model => 1.0 / (self.d_model as f64).sqrt(),
        }
    }
}

/// Sinusoidal position code of width `dim`: even entries `sin(p/10000^(i/dim))`,
/// odd entries `cos(p/10000^((i−1)/dim))`.
pub fn positional_encoding(p: usize, dim: usize, max_len: usize) -> Result<Vec<f64>> {
    if p >= max_len {
        return Err(Error::Invalid(format!("position {p} outside [0, {max_len})")));
    }
    Ok((0..dim)
        .map(|i| {
            let even = i - i % 2;
            let angle = p as f64 / 10000f64.powf(even as f64 / dim as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect())
}

/// Precomputed `[max_len × d/2]` position codes.
#[derive(Clone, Debug)]
pub struct PositionalEncodingTable {
    pub table: Tensor,
}

impl PositionalEncodingTable {
    pub fn new(max_len: usize, dim: usize) -> Self {
        let mut data = Vec::with_capacity(max_len * dim);
        for p in 0..max_len {
            data.extend(positional_encoding(p, dim, max_len).unwrap());
        }
        PositionalEncodingTable {
            table: Tensor::new(&[max_len, dim], data).unwrap(),
        }
    }

    pub fn row(&self, p: usize) -> &[f64] {
        let dim = self.table.shape()[1];
        &self.table.data()[p * dim..][..dim]
    }
}

/// Multi-head projections bound on a tape. `wq`, `wk`, `wv` are `[d × d]`
/// with head `i` occupying columns `i·d/H .. (i+1)·d/H`, i.e. the transpose
/// of the stacked per-head `(d/H) × d` maps; `wo` is `[d × d]`.
#[derive(Clone, Copy, Debug)]
pub struct MhAttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl MhAttentionParams {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(MhAttentionParams {
            wq: tape.param(store, &format!("{prefix}.wq"))?,
            wk: tape.param(store, &format!("{prefix}.wk"))?,
            wv: tape.param(store, &format!("{prefix}.wv"))?,
            wo: tape.param(store, &format!("{prefix}.wo"))?,
        })
    }
}

/// Output of [`mh_attention`].
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `[batch·M′ × d]`
    pub out: Var,
    /// `[batch·H × M′ × M]` softmax weights.
    pub weights: Var,
}

/// Splits `[batch·len × d]` into heads: `[batch·H × len × d/H]`.
fn split_heads(tape: &mut Tape, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
    let d = tape.shape(x)[1];
    let x = tape.reshape(x, &[batch, len, heads, d / heads])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch * heads, len, d / heads])
}

fn merge_heads(tape: &mut Tape, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
    let dh = tape.shape(x)[2];
    let x = tape.reshape(x, &[batch, heads, len, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch * len, heads * dh])
}

/// Multi-head scaled dot-product attention.
///
/// `queries: [batch·M′ × d]`, `keys`/`values: [batch·M × d]`, rows grouped
/// by sample. With `causal`, query `t` sees keys `0..=t` only (M = M′).
#[allow(clippy::too_many_arguments)]
pub fn mh_attention(
    tape: &mut Tape,
    params: &MhAttentionParams,
    queries: Var,
    keys: Var,
    values: Var,
    batch: usize,
    heads: usize,
    scale: f64,
    causal: bool,
) -> Result<Attended> {
    let (sq, sk) = (tape.shape(queries).to_vec(), tape.shape(keys).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] || tape.shape(values) != &sk[..] || sq[0] % batch != 0 || sk[0] % batch != 0 {
        return Err(Error::Shape {
            op: "mh_attention",
            lhs: sq,
            rhs: sk,
        });
    }
    let (m_q, m_k) = (sq[0] / batch, sk[0] / batch);
    if causal && m_q != m_k {
        return Err(Error::Invalid("causal attention needs as many keys as queries".into()));
    }
    let q = tape.matmul(queries, params.wq)?;
    let k = tape.matmul(keys, params.wk)?;
    let v = tape.matmul(values, params.wv)?;
    let q = split_heads(tape, q, batch, m_q, heads)?;
    let k = split_heads(tape, k, batch, m_k, heads)?;
    let v = split_heads(tape, v, batch, m_k, heads)?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, scale)?;
    let weights = if causal {
        tape.causal_softmax(scores)?
    } else {
        tape.softmax(scores, 2)?
    };
    let mixed = tape.batch_matmul(weights, v, false)?;
    let merged = merge_heads(tape, mixed, batch, m_q, heads)?;
    let out = tape.matmul(merged, params.wo)?;
    Ok(Attended { out, weights })
}

/// Point-wise feed-forward: `relu(x·W1 + b1)·W2 + b2` on every row.
pub fn ffn(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = tape.linear(x, w1, Some(b1))?;
    let h = tape.relu(h)?;
    tape.linear(h, w2, Some(b2))
}

/// Per-step 2D attention weights: `heads × keys`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub heads: usize,
    pub keys: usize,
    pub weights: Vec<f64>,
}

impl AttentionRecord {
    pub fn head(&self, h: usize) -> &[f64] {
        &self.weights[h * self.keys..][..self.keys]
    }

    /// Weights averaged over heads.
    pub fn mean_over_heads(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.keys];
        for h in 0..self.heads {
            out.iter_mut().zip(self.head(h)).for_each(|(o, w)| *o += w);
        }
        out.iter_mut().for_each(|o| *o /= self.heads as f64);
        out
    }
}

/// Decoder forward results on a tape.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[batch·T × NUM_CLASSES]`
    pub logits: Var,
    /// 2D attention weights of the last block: `[batch·H × T × M]`.
    pub cross_weights: Var,
    pub batch: usize,
    pub steps: usize,
}

impl DecoderOutput {
    /// Attention record for `sample` at decoding step `t`.
    pub fn record(&self, tape: &Tape, heads: usize, sample: usize, t: usize) -> AttentionRecord {
        let m = tape.shape(self.cross_weights)[2];
        let w = tape.data(self.cross_weights);
        let mut weights = Vec::with_capacity(heads * m);
        for h in 0..heads {
            let base = ((sample * heads + h) * self.steps + t) * m;
            weights.extend_from_slice(&w[base..base + m]);
        }
        AttentionRecord { heads, keys: m, weights }
    }
}

/// Distribution over the next token plus the attention that produced it.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub log_probs: Vec<f64>,
    pub record: AttentionRecord,
}

impl StepOutput {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }
}

/// Encoder outputs for one image in plain (tape-independent) form.
#[derive(Clone, Debug)]
pub struct Memory {
    pub featmap: FeatureMap2D,
    pub holistic: Option<HolisticVector>,
}

/// A decoder's parameters live in a [`ParamStore`] under `prefix`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub prefix: String,
    pe: PositionalEncodingTable,
}

impl Decoder {
    pub fn new(config: DecoderConfig, prefix: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let pe = PositionalEncodingTable::new(config.max_len, config.embed_dim());
        Ok(Decoder {
            config,
            prefix: prefix.into(),
            pe,
        })
    }

    pub fn positional_table(&self) -> &PositionalEncodingTable {
        &self.pe
    }

    fn name(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let c = &self.config;
        let d = c.d_model;
        store.insert(self.name("embed"), normal(&[NUM_INPUT_TOKENS, c.embed_dim()], 1.0, rng))?;
        for l in 0..c.layers {
            if c.use_self_attention {
                self.add_attention(store, l, "self_attn", rng)?;
                self.add_layernorm(store, &format!("block{l}.ln1"))?;
            }
            self.add_attention(store, l, "cross_attn", rng)?;
            self.add_layernorm(store, &format!("block{l}.ln2"))?;
            store.insert(self.name(&format!("block{l}.ffn.w1")), kaiming(&[d, c.d_ff], d, rng))?;
            store.insert(self.name(&format!("block{l}.ffn.b1")), Tensor::zeros(&[c.d_ff]))?;
            store.insert(self.name(&format!("block{l}.ffn.w2")), lecun(&[c.d_ff, d], c.d_ff, rng))?;
            store.insert(self.name(&format!("block{l}.ffn.b2")), Tensor::zeros(&[d]))?;
            self.add_layernorm(store, &format!("block{l}.ln3"))?;
        }
        // small head keeps the initial prediction close to uniform
        store.insert(self.name("head.w"), normal(&[d, NUM_CLASSES], 0.01, rng))?;
        store.insert(self.name("head.b"), Tensor::zeros(&[NUM_CLASSES]))?;
        Ok(())
    }

    fn add_attention(&self, store: &mut ParamStore, layer: usize, which: &str, rng: &mut impl Rng) -> Result<()> {
        let d = self.config.d_model;
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(self.name(&format!("block{layer}.{which}.{w}")), lecun(&[d, d], d, rng))?;
        }
        Ok(())
    }

    fn add_layernorm(&self, store: &mut ParamStore, which: &str) -> Result<()> {
        let d = self.config.d_model;
        store.insert(self.name(&format!("{which}.g")), Tensor::full(&[d], 1.0))?;
        store.insert(self.name(&format!("{which}.b")), Tensor::zeros(&[d]))
    }

    fn layernorm(&self, tape: &mut Tape, store: &ParamStore, x: Var, which: &str) -> Result<Var> {
        let g = tape.param(store, &self.name(&format!("{which}.g")))?;
        let b = tape.param(store, &self.name(&format!("{which}.b")))?;
        tape.layernorm(x, g, b, LAYERNORM_EPS)
    }

    /// Builds fused decoder inputs `[batch·T × d]` from `inputs` (each of
    /// length T, starting with BOS) and the holistic vectors `[batch × d/2]`.
    pub fn fuse_input(&self, tape: &mut Tape, store: &ParamStore, inputs: &[Vec<usize>], holistic: Option<Var>) -> Result<Var> {
        let batch = inputs.len();
        let steps = inputs.first().map(Vec::len).unwrap_or(0);
        if batch == 0 || steps == 0 {
            return Err(Error::Invalid("decoder needs at least one input token".into()));
        }
        if inputs.iter().any(|s| s.len() != steps) {
            return Err(Error::Invalid("decoder inputs must share one length".into()));
        }
        if steps > self.config.max_len {
            return Err(Error::Invalid(format!(
                "sequence length {steps} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let ids: Vec<usize> = inputs.iter().flatten().copied().collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= NUM_INPUT_TOKENS) {
            return Err(Error::Invalid(format!("token {bad} is not a valid decoder input")));
        }
        let half = self.config.embed_dim();
        let table = tape.param(store, &self.name("embed"))?;
        let emb = tape.embedding(table, &ids)?;
        let mut pe = Vec::with_capacity(batch * steps * half);
        for _ in 0..batch {
            for p in 0..steps {
                pe.extend_from_slice(self.pe.row(p));
            }
        }
        let pe = tape.constant(Tensor::new(&[batch * steps, half], pe)?);
        let positioned = tape.add(emb, pe)?;
        let global = match (self.config.use_holistic, holistic) {
            (true, Some(h)) => {
                if tape.shape(h) != [batch, half] {
                    return Err(Error::Shape {
                        op: "fuse_input",
                        lhs: tape.shape(h).to_vec(),
                        rhs: vec![batch, half],
                    });
                }
                let rows: Vec<usize> = (0..batch).flat_map(|b| std::iter::repeat_n(b, steps)).collect();
                tape.gather_rows(h, &rows)?
            }
            (true, None) => {
                return Err(Error::Invalid("decoder expects a holistic vector".into()));
            }
            (false, _) => tape.constant(Tensor::zeros(&[batch * steps, half])),
        };
        tape.concat(&[positioned, global], 1)
    }

    /// One decoder block over `x: [batch·T × d]` attending to `memory: [batch·M × d]`.
    pub fn block(&self, tape: &mut Tape, store: &ParamStore, layer: usize, x: Var, memory: Var, batch: usize) -> Result<(Var, Attended)> {
        let c = &self.config;
        let scale = c.scale();
        let mut x = x;
        if c.use_self_attention {
            let p = MhAttentionParams::bind(tape, store, &self.name(&format!("block{layer}.self_attn")))?;
            let a = mh_attention(tape, &p, x, x, x, batch, c.heads, scale, true)?;
            let r = tape.add(x, a.out)?;
            x = self.layernorm(tape, store, r, &format!("block{layer}.ln1"))?;
        }
        let p = MhAttentionParams::bind(tape, store, &self.name(&format!("block{layer}.cross_attn")))?;
        let cross = mh_attention(tape, &p, x, memory, memory, batch, c.heads, scale, false)?;
        let r = tape.add(x, cross.out)?;
        let x = self.layernorm(tape, store, r, &format!("block{layer}.ln2"))?;
        let w1 = tape.param(store, &self.name(&format!("block{layer}.ffn.w1")))?;
        let b1 = tape.param(store, &self.name(&format!("block{layer}.ffn.b1")))?;
        let w2 = tape.param(store, &self.name(&format!("block{layer}.ffn.w2")))?;
        let b2 = tape.param(store, &self.name(&format!("block{layer}.ffn.b2")))?;
        let f = ffn(tape, x, w1, b1, w2, b2)?;
        let r = tape.add(x, f)?;
        let x = self.layernorm(tape, store, r, &format!("block{layer}.ln3"))?;
        Ok((x, cross))
    }

    /// Shared linear prediction layer: `[rows × d] -> [rows × NUM_CLASSES]` logits.
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.name("head.w"))?;
        let b = tape.param(store, &self.name("head.b"))?;
        tape.linear(x, w, Some(b))
    }

    /// Full parallel pass. `inputs` are BOS-prefixed token rows; `featmap`
    /// is `[batch, h′, w′, d]` (or already flat `[batch·M, d]`).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: &[Vec<usize>], featmap: Var, holistic: Option<Var>) -> Result<DecoderOutput> {
        let batch = inputs.len();
        let d = self.config.d_model;
        let fm_shape = tape.shape(featmap).to_vec();
        let cells = fm_shape.iter().product::<usize>() / d.max(1);
        if *fm_shape.last().unwrap() != d || !cells.is_multiple_of(batch.max(1)) {
            return Err(Error::Shape {
                op: "decoder memory",
                lhs: fm_shape,
                rhs: vec![batch, d],
            });
        }
        let memory = if fm_shape.len() == 2 {
            featmap
        } else {
            tape.reshape(featmap, &[cells, d])?
        };
        let mut x = self.fuse_input(tape, store, inputs, holistic)?;
        let mut cross = None;
        for l in 0..self.config.layers {
            let (y, a) = self.block(tape, store, l, x, memory, batch)?;
            x = y;
            cross = Some(a.weights);
        }
        let logits = self.predict(tape, store, x)?;
        Ok(DecoderOutput {
            logits,
            cross_weights: cross.unwrap(),
            batch,
            steps: inputs[0].len(),
        })
    }

    /// Teacher-forced pass for one label: inputs are `BOS, y₀ … y_{T−2}`.
    /// Returns `[T × NUM_CLASSES]` logits and the per-step attention.
    pub fn forward_teacher_forced(&self, store: &ParamStore, targets: &[usize], memory: &Memory) -> Result<(Tensor, Vec<AttentionRecord>)> {
        if targets.is_empty() || targets.len() > self.config.max_len {
            return Err(Error::Invalid(format!(
                "target length {} outside [1, {}]",
                targets.len(),
                self.config.max_len
            )));
        }
        let mut input = vec![BOS];
        input.extend_from_slice(&targets[..targets.len() - 1]);
        let mut tape = Tape::inference();
        let (fm, hol) = self.bind_memory(&mut tape, memory, 1)?;
        let out = self.forward(&mut tape, store, &[input], fm, hol)?;
        let records = (0..targets.len()).map(|t| out.record(&tape, self.config.heads, 0, t)).collect();
        Ok((tape.value(out.logits).clone(), records))
    }

    fn bind_memory(&self, tape: &mut Tape, memory: &Memory, copies: usize) -> Result<(Var, Option<Var>)> {
        let fm = &memory.featmap;
        let cells = fm.height * fm.width;
        let flat = fm.values.clone().reshaped(&[1, cells * fm.channels])?;
        let v = tape.constant(flat);
        let rep = tape.gather_rows(v, &vec![0; copies])?;
        let fm_var = tape.reshape(rep, &[copies * cells, fm.channels])?;
        let hol = match (&memory.holistic, self.config.use_holistic) {
            (Some(h), true) => {
                let k = h.values.numel();
                let v = tape.constant(h.values.clone().reshaped(&[1, k])?);
                Some(tape.gather_rows(v, &vec![0; copies])?)
            }
            _ => None,
        };
        Ok((fm_var, hol))
    }

    /// Next-token log-probabilities for each prefix (all of equal length).
    pub fn decode_step(&self, store: &ParamStore, memory: &Memory, prefixes: &[Vec<usize>]) -> Result<Vec<StepOutput>> {
        let len = prefixes.first().map(Vec::len).unwrap_or(0);
        if prefixes.is_empty() || prefixes.iter().any(|p| p.len() != len) {
            return Err(Error::Invalid("decode_step needs equal-length prefixes".into()));
        }
        if len >= self.config.max_len {
            return Err(Error::Invalid(format!(
                "prefix length {len} leaves no room below max_len {}",
                self.config.max_len
            )));
        }
        let inputs: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
            .collect();
        let mut tape = Tape::inference();
        let (fm, hol) = self.bind_memory(&mut tape, memory, prefixes.len())?;
        let out = self.forward(&mut tape, store, &inputs, fm, hol)?;
        let logits = tape.data(out.logits);
        Ok((0..prefixes.len())
            .map(|b| {
                let row = &logits[(b * (len + 1) + len) * NUM_CLASSES..][..NUM_CLASSES];
                StepOutput {
                    log_probs: log_softmax(row),
                    record: out.record(&tape, self.config.heads, b, len),
                }
            })
            .collect())
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - log_z).collect()
}

/// Row-wise probability distributions of `[rows × C]` logits.
pub fn distributions(logits: &Tensor) -> Vec<Vec<f64>> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| log_softmax(row).into_iter().map(f64::exp).collect())
        .collect()
}
