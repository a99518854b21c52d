//! Convolutional image encoder.
//!
//! A ResNet34-shaped backbone without strided convolutions: a 3×3 stem,
//! four stages of basic blocks and three 2×2 max-pools (after the stem,
//! stage 1 and stage 2), so the output grid is `h/8 × w/8`. Two branches
//! read the backbone output: a 1×1 projection to the attention width `d`
//! (the 2D feature map) and a stack of bottlenecks followed by global
//! average pooling and a fully connected layer (the holistic vector).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{kaiming, lecun, ParamStore};
use crate::tape::{NormMode, RunningStats, Tape, Var};
use crate::tensor::Tensor;

pub const BOTTLENECK_EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalePreset {
    Full,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub channel_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// Width `d` of the projected 2D feature map.
    pub feature_dim: usize,
    pub holistic_dim: usize,
    /// Number `B` of bottlenecks in the holistic branch.
    pub bottleneck_count: usize,
    /// Ablation switch: build and run the holistic branch at all.
    pub holistic_branch: bool,
}

impl EncoderConfig {
    pub fn preset(preset: ScalePreset) -> Self {
        match preset {
            ScalePreset::Full => EncoderConfig {
                input_height: 48,
                input_width: 160,
                input_channels: 3,
                channel_widths: vec![64, 128, 256, 512],
                blocks_per_stage: vec![3, 4, 6, 3],
                feature_dim: 1024,
                holistic_dim: 512,
                bottleneck_count: 6,
                holistic_branch: true,
            },
            ScalePreset::Desk => EncoderConfig {
                input_height: 32,
                input_width: 64,
                input_channels: 1,
                channel_widths: vec![8, 16, 32, 64],
                blocks_per_stage: vec![1, 1, 1, 1],
                feature_dim: 64,
                holistic_dim: 32,
                bottleneck_count: 2,
                holistic_branch: true,
            },
        }
    }

    /// Spatial size of the feature grid: three 2×2 stride-2 pools.
    pub fn grid(&self) -> (usize, usize) {
        (self.input_height / 8, self.input_width / 8)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_widths.len() != 4 || self.blocks_per_stage.len() != 4 {
            return Err(Error::Config("encoder needs exactly four stages".into()));
        }
        if self.channel_widths.iter().chain(&self.blocks_per_stage).any(|&v| v == 0) {
            return Err(Error::Config("encoder stage widths and block counts must be positive".into()));
        }
        let (h, w) = self.grid();
        if h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input {}×{} collapses to an empty feature grid",
                self.input_height, self.input_width
            )));
        }
        if self.input_channels == 0 || self.feature_dim == 0 || self.holistic_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.holistic_branch && !self.last_width().is_multiple_of(BOTTLENECK_EXPANSION) {
            return Err(Error::Config(format!(
                "bottleneck channels {} not divisible by {BOTTLENECK_EXPANSION}",
                self.last_width()
            )));
        }
        Ok(())
    }

    pub fn last_width(&self) -> usize {
        *self.channel_widths.last().unwrap()
    }
}

/// Encoder outputs recorded on a tape.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[n, h′, w′, d]`
    pub featmap: Var,
    /// `[n, holistic_dim]`, absent when the holistic branch is disabled.
    pub holistic: Option<Var>,
    pub grid: (usize, usize),
    /// New running statistics produced in train mode; apply with
    /// [`apply_stat_updates`].
    pub stat_updates: Vec<(String, RunningStats)>,
}

/// 2D feature map extracted for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap2D {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `[height, width, channels]`
    pub values: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HolisticVector {
    pub values: Tensor,
}

pub fn apply_stat_updates(store: &mut ParamStore, updates: Vec<(String, RunningStats)>) -> Result<()> {
    for (name, stats) in updates {
        *store.stats_mut(&name)? = stats;
    }
    Ok(())
}

// ----- parameter registration ----------------------------------------------

fn add_conv(store: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<()> {
    store.insert(name, kaiming(&[k, k, cin, cout], k * k * cin, rng))
}

fn add_bn(store: &mut ParamStore, name: &str, c: usize) -> Result<()> {
    store.insert(format!("{name}.g"), Tensor::full(&[c], 1.0))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[c]))?;
    store.insert_stats(name, RunningStats::new(c));
    Ok(())
}

/// Registers a basic block; a projection shortcut is added when `cin != cout`.
pub fn add_basic_block(store: &mut ParamStore, p: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<()> {
    add_conv(store, &format!("{p}.conv1"), 3, cin, cout, rng)?;
    add_bn(store, &format!("{p}.bn1"), cout)?;
    add_conv(store, &format!("{p}.conv2"), 3, cout, cout, rng)?;
    add_bn(store, &format!("{p}.bn2"), cout)?;
    if cin != cout {
        add_conv(store, &format!("{p}.proj"), 1, cin, cout, rng)?;
        add_bn(store, &format!("{p}.proj_bn"), cout)?;
    }
    Ok(())
}

/// Registers a bottleneck over `c` channels (`c` divisible by 4).
pub fn add_bottleneck(store: &mut ParamStore, p: &str, c: usize, rng: &mut impl Rng) -> Result<()> {
    if !c.is_multiple_of(BOTTLENECK_EXPANSION) {
        return Err(Error::Config(format!(
            "bottleneck channels {c} not divisible by {BOTTLENECK_EXPANSION}"
        )));
    }
    let mid = c / BOTTLENECK_EXPANSION;
    add_conv(store, &format!("{p}.reduce"), 1, c, mid, rng)?;
    add_bn(store, &format!("{p}.bn1"), mid)?;
    add_conv(store, &format!("{p}.conv"), 3, mid, mid, rng)?;
    add_bn(store, &format!("{p}.bn2"), mid)?;
    add_conv(store, &format!("{p}.expand"), 1, mid, c, rng)?;
    add_bn(store, &format!("{p}.bn3"), c)?;
    Ok(())
}

/// Registers every encoder parameter under `prefix`.
pub fn init_params(config: &EncoderConfig, prefix: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
    config.validate()?;
    let stem = config.channel_widths[0];
    add_conv(store, &format!("{prefix}.stem.conv"), 3, config.input_channels, stem, rng)?;
    add_bn(store, &format!("{prefix}.stem.bn"), stem)?;
    let mut cin = stem;
    for (s, (&cout, &blocks)) in config.channel_widths.iter().zip(&config.blocks_per_stage).enumerate() {
        for b in 0..blocks {
            add_basic_block(store, &format!("{prefix}.layer{}.{b}", s + 1), cin, cout, rng)?;
            cin = cout;
        }
    }
    add_conv(store, &format!("{prefix}.proj.conv"), 1, cin, config.feature_dim, rng)?;
    store.insert(format!("{prefix}.proj.bias"), Tensor::zeros(&[config.feature_dim]))?;
    if config.holistic_branch {
        for b in 0..config.bottleneck_count {
            add_bottleneck(store, &format!("{prefix}.holistic.{b}"), cin, rng)?;
        }
        store.insert(format!("{prefix}.holistic.fc.w"), lecun(&[cin, config.holistic_dim], cin, rng))?;
        store.insert(format!("{prefix}.holistic.fc.b"), Tensor::zeros(&[config.holistic_dim]))?;
    }
    Ok(())
}

// ----- forward ---------------------------------------------------------------

/// Forward context shared by the building blocks.
pub struct EncoderCtx<'a> {
    pub store: &'a ParamStore,
    pub mode: NormMode,
    pub stat_updates: Vec<(String, RunningStats)>,
}

impl<'a> EncoderCtx<'a> {
    pub fn new(store: &'a ParamStore, mode: NormMode) -> Self {
        EncoderCtx {
            store,
            mode,
            stat_updates: Vec::new(),
        }
    }

    fn conv(&self, tape: &mut Tape, x: Var, name: &str, padding: usize) -> Result<Var> {
        let k = tape.param(self.store, name)?;
        tape.conv2d(x, k, 1, padding)
    }

    fn bn(&mut self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let g = tape.param(self.store, &format!("{name}.g"))?;
        let b = tape.param(self.store, &format!("{name}.b"))?;
        let mut stats = self
            .store
            .stats(name)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("unknown batch-norm statistics `{name}`")))?;
        let y = tape.batchnorm2d(x, g, b, &mut stats, self.mode)?;
        if self.mode == NormMode::Train {
            self.stat_updates.push((name.to_string(), stats));
        }
        Ok(y)
    }

    fn conv_bn(&mut self, tape: &mut Tape, x: Var, p: &str, conv: &str, bn: &str, padding: usize) -> Result<Var> {
        let y = self.conv(tape, x, &format!("{p}.{conv}"), padding)?;
        self.bn(tape, y, &format!("{p}.{bn}"))
    }

    /// Two 3×3 conv+BN layers with a residual shortcut; the shortcut is a
    /// 1×1 conv+BN projection when the channel count changes.
    pub fn basic_block(&mut self, tape: &mut Tape, x: Var, p: &str) -> Result<Var> {
        let h = self.conv_bn(tape, x, p, "conv1", "bn1", 1)?;
        let h = tape.relu(h)?;
        let h = self.conv_bn(tape, h, p, "conv2", "bn2", 1)?;
        let shortcut = if self.store.get(&format!("{p}.proj")).is_some() {
            self.conv_bn(tape, x, p, "proj", "proj_bn", 0)?
        } else {
            x
        };
        let y = tape.add(h, shortcut)?;
        tape.relu(y)
    }

    /// 1×1 reduce, 3×3, 1×1 expand (factor 4) with identity shortcut.
    pub fn bottleneck(&mut self, tape: &mut Tape, x: Var, p: &str) -> Result<Var> {
        let c = *tape.shape(x).last().unwrap();
        if !c.is_multiple_of(BOTTLENECK_EXPANSION) {
            return Err(Error::Config(format!(
                "bottleneck channels {c} not divisible by {BOTTLENECK_EXPANSION}"
            )));
        }
        let h = self.conv_bn(tape, x, p, "reduce", "bn1", 0)?;
        let h = tape.relu(h)?;
        let h = self.conv_bn(tape, h, p, "conv", "bn2", 1)?;
        let h = tape.relu(h)?;
        let h = self.conv_bn(tape, h, p, "expand", "bn3", 0)?;
        let y = tape.add(h, x)?;
        tape.relu(y)
    }
}

/// Runs the encoder on `images: [n, h, w, c]` (pixels already in [−1, 1]).
pub fn encode(
    tape: &mut Tape,
    config: &EncoderConfig,
    prefix: &str,
    store: &ParamStore,
    images: Var,
    mode: NormMode,
) -> Result<EncoderOutput> {
    let shape = tape.shape(images).to_vec();
    let expected = [config.input_height, config.input_width, config.input_channels];
    if shape.len() != 4 || shape[1..] != expected {
        return Err(Error::Shape {
            op: "encode",
            lhs: shape,
            rhs: expected.to_vec(),
        });
    }
    config.validate()?;
    let mut ctx = EncoderCtx::new(store, mode);
    let x = ctx.conv_bn(tape, images, &format!("{prefix}.stem"), "conv", "bn", 1)?;
    let x = tape.relu(x)?;
    let mut x = tape.maxpool2d(x, 2, 2)?;
    for (s, &blocks) in config.blocks_per_stage.iter().enumerate() {
        for b in 0..blocks {
            x = ctx.basic_block(tape, x, &format!("{prefix}.layer{}.{b}", s + 1))?;
        }
        if s < 2 {
            x = tape.maxpool2d(x, 2, 2)?;
        }
    }
    let grid = (tape.shape(x)[1], tape.shape(x)[2]);
    let proj = ctx.conv(tape, x, &format!("{prefix}.proj.conv"), 0)?;
    let bias = tape.param(store, &format!("{prefix}.proj.bias"))?;
    let featmap = tape.add_bias(proj, bias)?;

    let holistic = if config.holistic_branch {
        let mut h = x;
        for b in 0..config.bottleneck_count {
            h = ctx.bottleneck(tape, h, &format!("{prefix}.holistic.{b}"))?;
        }
        let pooled = tape.global_avgpool(h)?;
        let w = tape.param(store, &format!("{prefix}.holistic.fc.w"))?;
        let b = tape.param(store, &format!("{prefix}.holistic.fc.b"))?;
        Some(tape.linear(pooled, w, Some(b))?)
    } else {
        None
    };
    Ok(EncoderOutput {
        featmap,
        holistic,
        grid,
        stat_updates: ctx.stat_updates,
    })
}

/// Splits batched encoder outputs into per-image values.
pub fn extract(tape: &Tape, out: &EncoderOutput) -> Vec<(FeatureMap2D, Option<HolisticVector>)> {
    let shape = tape.shape(out.featmap);
    let (n, h, w, d) = (shape[0], shape[1], shape[2], shape[3]);
    let fm = tape.data(out.featmap);
    (0..n)
        .map(|i| {
            let values = Tensor::new(&[h, w, d], fm[i * h * w * d..][..h * w * d].to_vec()).unwrap();
            let hol = out.holistic.map(|hv| {
                let k = tape.shape(hv)[1];
                HolisticVector {
                    values: Tensor::new(&[k], tape.data(hv)[i * k..][..k].to_vec()).unwrap(),
                }
            });
            (
                FeatureMap2D {
                    height: h,
                    width: w,
                    channels: d,
                    values,
                },
                hol,
            )
        })
        .collect()
}
