//! Fixtures shared by the decoder benchmarks.

use hatr_core::bench::{BenchInputs, RnnBaselineDecoder};
use hatr_core::decoder::{Decoder, DecoderConfig};
use hatr_core::encoder::{EncoderConfig, ScalePreset};
use hatr_core::rng::stream;
use hatr_core::{ParamStore, Result};

pub use hatr_core::bench::{bench_loss, DecoderKind, DEFAULT_BATCH, DEFAULT_LENGTHS};

/// Both decoders at desk width in one store, plus random inputs of one shape.
pub struct Fixture {
    pub attention: Decoder,
    pub recurrent: RnnBaselineDecoder,
    pub store: ParamStore,
    pub inputs: BenchInputs,
}

impl Fixture {
    pub fn new(seq_len: usize, batch: usize, seed: u64) -> Result<Self> {
        let mut config = DecoderConfig::desk();
        config.max_len = config.max_len.max(seq_len);
        let (h, w) = EncoderConfig::preset(ScalePreset::Desk).grid();
        let attention = Decoder::new(config.clone(), "attn")?;
        let recurrent = RnnBaselineDecoder::new(config.clone(), "rnn")?;
        let mut store = ParamStore::new();
        let mut rng = stream(seed, "init");
        attention.init_params(&mut store, &mut rng)?;
        recurrent.init_params(&mut store, &mut rng)?;
        let inputs = BenchInputs::random(&config, h * w, seq_len, batch, seed);
        Ok(Fixture { attention, recurrent, store, inputs })
    }
}
