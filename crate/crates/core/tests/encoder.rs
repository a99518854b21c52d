use hatr_core::encoder::{
    add_basic_block, add_bottleneck, encode, extract, init_params, EncoderConfig, EncoderCtx, ScalePreset,
};
use hatr_core::gradcheck::{fd_check_params, DEFAULT_STEP};
use hatr_core::rng::stream;
use hatr_core::{NormMode, ParamStore, Tape, Tensor};
use rand::Rng;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, "tensor");
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn store_for(config: &EncoderConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    init_params(config, "enc", &mut store, &mut stream(seed, "init")).unwrap();
    store
}

fn zero_convs(store: &mut ParamStore, prefix: &str, convs: &[&str]) {
    for c in convs {
        store
            .get_mut(&format!("{prefix}.{c}"))
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
}

#[test]
fn full_preset_shapes() {
    let config = EncoderConfig::preset(ScalePreset::Full);
    let store = store_for(&config, 1);
    let mut tape = Tape::inference();
    let x = tape.constant(random_tensor(&[1, 48, 160, 3], 2));
    let out = encode(&mut tape, &config, "enc", &store, x, NormMode::Eval).unwrap();
    assert_eq!(tape.shape(out.featmap), &[1, 6, 20, 1024]);
    assert_eq!(tape.shape(out.holistic.unwrap()), &[1, 512]);
    let (fm, hol) = extract(&tape, &out).remove(0);
    assert_eq!((fm.height, fm.width, fm.channels), (6, 20, 1024));
    assert_eq!(hol.unwrap().values.numel(), 512);
}

#[test]
fn desk_preset_shapes() {
    let config = EncoderConfig::preset(ScalePreset::Desk);
    let store = store_for(&config, 1);
    let mut tape = Tape::inference();
    let x = tape.constant(random_tensor(&[3, 32, 64, 1], 2));
    let out = encode(&mut tape, &config, "enc", &store, x, NormMode::Eval).unwrap();
    assert_eq!(tape.shape(out.featmap), &[3, 4, 8, 64]);
    assert_eq!(tape.shape(out.holistic.unwrap()), &[3, 32]);
    assert_eq!(out.grid, (4, 8));
}

#[test]
fn shape_chain_divides_by_eight() {
    for (h, w) in [(16, 16), (32, 64), (48, 160), (64, 256)] {
        let mut config = EncoderConfig::preset(ScalePreset::Desk);
        config.input_height = h;
        config.input_width = w;
        assert_eq!(config.grid(), (h / 8, w / 8));
        let store = store_for(&config, 3);
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros(&[1, h, w, 1]));
        let out = encode(&mut tape, &config, "enc", &store, x, NormMode::Eval).unwrap();
        assert_eq!(&tape.shape(out.featmap)[1..3], &[h / 8, w / 8]);
    }
}

#[test]
fn rejects_mismatched_image() {
    let config = EncoderConfig::preset(ScalePreset::Desk);
    let store = store_for(&config, 1);
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::zeros(&[1, 32, 60, 1]));
    assert!(encode(&mut tape, &config, "enc", &store, x, NormMode::Eval).is_err());
}

#[test]
fn eval_mode_is_deterministic() {
    let config = EncoderConfig::preset(ScalePreset::Desk);
    let store = store_for(&config, 4);
    let run = || {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros(&[1, 32, 64, 1]));
        let out = encode(&mut tape, &config, "enc", &store, x, NormMode::Eval).unwrap();
        (
            tape.data(out.featmap).to_vec(),
            tape.data(out.holistic.unwrap()).to_vec(),
        )
    };
    let (a, b) = (run(), run());
    assert!(a.0.iter().chain(&a.1).all(|v| v.is_finite()));
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn holistic_branch_does_not_touch_feature_map() {
    let config = EncoderConfig::preset(ScalePreset::Desk);
    let store = store_for(&config, 5);
    let images = random_tensor(&[2, 32, 64, 1], 6);
    let featmap = |branch: bool, mode: NormMode| {
        let mut c = config.clone();
        c.holistic_branch = branch;
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let out = encode(&mut tape, &c, "enc", &store, x, mode).unwrap();
        assert_eq!(out.holistic.is_some(), branch);
        tape.data(out.featmap).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    for mode in [NormMode::Eval, NormMode::Train] {
        assert_eq!(featmap(true, mode), featmap(false, mode));
    }
}

#[test]
fn disabled_branch_registers_fewer_params() {
    let mut config = EncoderConfig::preset(ScalePreset::Desk);
    let with = store_for(&config, 1).len();
    config.holistic_branch = false;
    let without = store_for(&config, 1).len();
    assert!(without < with);
}

#[test]
fn zeroed_basic_block_is_relu() {
    let mut store = ParamStore::new();
    add_basic_block(&mut store, "b", 4, 4, &mut stream(1, "init")).unwrap();
    zero_convs(&mut store, "b", &["conv1", "conv2"]);
    let x = random_tensor(&[2, 5, 6, 4], 7);
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let mut ctx = EncoderCtx::new(&store, NormMode::Train);
    let y = ctx.basic_block(&mut tape, xv, "b").unwrap();
    let expected: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    assert_eq!(tape.data(y), &expected[..]);
}

#[test]
fn zeroed_bottleneck_is_relu() {
    let mut store = ParamStore::new();
    add_bottleneck(&mut store, "h", 8, &mut stream(1, "init")).unwrap();
    zero_convs(&mut store, "h", &["reduce", "conv", "expand"]);
    let x = random_tensor(&[2, 3, 4, 8], 8);
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let mut ctx = EncoderCtx::new(&store, NormMode::Train);
    let y = ctx.bottleneck(&mut tape, xv, "h").unwrap();
    let expected: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    assert_eq!(tape.data(y), &expected[..]);
}

#[test]
fn bottleneck_rejects_indivisible_channels() {
    let mut store = ParamStore::new();
    assert!(add_bottleneck(&mut store, "h", 6, &mut stream(1, "init")).is_err());
}

#[test]
fn projection_shortcut_doubles_channels() {
    let mut store = ParamStore::new();
    add_basic_block(&mut store, "b", 64, 128, &mut stream(1, "init")).unwrap();
    assert!(store.get("b.proj").is_some());
    let mut tape = Tape::inference();
    let xv = tape.constant(random_tensor(&[1, 3, 5, 64], 9));
    let mut ctx = EncoderCtx::new(&store, NormMode::Eval);
    let y = ctx.basic_block(&mut tape, xv, "b").unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 5, 128]);
}

#[test]
fn bottleneck_stack_preserves_spatial_dims() {
    let mut store = ParamStore::new();
    let mut rng = stream(2, "init");
    for b in 0..6 {
        add_bottleneck(&mut store, &format!("h{b}"), 16, &mut rng).unwrap();
    }
    let mut tape = Tape::inference();
    let mut x = tape.constant(random_tensor(&[1, 6, 20, 16], 9));
    let mut ctx = EncoderCtx::new(&store, NormMode::Eval);
    for b in 0..6 {
        x = ctx.bottleneck(&mut tape, x, &format!("h{b}")).unwrap();
    }
    assert_eq!(tape.shape(x), &[1, 6, 20, 16]);
}

/// Weighted sum so every output element carries a distinct gradient.
fn probe(tape: &mut Tape, y: hatr_core::Var, seed: u64) -> hatr_core::Var {
    let w = tape.constant(random_tensor(tape.shape(y), seed));
    let p = tape.mul(y, w).unwrap();
    tape.sum(p).unwrap()
}

#[test]
fn basic_block_gradients() {
    let mut store = ParamStore::new();
    add_basic_block(&mut store, "b", 3, 5, &mut stream(3, "init")).unwrap();
    let x = random_tensor(&[2, 4, 5, 3], 10);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let err = fd_check_params(
        |tape, store| {
            let xv = tape.constant(x.clone());
            let mut ctx = EncoderCtx::new(store, NormMode::Train);
            let y = ctx.basic_block(tape, xv, "b")?;
            Ok(probe(tape, y, 11))
        },
        &store,
        &names,
        6,
        DEFAULT_STEP,
        &mut stream(4, "fd"),
    )
    .unwrap();
    assert!(err < 1e-4, "basic block fd error {err}");
}

#[test]
fn bottleneck_stack_gradients() {
    let mut store = ParamStore::new();
    let mut rng = stream(5, "init");
    add_bottleneck(&mut store, "h0", 8, &mut rng).unwrap();
    add_bottleneck(&mut store, "h1", 8, &mut rng).unwrap();
    let x = random_tensor(&[2, 3, 4, 8], 12);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let err = fd_check_params(
        |tape, store| {
            let mut y = tape.constant(x.clone());
            let mut ctx = EncoderCtx::new(store, NormMode::Train);
            y = ctx.bottleneck(tape, y, "h0")?;
            y = ctx.bottleneck(tape, y, "h1")?;
            Ok(probe(tape, y, 13))
        },
        &store,
        &names,
        6,
        DEFAULT_STEP,
        &mut stream(6, "fd"),
    )
    .unwrap();
    assert!(err < 1e-4, "bottleneck fd error {err}");
}

#[test]
fn end_to_end_gradients_at_desk_preset() {
    let config = EncoderConfig::preset(ScalePreset::Desk);
    let store = store_for(&config, 7);
    let images = random_tensor(&[2, 32, 64, 1], 14);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let err = fd_check_params(
        |tape, store| {
            let x = tape.constant(images.clone());
            let out = encode(tape, &config, "enc", store, x, NormMode::Train)?;
            let a = probe(tape, out.featmap, 15);
            let b = probe(tape, out.holistic.unwrap(), 16);
            tape.add(a, b)
        },
        &store,
        &names,
        3,
        DEFAULT_STEP,
        &mut stream(8, "fd"),
    )
    .unwrap();
    assert!(err < 1e-3, "encoder fd error {err}");
}
