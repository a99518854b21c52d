use hatr_core::bidir::{Direction, DirectionMode};
use hatr_core::encoder::ScalePreset;
use hatr_core::model::{ModelConfig, Recognizer};
use hatr_core::pipeline::BeamConfig;
use hatr_core::rng::stream;
use hatr_core::synth::{generate_samples, SynthSpec};
use hatr_core::trainer::{evaluate, prepare, score_predictions, Example, OptimizerKind, TrainConfig, Trainer};
use hatr_core::vocab::NUM_CLASSES;
use hatr_core::{NormMode, ParamStore, Tape};

fn small_data(n: usize, seed: u64, config: &ModelConfig) -> Vec<Example> {
    let spec = SynthSpec {
        seed,
        max_len: 6,
        ..SynthSpec::default()
    };
    prepare(&generate_samples(n, &spec).unwrap(), config).unwrap()
}

fn desk(direction: DirectionMode) -> ModelConfig {
    ModelConfig {
        direction,
        ..ModelConfig::preset(ScalePreset::Desk)
    }
}

fn train_config(batch: usize) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        steps: 20,
        ..TrainConfig::desk()
    }
}

#[test]
fn initial_loss_is_uniform_per_direction() {
    let mc = desk(DirectionMode::Bidirectional);
    let data = small_data(8, 1, &mc);
    let mut t = Trainer::new(mc, train_config(8)).unwrap();
    let batch: Vec<&Example> = data.iter().collect();
    let (total, parts) = t.gradients(&batch).unwrap();
    let ln = (NUM_CLASSES as f64).ln();
    assert_eq!(parts.len(), 2);
    for (_, l) in &parts {
        assert!((l - ln).abs() < 0.1, "{l} vs {ln}");
    }
    assert!((total - parts[0].1 - parts[1].1).abs() < 1e-12);
}

#[test]
fn loss_falls_on_a_fixed_batch() {
    let mc = desk(DirectionMode::Normal);
    let data = small_data(8, 2, &mc);
    let batch: Vec<&Example> = data.iter().collect();
    let mut t = Trainer::new(mc, train_config(8)).unwrap();
    let losses: Vec<f64> = (0..20).map(|_| t.train_step(&batch).unwrap()).collect();
    let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 3, "{losses:?}");
    assert!(losses[19] < losses[0] * 0.8, "{losses:?}");
    assert_eq!(t.step, 20);
}

#[test]
fn padding_positions_carry_no_loss() {
    let mc = desk(DirectionMode::Normal);
    let model = Recognizer::new(mc.clone(), &mut stream(5, "init")).unwrap();
    let data = small_data(2, 3, &mc);
    let long = Example {
        label: vec![10, 11, 12, 13, 14],
        ..data[0].clone()
    };
    let short = Example {
        label: vec![20],
        ..data[1].clone()
    };
    let loss = |examples: &[&Example]| {
        let mut tape = Tape::inference();
        let images: Vec<_> = examples.iter().map(|e| e.image.clone()).collect();
        let labels: Vec<_> = examples.iter().map(|e| e.label.clone()).collect();
        let l = model.loss(&mut tape, &images, &labels, NormMode::Eval).unwrap();
        tape.value(l.total).item().unwrap()
    };
    // token-weighted mean: 6 target tokens for the long label, 2 for the short one
    let joint = loss(&[&long, &short]);
    let split = (6.0 * loss(&[&long]) + 2.0 * loss(&[&short])) / 8.0;
    assert!((joint - split).abs() < 1e-12, "{joint} vs {split}");
}

fn param_grads(model: &Recognizer, data: &[Example]) -> ParamStore {
    let mut tape = Tape::new();
    let images: Vec<_> = data.iter().map(|e| e.image.clone()).collect();
    let labels: Vec<_> = data.iter().map(|e| e.label.clone()).collect();
    let l = model.loss(&mut tape, &images, &labels, NormMode::Train).unwrap();
    tape.backward(l.total).unwrap();
    let mut store = model.store.clone();
    store.zero_grad();
    tape.accumulate_param_grads(&mut store);
    store
}

#[test]
fn direction_decoders_have_disjoint_gradients() {
    let mc = desk(DirectionMode::Bidirectional);
    let data = small_data(4, 4, &mc);
    let both = Recognizer::new(mc, &mut stream(8, "init")).unwrap();
    let grads = param_grads(&both, &data);
    let nonzero = |prefix: &str| {
        grads
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .any(|(_, p)| p.grad().is_some_and(|g| g.iter().any(|v| *v != 0.0)))
    };
    assert!(nonzero("enc."));
    assert!(nonzero(Direction::Normal.prefix()));
    assert!(nonzero(Direction::Reversed.prefix()));

    // the reversed decoder sees exactly the gradient of its own loss term
    let prefix = Direction::Reversed.prefix();
    let mut store = ParamStore::new();
    for (name, p) in both.store.iter().filter(|(n, _)| !n.starts_with(Direction::Normal.prefix())) {
        store.insert(name, p.clone()).unwrap();
    }
    for (name, s) in both.store.iter_stats() {
        store.insert_stats(name, s.clone());
    }
    let single = Recognizer::from_store(desk(DirectionMode::Reversed), store).unwrap();
    let alone = param_grads(&single, &data);
    for (name, p) in alone.iter().filter(|(n, _)| n.starts_with(prefix)) {
        let a = p.grad().unwrap();
        let b = grads.get(name).unwrap().grad().unwrap();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{name}");
        }
    }
}

#[test]
fn training_is_bit_reproducible() {
    let mc = desk(DirectionMode::Bidirectional);
    let data = small_data(12, 5, &mc);
    let run = || {
        let mut t = Trainer::new(mc.clone(), TrainConfig { steps: 4, ..train_config(4) }).unwrap();
        let losses: Vec<u64> = (0..4).map(|_| t.step_on(&data).unwrap().to_bits()).collect();
        (losses, t.model.store.iter().map(|(_, p)| p.data().to_vec()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn sgd_moves_only_by_lr_times_grad() {
    let mc = desk(DirectionMode::Normal);
    let data = small_data(4, 6, &mc);
    let batch: Vec<&Example> = data.iter().collect();
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        lr: 0.01,
        ..train_config(4)
    };
    let mut t = Trainer::new(mc, cfg).unwrap();
    let before = t.model.store.get("dec.l2r.head.w").unwrap().data().to_vec();
    t.gradients(&batch).unwrap();
    let grad = t.model.store.get("dec.l2r.head.w").unwrap().grad().unwrap().to_vec();
    t.optimizer.step(&mut t.model.store);
    let after = t.model.store.get("dec.l2r.head.w").unwrap().data();
    for ((a, b), g) in after.iter().zip(&before).zip(&grad) {
        assert!((a - (b - 0.01 * g)).abs() < 1e-15);
    }
}

#[test]
fn evaluation_scores() {
    let r = score_predictions(["abc", "de"].into_iter(), &["abc".into(), "dx".into()]);
    assert_eq!(r.samples, 2);
    assert_eq!(r.accuracy, 0.5);
    assert!((r.edit_distance - 0.25).abs() < 1e-15);

    let model = Recognizer::new(desk(DirectionMode::Normal), &mut stream(0, "init")).unwrap();
    assert!(evaluate(&[], &model, BeamConfig::new(1, 4).unwrap()).is_err());
    let samples = generate_samples(2, &SynthSpec::default()).unwrap();
    let r = evaluate(&samples, &model, BeamConfig::new(1, 4).unwrap()).unwrap();
    assert_eq!(r.predictions.len(), 2);
}

#[test]
fn invalid_configs_rejected() {
    let mc = desk(DirectionMode::Normal);
    assert!(Trainer::new(mc.clone(), TrainConfig { batch_size: 0, ..TrainConfig::desk() }).is_err());
    assert!(Trainer::new(mc.clone(), TrainConfig { rho: 1.5, ..TrainConfig::desk() }).is_err());
    let mut t = Trainer::new(mc, TrainConfig::desk()).unwrap();
    assert!(t.step_on(&[]).is_err());
    assert!("adam".parse::<OptimizerKind>().is_err());
}
