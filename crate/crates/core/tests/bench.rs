use hatr_core::bench::{
    bench_loss, rnn_decode_train_pass, run_bench, BenchInputs, DecoderKind, RnnBaselineDecoder, CSV_HEADER,
};
use hatr_core::decoder::{Decoder, DecoderConfig, Memory};
use hatr_core::encoder::{FeatureMap2D, HolisticVector};
use hatr_core::gradcheck::{fd_check_params, DEFAULT_STEP};
use hatr_core::rng::stream;
use hatr_core::vocab::{BOS, NUM_CLASSES, PAD};
use hatr_core::{ParamStore, Tape, Tensor};
use rand::Rng;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, "tensor");
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn baseline(seed: u64) -> (RnnBaselineDecoder, ParamStore) {
    let dec = RnnBaselineDecoder::new(DecoderConfig::desk(), "rnn").unwrap();
    let mut store = ParamStore::new();
    dec.init_params(&mut store, &mut stream(seed, "init")).unwrap();
    (dec, store)
}

#[test]
fn logits_match_attention_decoder_shape() {
    let (rnn, store) = baseline(0);
    let fm = random_tensor(&[4, 8, 64], 1);
    let hol = random_tensor(&[32], 2);
    let logits = rnn_decode_train_pass(&rnn, &store, &[3, 9, 27, 81], &fm, Some(&hol)).unwrap();
    assert_eq!(logits.shape(), &[4, NUM_CLASSES]);

    let attn = Decoder::new(DecoderConfig::desk(), "dec").unwrap();
    let mut astore = ParamStore::new();
    attn.init_params(&mut astore, &mut stream(0, "init")).unwrap();
    let memory = Memory {
        featmap: FeatureMap2D {
            height: 4,
            width: 8,
            channels: 64,
            values: fm,
        },
        holistic: Some(HolisticVector { values: hol }),
    };
    let (alogits, _) = attn.forward_teacher_forced(&astore, &[3, 9, 27, 81], &memory).unwrap();
    assert_eq!(alogits.shape(), logits.shape());
}

/// Direct evaluation of one GRU step from the stored weights.
fn gru_step_oracle(store: &ParamStore, x: &[f64], h: &[f64]) -> Vec<f64> {
    let d = h.len();
    let mv = |name: &str, v: &[f64]| -> Vec<f64> {
        let w = store.get(name).unwrap().data();
        (0..d).map(|j| (0..d).map(|i| v[i] * w[i * d + j]).sum()).collect()
    };
    let b = |name: &str| store.get(name).unwrap().data().to_vec();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let (xr, xz, xn) = (mv("rnn.gru.w_ir", x), mv("rnn.gru.w_iz", x), mv("rnn.gru.w_in", x));
    let (hr, hz, hn) = (mv("rnn.gru.w_hr", h), mv("rnn.gru.w_hz", h), mv("rnn.gru.w_hn", h));
    let (br, bz, bin, bhn) = (b("rnn.gru.b_r"), b("rnn.gru.b_z"), b("rnn.gru.b_in"), b("rnn.gru.b_hn"));
    (0..d)
        .map(|j| {
            let r = sig(xr[j] + br[j] + hr[j]);
            let z = sig(xz[j] + bz[j] + hz[j]);
            let n = (xn[j] + bin[j] + r * (hn[j] + bhn[j])).tanh();
            (1.0 - z) * n + z * h[j]
        })
        .collect()
}

#[test]
fn single_step_is_one_cell_application() {
    let (rnn, mut store) = baseline(3);
    for name in ["rnn.gru.b_r", "rnn.gru.b_z", "rnn.gru.b_in", "rnn.gru.b_hn"] {
        let mut rng = stream(4, name);
        store.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    // with value projection zeroed the context vanishes and logits read the state alone
    store.get_mut("rnn.attn.wv").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let fm = random_tensor(&[2, 4, 64], 5);
    let hol = random_tensor(&[32], 6);
    let logits = rnn_decode_train_pass(&rnn, &store, &[17], &fm, Some(&hol)).unwrap();

    let emb = store.get("rnn.embed").unwrap().data();
    let mut x: Vec<f64> = emb[BOS * 32..(BOS + 1) * 32].to_vec();
    x.extend_from_slice(hol.data());
    let h = gru_step_oracle(&store, &x, &[0.0; 64]);
    let (w, b) = (store.get("rnn.head.w").unwrap().data(), store.get("rnn.head.b").unwrap().data());
    for c in 0..NUM_CLASSES {
        let expect = b[c] + (0..64).map(|i| h[i] * w[i * NUM_CLASSES + c]).sum::<f64>();
        assert!((logits.data()[c] - expect).abs() < 1e-12, "class {c}");
    }
}

#[test]
fn later_steps_depend_on_earlier_inputs() {
    let (rnn, store) = baseline(7);
    let fm = random_tensor(&[4, 8, 64], 8);
    let hol = random_tensor(&[32], 9);
    let a = rnn_decode_train_pass(&rnn, &store, &[1, 2, 3], &fm, Some(&hol)).unwrap();
    let b = rnn_decode_train_pass(&rnn, &store, &[4, 2, 3], &fm, Some(&hol)).unwrap();
    // step 0 sees only BOS, so it agrees; step 2 carries the changed input through the state
    assert_eq!(&a.data()[..NUM_CLASSES], &b.data()[..NUM_CLASSES]);
    let diff = a.data()[2 * NUM_CLASSES..].iter().zip(&b.data()[2 * NUM_CLASSES..]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-9);
}

#[test]
fn baseline_loss_gradients() {
    let (rnn, mut store) = baseline(10);
    // a sharper head keeps the loss sensitive to every parameter
    store.get_mut("rnn.head.w").unwrap().data_mut().iter_mut().for_each(|v| *v *= 30.0);
    let fm = random_tensor(&[2 * 6, 64], 11);
    let hol = random_tensor(&[2, 32], 12);
    let inputs = vec![vec![BOS, 5, 17], vec![BOS, 60, 2]];
    let targets = vec![5, 17, 40, 60, 2, PAD];
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let err = fd_check_params(
        |tape, store| {
            let f = tape.constant(fm.clone());
            let h = tape.constant(hol.clone());
            let logits = rnn.forward(tape, store, &inputs, f, Some(h))?;
            tape.cross_entropy(logits, &targets, PAD)
        },
        &store,
        &names,
        4,
        DEFAULT_STEP,
        &mut stream(13, "fd"),
    )
    .unwrap();
    assert!(err < 1e-3, "baseline fd error {err}");
}

#[test]
fn both_decoders_are_deterministic() {
    let config = DecoderConfig::desk();
    let attn = Decoder::new(config.clone(), "attn").unwrap();
    let rnn = RnnBaselineDecoder::new(config.clone(), "rnn").unwrap();
    let mut store = ParamStore::new();
    attn.init_params(&mut store, &mut stream(1, "init")).unwrap();
    rnn.init_params(&mut store, &mut stream(2, "init")).unwrap();
    let x = BenchInputs::random(&config, 32, 10, 3, 0);
    for kind in [DecoderKind::Attention, DecoderKind::Recurrent] {
        let run = || {
            let mut tape = Tape::new();
            let l = bench_loss(&mut tape, kind, &attn, &rnn, &store, &x).unwrap();
            tape.backward(l).unwrap();
            let mut s = store.clone();
            tape.accumulate_param_grads(&mut s);
            let grads: Vec<u64> = s.iter().filter_map(|(_, t)| t.grad()).flatten().map(|v| v.to_bits()).collect();
            (tape.value(l).item().unwrap().to_bits(), grads)
        };
        assert_eq!(run(), run(), "{kind:?}");
    }
}

#[test]
fn report_csv_schema() {
    let report = run_bench(&[2, 3], &[2], 2, &DecoderConfig::desk(), 8, 0).unwrap();
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 2 * 2);
    for r in &rows {
        assert_eq!(r.len(), 8);
        assert!(["attention", "gru"].contains(&r[0]));
        assert!(["forward", "backward"].contains(&r[3]));
        let (med, p10, p90): (f64, f64, f64) = (r[4].parse().unwrap(), r[5].parse().unwrap(), r[6].parse().unwrap());
        assert!(p10 <= med && med <= p90);
    }
    let speedups = report.speedups(2);
    assert_eq!(speedups.iter().map(|s| s.seq_len).collect::<Vec<_>>(), vec![2, 3]);
    assert!(run_bench(&[], &[2], 2, &DecoderConfig::desk(), 8, 0).is_err());
}
