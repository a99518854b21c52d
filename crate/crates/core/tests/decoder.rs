use hatr_core::decoder::{
    distributions, ffn, mh_attention, Decoder, DecoderConfig, Memory, MhAttentionParams,
};
use hatr_core::encoder::{FeatureMap2D, HolisticVector};
use hatr_core::gradcheck::{fd_check_params, DEFAULT_STEP};
use hatr_core::rng::stream;
use hatr_core::vocab::{BOS, EOS, NUM_CLASSES, PAD};
use hatr_core::{ParamStore, Tape, Tensor, Var};
use rand::Rng;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, "tensor");
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn decoder(config: DecoderConfig, seed: u64) -> (Decoder, ParamStore) {
    let dec = Decoder::new(config, "dec").unwrap();
    let mut store = ParamStore::new();
    dec.init_params(&mut store, &mut stream(seed, "init")).unwrap();
    (dec, store)
}

fn memory(h: usize, w: usize, d: usize, seed: u64) -> Memory {
    Memory {
        featmap: FeatureMap2D {
            height: h,
            width: w,
            channels: d,
            values: random_tensor(&[h, w, d], seed),
        },
        holistic: Some(HolisticVector {
            values: random_tensor(&[d / 2], seed + 1),
        }),
    }
}

fn random_tokens(len: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..NUM_CLASSES)).collect()
}

fn shifted(targets: &[usize]) -> Vec<usize> {
    std::iter::once(BOS).chain(targets[..targets.len() - 1].iter().copied()).collect()
}

#[test]
fn fuse_input_without_holistic_zeroes_second_half() {
    let mut config = DecoderConfig::desk();
    config.use_holistic = false;
    let (dec, store) = decoder(config, 1);
    let mut tape = Tape::inference();
    let hol = tape.constant(random_tensor(&[2, 32], 2));
    let x = dec.fuse_input(&mut tape, &store, &[vec![BOS, 3, 4], vec![BOS, 5, 6]], Some(hol)).unwrap();
    assert_eq!(tape.shape(x), &[6, 64]);
    for row in tape.data(x).chunks(64) {
        assert!(row[32..].iter().all(|&v| v.to_bits() == 0));
        assert!(row[..32].iter().any(|&v| v != 0.0));
    }
}

#[test]
fn fuse_input_repeats_holistic_and_injects_position() {
    let (dec, store) = decoder(DecoderConfig::desk(), 1);
    let hol_t = random_tensor(&[1, 32], 3);
    let mut tape = Tape::inference();
    let hol = tape.constant(hol_t.clone());
    let x = dec.fuse_input(&mut tape, &store, &[vec![7, 7]], Some(hol)).unwrap();
    let rows: Vec<&[f64]> = tape.data(x).chunks(64).collect();
    assert_ne!(rows[0][..32], rows[1][..32]);
    assert_eq!(&rows[0][32..], hol_t.data());
    assert_eq!(&rows[1][32..], hol_t.data());
}

#[test]
fn fuse_input_errors() {
    let (dec, store) = decoder(DecoderConfig::desk(), 1);
    let mut tape = Tape::inference();
    let hol = tape.constant(random_tensor(&[1, 32], 3));
    assert!(dec.fuse_input(&mut tape, &store, &[vec![BOS, PAD]], Some(hol)).is_err());
    assert!(dec.fuse_input(&mut tape, &store, &[vec![BOS]], None).is_err());
    assert!(dec.fuse_input(&mut tape, &store, &[vec![BOS; 33]], Some(hol)).is_err());
}

#[test]
fn full_widths() {
    let config = DecoderConfig::full();
    assert_eq!(config.embed_dim() + config.embed_dim(), 1024);
    assert_eq!(config.head_dim(), 64);
    let (dec, store) = decoder(config, 1);
    assert_eq!(store.get("dec.embed").unwrap().shape(), &[96, 512]);
    assert_eq!(store.get("dec.block0.ffn.w1").unwrap().shape(), &[1024, 2048]);
    assert_eq!(store.get("dec.block0.ffn.w2").unwrap().shape(), &[2048, 1024]);
    assert_eq!(store.get("dec.head.w").unwrap().shape(), &[1024, NUM_CLASSES]);
    assert_eq!(dec.positional_table().table.shape(), &[32, 512]);
}

fn attention_params(tape: &mut Tape, d: usize, seed: u64) -> MhAttentionParams {
    MhAttentionParams {
        wq: tape.constant(random_tensor(&[d, d], seed)),
        wk: tape.constant(random_tensor(&[d, d], seed + 1)),
        wv: tape.constant(random_tensor(&[d, d], seed + 2)),
        wo: tape.constant(random_tensor(&[d, d], seed + 3)),
    }
}

#[test]
fn single_key_attention_ignores_query() {
    let d = 8;
    let mut tape = Tape::inference();
    let p = attention_params(&mut tape, d, 1);
    let kv = tape.constant(random_tensor(&[1, d], 5));
    let q1 = tape.constant(random_tensor(&[3, d], 6));
    let q2 = tape.constant(random_tensor(&[3, d], 7));
    let a = mh_attention(&mut tape, &p, q1, kv, kv, 1, 2, 0.5, false).unwrap();
    let b = mh_attention(&mut tape, &p, q2, kv, kv, 1, 2, 0.5, false).unwrap();
    let vw = tape.matmul(kv, p.wv).unwrap();
    let expected = tape.matmul(vw, p.wo).unwrap();
    for out in [a.out, b.out] {
        for row in tape.data(out).chunks(d) {
            for (x, y) in row.iter().zip(tape.data(expected)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn identical_keys_give_uniform_weights() {
    let d = 8;
    let mut tape = Tape::inference();
    let p = attention_params(&mut tape, d, 1);
    let row = random_tensor(&[1, d], 5);
    let keys = tape.constant(Tensor::new(&[5, d], row.data().repeat(5)).unwrap());
    let q = tape.constant(random_tensor(&[2, d], 6));
    let a = mh_attention(&mut tape, &p, q, keys, keys, 1, 4, 0.5, false).unwrap();
    assert_eq!(tape.shape(a.weights), &[4, 2, 5]);
    for w in tape.data(a.weights) {
        assert!((w - 0.2).abs() < 1e-12);
    }
}

#[test]
fn single_head_identity_matches_direct_formula() {
    // four keys of width 3, two queries; all projections identity
    let d = 3;
    let q = [[0.2, -0.4, 1.0], [1.5, 0.3, -0.7]];
    let k = [[1.0, 0.0, 0.5], [-0.3, 0.8, 0.1], [0.6, -1.2, 0.9], [0.0, 0.4, -0.6]];
    let v = [[0.5, 1.0, -1.0], [2.0, -0.5, 0.3], [-1.1, 0.7, 0.2], [0.4, 0.4, 1.6]];
    let mut expected = Vec::new();
    for qi in &q {
        let scores: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let alpha: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
        for c in 0..d {
            expected.push((0..4).map(|j| alpha[j] * v[j][c]).sum::<f64>());
        }
    }
    let mut tape = Tape::inference();
    let eye = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
    let p = MhAttentionParams {
        wq: tape.constant(eye.clone()),
        wk: tape.constant(eye.clone()),
        wv: tape.constant(eye.clone()),
        wo: tape.constant(eye),
    };
    let qv = tape.constant(Tensor::new(&[2, d], q.concat()).unwrap());
    let kv = tape.constant(Tensor::new(&[4, d], k.concat()).unwrap());
    let vv = tape.constant(Tensor::new(&[4, d], v.concat()).unwrap());
    let a = mh_attention(&mut tape, &p, qv, kv, vv, 1, 1, 1.0 / (d as f64).sqrt(), false).unwrap();
    for (x, y) in tape.data(a.out).iter().zip(&expected) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn attention_is_invariant_to_joint_key_permutation() {
    let d = 8;
    let m = 6;
    let keys = random_tensor(&[2 * m, d], 4);
    let values = random_tensor(&[2 * m, d], 5);
    let perm = [3, 0, 5, 1, 4, 2];
    let permute = |t: &Tensor| {
        let mut out = Vec::new();
        for b in 0..2 {
            for &j in &perm {
                out.extend_from_slice(&t.data()[(b * m + j) * d..][..d]);
            }
        }
        Tensor::new(&[2 * m, d], out).unwrap()
    };
    let mut tape = Tape::inference();
    let p = attention_params(&mut tape, d, 1);
    let q = tape.constant(random_tensor(&[6, d], 6));
    let (k1, v1) = (tape.constant(keys.clone()), tape.constant(values.clone()));
    let (k2, v2) = (tape.constant(permute(&keys)), tape.constant(permute(&values)));
    let a = mh_attention(&mut tape, &p, q, k1, v1, 2, 2, 0.5, false).unwrap();
    let b = mh_attention(&mut tape, &p, q, k2, v2, 2, 2, 0.5, false).unwrap();
    for (x, y) in tape.data(a.out).iter().zip(tape.data(b.out)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn causal_attention_rows_are_normalized_and_masked() {
    let d = 8;
    let mut tape = Tape::inference();
    let p = attention_params(&mut tape, d, 1);
    let x = tape.constant(random_tensor(&[10, d], 2));
    let a = mh_attention(&mut tape, &p, x, x, x, 2, 4, 0.5, true).unwrap();
    let w = tape.data(a.weights);
    for (r, row) in w.chunks(5).enumerate() {
        let t = r % 5;
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row[t + 1..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn ffn_with_zero_weights_returns_bias() {
    let mut tape = Tape::inference();
    let x = tape.constant(random_tensor(&[3, 4], 1));
    let w1 = tape.constant(Tensor::zeros(&[4, 6]));
    let b1 = tape.constant(random_tensor(&[6], 2));
    let w2 = tape.constant(Tensor::zeros(&[6, 4]));
    let b2 = tape.constant(random_tensor(&[4], 3));
    let y = ffn(&mut tape, x, w1, b1, w2, b2).unwrap();
    let b2v = tape.data(b2).to_vec();
    for row in tape.data(y).chunks(4) {
        assert_eq!(row, &b2v[..]);
    }
}

#[test]
fn ffn_is_row_wise() {
    let x = random_tensor(&[4, 5], 1);
    let perm = [2, 0, 3, 1];
    let px = Tensor::new(&[4, 5], perm.iter().flat_map(|&i| x.data()[i * 5..][..5].to_vec()).collect()).unwrap();
    let mut tape = Tape::inference();
    let w1 = tape.constant(random_tensor(&[5, 7], 2));
    let b1 = tape.constant(random_tensor(&[7], 3));
    let w2 = tape.constant(random_tensor(&[7, 5], 4));
    let b2 = tape.constant(random_tensor(&[5], 5));
    let xv = tape.constant(x);
    let pv = tape.constant(px);
    let y = ffn(&mut tape, xv, w1, b1, w2, b2).unwrap();
    let py = ffn(&mut tape, pv, w1, b1, w2, b2).unwrap();
    for (r, &i) in perm.iter().enumerate() {
        assert_eq!(&tape.data(py)[r * 5..][..5], &tape.data(y)[i * 5..][..5]);
    }
}

#[test]
fn zeroed_sublayers_reduce_block_to_layernorms() {
    let (dec, mut store) = decoder(DecoderConfig::desk(), 2);
    for name in ["block0.self_attn.wo", "block0.cross_attn.wo", "block0.ffn.w2", "block0.ffn.b2"] {
        store
            .get_mut(&format!("dec.{name}"))
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let x = random_tensor(&[3, 64], 3);
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let mem = tape.constant(random_tensor(&[32, 64], 4));
    let (y, _) = dec.block(&mut tape, &store, 0, xv, mem, 1).unwrap();
    let ln = |row: &[f64]| -> Vec<f64> {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
    };
    for (row, out) in x.data().chunks(64).zip(tape.data(y).chunks(64)) {
        let expected = ln(&ln(&ln(row)));
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn predict_gives_distributions_over_95_classes() {
    let (dec, store) = decoder(DecoderConfig::desk(), 2);
    let mut tape = Tape::inference();
    let x = tape.constant(random_tensor(&[4, 64], 3));
    let logits = dec.predict(&mut tape, &store, x).unwrap();
    assert_eq!(tape.shape(logits), &[4, 95]);
    for row in distributions(tape.value(logits)) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let uniform = distributions(&Tensor::zeros(&[1, 95]));
    assert!(uniform[0].iter().all(|p| (p - 1.0 / 95.0).abs() < 1e-15));
}

#[test]
fn self_attention_switch_removes_sublayer() {
    let (_, with) = decoder(DecoderConfig::desk(), 1);
    let mut config = DecoderConfig::desk();
    config.use_self_attention = false;
    let (dec, without) = decoder(config, 1);
    let d = 64;
    let dropped: usize = with
        .iter()
        .filter(|(n, _)| without.get(n).is_none())
        .map(|(_, t)| t.numel())
        .sum();
    assert_eq!(dropped, 4 * d * d + 2 * d);
    let (logits, _) = dec.forward_teacher_forced(&without, &[1, 2, EOS], &memory(4, 8, 64, 5)).unwrap();
    assert_eq!(logits.shape(), &[3, 95]);
}

#[test]
fn causal_invariance() {
    let (dec, store) = decoder(DecoderConfig::desk(), 3);
    let mem = memory(4, 8, 64, 6);
    let mut rng = stream(1, "tokens");
    for _ in 0..5 {
        let targets = random_tokens(8, &mut rng);
        let (base, _) = dec.forward_teacher_forced(&store, &targets, &mem).unwrap();
        for t in 0..8 {
            let mut changed = targets.clone();
            for tok in &mut changed[t..] {
                *tok = (*tok + 1 + rng.gen_range(0..90)) % NUM_CLASSES;
            }
            let (other, _) = dec.forward_teacher_forced(&store, &changed, &mem).unwrap();
            // position s reads targets[..s]; rows 0..=t are unaffected
            let rows = (t + 1) * NUM_CLASSES;
            for (a, b) in base.data()[..rows].iter().zip(&other.data()[..rows]) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn parallel_matches_sequential() {
    let (dec, store) = decoder(DecoderConfig::desk(), 4);
    let mem = memory(4, 8, 64, 7);
    let targets = random_tokens(7, &mut stream(2, "tokens"));
    let (logits, records) = dec.forward_teacher_forced(&store, &targets, &mem).unwrap();
    let par = distributions(&logits);
    for t in 0..targets.len() {
        let step = dec.decode_step(&store, &mem, &[targets[..t].to_vec()]).unwrap().remove(0);
        for (a, b) in step.probs().iter().zip(&par[t]) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(step.record.keys, 32);
        for (a, b) in step.record.weights.iter().zip(&records[t].weights) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn decode_step_batches_equal_length_prefixes() {
    let (dec, store) = decoder(DecoderConfig::desk(), 4);
    let mem = memory(4, 8, 64, 7);
    let prefixes = vec![vec![1, 2], vec![3, 4], vec![1, 2]];
    let outs = dec.decode_step(&store, &mem, &prefixes).unwrap();
    let single = dec.decode_step(&store, &mem, &prefixes[1..2]).unwrap();
    assert_eq!(outs[0].log_probs, outs[2].log_probs);
    for (a, b) in outs[1].log_probs.iter().zip(&single[0].log_probs) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(dec.decode_step(&store, &mem, &[vec![1], vec![1, 2]]).is_err());
    assert!(dec.decode_step(&store, &mem, &[vec![1; 32]]).is_err());
}

#[test]
fn empty_prefix_step_is_normalized() {
    let (dec, store) = decoder(DecoderConfig::desk(), 5);
    let out = dec.decode_step(&store, &memory(4, 8, 64, 1), &[vec![]]).unwrap().remove(0);
    assert!((out.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(out.record.heads, 4);
    for h in 0..4 {
        let w = out.record.head(h);
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let mean = out.record.mean_over_heads();
    assert!((mean.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn initial_loss_is_near_uniform() {
    let (dec, store) = decoder(DecoderConfig::desk(), 6);
    let targets = random_tokens(10, &mut stream(3, "tokens"));
    let (logits, _) = dec.forward_teacher_forced(&store, &targets, &memory(4, 8, 64, 2)).unwrap();
    let loss: f64 = distributions(&logits)
        .iter()
        .zip(&targets)
        .map(|(p, &t)| -p[t].ln())
        .sum::<f64>()
        / targets.len() as f64;
    assert!((loss - (95f64).ln()).abs() < 0.1, "loss {loss}");
}

#[test]
fn overlength_targets_rejected() {
    let (dec, store) = decoder(DecoderConfig::desk(), 1);
    let mem = memory(4, 8, 64, 1);
    assert!(dec.forward_teacher_forced(&store, &[1; 33], &mem).is_err());
    assert!(dec.forward_teacher_forced(&store, &[], &mem).is_err());
}

#[test]
fn full_decoder_runs_on_desk_grid() {
    let (dec, store) = decoder(DecoderConfig::full(), 1);
    let mem = memory(4, 8, 1024, 2);
    let (logits, records) = dec.forward_teacher_forced(&store, &[10, 11, 12, EOS], &mem).unwrap();
    assert_eq!(logits.shape(), &[4, 95]);
    assert_eq!(records[0].heads, 16);
    assert!(logits.all_finite());
}

#[test]
fn model_width_scale_switch_changes_output() {
    use hatr_core::decoder::AttentionScale;
    let (dec, store) = decoder(DecoderConfig::desk(), 1);
    let mut config = DecoderConfig::desk();
    config.attention_scale = AttentionScale::Model;
    let other = Decoder::new(config, "dec").unwrap();
    let mem = memory(4, 8, 64, 3);
    let (a, _) = dec.forward_teacher_forced(&store, &[1, 2, 3], &mem).unwrap();
    let (b, _) = other.forward_teacher_forced(&store, &[1, 2, 3], &mem).unwrap();
    assert_ne!(a.data(), b.data());
}

fn teacher_forced_loss(dec: &Decoder, tape: &mut Tape, store: &ParamStore, labels: &[Vec<usize>], fm: &Tensor, hol: &Tensor) -> hatr_core::Result<Var> {
    let steps = labels.iter().map(Vec::len).max().unwrap() + 1;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for l in labels {
        let mut t = l.clone();
        t.push(EOS);
        let mut inp = shifted(&t);
        inp.resize(steps, EOS);
        t.resize(steps, PAD);
        inputs.push(inp);
        targets.extend(t);
    }
    let f = tape.constant(fm.clone());
    let h = tape.constant(hol.clone());
    let out = dec.forward(tape, store, &inputs, f, Some(h))?;
    tape.cross_entropy(out.logits, &targets, PAD)
}

#[test]
fn decoder_loss_gradients() {
    let (dec, store) = decoder(DecoderConfig::desk(), 8);
    let fm = random_tensor(&[2, 4, 8, 64], 9);
    let hol = random_tensor(&[2, 32], 10);
    let labels = vec![vec![5, 17, 40], vec![60, 2]];
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let err = fd_check_params(
        |tape, store| teacher_forced_loss(&dec, tape, store, &labels, &fm, &hol),
        &store,
        &names,
        4,
        DEFAULT_STEP,
        &mut stream(11, "fd"),
    )
    .unwrap();
    assert!(err < 1e-3, "decoder fd error {err}");
}
