use patchocr::decoder::{Decoder, ModelConfig};
use patchocr::params::ParamStore;
use patchocr::tensor::kernels::AttnLayout;
use patchocr::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        max_len: 64,
        rel_clip: 4,
        ..ModelConfig::desk()
    }
}

fn decoder(cfg: &ModelConfig, seed: u64) -> (Decoder, ParamStore<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let table = store.add("tokens.embedding", Tensor::randn(&[11, cfg.d_model], 0.02, &mut rng));
    let dec = Decoder::init(cfg, 11, table, &mut store, &mut rng).unwrap();
    // Give every parameter some size so blocks do real work.
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * (rand::Rng::random::<f64>(&mut rng) - 0.5);
        }
    }
    (dec, store)
}

fn input(rows: usize, d: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(&[rows, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Naive single-head attention over three tokens.
fn manual_attention(q: &[[f64; 2]; 3], k: &[[f64; 2]; 3], v: &[[f64; 2]; 3]) -> Vec<[f64; 2]> {
    let scale = 1.0 / 2f64.sqrt();
    (0..3)
        .map(|i| {
            let scores: Vec<f64> = (0..=i)
                .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) * scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut out = [0.0; 2];
            for j in 0..=i {
                out[0] += e[j] / z * v[j][0];
                out[1] += e[j] / z * v[j][1];
            }
            out
        })
        .collect()
}

#[test]
fn three_token_attention_matches_manual() {
    let q = [[0.5, -1.0], [1.5, 0.2], [-0.3, 0.8]];
    let k = [[1.0, 0.0], [0.4, -0.7], [0.2, 2.0]];
    let v = [[1.0, 2.0], [-1.0, 0.5], [3.0, -2.0]];
    let mut qkv = Vec::new();
    for i in 0..3 {
        qkv.extend_from_slice(&q[i]);
        qkv.extend_from_slice(&k[i]);
        qkv.extend_from_slice(&v[i]);
    }
    let lay = AttnLayout {
        batch: 1,
        seq: 3,
        d_model: 2,
        heads: 1,
        clip: 4,
    };
    let mut tape = Tape::<f64>::new();
    let qkv = tape.constant(Tensor::new(vec![3, 6], qkv).unwrap());
    let bias = tape.constant(Tensor::zeros(&[1, 5]));
    let out = tape.causal_attention(qkv, bias, lay).unwrap();
    let expect = manual_attention(&q, &k, &v);
    for i in 0..3 {
        for c in 0..2 {
            assert!((tape.value(out).row(i)[c] - expect[i][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn single_token_attention_ignores_bias() {
    let qkv = [0.3, -0.2, 1.0, 2.0, 0.7, -0.4];
    let lay = AttnLayout {
        batch: 1,
        seq: 1,
        d_model: 2,
        heads: 2,
        clip: 3,
    };
    for b in [0.0, 5.0, -7.0] {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 6], qkv.to_vec()).unwrap());
        let bias = tape.constant(Tensor::full(&[2, 4], b));
        let out = tape.causal_attention(x, bias, lay).unwrap();
        assert_eq!(tape.value(out).data(), &[0.7, -0.4]);
    }
}

#[test]
fn zeroed_output_projections_give_identity_block() {
    let cfg = tiny(1);
    let (dec, mut store) = decoder(&cfg, 1);
    let b = dec.blocks()[0].clone();
    for id in [b.attn_out_w, b.attn_out_b, b.ffn_out_w, b.ffn_out_b] {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x0 = input(5, cfg.d_model, 2);
    let x = tape.constant(x0.clone());
    let (y, _, _) = dec
        .block_forward(0, &mut tape, &bound, x, cfg.layout(1, 5), &mut None)
        .unwrap();
    assert_eq!(tape.value(y), &x0);
}

#[test]
fn two_blocks_compose() {
    let cfg = tiny(2);
    let (dec, store) = decoder(&cfg, 3);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(input(6, cfg.d_model, 4));
    let lay = cfg.layout(1, 6);
    let full = dec.forward(&mut tape, &bound, x, 1, 6, None).unwrap();
    let (y, _, _) = dec.block_forward(0, &mut tape, &bound, x, lay, &mut None).unwrap();
    let (y, _, _) = dec.block_forward(1, &mut tape, &bound, y, lay, &mut None).unwrap();
    let g = bound[store.find("ln_f.gamma").unwrap()];
    let b = bound[store.find("ln_f.beta").unwrap()];
    let y = tape.layer_norm(y, g, b, cfg.ln_eps).unwrap();
    assert_eq!(tape.value(y), tape.value(full.hidden));
}

#[test]
fn perturbing_a_position_leaves_earlier_rows_unchanged() {
    let cfg = tiny(2);
    let (dec, store) = decoder(&cfg, 5);
    let len = 7;
    let base = input(len, cfg.d_model, 6);
    let run = |x0: Tensor<f64>| {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(x0);
        let t = dec.forward(&mut tape, &bound, x, 1, len, None).unwrap();
        let l = dec.logits(&mut tape, &bound, t.hidden).unwrap();
        tape.value(l).clone()
    };
    let reference = run(base.clone());
    for t in 0..len {
        let mut x = base.clone();
        for v in &mut x.data_mut()[t * cfg.d_model..(t + 1) * cfg.d_model] {
            *v += 0.5;
        }
        let out = run(x);
        for r in 0..t {
            assert_eq!(out.row(r), reference.row(r), "row {r} moved when perturbing {t}");
        }
        assert_ne!(out.row(t), reference.row(t));
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let cfg = tiny(2);
    let (dec, store) = decoder(&cfg, 7);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(input(2 * 9, cfg.d_model, 8));
    let trace = dec.forward(&mut tape, &bound, x, 2, 9, None).unwrap();
    for &a in &trace.attn {
        let probs = tape.attention_probs(a).unwrap();
        for (r, row) in probs.chunks(9).enumerate() {
            let i = r % 9;
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row[i + 1..].iter().all(|&p| p == 0.0));
        }
    }
}

#[test]
fn sequences_in_a_batch_are_independent() {
    let cfg = tiny(2);
    let (dec, store) = decoder(&cfg, 9);
    let a = input(5, cfg.d_model, 10);
    let b = input(5, cfg.d_model, 11);
    let hidden = |x0: Tensor<f64>, batch: usize| {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(x0);
        let t = dec.forward(&mut tape, &bound, x, batch, 5, None).unwrap();
        tape.value(t.hidden).clone()
    };
    let mut both = a.data().to_vec();
    both.extend_from_slice(b.data());
    let joint = hidden(Tensor::new(vec![10, cfg.d_model], both).unwrap(), 2);
    let alone = hidden(b, 1);
    for r in 0..5 {
        let diff: f64 = joint
            .row(5 + r)
            .iter()
            .zip(alone.row(r))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}

#[test]
fn overlong_sequences_are_rejected() {
    let cfg = tiny(1);
    let (dec, store) = decoder(&cfg, 12);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(input(65, cfg.d_model, 1));
    assert!(matches!(
        dec.forward(&mut tape, &bound, x, 1, 65, None),
        Err(patchocr::Error::SequenceTooLong { .. })
    ));
}

#[test]
fn per_layer_bias_and_tied_head_have_expected_params() {
    let cfg = ModelConfig {
        shared_rel_bias: false,
        tie_head: true,
        ..tiny(3)
    };
    let (_, store) = decoder(&cfg, 13);
    assert!(store.find("rel_bias").is_none());
    assert!(store.find("blocks.2.rel_bias").is_some());
    assert!(store.find("head.weight").is_none());
}

#[test]
fn invalid_head_count_is_rejected() {
    let cfg = ModelConfig { n_heads: 3, ..tiny(1) };
    assert!(cfg.validate().is_err());
}
