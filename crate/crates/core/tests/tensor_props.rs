use patchocr::tensor::kernels::AttnLayout;
use patchocr::tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// element carries a distinct cotangent.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(randn(&shape, seed));
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

/// Central differences over every input element, h = 1e-4.
fn gradcheck(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get(*v).unwrap();
        for j in 0..inputs[i].numel() {
            let mut xs = inputs.clone();
            xs[i].data_mut()[j] += h;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * h;
            let down = eval(&xs);
            let num = (up - down) / (2.0 * h);
            let a = g.data()[j];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
    }
    worst
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let (a, b) = (randn(&[3, 4], 1), randn(&[4, 2], 2));
    let expect = naive_matmul(&a, &b);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(a.cast());
    let y = tape.constant(b.cast());
    let c = tape.matmul(x, y).unwrap();
    assert_eq!(tape.value(c).shape(), &[3, 2]);
    for (got, want) in tape.value(c).data().iter().zip(&expect) {
        assert!((*got as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn softmax_matches_direct_formula() {
    let x = randn(&[7], 3).reshape(&[1, 7]).unwrap();
    let z: f64 = x.data().iter().map(|v| v.exp()).sum();
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let s = tape.softmax(v, 1).unwrap();
    for (got, xi) in tape.value(s).data().iter().zip(x.data()) {
        assert!((got - xi.exp() / z).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_matches_direct_formula() {
    let x = randn(&[1, 9], 4);
    let (g, b) = (randn(&[9], 5), randn(&[9], 6));
    let mean = x.data().iter().sum::<f64>() / 9.0;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
    let mut tape = Tape::new();
    let (xv, gv, bv) = (
        tape.constant(x.clone()),
        tape.constant(g.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.layer_norm(xv, gv, bv, 1e-5).unwrap();
    for i in 0..9 {
        let want = (x.data()[i] - mean) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i];
        assert!((tape.value(y).data()[i] - want).abs() < 1e-6);
    }
    let mut tape = Tape::new();
    let (xv, gv, bv) = (tape.constant(x), tape.constant(g), tape.constant(b));
    assert!(tape.layer_norm(xv, gv, bv, 0.0).is_err());
}

#[test]
fn gelu_closed_form() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3], vec![0.0, 1.0, 10.0]).unwrap());
    let y = tape.gelu(x);
    let d = tape.value(y).data();
    assert_eq!(d[0], 0.0);
    assert!((d[1] - 0.5 * (1.0 + libm::erf(1.0 / 2f64.sqrt()))).abs() < 1e-15);
    assert!((d[2] - 10.0).abs() < 1e-6);
}

#[test]
fn cross_entropy_masked_pair_matches_hand_value() {
    let logits = Tensor::from_rows(&[&[1.0, 2.0, 0.5], &[0.0, -1.0, 3.0]]);
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let ce = tape.cross_entropy(l, &[1, 0], &[true, false]).unwrap();
    let z = 1f64.exp() + 2f64.exp() + 0.5f64.exp();
    assert!((tape.value(ce).item() - -(2f64.exp() / z).ln()).abs() < 1e-12);
    assert!(tape.cross_entropy(l, &[1, 0], &[false, false]).is_err());
    assert!(tape.cross_entropy(l, &[3, 0], &[true, true]).is_err());
}

#[test]
fn op_gradients_match_finite_differences() {
    let tol = 1e-4;
    let cases: Vec<(&str, f64)> = vec![
        (
            "matmul",
            gradcheck(vec![randn(&[3, 4], 10), randn(&[4, 2], 11)], |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                weighted_sum(t, y, 1)
            }),
        ),
        (
            "matmul_nt",
            gradcheck(vec![randn(&[3, 4], 12), randn(&[5, 4], 13)], |t, v| {
                let y = t.matmul_nt(v[0], v[1]).unwrap();
                weighted_sum(t, y, 2)
            }),
        ),
        (
            "add_mul_scale",
            gradcheck(vec![randn(&[2, 3], 14), randn(&[2, 3], 15)], |t, v| {
                let a = t.add(v[0], v[1]).unwrap();
                let m = t.mul(a, v[0]).unwrap();
                let s = t.scale(m, 0.7);
                weighted_sum(t, s, 3)
            }),
        ),
        (
            "add_row",
            gradcheck(vec![randn(&[3, 4], 16), randn(&[4], 17)], |t, v| {
                let y = t.add_row(v[0], v[1]).unwrap();
                weighted_sum(t, y, 4)
            }),
        ),
        (
            "gelu",
            gradcheck(vec![randn(&[2, 5], 18)], |t, v| {
                let y = t.gelu(v[0]);
                weighted_sum(t, y, 5)
            }),
        ),
        (
            "layer_norm",
            gradcheck(vec![randn(&[3, 6], 19), randn(&[6], 20), randn(&[6], 21)], |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                weighted_sum(t, y, 6)
            }),
        ),
        (
            "softmax_last",
            gradcheck(vec![randn(&[3, 5], 22)], |t, v| {
                let y = t.softmax(v[0], 1).unwrap();
                weighted_sum(t, y, 7)
            }),
        ),
        (
            "softmax_first",
            gradcheck(vec![randn(&[3, 5], 23)], |t, v| {
                let y = t.softmax(v[0], 0).unwrap();
                weighted_sum(t, y, 8)
            }),
        ),
        (
            "cross_entropy",
            gradcheck(vec![randn(&[4, 6], 24)], |t, v| {
                t.cross_entropy(v[0], &[1, 5, 0, 2], &[true, true, false, true])
                    .unwrap()
            }),
        ),
        (
            "gather_rows",
            gradcheck(vec![randn(&[5, 3], 25)], |t, v| {
                let y = t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap();
                weighted_sum(t, y, 9)
            }),
        ),
        (
            "pick_rows",
            gradcheck(vec![randn(&[3, 2], 26), randn(&[2, 2], 27)], |t, v| {
                let y = t.pick_rows(&[(v[0], 2), (v[1], 0), (v[0], 2)]).unwrap();
                weighted_sum(t, y, 10)
            }),
        ),
        (
            "causal_attention",
            gradcheck(vec![randn(&[2 * 4, 12], 28), randn(&[2, 3], 29)], |t, v| {
                let lay = AttnLayout {
                    batch: 2,
                    seq: 4,
                    d_model: 4,
                    heads: 2,
                    clip: 2,
                };
                let y = t.causal_attention(v[0], v[1], lay).unwrap();
                weighted_sum(t, y, 11)
            }),
        ),
    ];
    for (name, err) in cases {
        assert!(err < tol, "{name}: relative error {err}");
    }
}

#[test]
fn backward_is_linear() {
    let x0 = randn(&[2, 3], 30);
    let (a, b) = (0.8, -1.7);
    let f = |t: &mut Tape<f64>, x: Var| {
        let y = t.gelu(x);
        weighted_sum(t, y, 40)
    };
    let g = |t: &mut Tape<f64>, x: Var| {
        let y = t.softmax(x, 1).unwrap();
        weighted_sum(t, y, 41)
    };
    let grad_of = |h: &dyn Fn(&mut Tape<f64>, Var) -> Var| {
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let out = h(&mut t, x);
        t.backward(out).unwrap().get(x).unwrap().clone()
    };
    let gf = grad_of(&f);
    let gg = grad_of(&g);
    let combo = grad_of(&|t: &mut Tape<f64>, x: Var| {
        let fx = f(t, x);
        let gx = g(t, x);
        let fx = t.scale(fx, a);
        let gx = t.scale(gx, b);
        t.add(fx, gx).unwrap()
    });
    for i in 0..x0.numel() {
        assert!((combo.data()[i] - (a * gf.data()[i] + b * gg.data()[i])).abs() < 1e-6);
    }
}

#[test]
fn constants_never_receive_gradients() {
    let mut t = Tape::<f64>::new();
    let c = t.constant(randn(&[2, 2], 50));
    let p = t.param(randn(&[2, 2], 51));
    let y = t.matmul(c, p).unwrap();
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert!(!t.requires_grad(c));
    assert!(g.get(c).is_none());
    assert_eq!(g.get(p).unwrap().shape(), &[2, 2]);
}

fn small(seed: u64, r: usize, c: usize) -> Tensor<f32> {
    let mut g = rng(seed);
    Tensor::from_fn(&[r, c], |_| g.random_range(-1.0f32..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let x = randn(&[3, 6], seed);
        let mut shifted = x.clone();
        for v in shifted.data_mut() {
            *v += shift;
        }
        let mut t = Tape::new();
        let (a, b) = (t.constant(x), t.constant(shifted));
        let (sa, sb) = (t.softmax(a, 1).unwrap(), t.softmax(b, 1).unwrap());
        for r in 0..3 {
            prop_assert!((t.value(sa).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(t.value(sa).row(r).iter().all(|&p| p >= 0.0));
        }
        prop_assert!(t.value(sa).max_abs_diff(t.value(sb)) < 1e-6);
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5, p in 1usize..5) {
        let (a, b, c) = (small(seed, m, k), small(seed ^ 1, k, n), small(seed ^ 2, n, p));
        let mut t = Tape::new();
        let (a, b, c) = (t.constant(a), t.constant(b), t.constant(c));
        let ab = t.matmul(a, b).unwrap();
        let left = t.matmul(ab, c).unwrap();
        let bc = t.matmul(b, c).unwrap();
        let right = t.matmul(a, bc).unwrap();
        prop_assert!(t.value(left).max_abs_diff(t.value(right)) < 1e-4);
    }

    #[test]
    fn tensor_shape_matches_data(r in 0usize..5, c in 0usize..5) {
        prop_assert!(Tensor::<f32>::new(vec![r, c], vec![0.0; r * c]).is_ok());
        prop_assert!(Tensor::<f32>::new(vec![r, c], vec![0.0; r * c + 1]).is_err());
    }
}
