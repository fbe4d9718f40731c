use dualground_core::numerics::{grad_check, grad_check_params, Graph, MlpParams, Parameterized, Tensor, Var};
use dualground_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_t(seed: u64, r: usize, c: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts any matrix to a scalar with fixed irregular weights so every
/// output coordinate matters.
fn contract(g: &mut Graph, v: Var) -> Result<Var> {
    let (r, c) = g.dims(v);
    let w = Tensor::new(vec![r, c], (0..r * c).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect())?;
    let w = g.input(w)?;
    let p = g.mul(v, w)?;
    g.sum_all(p)
}

fn check(name: &str, x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let err = grad_check(|g, v| { let y = f(g, v)?; contract(g, y) }, x, H).unwrap();
    assert!(err < TOL, "{name}: relative error {err:e}");
}

#[test]
fn elementwise_unary_ops() {
    let x = rand_t(1, 3, 4);
    let pos = x.map(|v| v.abs() + 0.5);
    check("relu", &x, |g, v| g.relu(v));
    check("sigmoid", &x, |g, v| g.sigmoid(v));
    check("softplus", &x, |g, v| g.softplus(v));
    check("exp", &x, |g, v| g.exp(v));
    check("ln", &pos, |g, v| g.ln(v));
    check("abs", &x, |g, v| g.abs(v));
    check("scale", &x, |g, v| g.scale(v, -2.5));
    check("add_scalar", &x, |g, v| g.add_scalar(v, 3.0));
}

#[test]
fn binary_and_broadcast_ops() {
    let x = rand_t(2, 3, 4);
    let other = rand_t(3, 3, 4);
    let row = rand_t(4, 1, 4);
    let den = rand_t(5, 3, 4).map(|v| v.abs() + 0.5);
    check("add", &x, |g, v| { let o = g.input(other.clone())?; g.add(v, o) });
    check("sub", &x, |g, v| { let o = g.input(other.clone())?; g.sub(o, v) });
    check("mul", &x, |g, v| { let o = g.input(other.clone())?; g.mul(v, o) });
    check("div num", &x, |g, v| { let o = g.input(den.clone())?; g.div(v, o) });
    check("div den", &den, |g, v| { let o = g.input(other.clone())?; g.div(o, v) });
    check("minimum", &x, |g, v| { let o = g.input(other.clone())?; g.minimum(v, o) });
    check("maximum", &x, |g, v| { let o = g.input(other.clone())?; g.maximum(v, o) });
    check("add_row lhs", &x, |g, v| { let o = g.input(row.clone())?; g.add_row(v, o) });
    check("add_row rhs", &row, |g, v| { let o = g.input(x.clone())?; g.add_row(o, v) });
    check("mul_row lhs", &x, |g, v| { let o = g.input(row.clone())?; g.mul_row(v, o) });
    check("mul_row rhs", &row, |g, v| { let o = g.input(x.clone())?; g.mul_row(o, v) });
}

#[test]
fn matrix_and_reduction_ops() {
    let a = rand_t(6, 3, 4);
    let b = rand_t(7, 4, 5);
    let bt = rand_t(8, 5, 4);
    check("matmul lhs", &a, |g, v| { let o = g.input(b.clone())?; g.matmul(v, o) });
    check("matmul rhs", &b, |g, v| { let o = g.input(a.clone())?; g.matmul(o, v) });
    check("matmul_nt lhs", &a, |g, v| { let o = g.input(bt.clone())?; g.matmul_nt(v, o) });
    check("matmul_nt rhs", &bt, |g, v| { let o = g.input(a.clone())?; g.matmul_nt(o, v) });
    check("softmax_rows", &a, |g, v| g.softmax_rows(v));
    check("log_softmax_rows", &a, |g, v| g.log_softmax_rows(v));
    check("max_cols", &a, |g, v| g.max_cols(v));
    check("mean_rows", &a, |g, v| g.mean_rows(v));
    check("sum_all", &a, |g, v| g.sum_all(v));
    check("mean_all", &a, |g, v| g.mean_all(v));
    check("layer_norm_rows", &a, |g, v| g.layer_norm_rows(v, 1e-5));
    check("l2_normalize_rows", &a, |g, v| g.l2_normalize_rows(v, 1e-8));
    check("transpose", &a, |g, v| g.transpose(v));
    check("reshape", &a, |g, v| g.reshape(v, &[6, 2]));
}

#[test]
fn slicing_and_joining_ops() {
    let a = rand_t(9, 4, 5);
    let other = rand_t(10, 4, 2);
    check("slice_rows", &a, |g, v| g.slice_rows(v, 1, 2));
    check("slice_cols", &a, |g, v| g.slice_cols(v, 2, 3));
    check("gather_rows with repeats", &a, |g, v| g.gather_rows(v, &[3, 0, 3, 1]));
    check("concat_cols", &a, |g, v| { let o = g.input(other.clone())?; g.concat_cols(&[o, v, o]) });
    check("concat_rows", &a, |g, v| { let o = g.input(rand_t(11, 2, 5))?; g.concat_rows(&[v, o]) });
    check("reuse of one input", &a, |g, v| { let s = g.mul(v, v)?; g.add(s, v) });
}

#[test]
fn fused_perceptron_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut p = MlpParams::new(3, 6, 2, &mut rng);
    let x = rand_t(13, 5, 3);
    check("mlp input", &x, |g, v| dualground_core::numerics::mlp_apply(g, &p, v));
    let xs = x.clone();
    let err = grad_check_params(&mut p, |m, g| { let v = g.input(xs.clone())?; let y = dualground_core::numerics::mlp_apply(g, m, v)?; contract(g, y) }, H).unwrap();
    assert!(err < TOL, "mlp params: {err:e}");
    assert_eq!(p.num_scalars(), 3 * 6 + 6 + 6 * 2 + 2);
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(r in 1usize..5, c in 1usize..7, seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut g = Graph::new();
        let x = rand_t(seed, r, c).map(|v| v * 10.0 + shift);
        let v = g.input(x).unwrap();
        let s = g.softmax_rows(v).unwrap();
        for row in 0..r {
            let vals = g.value(s).row(row);
            prop_assert!(vals.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_monotone_and_bounded(a in -40.0f64..40.0, d in 0.0f64..5.0) {
        let mut g = Graph::new();
        let v = g.input(Tensor::new(vec![1, 2], vec![a, a + d]).unwrap()).unwrap();
        let s = g.sigmoid(v).unwrap();
        let out = g.value(s).data();
        prop_assert!(out[0] <= out[1]);
        prop_assert!(out.iter().all(|&y| (0.0..=1.0).contains(&y)));
        // past ~36 the exact value rounds to 1 in f64
        if a + d < 30.0 {
            prop_assert!(out.iter().all(|&y| y > 0.0 && y < 1.0));
        }
    }

    #[test]
    fn matmul_matches_naive(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let a = rand_t(seed, m, k);
        let b = rand_t(seed.wrapping_add(1), k, n);
        let mut g = Graph::new();
        let av = g.input(a.clone()).unwrap();
        let bv = g.input(b.clone()).unwrap();
        let c = g.matmul(av, bv).unwrap();
        let expect = naive_matmul(a.data(), b.data(), m, k, n);
        for (x, y) in g.value(c).data().iter().zip(&expect) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
