//! Reverse-mode gradients of every graph op against central differences,
//! on random inputs.

use proptest::prelude::*;
use tldpo::numerics::{grad_check, log_sigmoid, sigmoid, Graph, Tensor};

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_block_gradient(x in matrix(3, 4), w in matrix(4, 4)) {
        let wc = w.clone();
        let err = grad_check(
            |g, p| {
                let w = g.constant(wc.clone());
                let q = g.matmul(p, w)?;
                let kt = g.transpose(p)?;
                let s = g.matmul(q, kt)?;
                let s = g.scale(s, 0.5)?;
                let a = g.softmax(s)?;
                let m = g.matmul(a, p)?;
                let m = g.exp(m)?;
                g.mean(m)
            },
            &x,
            STEP,
        )
        .unwrap();
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn log_softmax_pick_gradient(x in matrix(4, 5), idx in prop::collection::vec(0usize..5, 4)) {
        let err = grad_check(
            |g, p| {
                let lp = g.log_softmax(p)?;
                let t = g.pick(lp, &idx)?;
                g.sum(t)
            },
            &x,
            STEP,
        )
        .unwrap();
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn gather_concat_bias_gradient(x in matrix(3, 2), b in prop::collection::vec(-1.0f64..1.0, 2)) {
        let bias = Tensor::vector(b);
        let err = grad_check(
            |g, p| {
                let rows = g.gather_rows(p, &[2, 0, 2, 1])?;
                let both = g.concat_rows(&[rows, p])?;
                let bv = g.constant(bias.clone());
                let y = g.add_row(both, bv)?;
                let y = g.mul(y, y)?;
                let y = g.sigmoid(y)?;
                let n = g.neg(y)?;
                let d = g.sub(y, n)?;
                g.sum(d)
            },
            &x,
            STEP,
        )
        .unwrap();
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn masked_log_sigmoid_gradient(x in prop::collection::vec(-30.0f64..30.0, 6), w in prop::collection::vec(0.0f64..1.0, 6)) {
        let weights = Tensor::vector(w);
        let err = grad_check(
            |g, p| {
                let ls = g.log_sigmoid(p)?;
                let s = g.masked_sum(ls, &weights)?;
                let e = g.exp(p)?;
                let e = g.add(e, p)?;
                let e = g.mul(e, e)?;
                let l = g.log(e)?;
                let m = g.mean(l)?;
                g.add(s, m)
            },
            &Tensor::vector(x.iter().map(|v| v.abs() + 0.1).collect()),
            STEP,
        )
        .unwrap();
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn scalar_sigmoids_are_stable(x in -800.0f64..800.0) {
        let s = sigmoid(x);
        prop_assert!((0.0..=1.0).contains(&s));
        let ls = log_sigmoid(x);
        prop_assert!(ls.is_finite() && ls <= 0.0);
        prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        // log σ(x) − log σ(−x) = x
        prop_assert!((log_sigmoid(x) - log_sigmoid(-x) - x).abs() < 1e-9 * x.abs().max(1.0));
    }
}

#[test]
fn gradients_accumulate_over_shared_nodes() {
    let mut g = Graph::new();
    let p = g.param(Tensor::vector(vec![1.5, -2.0]));
    let a = g.mul(p, p).unwrap();
    let b = g.add(a, p).unwrap();
    let s = g.sum(b).unwrap();
    let grad = g.backward(s).unwrap().wrt(&g, p);
    assert_eq!(grad.data(), &[4.0, -3.0]);
}
