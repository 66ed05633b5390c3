//! Autodiff engine against naive oracles and finite differences.

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use shortcutlab_core::tensorops::gradcheck::{finite_difference, relative_error};
use shortcutlab_core::tensorops::{argmax, log_softmax_slice, softmax_slice, Graph, Tensor};

fn naive_affine(x: &[f64], w: &[f64], b: &[f64], rows: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        for o in 0..n_out {
            let mut acc = b[o];
            for i in 0..n_in {
                acc += x[r * n_in + i] * w[o * n_in + i];
            }
            out[r * n_out + o] = acc;
        }
    }
    out
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, rows * cols)
}

fn affine_case() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..6, 1usize..7, 1usize..5).prop_flat_map(|(rows, n_in, n_out)| {
        (Just(rows), Just(n_in), Just(n_out), matrix(rows, n_in), matrix(n_out, n_in), matrix(1, n_out))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affine_matches_triple_loop((rows, n_in, n_out, x, w, b) in affine_case()) {
        let mut g = Graph::new();
        let xv = g.constant(&Tensor::matrix(rows, n_in, x.clone()).unwrap());
        let wv = g.constant(&Tensor::matrix(n_out, n_in, w.clone()).unwrap());
        let bv = g.constant(&Tensor::vector(b.clone()));
        let y = g.affine(xv, wv, bv).unwrap();
        let expected = naive_affine(&x, &w, &b, rows, n_in, n_out);
        for (got, want) in g.value(y).data().iter().zip(&expected) {
            prop_assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(row in prop::collection::vec(-30.0..30.0f64, 1..12), shift in -100.0..100.0f64) {
        let p = softmax_slice(&row);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        for (a, b) in p.iter().zip(softmax_slice(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let lp = log_softmax_slice(&row);
        for (a, b) in p.iter().zip(&lp) {
            prop_assert!((a.ln() - b).abs() < 1e-9 || *a == 0.0);
        }
        prop_assert_eq!(argmax(&p), argmax(&row));
    }

    #[test]
    fn mlp_gradients_match_central_differences((rows, n_in, n_out, x, w, b) in affine_case(), labels_seed in 0usize..1000) {
        let labels: Vec<usize> = (0..rows).map(|r| (labels_seed + 7 * r) % n_out).collect();
        let x = Tensor::matrix(rows, n_in, x).unwrap();
        let loss_of = |ps: &[Tensor], g: &mut Graph, trainable: bool| {
            let bind = |g: &mut Graph, t: &Tensor| if trainable { g.param(t) } else { g.constant(t) };
            let wv = bind(g, &ps[0]);
            let bv = bind(g, &ps[1]);
            let xv = g.constant(&x);
            let h = g.affine(xv, wv, bv).unwrap();
            let h = g.relu(h);
            let l = g.cross_entropy(h, &labels).unwrap();
            (wv, bv, l)
        };
        let params = vec![Tensor::matrix(n_out, n_in, w).unwrap(), Tensor::vector(b)];
        let mut g = Graph::new();
        let (wv, bv, l) = loss_of(&params, &mut g, true);
        let grads = g.backward(l).unwrap();
        let numeric = finite_difference(&params, 1e-6, |ps| {
            let mut g = Graph::new();
            let (_, _, l) = loss_of(ps, &mut g, false);
            g.value(l).item()
        });
        // ReLU kinks make the estimate unreliable within `h` of zero.
        let mut g2 = Graph::new();
        let xv = g2.constant(&x);
        let wv2 = g2.constant(&params[0]);
        let bv2 = g2.constant(&params[1]);
        let pre = g2.affine(xv, wv2, bv2).unwrap();
        prop_assume!(g2.value(pre).data().iter().all(|v| v.abs() > 1e-4));
        // A saturated softmax leaves gradients below the estimate's rounding noise.
        prop_assume!(g.value(l).item() > 1e-3);
        prop_assert!(relative_error(&grads.wrt(wv), &numeric[0]) < 1e-5);
        prop_assert!(relative_error(&grads.wrt(bv), &numeric[1]) < 1e-5);
    }

    #[test]
    fn stop_grad_blocks_exactly(x in matrix(3, 4), w in matrix(2, 4)) {
        let mut g = Graph::new();
        let xv = g.param(&Tensor::matrix(3, 4, x).unwrap());
        let wv = g.param(&Tensor::matrix(2, 4, w).unwrap());
        let bv = g.param(&Tensor::vector(vec![0.1, -0.2]));
        let frozen = g.stop_grad(xv);
        let y = g.affine(frozen, wv, bv).unwrap();
        let l = g.cross_entropy(y, &[0, 1, 0]).unwrap();
        let grads = g.backward(l).unwrap();
        prop_assert!(grads.wrt(xv).data().iter().all(|&v| v == 0.0));
        prop_assert!(grads.wrt(wv).data().iter().any(|&v| v != 0.0));
    }
}

#[test]
fn cross_entropy_of_uniform_logits_is_log_classes() {
    let mut g = Graph::new();
    let logits = g.constant(&Tensor::zeros(&[4, 7]));
    let l = g.cross_entropy(logits, &[0, 3, 6, 2]).unwrap();
    assert_abs_diff_eq!(g.value(l).item(), 7f64.ln(), epsilon = 1e-12);
}
