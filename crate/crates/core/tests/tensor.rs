use lsra_core::tensor::finite_diff_check;
use lsra_core::{Error, Graph, Rng, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

fn eval(f: impl FnOnce(&mut Graph) -> lsra_core::Result<lsra_core::Var>) -> Tensor {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.tensor(v)
}

#[test]
fn matmul_identity() {
    let y = eval(|g| {
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        g.matmul(a, b)
    });
    assert_eq!(y.data(), &[3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn matmul_row_by_column() {
    let y = eval(|g| {
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        g.matmul(a, b)
    });
    assert_eq!(y.shape(), &[1, 1]);
    assert_eq!(y.data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(7);
    let (a, b) = (rand(&mut rng, &[7, 5]), rand(&mut rng, &[5, 3]));
    let y = eval(|g| {
        let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
        g.matmul(a, b)
    });
    for i in 0..7 {
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..5 {
                acc += a.at2(i, k) * b.at2(k, j);
            }
            assert_eq!(y.at2(i, j), acc);
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected a dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_hand_cases() {
    let y = eval(|g| {
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        g.softmax(x, 0)
    });
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let y = eval(|g| {
        let x = g.constant(t(&[2], &[0.0, 2f64.ln()]));
        g.softmax(x, 0)
    });
    assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_rejects_bad_axis() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.softmax(x, 2), Err(Error::Dimension { .. })));
}

#[test]
fn layer_norm_constant_slice_is_zero() {
    let y = eval(|g| {
        let x = g.constant(t(&[4], &[5.0; 4]));
        let gamma = g.constant(t(&[4], &[1.0; 4]));
        let beta = g.constant(Tensor::zeros(&[4]));
        g.layer_norm(x, gamma, beta, 1e-5)
    });
    assert_eq!(y.data(), &[0.0; 4]);
}

#[test]
fn layer_norm_matches_two_pass_oracle() {
    let mut rng = Rng::new(3);
    let x = rand(&mut rng, &[3, 6]);
    let gamma = rand(&mut rng, &[6]);
    let beta = rand(&mut rng, &[6]);
    let eps = 1e-5;
    let y = eval(|g| {
        let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
        g.layer_norm(xv, gv, bv, eps)
    });
    for r in 0..3 {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
        for c in 0..6 {
            let want = (row[c] - mean) / (var + eps).sqrt() * gamma.data()[c] + beta.data()[c];
            assert!((y.at2(r, c) - want).abs() < 1e-12, "{} vs {want}", y.at2(r, c));
        }
    }
    let unit = eval(|g| {
        let xv = g.constant(x.clone());
        let gv = g.constant(t(&[6], &[1.0; 6]));
        let bv = g.constant(Tensor::zeros(&[6]));
        g.layer_norm(xv, gv, bv, eps)
    });
    for r in 0..3 {
        let row = unit.row(r);
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn layer_norm_width_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 4]));
    let p = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.layer_norm(x, p, p, 1e-5), Err(Error::Dimension { .. })));
}

#[test]
fn backward_product_and_sum() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let y = g.leaf(Tensor::scalar(-2.0), true);
    let p = g.mul(x, y).unwrap();
    g.backward(p).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[-2.0]);
    assert_eq!(g.grad(y).unwrap(), &[3.0]);

    let mut g = Graph::new();
    let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn reused_leaf_accumulates_both_paths() {
    // sum(x ⊙ x + 3x) has gradient 2x + 3 elementwise.
    let x0 = t(&[3], &[0.5, -1.5, 2.0]);
    let mut g = Graph::new();
    let x = g.leaf(x0.clone(), true);
    let sq = g.mul(x, x).unwrap();
    let lin = g.scale(x, 3.0);
    let s = g.add(sq, lin).unwrap();
    let loss = g.sum(s);
    g.backward(loss).unwrap();
    let want: Vec<f64> = x0.data().iter().map(|v| 2.0 * v + 3.0).collect();
    assert_eq!(g.grad(x).unwrap(), want.as_slice());
}

#[test]
fn composite_softmax_linear_gradient() {
    let mut rng = Rng::new(11);
    let x = rand(&mut rng, &[4, 3]);
    let w = rand(&mut rng, &[3, 5]);
    let weights = rand(&mut rng, &[4, 5]);
    let err = finite_diff_check(&w, 1e-5, |g, w| {
        let xv = g.constant(x.clone());
        let h = g.matmul(xv, w)?;
        let p = g.softmax(h, 1)?;
        // A plain sum of softmax rows is constant; weight the entries.
        let c = g.constant(weights.clone());
        let y = g.mul(p, c)?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn finite_diff_quadratic_is_tight() {
    let theta = t(&[4], &[0.3, -1.2, 2.5, 0.9]);
    let err = finite_diff_check(&theta, 1e-4, |g, x| {
        let sq = g.mul(x, x)?;
        let s = g.sum(sq);
        Ok(g.scale(s, 0.5))
    })
    .unwrap();
    assert!(err < 1e-8, "relative error {err}");
}

#[test]
fn finite_diff_reports_nan() {
    let theta = t(&[1], &[1.0]);
    let r = finite_diff_check(&theta, 1e-5, |g, x| {
        let s = g.sum(x);
        Ok(g.scale(s, f64::NAN))
    });
    assert!(matches!(r, Err(Error::Numeric(_))));
}

#[test]
fn forward_and_gradients_are_deterministic() {
    let run = || {
        let mut rng = Rng::new(5);
        let x = rand(&mut rng, &[3, 4]);
        let w = rand(&mut rng, &[4, 4]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let wv = g.leaf(w, true);
        let h = g.matmul(xv, wv).unwrap();
        let p = g.softmax(h, 1).unwrap();
        let sq = g.mul(p, h).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        (g.scalar(loss).to_bits(), g.grad(wv).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_probability_vectors(vals in proptest::collection::vec(-30.0f64..30.0, 12), shift in -50.0f64..50.0) {
        let x = t(&[3, 4], &vals);
        let y = eval(|g| { let v = g.constant(x.clone()); g.softmax(v, 1) });
        for r in 0..3 {
            let row = y.row(r);
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = Tensor::from_fn(&[3, 4], |i| vals[i] + shift);
        let z = eval(|g| { let v = g.constant(shifted.clone()); g.softmax(v, 1) });
        for (a, b) in y.data().iter().zip(z.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_gradient_is_sound(seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let a = rand(&mut rng, &[3, 4]);
        let b = rand(&mut rng, &[4, 2]);
        let c = rand(&mut rng, &[3, 2]);
        let err = finite_diff_check(&a, 1e-5, |g, a| {
            let bv = g.constant(b.clone());
            let cv = g.constant(c.clone());
            let y = g.matmul(a, bv)?;
            let y = g.mul(y, cv)?;
            Ok(g.sum(y))
        }).unwrap();
        prop_assert!(err <= 1e-5);
    }
}
