use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

#[test]
fn matmul_by_identity() {
    let mut g = Graph::new();
    let a = g.input("a");
    let b = g.input("b");
    let c = g.matmul(a, b);
    g.set_output("c", c);
    let (ta, tb) = (t(&[&[1.0, 2.0], &[3.0, 4.0]]), Tensor::identity(2));
    let out = g
        .evaluate_outputs(&Bindings::new().with("a", &ta).with("b", &tb))
        .unwrap();
    assert_eq!(out["c"], ta);
}

#[test]
fn softmax_of_equal_logits() {
    let mut g = Graph::new();
    let a = g.input("a");
    let s = g.softmax_rows(a);
    g.set_output("s", s);
    let x = t(&[&[0.0, 0.0]]);
    let out = g.evaluate_outputs(&Bindings::new().with("a", &x)).unwrap();
    assert_eq!(out["s"].data(), &[0.5, 0.5]);
}

#[test]
fn layer_norm_direct() {
    let mut g = Graph::new();
    let a = g.input("a");
    let s = g.layer_norm(a, 1e-5);
    g.set_output("s", s);
    let x = t(&[&[1.0, 2.0, 3.0]]);
    let out = g.evaluate_outputs(&Bindings::new().with("a", &x)).unwrap();
    // var = 2/3, so (x - 2) / sqrt(2/3 + 1e-5)
    let s = (2.0f64 / 3.0 + 1e-5).sqrt();
    let expect = [-1.0 / s, 0.0, 1.0 / s];
    for (o, e) in out["s"].data().iter().zip(expect) {
        assert!((o - e).abs() < 1e-14);
    }
    let mean: f64 = out["s"].data().iter().sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12);
}

#[test]
fn gradient_of_square() {
    let mut g = Graph::new();
    let w = g.param("w");
    let f = g.frobenius_sq(w);
    g.set_output("f", f);
    let wv = Tensor::scalar(3.0);
    let gr = g.gradient(&Bindings::new().with("w", &wv), "f").unwrap();
    assert_eq!(gr.grads["w"].data(), &[6.0]);
}

#[test]
fn gradient_of_mean_sigmoid_at_zero() {
    let mut g = Graph::new();
    let w = g.param("w");
    let s = g.sigmoid(w);
    let f = g.mean(s);
    g.set_output("f", f);
    let wv = Tensor::scalar(0.0);
    let gr = g.gradient(&Bindings::new().with("w", &wv), "f").unwrap();
    assert!((gr.grads["w"].data()[0] - 0.25).abs() < 1e-15);
}

#[test]
fn gradient_matches_differences_for_matmul_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (rand_t(&[3, 3], &mut rng), rand_t(&[3, 3], &mut rng));
    let mut g = Graph::new();
    let pa = g.param("A");
    let ib = g.input("B");
    let m = g.matmul(pa, ib);
    let f = g.frobenius_sq(m);
    g.set_output("f", f);
    let binds = Bindings::new().with("A", &a).with("B", &b);
    let rep = g.grad_check(&binds, "f", 1e-5, 1e-6).unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn constant_graph_has_zero_gradients() {
    let mut g = Graph::new();
    let w = g.param("w");
    let c = g.input("c");
    let f = g.frobenius_sq(c);
    g.set_output("f", f);
    let _ = w;
    let (wv, cv) = (Tensor::filled(&[2], 1.5), Tensor::filled(&[2], 2.0));
    let binds = Bindings::new().with("w", &wv).with("c", &cv);
    let rep = g.grad_check(&binds, "f", 1e-5, 1e-12).unwrap();
    assert_eq!(rep.max_rel_error, 0.0);
    let gr = g.gradient(&binds, "f").unwrap();
    assert!(gr.grads["w"].data().iter().all(|&x| x == 0.0));
}

#[test]
fn linear_graph_is_exact_to_rounding() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (w, c) = (rand_t(&[1, 6], &mut rng), rand_t(&[1, 6], &mut rng));
    let mut g = Graph::new();
    let pw = g.param("w");
    let ic = g.input("c");
    let ct = g.transpose(ic);
    let f = g.matmul(pw, ct);
    g.set_output("f", f);
    let binds = Bindings::new().with("w", &w).with("c", &c);
    let rep = g.grad_check(&binds, "f", 1e-5, 1e-9).unwrap();
    assert!(rep.passed(), "{rep:?}");
}

/// Builds `mean(op(x) ⊙ r)` for a random projection `r` so every output
/// coordinate carries a distinct weight.
fn check_unary(shape: &[usize], seed: u64, build: impl Fn(&mut Graph, NodeId) -> NodeId) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_t(shape, &mut rng);
    let mut probe = Graph::new();
    let px = probe.input("x");
    let y = build(&mut probe, px);
    probe.set_output("y", y);
    let yshape = probe
        .evaluate_outputs(&Bindings::new().with("x", &x))
        .unwrap()["y"]
        .shape()
        .to_vec();
    let r = rand_t(&yshape, &mut rng);

    let mut g = Graph::new();
    let px = g.param("x");
    let pr = g.input("r");
    let y = build(&mut g, px);
    let m = g.mul(y, pr);
    let f = g.mean(m);
    g.set_output("f", f);
    let binds = Bindings::new().with("x", &x).with("r", &r);
    let rep = g.grad_check(&binds, "f", 1e-5, 1e-6).unwrap();
    assert!(rep.passed(), "{:?}", rep.per_param);
}

#[test]
fn every_primitive_matches_finite_differences() {
    check_unary(&[3, 4], 1, |g, x| {
        let t = g.transpose(x);
        g.matmul(x, t)
    });
    check_unary(&[3, 4], 2, |g, x| {
        let b = g.slice_rows(x, 1, 1);
        g.add(x, b)
    });
    check_unary(&[4, 3], 3, |g, x| {
        let b = g.slice_rows(x, 0, 2);
        g.mul(x, b)
    });
    check_unary(&[2, 3], 4, |g, x| g.scale(x, -2.5));
    check_unary(&[2, 3], 5, |g, x| {
        let s = g.slice_rows(x, 1, 1);
        let r = g.concat(&[x, s], Axis::Rows);
        let c = g.concat(&[r, r], Axis::Cols);
        g.gelu(c)
    });
    check_unary(&[3, 5], 6, |g, x| g.layer_norm(x, 1e-5));
    check_unary(&[3, 5], 7, |g, x| g.softmax_rows(x));
    check_unary(&[3, 5], 8, |g, x| g.gelu(x));
    check_unary(&[3, 5], 9, |g, x| g.sigmoid(x));
    check_unary(&[3, 5], 10, |g, x| {
        let m = g.mean(x);
        let f = g.frobenius_sq(x);
        let s = g.concat(&[m, f], Axis::Rows);
        g.reshape(s, &[1, 2])
    });
    check_unary(&[4, 3], 11, |g, x| g.cosine_sim(x));
    check_unary(&[2, 3], 12, |g, x| {
        let s = g.sigmoid(x);
        g.log(s)
    });
    check_unary(&[2, 6], 13, |g, x| {
        let r = g.reshape(x, &[3, 4]);
        g.transpose(r)
    });
}

#[test]
fn cosine_rows_matching_target_are_exact() {
    let m = cosine_similarity_matrix(&t(&[&[1.0, 0.0], &[1.0, 0.0]])).unwrap();
    assert_eq!(m.matrix.data(), &[1.0, 1.0, 1.0, 1.0]);
    let m = cosine_similarity_matrix(&t(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
    assert_eq!(m.matrix.data(), &[1.0, 0.0, 0.0, 1.0]);
    let m = cosine_similarity_matrix(&t(&[&[1.0, 1.0], &[1.0, 0.0]])).unwrap();
    assert!((m.matrix.get2(0, 1) - 0.707_106_78).abs() < 1e-8);
    assert_eq!(m.matrix.get2(0, 1), m.matrix.get2(1, 0));
}

#[test]
fn cosine_zero_row_policy() {
    let m = cosine_similarity_matrix(&t(&[&[0.0, 0.0], &[1.0, 2.0]])).unwrap();
    assert_eq!(m.degenerate_rows, 1);
    assert_eq!(m.matrix.data(), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn conv3d_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = rand_t(&[2, 4, 3, 4, 2], &mut rng);
    let w = Tensor::randn(&[2, 2, 2, 2, 3], 0.5, &mut rng);
    let b = rand_t(&[3], &mut rng);
    let mut g = Graph::new();
    let px = g.param("x");
    let pw = g.param("w");
    let pb = g.param("b");
    let y = g.conv3d(px, pw, pb, 2, 1);
    let f = g.frobenius_sq(y);
    g.set_output("f", f);
    let binds = Bindings::new().with("x", &x).with("w", &w).with("b", &b);
    let out = g.evaluate(&binds).unwrap();
    assert_eq!(out.value(y).shape(), &[2, 3, 2, 3, 3]);
    let rep = g.grad_check(&binds, "f", 1e-5, 1e-6).unwrap();
    assert!(rep.passed(), "{:?}", rep.per_param);
}

#[test]
fn conv3d_unit_kernel_copies_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_t(&[1, 2, 2, 2, 1], &mut rng);
    let w = Tensor::filled(&[1, 1, 1, 1, 1], 1.0);
    let b = Tensor::zeros(&[1]);
    let mut g = Graph::new();
    let (px, pw, pb) = (g.input("x"), g.input("w"), g.input("b"));
    let y = g.conv3d(px, pw, pb, 1, 0);
    g.set_output("y", y);
    let out = g
        .evaluate_outputs(&Bindings::new().with("x", &x).with("w", &w).with("b", &b))
        .unwrap();
    assert_eq!(out["y"], x);
}

#[test]
fn errors_name_the_node() {
    let mut g = Graph::new();
    let a = g.input("a");
    let b = g.input("b");
    let c = g.matmul(a, b);
    g.set_output("c", c);
    let (ta, tb) = (Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 3]));
    match g.evaluate(&Bindings::new().with("a", &ta).with("b", &tb)) {
        Err(Error::ShapeMismatch { node, .. }) => assert!(node.contains("matmul")),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        g.evaluate(&Bindings::new().with("a", &ta)),
        Err(Error::Unbound(n)) if n == "b"
    ));

    let mut g = Graph::new();
    let a = g.input("a");
    let l = g.log_clamped(a, -1.0, 1.0);
    g.set_output("l", l);
    let z = Tensor::scalar(-0.5);
    assert!(matches!(
        g.evaluate(&Bindings::new().with("a", &z)),
        Err(Error::NonFinite { node }) if node.contains("log")
    ));

    let mut g = Graph::new();
    let a = g.param("a");
    let s = g.sigmoid(a);
    g.set_output("s", s);
    let v = Tensor::zeros(&[2]);
    assert!(matches!(
        g.gradient(&Bindings::new().with("a", &v), "s"),
        Err(Error::NotScalar(_))
    ));
}

#[test]
fn repeated_evaluation_is_bitwise_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_t(&[5, 7], &mut rng);
    let mut g = Graph::new();
    let px = g.param("x");
    let c = g.cosine_sim(px);
    let s = g.softmax_rows(c);
    let f = g.frobenius_sq(s);
    g.set_output("f", f);
    let b = Bindings::new().with("x", &x);
    let one = g.gradient(&b, "f").unwrap();
    let two = g.gradient(&b, "f").unwrap();
    assert_eq!(one.value.to_bits(), two.value.to_bits());
    assert_eq!(one.grads["x"], two.grads["x"]);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn matrix() -> impl Strategy<Value = Tensor> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-5.0f64..5.0, r * c)
                .prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
        })
    }

    fn unary(x: &Tensor, build: impl Fn(&mut Graph, NodeId) -> NodeId) -> Tensor {
        let mut g = Graph::new();
        let px = g.input("x");
        let y = build(&mut g, px);
        g.set_output("y", y);
        g.evaluate_outputs(&Bindings::new().with("x", x)).unwrap()["y"].clone()
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(x in matrix()) {
            let y = unary(&x, |g, n| g.softmax_rows(n));
            for i in 0..y.rows() {
                prop_assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn layer_norm_standardizes(x in matrix()) {
            prop_assume!(x.cols() >= 2);
            let y = unary(&x, |g, n| g.layer_norm(n, 1e-5));
            for i in 0..y.rows() {
                let r = x.row(i);
                let m = r.iter().sum::<f64>() / r.len() as f64;
                let v = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / r.len() as f64;
                let row = y.row(i);
                let ym = row.iter().sum::<f64>() / row.len() as f64;
                let yv = row.iter().map(|a| (a - ym) * (a - ym)).sum::<f64>() / row.len() as f64;
                prop_assert!(ym.abs() < 1e-10);
                // eps shrinks the variance by v / (v + eps)
                prop_assert!((yv - v / (v + 1e-5)).abs() < 1e-8);
                if v > 1e-2 {
                    prop_assert!((yv - 1.0).abs() < 1e-3);
                }
            }
        }

        #[test]
        fn cosine_invariant_to_positive_row_scaling(x in matrix(), s in proptest::collection::vec(0.01f64..100.0, 6)) {
            let mut scaled = x.clone();
            for i in 0..scaled.rows() {
                let f = s[i];
                scaled.row_mut(i).iter_mut().for_each(|v| *v *= f);
            }
            let a = cosine_similarity_matrix(&x).unwrap().matrix;
            let b = cosine_similarity_matrix(&scaled).unwrap().matrix;
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
            for i in 0..a.rows() {
                prop_assert_eq!(a.get2(i, i), 1.0);
                for j in 0..a.rows() {
                    prop_assert_eq!(a.get2(i, j), a.get2(j, i));
                    prop_assert!(a.get2(i, j).abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn random_primitives_pass_gradient_checks() {
        for (seed, (rows, cols)) in [(2, 3), (4, 2), (3, 3), (2, 4), (4, 4)].into_iter().enumerate() {
            let seed = seed as u64;
            check_unary(&[rows, cols], 100 + seed, |g, x| {
                let ln = g.layer_norm(x, 1e-5);
                let sm = g.softmax_rows(ln);
                let ge = g.gelu(sm);
                let c = g.cosine_sim(x);
                let cc = g.matmul(c, ge);
                g.sigmoid(cc)
            });
        }
    }
}
