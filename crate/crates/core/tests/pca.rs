use musedec::neuro::{pca_reduce, PcaProjection};
use musedec::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cyclic Jacobi eigen decomposition of a symmetric matrix.
fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| a[i][i]).collect();
    let vecs = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
    (vals, vecs)
}

fn random_rows(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f64> = (0..d).map(|j| 3.0 / (j + 1) as f64).collect();
    let data = (0..n * d).map(|k| rng.gen_range(-1.0..1.0) * scales[k % d] + k as f64 % 3.0 * 0.1).collect();
    Tensor::new(vec![n, d], data).unwrap()
}

#[test]
fn axes_and_variances_match_covariance_eigenpairs() {
    let (n, d, k) = (40, 6, 4);
    let x = random_rows(n, d, 5);
    let p = PcaProjection::fit(&x, k).unwrap();

    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.get2(i, j)).sum::<f64>() / n as f64).collect();
    let cov: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            (0..d)
                .map(|b| (0..n).map(|i| (x.get2(i, a) - mean[a]) * (x.get2(i, b) - mean[b])).sum::<f64>() / (n - 1) as f64)
                .collect()
        })
        .collect();
    let (vals, vecs) = jacobi(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));

    for (r, &e) in order.iter().take(k).enumerate() {
        assert!((p.variances[r] - vals[e]).abs() < 1e-9 * vals[e].max(1.0));
        let dot: f64 = p.components.row(r).iter().zip(&vecs[e]).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-8, "axis {r}: |dot| = {}", dot.abs());
    }
    for (a, b) in p.mean.iter().zip(&mean) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn projections_are_fitted_per_block_on_training_rows() {
    let blocks = vec![
        vec![random_rows(20, 5, 1), random_rows(20, 7, 2)],
        vec![random_rows(16, 5, 3), random_rows(16, 7, 4)],
    ];
    let train = vec![(0..12).collect::<Vec<_>>(), (4..14).collect()];
    let red = pca_reduce(&blocks, &train, 3).unwrap();
    for s in 0..2 {
        for r in 0..2 {
            let rows: Vec<f64> = train[s].iter().flat_map(|&i| blocks[s][r].row(i).to_vec()).collect();
            let fit_rows = Tensor::new(vec![train[s].len(), blocks[s][r].cols()], rows).unwrap();
            let own = PcaProjection::fit(&fit_rows, 3).unwrap();
            assert_eq!(red.projections[s][r], own);
            assert_eq!(red.reduced[s][r], own.apply(&blocks[s][r]).unwrap());
            assert_eq!(red.reduced[s][r].shape(), &[blocks[s][r].rows(), 3]);
        }
    }
}
