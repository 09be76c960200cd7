use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Centering mean and principal axes fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// `k × d`, rows are unit principal axes in decreasing variance order.
    /// Axes beyond the data rank are zero rows.
    pub components: Tensor,
    /// Training variance along each axis.
    pub variances: Vec<f64>,
    pub rank_deficient: bool,
}

impl PcaProjection {
    pub fn fit(rows: &Tensor, target_dim: usize) -> Result<Self> {
        let (n, d) = rows
            .dims2()
            .ok_or_else(|| Error::InvalidArgument("PCA input must be n×d".into()))?;
        if target_dim == 0 || target_dim > n.min(d) {
            return Err(Error::InvalidArgument(format!(
                "target dimension {target_dim} exceeds min(n={n}, d={d})"
            )));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(rows.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| rows.get2(i, j) - mean[j]);
        let svd = centered.svd(false, true);
        let v_t = svd.v_t.expect("requested V^T");
        let sv = &svd.singular_values;
        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));

        let smax = order.first().map_or(0.0, |&i| sv[i]);
        let tol = smax * 1e-10 * (n.max(d) as f64);
        let mut comps = Tensor::zeros(&[target_dim, d]);
        let mut variances = vec![0.0; target_dim];
        let mut rank_deficient = false;
        let denom = (n.max(2) - 1) as f64;
        for (k, &i) in order.iter().take(target_dim).enumerate() {
            if sv[i] <= tol || smax == 0.0 {
                rank_deficient = true;
                continue;
            }
            let axis: Vec<f64> = (0..d).map(|j| v_t[(i, j)]).collect();
            // Fix the sign so the largest-magnitude coordinate is positive.
            let pivot = axis
                .iter()
                .copied()
                .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for (c, a) in comps.row_mut(k).iter_mut().zip(axis) {
                *c = sign * a;
            }
            variances[k] = sv[i] * sv[i] / denom;
        }
        if rank_deficient {
            log::warn!("PCA: fewer than {target_dim} nonzero singular values; padded with zero axes");
        }
        Ok(Self {
            mean,
            components: comps,
            variances,
            rank_deficient,
        })
    }

    pub fn target_dim(&self) -> usize {
        self.components.rows()
    }

    /// Projects rows onto the fitted axes.
    pub fn apply(&self, rows: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if rows.ndim() != 2 || rows.cols() != d {
            return Err(Error::InvalidArgument(format!(
                "PCA fitted on {d} columns, got {:?}",
                rows.shape()
            )));
        }
        let mut centered = rows.clone();
        for i in 0..centered.rows() {
            for (v, m) in centered.row_mut(i).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        centered.matmul(&self.components.transpose2())
    }

    /// Maps projected rows back to the original space.
    pub fn reconstruct(&self, projected: &Tensor) -> Result<Tensor> {
        let mut out = projected.matmul(&self.components)?;
        for i in 0..out.rows() {
            for (v, m) in out.row_mut(i).iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct PcaReduction {
    /// `[subject][roi]`, all rows of the block projected.
    pub reduced: Vec<Vec<Tensor>>,
    pub projections: Vec<Vec<PcaProjection>>,
}

/// Fits one projection per (subject, ROI) on that subject's training rows
/// and applies it to all of the subject's rows.
pub fn pca_reduce(blocks: &[Vec<Tensor>], train_rows: &[Vec<usize>], target_dim: usize) -> Result<PcaReduction> {
    if blocks.len() != train_rows.len() {
        return Err(Error::InvalidArgument(format!(
            "{} subjects but {} training index sets",
            blocks.len(),
            train_rows.len()
        )));
    }
    let limit = blocks
        .iter()
        .zip(train_rows)
        .flat_map(|(rois, tr)| rois.iter().map(move |b| tr.len().min(b.cols())))
        .min()
        .unwrap_or(0);
    if target_dim > limit {
        return Err(Error::InvalidArgument(format!(
            "target dimension {target_dim} exceeds the smallest block limit {limit}"
        )));
    }
    let mut reduced = Vec::with_capacity(blocks.len());
    let mut projections = Vec::with_capacity(blocks.len());
    for (rois, tr) in blocks.iter().zip(train_rows) {
        let mut r_out = Vec::with_capacity(rois.len());
        let mut p_out = Vec::with_capacity(rois.len());
        for block in rois {
            let p = PcaProjection::fit(&block.select_rows(tr), target_dim)?;
            r_out.push(p.apply(block)?);
            p_out.push(p);
        }
        reduced.push(r_out);
        projections.push(p_out);
    }
    Ok(PcaReduction { reduced, projections })
}

/// Appends zero columns up to `target_dim`.
pub fn zero_pad(block: &Tensor, target_dim: usize) -> Result<Tensor> {
    let (n, d) = block
        .dims2()
        .ok_or_else(|| Error::InvalidArgument("zero_pad expects n×d".into()))?;
    if d > target_dim {
        return Err(Error::InvalidArgument(format!(
            "block has {d} columns, more than target {target_dim}"
        )));
    }
    let mut out = vec![0.0; n * target_dim];
    for i in 0..n {
        out[i * target_dim..i * target_dim + d].copy_from_slice(block.row(i));
    }
    Tensor::new(vec![n, target_dim], out)
}

/// Stacks per-ROI blocks (`n × d_in` each, in ROI order) into `n × M × d_in`.
pub fn patchify_rois(blocks: &[Tensor]) -> Result<Tensor> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Validation("no ROI blocks".into()))?;
    let (n, d) = first
        .dims2()
        .ok_or_else(|| Error::Validation("ROI block must be n×d".into()))?;
    if blocks.iter().any(|b| b.shape() != [n, d]) {
        return Err(Error::Validation(
            "ROI blocks must share row count and reduced dimension".into(),
        ));
    }
    let m = blocks.len();
    let mut out = Vec::with_capacity(n * m * d);
    for i in 0..n {
        for b in blocks {
            out.extend_from_slice(b.row(i));
        }
    }
    Tensor::new(vec![n, m, d], out)
}

/// Patchifies several subjects whose ROI blocks are keyed by name; every
/// subject must carry the same ROI names, and the first subject's order is
/// used for all.
pub fn patchify_subjects(subjects: &[Vec<(String, Tensor)>]) -> Result<(Vec<String>, Vec<Tensor>)> {
    let order: Vec<String> = subjects
        .first()
        .ok_or_else(|| Error::Validation("no subjects".into()))?
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let mut out = Vec::with_capacity(subjects.len());
    for (si, rois) in subjects.iter().enumerate() {
        let mut names: Vec<&str> = rois.iter().map(|(n, _)| n.as_str()).collect();
        let mut expect: Vec<&str> = order.iter().map(String::as_str).collect();
        names.sort_unstable();
        expect.sort_unstable();
        if names != expect {
            return Err(Error::Validation(format!(
                "subject {si}: inconsistent ROI set {names:?} vs {expect:?}"
            )));
        }
        let blocks: Vec<Tensor> = order
            .iter()
            .map(|name| rois.iter().find(|(n, _)| n == name).expect("checked").1.clone())
            .collect();
        out.push(patchify_rois(&blocks)?);
    }
    Ok((order, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_pad_cases() {
        let b = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let p = zero_pad(&b, 4).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(p.frobenius_sq(), b.frobenius_sq());
        assert_eq!(zero_pad(&b, 2).unwrap(), b);
        assert!(zero_pad(&b, 1).is_err());
    }

    #[test]
    fn patchify_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let blocks: Vec<Tensor> = (0..10).map(|_| Tensor::randn(&[5, 268], 1.0, &mut rng)).collect();
        let p = patchify_rois(&blocks).unwrap();
        assert_eq!(p.shape(), &[5, 10, 268]);
        assert_eq!(&p.data()[268 * 3..268 * 4], blocks[3].row(0));
        assert_eq!(patchify_rois(&blocks[..1]).unwrap().shape(), &[5, 1, 268]);
    }

    #[test]
    fn patchify_permutes_consistently() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mk = |rng: &mut ChaCha8Rng| -> Vec<(String, Tensor)> {
            ["V1", "V2", "MT"]
                .iter()
                .map(|n| (n.to_string(), Tensor::randn(&[3, 4], 1.0, rng)))
                .collect()
        };
        let a = mk(&mut rng);
        let mut b = mk(&mut rng);
        b.reverse();
        let (order, out) = patchify_subjects(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(order, vec!["V1", "V2", "MT"]);
        // Subject b's V1 block must land in patch 0 even though it was listed last.
        assert_eq!(&out[1].data()[0..4], b[2].1.row(0));

        let mut c = mk(&mut rng);
        c[0].0 = "hV4".into();
        assert!(patchify_subjects(&[a, c]).is_err());
    }

    #[test]
    fn affine_subspace_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coeffs = Tensor::randn(&[40, 3], 1.0, &mut rng);
        let basis = Tensor::randn(&[3, 9], 1.0, &mut rng);
        let mut x = coeffs.matmul(&basis).unwrap();
        for i in 0..40 {
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                *v += j as f64;
            }
        }
        let p = PcaProjection::fit(&x, 3).unwrap();
        let back = p.reconstruct(&p.apply(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-9);
        assert!(!p.rank_deficient);
    }

    #[test]
    fn rank_deficiency_pads_with_zero_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coeffs = Tensor::randn(&[20, 2], 1.0, &mut rng);
        let basis = Tensor::randn(&[2, 6], 1.0, &mut rng);
        let x = coeffs.matmul(&basis).unwrap();
        let p = PcaProjection::fit(&x, 4).unwrap();
        assert!(p.rank_deficient);
        assert!(p.components.row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_rank_target_is_a_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[300, 268], 1.0, &mut rng);
        let p = PcaProjection::fit(&x, 268).unwrap();
        let back = p.reconstruct(&p.apply(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-8);
    }

    #[test]
    fn target_too_large() {
        let x = Tensor::zeros(&[5, 3]);
        assert!(PcaProjection::fit(&x, 4).is_err());
        let blocks = vec![vec![Tensor::zeros(&[10, 6])]];
        assert!(pca_reduce(&blocks, &[vec![0, 1, 2]], 4).is_err());
    }
}
