use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, Tensor};

/// Pairwise cosine similarities of the rows of a matrix.
#[derive(Debug, Clone)]
pub struct CosineMatrix {
    pub matrix: Tensor,
    /// Rows with zero norm. They score 0 against every other row and 1 on
    /// their own diagonal.
    pub degenerate_rows: usize,
}

pub fn cosine_similarity_matrix(z: &Tensor) -> Result<CosineMatrix> {
    let (b, d) = z
        .dims2()
        .ok_or_else(|| Error::shape("cosine-sim-matrix", format!("{:?}", z.shape())))?;
    let (unit, norms) = unit_rows(z.data(), b, d);
    let mut out = vec![0.0; b * b];
    let degenerate_rows = norms.iter().filter(|&&n| n == 0.0).count();
    for i in 0..b {
        out[i * b + i] = 1.0;
        if norms[i] == 0.0 {
            continue;
        }
        for j in (i + 1)..b {
            if norms[j] == 0.0 {
                continue;
            }
            let s = dot(&unit[i * d..(i + 1) * d], &unit[j * d..(j + 1) * d]).clamp(-1.0, 1.0);
            out[i * b + j] = s;
            out[j * b + i] = s;
        }
    }
    Ok(CosineMatrix {
        matrix: Tensor::new(vec![b, b], out)?,
        degenerate_rows,
    })
}

/// Row-normalized copy of `data` plus the original norms. Rows whose norm
/// underflows are reported as norm 0 and left as zeros.
pub(crate) fn unit_rows(data: &[f64], b: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut unit = vec![0.0; b * d];
    let mut norms = vec![0.0; b];
    for i in 0..b {
        let row = &data[i * d..(i + 1) * d];
        let n = l2_norm(row);
        if n < f64::MIN_POSITIVE || !n.is_finite() {
            continue;
        }
        norms[i] = n;
        for (u, &x) in unit[i * d..(i + 1) * d].iter_mut().zip(row) {
            *u = x / n;
        }
    }
    (unit, norms)
}
