use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: f64,
    pub auc: f64,
    pub hamming: f64,
    /// `None` for classes without positives.
    pub per_class_ap: Vec<Option<f64>>,
    /// `None` for classes lacking either positives or negatives.
    pub per_class_auc: Vec<Option<f64>>,
    pub excluded_ap_classes: usize,
    pub excluded_auc_classes: usize,
}

fn check_pair(scores: &Tensor, labels: &Tensor) -> Result<(usize, usize)> {
    let (n, c) = scores
        .dims2()
        .ok_or_else(|| Error::InvalidArgument("scores must be n×C".into()))?;
    if labels.shape() != scores.shape() {
        return Err(Error::InvalidArgument(format!(
            "scores {:?} vs labels {:?}",
            scores.shape(),
            labels.shape()
        )));
    }
    if scores.data().iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("non-finite score".into()));
    }
    Ok((n, c))
}

fn column(t: &Tensor, j: usize) -> Vec<f64> {
    let c = t.cols();
    (0..t.rows()).map(|i| t.data()[i * c + j]).collect()
}

/// Non-interpolated average precision of one ranking. Ties in score keep
/// original index order. `None` if there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(ap / positives as f64)
}

/// Mann–Whitney AUC with half credit for ties. `None` unless both classes
/// are present.
pub fn binary_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

fn bool_column(labels: &Tensor, j: usize) -> Vec<bool> {
    column(labels, j).into_iter().map(|v| v > 0.5).collect()
}

fn per_class_ap(scores: &Tensor, labels: &Tensor) -> Result<Vec<Option<f64>>> {
    let (_, c) = check_pair(scores, labels)?;
    Ok((0..c)
        .map(|j| average_precision(&column(scores, j), &bool_column(labels, j)))
        .collect())
}

fn per_class_auc(scores: &Tensor, labels: &Tensor) -> Result<Vec<Option<f64>>> {
    let (_, c) = check_pair(scores, labels)?;
    Ok((0..c)
        .map(|j| binary_auc(&column(scores, j), &bool_column(labels, j)))
        .collect())
}

fn macro_mean(values: &[Option<f64>], what: &str) -> Result<f64> {
    let kept: Vec<f64> = values.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::Validation(format!("no class qualifies for {what}")));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Macro mean of per-class AP over classes with at least one positive.
pub fn mean_average_precision(scores: &Tensor, labels: &Tensor) -> Result<f64> {
    macro_mean(&per_class_ap(scores, labels)?, "mAP")
}

/// Macro mean of per-class AUC over classes with both outcomes present.
pub fn macro_auc(scores: &Tensor, labels: &Tensor) -> Result<f64> {
    macro_mean(&per_class_auc(scores, labels)?, "AUC")
}

/// Fraction of cells where `score >= threshold` disagrees with the label.
pub fn hamming_distance(scores: &Tensor, labels: &Tensor, threshold: f64) -> Result<f64> {
    check_pair(scores, labels)?;
    let wrong = scores
        .data()
        .iter()
        .zip(labels.data())
        .filter(|(&s, &l)| (s >= threshold) != (l > 0.5))
        .count();
    Ok(wrong as f64 / scores.len() as f64)
}

pub fn evaluate(scores: &Tensor, labels: &Tensor, threshold: f64) -> Result<EvalResult> {
    let ap = per_class_ap(scores, labels)?;
    let auc = per_class_auc(scores, labels)?;
    let excluded_ap_classes = ap.iter().filter(|v| v.is_none()).count();
    let excluded_auc_classes = auc.iter().filter(|v| v.is_none()).count();
    if excluded_ap_classes + excluded_auc_classes > 0 {
        log::info!(
            "excluded {excluded_ap_classes} classes from mAP and {excluded_auc_classes} from AUC"
        );
    }
    let map = macro_mean(&ap, "mAP")?;
    // A split with positives everywhere has no AUC; report NaN rather than fail.
    let auc_mean = macro_mean(&auc, "AUC").unwrap_or(f64::NAN);
    Ok(EvalResult {
        map,
        auc: auc_mean,
        hamming: hamming_distance(scores, labels, threshold)?,
        per_class_ap: ap,
        per_class_auc: auc,
        excluded_ap_classes,
        excluded_auc_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(s: &[f64]) -> Tensor {
        Tensor::new(vec![s.len(), 1], s.to_vec()).unwrap()
    }

    #[test]
    fn ap_hand_case() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_ranking() {
        let s = col(&[0.9, 0.8, 0.3, 0.1]);
        let l = col(&[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(mean_average_precision(&s, &l).unwrap(), 1.0);
        assert_eq!(macro_auc(&s, &l).unwrap(), 1.0);
        assert_eq!(hamming_distance(&s, &l, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn reversed_ranking() {
        let s = col(&[0.1, 0.3, 0.8, 0.9]);
        let l = col(&[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(macro_auc(&s, &l).unwrap(), 0.0);
        assert!(mean_average_precision(&s, &l).unwrap() < 1.0);
        assert_eq!(hamming_distance(&s, &l, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_give_half_auc() {
        let s = col(&[0.4; 5]);
        let l = col(&[1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(macro_auc(&s, &l).unwrap(), 0.5);
    }

    #[test]
    fn half_flipped_hamming() {
        let s = col(&[0.9, 0.9, 0.1, 0.1]);
        let l = col(&[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(hamming_distance(&s, &l, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn classes_without_positives_are_excluded() {
        let s = Tensor::from_rows(&[vec![0.9, 0.2], vec![0.1, 0.4]]).unwrap();
        let l = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let r = evaluate(&s, &l, 0.5).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.excluded_ap_classes, 1);
        assert_eq!(r.per_class_ap[1], None);
        let none = Tensor::zeros(&[2, 2]);
        assert!(mean_average_precision(&s, &none).is_err());
    }
}
