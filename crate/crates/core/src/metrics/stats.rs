use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub statistic: f64,
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
    pub paired: bool,
    /// Zero variance: `p` is 1 when the means agree and 0 otherwise.
    pub degenerate: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn two_sided(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

/// Two-sided t-test. Paired mode tests the per-index differences; unpaired
/// mode uses Welch's statistic and degrees of freedom.
pub fn t_test(a: &[f64], b: &[f64], paired: bool) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("t-test needs at least 2 runs per side".into()));
    }
    if paired && a.len() != b.len() {
        return Err(Error::InvalidArgument("paired t-test needs equal lengths".into()));
    }
    let degenerate = |diff: f64| TTest {
        statistic: if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY },
        df: f64::NAN,
        p_value: if diff == 0.0 { 1.0 } else { 0.0 },
        paired,
        degenerate: true,
    };
    if paired {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let (m, v) = mean_var(&d);
        if v == 0.0 {
            return Ok(degenerate(m));
        }
        let n = d.len() as f64;
        let t = m / (v / n).sqrt();
        let df = n - 1.0;
        Ok(TTest {
            statistic: t,
            df,
            p_value: two_sided(t, df),
            paired,
            degenerate: false,
        })
    } else {
        let (ma, va) = mean_var(a);
        let (mb, vb) = mean_var(b);
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let (sa, sb) = (va / na, vb / nb);
        if sa + sb == 0.0 {
            return Ok(degenerate(ma - mb));
        }
        let t = (ma - mb) / (sa + sb).sqrt();
        let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
        Ok(TTest {
            statistic: t,
            df,
            p_value: two_sided(t, df),
            paired,
            degenerate: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolmResult {
    /// In input order.
    pub adjusted: Vec<f64>,
    pub rejected: Vec<bool>,
}

/// Holm's step-down correction. Adjusted values are in input order.
pub fn holm_bonferroni(p_values: &[f64], alpha: f64) -> Result<HolmResult> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut rejected = vec![false; m];
    let mut running: f64 = 0.0;
    let mut still_rejecting = true;
    for (rank, &i) in order.iter().enumerate() {
        let factor = (m - rank) as f64;
        running = running.max((factor * p_values[i]).min(1.0));
        adjusted[i] = running;
        still_rejecting &= running <= alpha;
        rejected[i] = still_rejecting;
    }
    Ok(HolmResult { adjusted, rejected })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples() {
        let r = t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], true).unwrap();
        assert_eq!(r.p_value, 1.0);
        let r = t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], false).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn constant_nonzero_differences_flag_degenerate() {
        let r = t_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], true).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 0.0);
    }

    #[test]
    fn holm_cases() {
        let r = holm_bonferroni(&[0.01, 0.04], 0.05).unwrap();
        assert!((r.adjusted[0] - 0.02).abs() < 1e-15);
        assert!((r.adjusted[1] - 0.04).abs() < 1e-15);
        assert_eq!(r.rejected, vec![true, true]);

        let r = holm_bonferroni(&[0.3], 0.05).unwrap();
        assert_eq!(r.adjusted, vec![0.3]);

        let r = holm_bonferroni(&[0.03, 0.03, 0.03], 0.05).unwrap();
        for a in &r.adjusted {
            assert!((a - 0.09).abs() < 1e-15);
        }
        assert_eq!(r.rejected, vec![false; 3]);

        assert!(holm_bonferroni(&[1.2], 0.05).is_err());
    }

    #[test]
    fn holm_maps_back_to_input_order() {
        let r = holm_bonferroni(&[0.04, 0.001, 0.5], 0.05).unwrap();
        assert!((r.adjusted[1] - 0.003).abs() < 1e-15);
        assert!((r.adjusted[0] - 0.08).abs() < 1e-15);
        assert_eq!(r.adjusted[2], 0.5);
        assert_eq!(r.rejected, vec![false, true, false]);
    }
}
