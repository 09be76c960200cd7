use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    /// Number of applied steps.
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient had a non-finite entry; nothing changed.
    SkippedNonFinite,
}

/// Bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<StepOutcome> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(name.clone(), format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        log::warn!("skipping optimizer step: non-finite gradient for `{name}`");
        return Ok(StepOutcome::SkippedNonFinite);
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pi, mi), vi), &gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(StepOutcome::Applied)
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::frobenius_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: Vec<f64>) -> BTreeMap<String, Tensor> {
        let n = v.len();
        BTreeMap::from([(name.to_string(), Tensor::new(vec![n], v).unwrap())])
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = one("w", vec![1.0, -2.0]);
        let mut s = AdamState::default();
        let cfg = AdamConfig::new(0.1);
        adam_step(&mut p, &one("w", vec![1.0, 1.0]), &mut s, &cfg).unwrap();
        let before = p.clone();
        let m_before = s.m["w"].clone();
        adam_step(&mut p, &one("w", vec![0.0, 0.0]), &mut s, &cfg).unwrap();
        // Parameters still move on momentum; moments decay by beta.
        for (a, b) in s.m["w"].data().iter().zip(m_before.data()) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
        let mut q = before.clone();
        let mut fresh = AdamState::default();
        adam_step(&mut q, &one("w", vec![0.0, 0.0]), &mut fresh, &cfg).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = one("w", vec![0.0, 0.0, 0.0]);
        let mut s = AdamState::default();
        let mut cfg = AdamConfig::new(0.01);
        cfg.eps = 0.0;
        adam_step(&mut p, &one("w", vec![3.0, -0.5, 1e-3]), &mut s, &cfg).unwrap();
        assert_eq!(p["w"].data(), &[-0.01, 0.01, -0.01]);
    }

    #[test]
    fn proportional_gradients_take_equal_first_steps() {
        let mut p = BTreeMap::from([
            ("a".to_string(), Tensor::new(vec![3], vec![0.0; 3]).unwrap()),
            ("b".to_string(), Tensor::new(vec![3], vec![0.0; 3]).unwrap()),
        ]);
        let g = BTreeMap::from([
            ("a".to_string(), Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()),
            ("b".to_string(), Tensor::new(vec![3], vec![40.0, -80.0, 20.0]).unwrap()),
        ]);
        adam_step(&mut p, &g, &mut AdamState::default(), &AdamConfig::new(0.01)).unwrap();
        assert!(p["a"].max_abs_diff(&p["b"]) < 1e-9);
        assert!(p["a"].data().iter().all(|v| (v.abs() - 0.01).abs() < 1e-6));
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut p = one("w", vec![1.0]);
        let mut s = AdamState::default();
        let out = adam_step(&mut p, &one("w", vec![f64::NAN]), &mut s, &AdamConfig::new(0.1)).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(s.t, 0);
        assert_eq!(p["w"].data(), &[1.0]);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = one("w", vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["w"].frobenius_sq() - 1.0).abs() < 1e-12);
    }
}
