use std::collections::BTreeMap;

use super::{Bindings, Graph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

impl Graph {
    /// Compares reverse-mode gradients with central differences on every
    /// coordinate of every trainable leaf. The error per coordinate is
    /// `|analytic - numeric| / max(1, |numeric|)`.
    pub fn grad_check(
        &self,
        bindings: &Bindings<'_>,
        scalar_output: &str,
        h: f64,
        tol: f64,
    ) -> Result<GradCheckReport> {
        if !(h > 0.0 && h <= 1e-3) {
            return Err(Error::InvalidArgument(format!("step {h} outside (0, 1e-3]")));
        }
        let out = self
            .output(scalar_output)
            .ok_or_else(|| Error::UnknownOutput(scalar_output.to_string()))?;
        let analytic = self.gradient(bindings, scalar_output)?.grads;

        let mut per_param = BTreeMap::new();
        let mut overall: f64 = 0.0;
        for (name, grad) in &analytic {
            let base = bindings
                .get(name)
                .ok_or_else(|| Error::Unbound(name.clone()))?;
            let mut probe: Tensor = base.clone();
            let mut worst = ParamCheck {
                max_rel_error: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for k in 0..probe.len() {
                let orig = probe.data()[k];
                probe.data_mut()[k] = orig + h;
                let plus = self.eval_scalar(bindings, name, &probe, out)?;
                probe.data_mut()[k] = orig - h;
                let minus = self.eval_scalar(bindings, name, &probe, out)?;
                probe.data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = grad.data()[k];
                let err = (a - numeric).abs() / numeric.abs().max(1.0);
                if err > worst.max_rel_error || k == 0 {
                    worst = ParamCheck {
                        max_rel_error: err,
                        worst_index: k,
                        analytic: a,
                        numeric,
                    };
                }
            }
            overall = overall.max(worst.max_rel_error);
            per_param.insert(name.clone(), worst);
        }
        Ok(GradCheckReport {
            per_param,
            max_rel_error: overall,
            tol,
        })
    }

    fn eval_scalar(
        &self,
        bindings: &Bindings<'_>,
        name: &str,
        replacement: &Tensor,
        out: super::NodeId,
    ) -> Result<f64> {
        let mut b = bindings.clone();
        b.bind(name, replacement);
        let ev = self.evaluate(&b)?;
        Ok(ev.value(out).data()[0])
    }
}
