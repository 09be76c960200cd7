//! Loss terms: similarity alignment, orthogonality, multi-label
//! cross-entropy, the feature-mapping alternative and their weighted total.

use serde::{Deserialize, Serialize};

use crate::diff::{cosine_similarity_matrix, Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

/// Probability clamp applied before every log.
pub const PROB_EPS: f64 = 1e-7;

pub const TARGET_RSM_LLV: &str = "target.rsm_llv";
pub const TARGET_RSM_HLV: &str = "target.rsm_hlv";
pub const TARGET_LABELS: &str = "target.labels";
pub const TARGET_F_LLV: &str = "target.f_llv";
pub const TARGET_F_HLV: &str = "target.f_hlv";
pub const CONST_ONES: &str = "const.ones";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ortho: f64,
    pub llv: f64,
    pub hlv: f64,
    #[serde(default = "default_map")]
    pub map: f64,
}

fn default_map() -> f64 {
    1e-4
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::nsd()
    }
}

impl LossWeights {
    pub fn new(ortho: f64, llv: f64, hlv: f64) -> Self {
        Self {
            ortho,
            llv,
            hlv,
            map: default_map(),
        }
    }

    /// Volume-input regime.
    pub fn hcp() -> Self {
        Self::new(0.001, 0.1, 0.001)
    }

    /// ROI-input regime.
    pub fn nsd() -> Self {
        Self::new(0.001, 0.0001, 0.001)
    }

    /// Single-subject guided transformer.
    pub fn clip_ss_vit() -> Self {
        Self::new(0.0001, 0.0001, 0.0001)
    }

    pub fn zero() -> Self {
        Self {
            ortho: 0.0,
            llv: 0.0,
            hlv: 0.0,
            map: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ortho", self.ortho), ("llv", self.llv), ("hlv", self.hlv), ("map", self.map)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

/// How token representations are tied to stimulus features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Guidance {
    /// Match cosine similarity matrices.
    #[default]
    Rsa,
    /// Regress features from representations with linear maps.
    Mapping,
}

/// Unweighted loss parts of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub classification: f64,
    pub ortho: Option<f64>,
    pub llv: Option<f64>,
    pub hlv: Option<f64>,
    pub map: Option<f64>,
}

/// `‖M − cos(Z)‖²_F / B²`.
pub fn rsa_loss(target: &Tensor, z: &Tensor) -> Result<f64> {
    let b = z.rows();
    if b < 2 {
        return Err(Error::InvalidArgument(format!("batch of {b} is too small for RSA")));
    }
    if target.shape() != [b, b] {
        return Err(Error::shape("rsa", format!("target {:?} for batch {b}", target.shape())));
    }
    let c = cosine_similarity_matrix(z)?.matrix;
    let s: f64 = target.data().iter().zip(c.data()).map(|(m, c)| (m - c).powi(2)).sum();
    Ok(s / (b * b) as f64)
}

/// `‖Z_llv · Z_hlvᵀ‖²_F / B²`.
pub fn orthogonality_loss(z_llv: &Tensor, z_hlv: &Tensor) -> Result<f64> {
    if z_llv.shape() != z_hlv.shape() || z_llv.ndim() != 2 {
        return Err(Error::shape("orthogonality", format!("{:?} vs {:?}", z_llv.shape(), z_hlv.shape())));
    }
    let b = z_llv.rows();
    Ok(z_llv.matmul(&z_hlv.transpose2())?.frobenius_sq() / (b * b) as f64)
}

/// Mean over samples and classes of the clamped binary cross-entropy.
pub fn bce_loss(probs: &Tensor, labels: &Tensor) -> Result<f64> {
    if probs.shape() != labels.shape() {
        return Err(Error::shape("bce", format!("{:?} vs {:?}", probs.shape(), labels.shape())));
    }
    let s: f64 = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / probs.len() as f64)
}

/// Mean over the batch of `‖Z_llv[i]·P_l − f_llv[i]‖² + ‖Z_hlv[i]·P_h − f_hlv[i]‖²`.
pub fn mapping_loss(z_llv: &Tensor, z_hlv: &Tensor, f_llv: &Tensor, f_hlv: &Tensor, p_l: &Tensor, p_h: &Tensor) -> Result<f64> {
    let b = z_llv.rows();
    let one = |z: &Tensor, p: &Tensor, f: &Tensor| -> Result<f64> {
        let pred = z
            .matmul(p)
            .map_err(|_| Error::shape("mapping", format!("{:?}·{:?}", z.shape(), p.shape())))?;
        if pred.shape() != f.shape() {
            return Err(Error::shape("mapping", format!("prediction {:?} vs target {:?}", pred.shape(), f.shape())));
        }
        Ok(pred.data().iter().zip(f.data()).map(|(a, b)| (a - b).powi(2)).sum())
    };
    Ok((one(z_llv, p_l, f_llv)? + one(z_hlv, p_h, f_hlv)?) / b as f64)
}

/// `L_c + λ⊥·L⊥ + λ_llv·L_llv + λ_hlv·L_hlv + λ_map·L_map` over the present parts.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.classification
        + parts.ortho.map_or(0.0, |v| w.ortho * v)
        + parts.llv.map_or(0.0, |v| w.llv * v)
        + parts.hlv.map_or(0.0, |v| w.hlv * v)
        + parts.map.map_or(0.0, |v| w.map * v)
}

/// Loss nodes added on top of a model graph. The scalar output `loss`
/// holds the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub classification: NodeId,
    pub ortho: Option<NodeId>,
    pub llv: Option<NodeId>,
    pub hlv: Option<NodeId>,
    pub map: Option<NodeId>,
}

impl LossNodes {
    pub fn parts(&self, value: impl Fn(NodeId) -> f64) -> LossParts {
        LossParts {
            classification: value(self.classification),
            ortho: self.ortho.map(&value),
            llv: self.llv.map(&value),
            hlv: self.hlv.map(&value),
            map: self.map.map(&value),
        }
    }
}

fn rsa_node(g: &mut Graph, target: &str, z: NodeId, b: usize) -> NodeId {
    let m = g.input(target);
    let c = g.cosine_sim(z);
    let d = g.sub(m, c);
    let f = g.frobenius_sq(d);
    g.scale(f, 1.0 / (b * b) as f64)
}

fn bce_node(g: &mut Graph, probs: NodeId) -> NodeId {
    let y = g.input(TARGET_LABELS);
    let ones = g.input(CONST_ONES);
    let lp = g.log_clamped(probs, PROB_EPS, 1.0 - PROB_EPS);
    let neg_p = g.scale(probs, -1.0);
    let q = g.add(neg_p, ones);
    let lq = g.log_clamped(q, PROB_EPS, 1.0 - PROB_EPS);
    let neg_y = g.scale(y, -1.0);
    let not_y = g.add(neg_y, ones);
    let a = g.mul(lp, y);
    let b = g.mul(lq, not_y);
    let s = g.add(a, b);
    let m = g.mean(s);
    g.scale(m, -1.0)
}

/// Appends the objective and registers the scalar output `loss`.
pub fn attach_objective(mg: &mut ModelGraph, weights: &LossWeights, guidance: Guidance) -> Result<LossNodes> {
    weights.validate()?;
    let b = mg.batch;
    let g = &mut mg.graph;
    let classification = bce_node(g, mg.probs);
    let mut total = classification;
    let mut nodes = LossNodes {
        total,
        classification,
        ortho: None,
        llv: None,
        hlv: None,
        map: None,
    };
    if let (Some(zl), Some(zh)) = (mg.z_llv, mg.z_hlv) {
        let weighted = |g: &mut Graph, total: &mut NodeId, part: NodeId, w: f64| {
            if w > 0.0 {
                let s = g.scale(part, w);
                *total = g.add(*total, s);
            }
        };
        let t = g.transpose(zh);
        let p = g.matmul(zl, t);
        let f = g.frobenius_sq(p);
        let ortho = g.scale(f, 1.0 / (b * b) as f64);
        weighted(g, &mut total, ortho, weights.ortho);
        nodes.ortho = Some(ortho);
        match guidance {
            Guidance::Rsa => {
                if b < 2 {
                    return Err(Error::InvalidArgument("RSA terms need a batch of at least 2".into()));
                }
                let l = rsa_node(g, TARGET_RSM_LLV, zl, b);
                let h = rsa_node(g, TARGET_RSM_HLV, zh, b);
                weighted(g, &mut total, l, weights.llv);
                weighted(g, &mut total, h, weights.hlv);
                nodes.llv = Some(l);
                nodes.hlv = Some(h);
            }
            Guidance::Mapping => {
                let term = |g: &mut Graph, z: NodeId, map: &str, target: &str| {
                    let p = g.param(map);
                    let pred = g.matmul(z, p);
                    let f = g.input(target);
                    let d = g.sub(pred, f);
                    g.frobenius_sq(d)
                };
                let a = term(g, zl, "map.llv", TARGET_F_LLV);
                let c = term(g, zh, "map.hlv", TARGET_F_HLV);
                let s = g.add(a, c);
                let map = g.scale(s, 1.0 / b as f64);
                weighted(g, &mut total, map, weights.map);
                nodes.map = Some(map);
            }
        }
    }
    nodes.total = total;
    g.set_output("loss", total);
    Ok(nodes)
}

/// Constant tensors consumed by [`attach_objective`].
#[derive(Debug, Clone)]
pub struct LossInputs {
    pub labels: Tensor,
    pub ones: Tensor,
    pub rsm_llv: Tensor,
    pub rsm_hlv: Tensor,
    pub f_llv: Tensor,
    pub f_hlv: Tensor,
}

impl LossInputs {
    pub fn new(labels: &Tensor, f_llv: &Tensor, f_hlv: &Tensor) -> Result<Self> {
        Ok(Self {
            labels: labels.clone(),
            ones: Tensor::filled(&[1, labels.cols()], 1.0),
            rsm_llv: cosine_similarity_matrix(f_llv)?.matrix,
            rsm_hlv: cosine_similarity_matrix(f_hlv)?.matrix,
            f_llv: f_llv.clone(),
            f_hlv: f_hlv.clone(),
        })
    }

    pub fn bind<'a>(&'a self, b: &mut crate::diff::Bindings<'a>) {
        b.bind(TARGET_LABELS, &self.labels);
        b.bind(CONST_ONES, &self.ones);
        b.bind(TARGET_RSM_LLV, &self.rsm_llv);
        b.bind(TARGET_RSM_HLV, &self.rsm_hlv);
        b.bind(TARGET_F_LLV, &self.f_llv);
        b.bind(TARGET_F_HLV, &self.f_hlv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Bindings;
    use crate::model::{EncoderConfig, Model, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rsa_cases() {
        let eye = Tensor::identity(2);
        let z = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!((rsa_loss(&eye, &z).unwrap() - 0.5).abs() < 1e-12);
        let orth = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 0.5]]).unwrap();
        assert_eq!(rsa_loss(&eye, &orth).unwrap(), 0.0);
        assert!(rsa_loss(&Tensor::identity(1), &Tensor::from_rows(&[vec![1.0]]).unwrap()).is_err());
    }

    #[test]
    fn orthogonality_cases() {
        let one = Tensor::from_rows(&[vec![1.0]]).unwrap();
        assert_eq!(orthogonality_loss(&one, &one).unwrap(), 1.0);
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, -3.0]]).unwrap();
        assert_eq!(orthogonality_loss(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn bce_cases() {
        let y = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let half = Tensor::filled(&[2, 2], 0.5);
        assert!((bce_loss(&half, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(&y, &y).unwrap() < 1e-5);
        let y2 = Tensor::from_rows(&[vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0, 1.0]]).unwrap();
        let p = Tensor::from_rows(&[vec![0.7, 0.2], vec![0.4, 0.9]]).unwrap();
        let p2 = Tensor::from_rows(&[vec![0.7, 0.2, 0.7, 0.2], vec![0.4, 0.9, 0.4, 0.9]]).unwrap();
        assert!((bce_loss(&p, &y).unwrap() - bce_loss(&p2, &y2).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn mapping_with_zero_maps_on_unit_targets_is_two() {
        let z = Tensor::filled(&[3, 4], 0.3);
        let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]).unwrap();
        let p = Tensor::zeros(&[4, 2]);
        assert!((mapping_loss(&z, &z, &f, &f, &p, &p).unwrap() - 2.0).abs() < 1e-12);
        assert!(mapping_loss(&z, &z, &f, &f, &Tensor::zeros(&[3, 2]), &p).is_err());
    }

    #[test]
    fn total_is_linear_in_weights() {
        let parts = LossParts {
            classification: 0.7,
            ortho: Some(2.0),
            llv: Some(3.0),
            hlv: Some(5.0),
            map: None,
        };
        assert_eq!(total_loss(&parts, &LossWeights::zero()), 0.7);
        let w = LossWeights::new(0.1, 0.01, 0.001);
        assert!((total_loss(&parts, &w) - (0.7 + 0.2 + 0.03 + 0.005)).abs() < 1e-15);
    }

    fn graph_setup(guidance: Guidance) -> (Model, Tensor, LossInputs) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = EncoderConfig::new(Variant::ClipMused, 3, 4, 2).with_dim(4);
        cfg.mlp_hidden = 6;
        if guidance == Guidance::Mapping {
            cfg.mapping = Some((3, 5));
        }
        let model = Model::new(cfg, vec!["a".into(), "b".into()], 1).unwrap();
        let x = Tensor::randn(&[3, 3, 4], 1.0, &mut rng);
        let labels = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let inputs = LossInputs::new(&labels, &Tensor::randn(&[3, 3], 1.0, &mut rng), &Tensor::randn(&[3, 5], 1.0, &mut rng)).unwrap();
        (model, x, inputs)
    }

    #[test]
    fn graph_parts_match_value_functions() {
        for guidance in [Guidance::Rsa, Guidance::Mapping] {
            let (model, x, inputs) = graph_setup(guidance);
            let mut mg = model.build_graph(&[0, 1, 0]).unwrap();
            let w = LossWeights::new(0.3, 0.2, 0.1);
            let nodes = attach_objective(&mut mg, &w, guidance).unwrap();
            let (name, xin) = model.input_tensor(&x).unwrap();
            let mut bind: Bindings = model.bindings();
            bind.bind(name, &xin);
            inputs.bind(&mut bind);
            let ev = mg.graph.evaluate(&bind).unwrap();
            let parts = nodes.parts(|id| ev.value(id).data()[0]);
            let zl = ev.value(mg.z_llv.unwrap());
            let zh = ev.value(mg.z_hlv.unwrap());
            let probs = ev.value(mg.probs);
            assert!((parts.classification - bce_loss(probs, &inputs.labels).unwrap()).abs() < 1e-12);
            assert!((parts.ortho.unwrap() - orthogonality_loss(zl, zh).unwrap()).abs() < 1e-12);
            if guidance == Guidance::Rsa {
                assert!((parts.llv.unwrap() - rsa_loss(&inputs.rsm_llv, zl).unwrap()).abs() < 1e-12);
                assert!((parts.hlv.unwrap() - rsa_loss(&inputs.rsm_hlv, zh).unwrap()).abs() < 1e-12);
            } else {
                let m = mapping_loss(zl, zh, &inputs.f_llv, &inputs.f_hlv, &model.params["map.llv"], &model.params["map.hlv"]).unwrap();
                assert!((parts.map.unwrap() - m).abs() < 1e-12);
            }
            let total = ev.value(nodes.total).data()[0];
            assert!((total - total_loss(&parts, &w)).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_gradients_check() {
        for guidance in [Guidance::Rsa, Guidance::Mapping] {
            let (model, x, inputs) = graph_setup(guidance);
            let mut mg = model.build_graph(&[0, 1, 0]).unwrap();
            attach_objective(&mut mg, &LossWeights::new(0.5, 0.5, 0.5), guidance).unwrap();
            let (name, xin) = model.input_tensor(&x).unwrap();
            let mut bind: Bindings = model.bindings();
            bind.bind(name, &xin);
            inputs.bind(&mut bind);
            let r = mg.graph.grad_check(&bind, "loss", 1e-5, 1e-5).unwrap();
            assert!(r.passed(), "{guidance:?}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(LossWeights::new(-1.0, 0.0, 0.0).validate().is_err());
    }
}
