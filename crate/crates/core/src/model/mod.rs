//! Subject-token transformer encoder, class-token baselines, the volume
//! front-end and attention introspection.

mod attention;
mod conv;
mod graph;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{extract_attention, token_rsm, AttentionRecord, TokenKind};
pub use conv::{conv_geometry, volume_patchify_cnn, ConvFrontEnd, ConvLayer};
pub use graph::{ForwardOutput, ModelGraph, PATCH_INPUT, VOLUME_INPUT};

use crate::diff::Bindings;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Low- and high-level token per subject.
    ClipMused,
    /// Class token, trained on one subject.
    SsVit,
    /// Class token, pooled subjects, no subject parameters.
    MsSmodel,
    /// Class token plus one identity token per subject.
    MsEmb,
    /// Two-layer perceptron on flattened patches.
    SsMlp,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::ClipMused => "clip-mused",
            Variant::SsVit => "ss-vit",
            Variant::MsSmodel => "ms-smodel",
            Variant::MsEmb => "ms-emb",
            Variant::SsMlp => "ss-mlp",
        }
    }

    /// Sequence rows ahead of the patches.
    pub fn prefix_len(self) -> usize {
        match self {
            Variant::ClipMused | Variant::MsEmb => 2,
            Variant::SsVit | Variant::MsSmodel => 1,
            Variant::SsMlp => 0,
        }
    }

    /// Per-subject token tables.
    pub fn token_tables(self) -> &'static [&'static str] {
        match self {
            Variant::ClipMused => &["tokens.llv", "tokens.hlv"],
            Variant::MsEmb => &["tokens.emb"],
            _ => &[],
        }
    }

    pub fn is_transformer(self) -> bool {
        self != Variant::SsMlp
    }
}

/// Source of the second residual connection in each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualVariant {
    /// `z_l = MLP(LN(z'_l)) + z_{l-1}`.
    #[default]
    Paper,
    /// `z_l = MLP(LN(z'_l)) + z'_l`.
    Conventional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: Variant,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    /// Width of each patch fed to the embedding (conv output channels when a
    /// front-end is present).
    pub patch_dim: usize,
    pub patch_count: usize,
    pub class_count: usize,
    /// Hidden width of the block MLP.
    pub mlp_hidden: usize,
    /// Hidden width of the classifier MLP.
    pub head_hidden: usize,
    #[serde(default)]
    pub residual: ResidualVariant,
    #[serde(default)]
    pub conv: Option<ConvFrontEnd>,
    /// `(d_l, d_h)` of the linear maps used by the mapping objective.
    #[serde(default)]
    pub mapping: Option<(usize, usize)>,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl EncoderConfig {
    pub fn new(variant: Variant, patch_count: usize, patch_dim: usize, class_count: usize) -> Self {
        let model_dim = 32;
        Self {
            variant,
            layers: 2,
            heads: 2,
            model_dim,
            patch_dim,
            patch_count,
            class_count,
            mlp_hidden: 4 * model_dim,
            head_hidden: model_dim,
            residual: ResidualVariant::Paper,
            conv: None,
            mapping: None,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// Sets the model width together with the widths derived from it.
    pub fn with_dim(mut self, model_dim: usize) -> Self {
        self.model_dim = model_dim;
        self.mlp_hidden = 4 * model_dim;
        self.head_hidden = model_dim;
        self
    }

    pub fn seq_len(&self) -> usize {
        self.variant.prefix_len() + self.patch_count
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_count == 0 || self.patch_dim == 0 || self.class_count == 0 {
            return bad("patch count, patch dim and class count must be ≥ 1".into());
        }
        if self.head_hidden == 0 {
            return bad("classifier hidden width must be ≥ 1".into());
        }
        if self.model_dim == 0 {
            return bad("model dim must be ≥ 1".into());
        }
        if self.variant.is_transformer() {
            if self.layers == 0 {
                return bad("at least one layer is required".into());
            }
            if self.heads == 0 || self.model_dim % self.heads != 0 {
                return bad(format!("model dim {} not divisible by {} heads", self.model_dim, self.heads));
            }
            if self.mlp_hidden == 0 {
                return bad("block MLP hidden width must be ≥ 1".into());
            }
        }
        if !(self.ln_eps > 0.0) || !(self.init_std >= 0.0) {
            return bad("ln_eps must be > 0 and init_std ≥ 0".into());
        }
        if let Some(conv) = &self.conv {
            if conv.interleave {
                return bad("interleaving conv and transformer layers is not implemented".into());
            }
            let (m, d) = conv_geometry(conv)?;
            if m != self.patch_count || d != self.patch_dim {
                return bad(format!(
                    "conv front-end yields {m} patches of width {d}, config says {}×{}",
                    self.patch_count, self.patch_dim
                ));
            }
        }
        if self.mapping.is_some() && self.variant != Variant::ClipMused {
            return bad("mapping maps need the clip-mused variant".into());
        }
        Ok(())
    }
}

/// Named parameters plus the subjects owning token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub subjects: Vec<String>,
    pub params: BTreeMap<String, Tensor>,
}

impl Model {
    /// Randomly initialized model. Shared parameters depend only on `seed`
    /// and the config; token rows come from a separate stream.
    pub fn new(config: EncoderConfig, subjects: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if subjects.is_empty() {
            return Err(Error::Config("model needs at least one subject".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut token_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746f_6b65_6e73);
        let c = &config;
        let (d, std) = (c.model_dim, c.init_std);
        let mut p = BTreeMap::new();
        let mut put = |name: String, t: Tensor| {
            p.insert(name, t);
        };
        let n = subjects.len();

        if let Some(conv) = &c.conv {
            let mut cin = conv.input_channels;
            for (i, layer) in conv.layers.iter().enumerate() {
                let k = layer.kernel;
                let fan_in = (k * k * k * cin) as f64;
                put(
                    format!("conv{i}.w"),
                    Tensor::randn(&[k, k, k, cin, layer.channels], (2.0 / fan_in).sqrt(), &mut rng),
                );
                put(format!("conv{i}.b"), Tensor::zeros(&[layer.channels]));
                cin = layer.channels;
            }
        }

        if c.variant == Variant::SsMlp {
            put("mlp.fc1".into(), Tensor::randn(&[c.patch_count * c.patch_dim, c.head_hidden], std, &mut rng));
            put("mlp.b1".into(), Tensor::zeros(&[1, c.head_hidden]));
            put("mlp.fc2".into(), Tensor::randn(&[c.head_hidden, c.class_count], std, &mut rng));
            put("mlp.b2".into(), Tensor::zeros(&[1, c.class_count]));
        } else {
            put("embed.w".into(), Tensor::randn(&[c.patch_dim, d], std, &mut rng));
            put("embed.pos".into(), Tensor::randn(&[c.seq_len(), d], std, &mut rng));
            if matches!(c.variant, Variant::SsVit | Variant::MsSmodel | Variant::MsEmb) {
                put("cls".into(), Tensor::randn(&[1, d], std, &mut rng));
            }
            let dh = c.head_dim();
            for l in 0..c.layers {
                for ln in ["ln1", "ln2"] {
                    put(format!("layer{l}.{ln}.g"), Tensor::filled(&[1, d], 1.0));
                    put(format!("layer{l}.{ln}.b"), Tensor::zeros(&[1, d]));
                }
                for h in 0..c.heads {
                    for w in ["q", "k", "v"] {
                        put(format!("layer{l}.attn.h{h}.w{w}"), Tensor::randn(&[d, dh], std, &mut rng));
                    }
                }
                put(format!("layer{l}.attn.wo"), Tensor::randn(&[d, d], std, &mut rng));
                put(format!("layer{l}.attn.bo"), Tensor::zeros(&[1, d]));
                put(format!("layer{l}.mlp.fc1"), Tensor::randn(&[d, c.mlp_hidden], std, &mut rng));
                put(format!("layer{l}.mlp.b1"), Tensor::zeros(&[1, c.mlp_hidden]));
                put(format!("layer{l}.mlp.fc2"), Tensor::randn(&[c.mlp_hidden, d], std, &mut rng));
                put(format!("layer{l}.mlp.b2"), Tensor::zeros(&[1, d]));
            }
            put("final_ln.g".into(), Tensor::filled(&[1, d], 1.0));
            put("final_ln.b".into(), Tensor::zeros(&[1, d]));
            let head_in = if c.variant == Variant::ClipMused { 2 * d } else { d };
            put("head.fc1".into(), Tensor::randn(&[head_in, c.head_hidden], std, &mut rng));
            put("head.b1".into(), Tensor::zeros(&[1, c.head_hidden]));
            put("head.fc2".into(), Tensor::randn(&[c.head_hidden, c.class_count], std, &mut rng));
            put("head.b2".into(), Tensor::zeros(&[1, c.class_count]));
            if let Some((dl, dhl)) = c.mapping {
                put("map.llv".into(), Tensor::randn(&[d, dl], std, &mut rng));
                put("map.hlv".into(), Tensor::randn(&[d, dhl], std, &mut rng));
            }
            for table in c.variant.token_tables() {
                put(table.to_string(), Tensor::randn(&[n, d], std, &mut token_rng));
            }
        }
        Ok(Self {
            config,
            subjects,
            params: p,
        })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter `{name}`")))
    }

    pub fn subject_row(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s == id)
    }

    pub fn is_token_param(&self, name: &str) -> bool {
        self.config.variant.token_tables().contains(&name)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameters not owned by any subject.
    pub fn shared_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| !self.is_token_param(k))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn token_param_count(&self) -> usize {
        self.param_count() - self.shared_param_count()
    }

    pub fn bindings(&self) -> Bindings<'_> {
        let mut b = Bindings::new();
        b.extend(self.params.iter().map(|(k, v)| (k.clone(), v)));
        b
    }

    /// Token table of one kind, `N × d`.
    pub fn tokens(&self, kind: TokenKind) -> Result<&Tensor> {
        let name = match kind {
            TokenKind::Llv => "tokens.llv",
            TokenKind::Hlv => "tokens.hlv",
            TokenKind::Emb => "tokens.emb",
            TokenKind::Class => return Err(Error::InvalidArgument("class token is shared".into())),
        };
        self.params
            .get(name)
            .ok_or_else(|| Error::VariantLacksTokens(self.config.variant.name().into()))
    }
}

#[cfg(test)]
mod tests;
