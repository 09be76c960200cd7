use serde::{Deserialize, Serialize};

use super::{Model, Variant};
use crate::diff::{cosine_similarity_matrix, Evaluation, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenKind {
    Llv,
    Hlv,
    Emb,
    Class,
}

impl TokenKind {
    pub fn name(self) -> &'static str {
        match self {
            TokenKind::Llv => "llv",
            TokenKind::Hlv => "hlv",
            TokenKind::Emb => "emb",
            TokenKind::Class => "class",
        }
    }

    /// Sequence position of the token in `variant`, if present.
    pub fn position(self, variant: Variant) -> Option<usize> {
        match (variant, self) {
            (Variant::ClipMused, TokenKind::Llv) => Some(0),
            (Variant::ClipMused, TokenKind::Hlv) => Some(1),
            (Variant::MsEmb, TokenKind::Class) => Some(0),
            (Variant::MsEmb, TokenKind::Emb) => Some(1),
            (Variant::SsVit | Variant::MsSmodel, TokenKind::Class) => Some(0),
            _ => None,
        }
    }
}

/// Attention weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub variant: Variant,
    /// One `B × S × S` tensor per head; rows sum to one.
    pub heads: Vec<Tensor>,
}

impl AttentionRecord {
    pub(crate) fn gather(layer: usize, heads: &[Vec<NodeId>], ev: &Evaluation, variant: Variant) -> Result<Self> {
        let heads = heads
            .iter()
            .map(|samples| {
                let s = ev.value(samples[0]).rows();
                let mut data = Vec::with_capacity(samples.len() * s * s);
                for &id in samples {
                    data.extend_from_slice(ev.value(id).data());
                }
                Tensor::new(vec![samples.len(), s, s], data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layer, variant, heads })
    }

    pub fn batch(&self) -> usize {
        self.heads[0].shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.heads[0].shape()[1]
    }
}

/// Head-averaged attention of `token` over the patch positions, `B × M`,
/// renormalized to sum to one per sample.
pub fn extract_attention(record: &AttentionRecord, token: TokenKind) -> Result<Tensor> {
    let pos = token
        .position(record.variant)
        .ok_or_else(|| Error::VariantLacksTokens(format!("{} ({})", record.variant.name(), token.name())))?;
    let (b, s) = (record.batch(), record.seq_len());
    let prefix = record.variant.prefix_len();
    let m = s - prefix;
    let h = record.heads.len() as f64;
    let mut out = Tensor::zeros(&[b, m]);
    for head in &record.heads {
        for i in 0..b {
            let row = &head.data()[(i * s + pos) * s..(i * s + pos + 1) * s];
            for (o, w) in out.row_mut(i).iter_mut().zip(&row[prefix..]) {
                *o += w / h;
            }
        }
    }
    for i in 0..b {
        let r = out.row_mut(i);
        let total: f64 = r.iter().sum();
        if total > 0.0 {
            r.iter_mut().for_each(|v| *v /= total);
        } else {
            r.iter_mut().for_each(|v| *v = 1.0 / m as f64);
        }
    }
    Ok(out)
}

/// Cosine similarity across subjects of the llv and hlv token tables.
pub fn token_rsm(model: &Model) -> Result<(Tensor, Tensor)> {
    if model.config.variant != Variant::ClipMused {
        return Err(Error::VariantLacksTokens(model.config.variant.name().into()));
    }
    if model.subjects.len() < 2 {
        return Err(Error::InvalidArgument("token RSM needs at least two subjects".into()));
    }
    let l = cosine_similarity_matrix(model.param("tokens.llv")?)?.matrix;
    let h = cosine_similarity_matrix(model.param("tokens.hlv")?)?.matrix;
    Ok((l, h))
}
