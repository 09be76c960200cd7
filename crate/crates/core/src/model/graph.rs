use super::conv::conv_stack;
use super::{Model, ResidualVariant, Variant};
use super::attention::AttentionRecord;
use crate::diff::{Axis, Graph, NodeId};
use crate::tensor::Tensor;
use crate::error::{Error, Result};

/// Leaf holding `(B·M) × d_in` patch rows.
pub const PATCH_INPUT: &str = "x.patches";
/// Leaf holding `B × D1 × D2 × D3 × Cin` volumes for conv front-ends.
pub const VOLUME_INPUT: &str = "x.volumes";

/// Forward graph of one batch with handles to the interesting nodes.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub graph: Graph,
    pub batch: usize,
    /// `B × d`, clip-mused only.
    pub z_llv: Option<NodeId>,
    pub z_hlv: Option<NodeId>,
    /// `B × d` class-token readout.
    pub z_cls: Option<NodeId>,
    pub logits: NodeId,
    /// `B × C` probabilities.
    pub probs: NodeId,
    /// `[layer][head][sample]` softmax nodes, each `S × S`.
    pub attention: Vec<Vec<Vec<NodeId>>>,
}

impl Model {
    /// Builds the forward graph for a batch whose samples belong to the
    /// given token rows.
    pub fn build_graph(&self, subject_rows: &[usize]) -> Result<ModelGraph> {
        let c = &self.config;
        let b = subject_rows.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(&bad) = subject_rows.iter().find(|&&r| r >= self.subjects.len()) {
            return Err(Error::UnknownSubject(bad));
        }
        let mut g = Graph::new();
        let m = c.patch_count;

        let patches = match &c.conv {
            Some(conv) => {
                let x = g.input(VOLUME_INPUT);
                conv_stack(&mut g, conv, x, b)?
            }
            None => g.input(PATCH_INPUT),
        };

        if c.variant == Variant::SsMlp {
            let flat = g.reshape(patches, &[b, m * c.patch_dim]);
            let (w1, b1, w2, b2) = (g.param("mlp.fc1"), g.param("mlp.b1"), g.param("mlp.fc2"), g.param("mlp.b2"));
            let h = g.linear(flat, w1, Some(b1));
            let h = g.gelu(h);
            let logits = g.linear(h, w2, Some(b2));
            let probs = g.sigmoid(logits);
            g.set_output("probs", probs);
            return Ok(ModelGraph {
                graph: g,
                batch: b,
                z_llv: None,
                z_hlv: None,
                z_cls: None,
                logits,
                probs,
                attention: Vec::new(),
            });
        }

        let s_len = c.seq_len();
        let embed = g.param("embed.w");
        let emb = g.matmul(patches, embed);

        let prefix_tables: Vec<NodeId> = match c.variant {
            Variant::ClipMused => vec![g.param("tokens.llv"), g.param("tokens.hlv")],
            Variant::MsEmb => vec![g.param("tokens.emb")],
            _ => vec![],
        };
        let cls = matches!(c.variant, Variant::SsVit | Variant::MsSmodel | Variant::MsEmb).then(|| g.param("cls"));

        let mut seqs = Vec::with_capacity(b);
        for (i, &row) in subject_rows.iter().enumerate() {
            let mut parts = Vec::with_capacity(3);
            if let Some(cls) = cls {
                parts.push(cls);
            }
            for &t in &prefix_tables {
                parts.push(g.slice_rows(t, row, 1));
            }
            parts.push(g.slice_rows(emb, i * m, m));
            seqs.push(g.concat(&parts, Axis::Rows));
        }
        let x0 = if b == 1 { seqs[0] } else { g.concat(&seqs, Axis::Rows) };
        let pos = g.param("embed.pos");
        let mut x = g.add(x0, pos);

        let scale = 1.0 / (c.head_dim() as f64).sqrt();
        let mut attention = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let h1 = ln_affine(&mut g, x, &format!("layer{l}.ln1"), c.ln_eps);
            let mut head_outs = Vec::with_capacity(c.heads);
            let mut layer_att = Vec::with_capacity(c.heads);
            for h in 0..c.heads {
                let wq = g.param(&format!("layer{l}.attn.h{h}.wq"));
                let wk = g.param(&format!("layer{l}.attn.h{h}.wk"));
                let wv = g.param(&format!("layer{l}.attn.h{h}.wv"));
                let q = g.matmul(h1, wq);
                let k = g.matmul(h1, wk);
                let v = g.matmul(h1, wv);
                let mut outs = Vec::with_capacity(b);
                let mut atts = Vec::with_capacity(b);
                for i in 0..b {
                    let qi = g.slice_rows(q, i * s_len, s_len);
                    let ki = g.slice_rows(k, i * s_len, s_len);
                    let vi = g.slice_rows(v, i * s_len, s_len);
                    let kt = g.transpose(ki);
                    let scores = g.matmul(qi, kt);
                    let scores = g.scale(scores, scale);
                    let a = g.softmax_rows(scores);
                    atts.push(a);
                    outs.push(g.matmul(a, vi));
                }
                head_outs.push(if b == 1 { outs[0] } else { g.concat(&outs, Axis::Rows) });
                layer_att.push(atts);
            }
            attention.push(layer_att);
            let cat = if c.heads == 1 { head_outs[0] } else { g.concat(&head_outs, Axis::Cols) };
            let (wo, bo) = (g.param(&format!("layer{l}.attn.wo")), g.param(&format!("layer{l}.attn.bo")));
            let att = g.linear(cat, wo, Some(bo));
            let z_mid = g.add(att, x);

            let h2 = ln_affine(&mut g, z_mid, &format!("layer{l}.ln2"), c.ln_eps);
            let (f1, b1) = (g.param(&format!("layer{l}.mlp.fc1")), g.param(&format!("layer{l}.mlp.b1")));
            let (f2, b2) = (g.param(&format!("layer{l}.mlp.fc2")), g.param(&format!("layer{l}.mlp.b2")));
            let hid = g.linear(h2, f1, Some(b1));
            let hid = g.gelu(hid);
            let mlp = g.linear(hid, f2, Some(b2));
            let skip = match c.residual {
                ResidualVariant::Paper => x,
                ResidualVariant::Conventional => z_mid,
            };
            x = g.add(mlp, skip);
        }

        let take = |g: &mut Graph, offset: usize| -> NodeId {
            let rows: Vec<NodeId> = (0..b).map(|i| g.slice_rows(x, i * s_len + offset, 1)).collect();
            if b == 1 {
                rows[0]
            } else {
                g.concat(&rows, Axis::Rows)
            }
        };

        let (z_llv, z_hlv, z_cls, head_in) = if c.variant == Variant::ClipMused {
            let raw_l = take(&mut g, 0);
            let raw_h = take(&mut g, 1);
            let zl = ln_affine(&mut g, raw_l, "final_ln", c.ln_eps);
            let zh = ln_affine(&mut g, raw_h, "final_ln", c.ln_eps);
            g.set_output("z_llv", zl);
            g.set_output("z_hlv", zh);
            let cat = g.concat(&[zl, zh], Axis::Cols);
            (Some(zl), Some(zh), None, cat)
        } else {
            let raw = take(&mut g, 0);
            let z = ln_affine(&mut g, raw, "final_ln", c.ln_eps);
            g.set_output("z_cls", z);
            (None, None, Some(z), z)
        };

        let (w1, b1, w2, b2) = (g.param("head.fc1"), g.param("head.b1"), g.param("head.fc2"), g.param("head.b2"));
        let hid = g.linear(head_in, w1, Some(b1));
        let hid = g.gelu(hid);
        let logits = g.linear(hid, w2, Some(b2));
        let probs = g.sigmoid(logits);
        g.set_output("probs", probs);
        Ok(ModelGraph {
            graph: g,
            batch: b,
            z_llv,
            z_hlv,
            z_cls,
            logits,
            probs,
            attention,
        })
    }
}

/// Values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub probs: Tensor,
    pub z_llv: Option<Tensor>,
    pub z_hlv: Option<Tensor>,
    pub z_cls: Option<Tensor>,
    /// One record per layer when requested.
    pub attention: Vec<AttentionRecord>,
}

impl Model {
    /// Reshapes `B × M × d_in` batch patches (or `B × V × Cin` voxels for a
    /// conv front-end) into the graph's input leaf.
    pub fn input_tensor(&self, patches: &Tensor) -> Result<(&'static str, Tensor)> {
        let c = &self.config;
        let s = patches.shape();
        if s.len() != 3 {
            return Err(Error::shape("model input", format!("expected rank 3, got {s:?}")));
        }
        let b = s[0];
        match &c.conv {
            Some(conv) => {
                if s[1] != conv.voxel_count() || s[2] != conv.input_channels {
                    return Err(Error::shape(
                        "model input",
                        format!("expected [B, {}, {}], got {s:?}", conv.voxel_count(), conv.input_channels),
                    ));
                }
                let [d1, d2, d3] = conv.input_dims;
                Ok((VOLUME_INPUT, patches.clone().reshape(&[b, d1, d2, d3, conv.input_channels])?))
            }
            None => {
                if s[1] != c.patch_count || s[2] != c.patch_dim {
                    return Err(Error::shape(
                        "model input",
                        format!("expected [B, {}, {}], got {s:?}", c.patch_count, c.patch_dim),
                    ));
                }
                Ok((PATCH_INPUT, patches.clone().reshape(&[b * c.patch_count, c.patch_dim])?))
            }
        }
    }

    /// Encodes and classifies a batch.
    pub fn forward(&self, patches: &Tensor, subject_rows: &[usize], record_attention: bool) -> Result<ForwardOutput> {
        if patches.shape().first() != Some(&subject_rows.len()) {
            return Err(Error::shape("model input", "batch size differs from subject list"));
        }
        let mg = self.build_graph(subject_rows)?;
        let (name, input) = self.input_tensor(patches)?;
        let mut bind = self.bindings();
        bind.bind(name, &input);
        let ev = mg.graph.evaluate(&bind)?;
        let get = |id: Option<NodeId>| id.map(|i| ev.value(i).clone());
        let attention = if record_attention {
            mg.attention
                .iter()
                .enumerate()
                .map(|(layer, heads)| AttentionRecord::gather(layer, heads, &ev, self.config.variant))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(ForwardOutput {
            probs: ev.value(mg.probs).clone(),
            z_llv: get(mg.z_llv),
            z_hlv: get(mg.z_hlv),
            z_cls: get(mg.z_cls),
            attention,
        })
    }

    /// Probabilities for many samples, evaluated in chunks.
    pub fn predict(&self, patches: &Tensor, subject_rows: &[usize], chunk: usize) -> Result<Tensor> {
        let n = subject_rows.len();
        let chunk = chunk.max(1);
        let mut data = Vec::with_capacity(n * self.config.class_count);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let out = self.forward(&patches.select_rows(&idx), &subject_rows[start..end], false)?;
            data.extend_from_slice(out.probs.data());
            start = end;
        }
        Tensor::new(vec![n, self.config.class_count], data)
    }
}

fn ln_affine(g: &mut Graph, x: NodeId, prefix: &str, eps: f64) -> NodeId {
    let n = g.layer_norm(x, eps);
    let gamma = g.param(&format!("{prefix}.g"));
    let beta = g.param(&format!("{prefix}.b"));
    let y = g.mul(n, gamma);
    g.add(y, beta)
}
