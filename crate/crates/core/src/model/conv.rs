use serde::{Deserialize, Serialize};

use super::Model;
use crate::diff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub channels: usize,
}

/// Strided 3-D convolutions (each followed by GELU) turning a volume into
/// `M = o1·o2·o3` patches of width `channels`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvFrontEnd {
    pub input_dims: [usize; 3],
    #[serde(default = "one")]
    pub input_channels: usize,
    pub layers: Vec<ConvLayer>,
    /// Alternate conv and transformer layers instead of running the convs
    /// first. Rejected by config validation.
    #[serde(default)]
    pub interleave: bool,
}

fn one() -> usize {
    1
}

impl ConvFrontEnd {
    /// Four 2/2 downsampling convs then two 3/1 convs with padding 1,
    /// widening to 512 channels.
    pub fn large_volume(input_dims: [usize; 3]) -> Self {
        let down = |channels| ConvLayer {
            kernel: 2,
            stride: 2,
            padding: 0,
            channels,
        };
        let keep = |channels| ConvLayer {
            kernel: 3,
            stride: 1,
            padding: 1,
            channels,
        };
        Self {
            input_dims,
            input_channels: 1,
            layers: vec![down(32), down(64), down(128), down(256), keep(512), keep(512)],
            interleave: false,
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.input_dims.iter().product()
    }
}

/// `(M, d_in)` produced by the front-end.
pub fn conv_geometry(conv: &ConvFrontEnd) -> Result<(usize, usize)> {
    if conv.layers.is_empty() || conv.input_channels == 0 {
        return Err(Error::Config("conv front-end needs layers and input channels".into()));
    }
    let mut dims = conv.input_dims;
    for (i, l) in conv.layers.iter().enumerate() {
        if l.kernel == 0 || l.stride == 0 || l.channels == 0 {
            return Err(Error::Config(format!("conv layer {i} has a zero size")));
        }
        for d in dims.iter_mut() {
            let padded = *d + 2 * l.padding;
            if padded < l.kernel {
                return Err(Error::Config(format!("conv layer {i} yields zero cells")));
            }
            *d = (padded - l.kernel) / l.stride + 1;
        }
    }
    let channels = conv.layers.last().map(|l| l.channels).unwrap_or(0);
    Ok((dims.iter().product(), channels))
}

/// Appends the conv stack to `g`, reading `B × D1 × D2 × D3 × Cin` from
/// `input` and returning `(B·M) × d_in` rows.
pub(crate) fn conv_stack(g: &mut Graph, conv: &ConvFrontEnd, input: NodeId, batch: usize) -> Result<NodeId> {
    let (m, d) = conv_geometry(conv)?;
    let mut x = input;
    for (i, l) in conv.layers.iter().enumerate() {
        let w = g.param(&format!("conv{i}.w"));
        let b = g.param(&format!("conv{i}.b"));
        let y = g.conv3d(x, w, b, l.stride, l.padding);
        x = g.gelu(y);
    }
    Ok(g.reshape(x, &[batch * m, d]))
}

/// Runs only the volume front-end: `B × D1 × D2 × D3` volumes to
/// `B × M × d_in` patches.
pub fn volume_patchify_cnn(model: &Model, volumes: &Tensor) -> Result<Tensor> {
    let conv = model
        .config
        .conv
        .as_ref()
        .ok_or_else(|| Error::Config("model has no conv front-end".into()))?;
    let dims = conv.input_dims;
    let s = volumes.shape();
    let b = s[0];
    if s.len() < 4 || s[1..4] != dims || volumes.len() != b * conv.voxel_count() * conv.input_channels {
        return Err(Error::shape(
            "volume input",
            format!("expected [B, {}, {}, {}], got {s:?}", dims[0], dims[1], dims[2]),
        ));
    }
    let x = volumes
        .clone()
        .reshape(&[b, dims[0], dims[1], dims[2], conv.input_channels])?;
    let mut g = Graph::new();
    let input = g.input("x.volumes");
    let out = conv_stack(&mut g, conv, input, b)?;
    g.set_output("patches", out);
    let mut bind = model.bindings();
    bind.bind("x.volumes", &x);
    let mut outs = g.evaluate_outputs(&bind)?;
    let (m, d) = conv_geometry(conv)?;
    outs.remove("patches").expect("output").reshape(&[b, m, d])
}
