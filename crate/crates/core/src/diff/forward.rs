use std::collections::BTreeMap;

use super::cosine::cosine_similarity_matrix;
use super::{Axis, Bindings, Graph, NodeId, Primitive};
use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

pub(crate) const GELU_C: f64 = 0.044_715;
pub(crate) const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Values of every node from one forward sweep.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub(crate) values: Vec<Tensor>,
    /// Zero rows met by cosine-similarity nodes during this sweep.
    pub degenerate_rows: usize,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn into_values(self) -> Vec<Tensor> {
        self.values
    }
}

impl Graph {
    /// Runs the forward sweep over every node in creation order.
    pub fn evaluate(&self, bindings: &Bindings<'_>) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut degenerate_rows = 0;
        for (idx, node) in self.nodes.iter().enumerate() {
            let id = NodeId(idx);
            let args: Vec<&Tensor> = node.inputs.iter().map(|i| &values[i.0]).collect();
            let out = match &node.op {
                Primitive::Leaf { name, .. } => bindings
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::Unbound(name.clone()))?,
                Primitive::CosineSimMatrix => {
                    let c = cosine_similarity_matrix(args[0])
                        .map_err(|_| Error::shape(self.describe(id), "input not rank 2"))?;
                    degenerate_rows += c.degenerate_rows;
                    c.matrix
                }
                op => apply(op, &args).map_err(|detail| Error::shape(self.describe(id), detail))?,
            };
            if !out.is_finite() {
                return Err(Error::NonFinite {
                    node: self.describe(id),
                });
            }
            values.push(out);
        }
        if degenerate_rows > 0 {
            log::warn!("{degenerate_rows} zero rows in cosine similarity");
        }
        Ok(Evaluation {
            values,
            degenerate_rows,
        })
    }

    /// Evaluates and returns every registered output by name.
    pub fn evaluate_outputs(&self, bindings: &Bindings<'_>) -> Result<BTreeMap<String, Tensor>> {
        let ev = self.evaluate(bindings)?;
        Ok(self
            .outputs
            .iter()
            .map(|(k, id)| (k.clone(), ev.values[id.0].clone()))
            .collect())
    }
}

fn dims2(t: &Tensor) -> Result<(usize, usize), String> {
    t.dims2()
        .ok_or_else(|| format!("expected rank 2, got {:?}", t.shape()))
}

/// Checks that `b` tiles `a` along rows and returns the tile length in values.
pub(crate) fn tile_len(a: &Tensor, b: &Tensor) -> Result<usize, String> {
    if a.shape() == b.shape() {
        return Ok(a.len());
    }
    let (ar, ac) = dims2(a)?;
    let (br, bc) = dims2(b)?;
    if ac != bc || br == 0 || ar % br != 0 {
        return Err(format!(
            "cannot broadcast {:?} onto {:?}",
            b.shape(),
            a.shape()
        ));
    }
    Ok(br * bc)
}

pub(crate) fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn conv_out(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub(crate) struct ConvGeom {
    pub b: usize,
    pub d: [usize; 3],
    pub cin: usize,
    pub k: [usize; 3],
    pub cout: usize,
    pub o: [usize; 3],
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Self, String> {
        let (b, d, cin) = match x.shape() {
            [b, d1, d2, d3, c] => (*b, [*d1, *d2, *d3], *c),
            s => return Err(format!("conv input must be rank 5, got {s:?}")),
        };
        let (k, wcin, cout) = match w.shape() {
            [k1, k2, k3, ci, co] => ([*k1, *k2, *k3], *ci, *co),
            s => return Err(format!("conv weight must be rank 5, got {s:?}")),
        };
        if wcin != cin {
            return Err(format!("weight expects {wcin} input channels, input has {cin}"));
        }
        if bias.len() != cout {
            return Err(format!("bias has {} entries, expected {cout}", bias.len()));
        }
        let mut o = [0; 3];
        for a in 0..3 {
            o[a] = conv_out(d[a], k[a], stride, padding)
                .ok_or_else(|| format!("kernel {k:?} does not fit input {d:?}"))?;
        }
        Ok(Self {
            b,
            d,
            cin,
            k,
            cout,
            o,
            stride,
            padding,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.b, self.o[0], self.o[1], self.o[2], self.cout]
    }

    /// Visits every (output cell, kernel tap, input cell) triple that lies
    /// inside the unpadded input, passing flat base offsets (without channel).
    pub fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d1, d2, d3] = self.d;
        let [o1, o2, o3] = self.o;
        let [k1, k2, k3] = self.k;
        let p = self.padding as isize;
        let s = self.stride as isize;
        for bi in 0..self.b {
            for a in 0..o1 {
                for bb in 0..o2 {
                    for c in 0..o3 {
                        let out_base = (((bi * o1 + a) * o2 + bb) * o3 + c) * self.cout;
                        for i in 0..k1 {
                            let x1 = a as isize * s + i as isize - p;
                            if x1 < 0 || x1 >= d1 as isize {
                                continue;
                            }
                            for j in 0..k2 {
                                let x2 = bb as isize * s + j as isize - p;
                                if x2 < 0 || x2 >= d2 as isize {
                                    continue;
                                }
                                for l in 0..k3 {
                                    let x3 = c as isize * s + l as isize - p;
                                    if x3 < 0 || x3 >= d3 as isize {
                                        continue;
                                    }
                                    let in_base = (((bi * d1 + x1 as usize) * d2 + x2 as usize) * d3
                                        + x3 as usize)
                                        * self.cin;
                                    let w_base = ((i * k2 + j) * k3 + l) * self.cin * self.cout;
                                    f(out_base, in_base, w_base);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn apply(op: &Primitive, args: &[&Tensor]) -> Result<Tensor, String> {
    let t = |shape: Vec<usize>, data: Vec<f64>| Tensor::new(shape, data).map_err(|e| e.to_string());
    match op {
        Primitive::Leaf { .. } | Primitive::CosineSimMatrix => unreachable!(),
        Primitive::MatMul => {
            let (m, k) = dims2(args[0])?;
            let (k2, n) = dims2(args[1])?;
            if k != k2 {
                return Err(format!("{:?} x {:?}", args[0].shape(), args[1].shape()));
            }
            let mut out = vec![0.0; m * n];
            matmul_into(args[0].data(), args[1].data(), &mut out, m, k, n);
            t(vec![m, n], out)
        }
        Primitive::Add | Primitive::Mul => {
            let (a, b) = (args[0], args[1]);
            let tl = tile_len(a, b)?;
            let bd = b.data();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = bd[i % tl];
                    if matches!(op, Primitive::Add) {
                        x + y
                    } else {
                        x * y
                    }
                })
                .collect();
            t(a.shape().to_vec(), data)
        }
        Primitive::Scale(c) => Ok(args[0].map(|x| c * x)),
        Primitive::Concat(axis) => concat(args, *axis),
        Primitive::SliceRows { start, len } => {
            let a = args[0];
            if *len == 0 || start + len > a.rows() {
                return Err(format!(
                    "rows {start}..{} out of range for {:?}",
                    start + len,
                    a.shape()
                ));
            }
            let idx: Vec<usize> = (*start..start + len).collect();
            Ok(a.select_rows(&idx))
        }
        Primitive::LayerNorm { eps } => {
            let (r, c) = dims2(args[0])?;
            let mut out = args[0].data().to_vec();
            for row in out.chunks_mut(c) {
                layer_norm_row(row, *eps);
            }
            t(vec![r, c], out)
        }
        Primitive::SoftmaxRows => {
            let (r, c) = dims2(args[0])?;
            let mut out = args[0].data().to_vec();
            for row in out.chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
            t(vec![r, c], out)
        }
        Primitive::Gelu => Ok(args[0].map(gelu)),
        Primitive::Sigmoid => Ok(args[0].map(sigmoid)),
        Primitive::Mean => {
            let a = args[0];
            Ok(Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64))
        }
        Primitive::FrobeniusSq => Ok(Tensor::scalar(args[0].frobenius_sq())),
        Primitive::Log { lo, hi } => Ok(args[0].map(|x| x.clamp(*lo, *hi).ln())),
        Primitive::Transpose => {
            dims2(args[0])?;
            let a = if args[0].ndim() == 1 {
                args[0].clone().reshape(&[1, args[0].len()]).map_err(|e| e.to_string())?
            } else {
                args[0].clone()
            };
            Ok(a.transpose2())
        }
        Primitive::Conv3d { stride, padding } => {
            let (x, w, bias) = (args[0], args[1], args[2]);
            let g = ConvGeom::new(x, w, bias, *stride, *padding)?;
            let shape = g.out_shape();
            let n: usize = shape.iter().product();
            let mut out = vec![0.0; n];
            for chunk in out.chunks_mut(g.cout) {
                chunk.copy_from_slice(bias.data());
            }
            let (xd, wd) = (x.data(), w.data());
            let (cin, cout) = (g.cin, g.cout);
            g.for_each_tap(|ob, ib, wb| {
                for ci in 0..cin {
                    let xv = xd[ib + ci];
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &wd[wb + ci * cout..wb + (ci + 1) * cout];
                    for (o, &wv) in out[ob..ob + cout].iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            });
            t(shape, out)
        }
        Primitive::Reshape(shape) => args[0].clone().reshape(shape).map_err(|e| e.to_string()),
    }
}

pub(crate) fn layer_norm_row(row: &mut [f64], eps: f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for x in row.iter_mut() {
        *x = (*x - mean) * inv;
    }
}

fn concat(args: &[&Tensor], axis: Axis) -> Result<Tensor, String> {
    if args.is_empty() {
        return Err("concat of nothing".into());
    }
    let dims: Vec<(usize, usize)> = args.iter().map(|a| dims2(a)).collect::<Result<_, _>>()?;
    match axis {
        Axis::Rows => {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(format!("row concat with column counts {dims:?}"));
            }
            let r: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(r * c);
            for a in args {
                data.extend_from_slice(a.data());
            }
            Tensor::new(vec![r, c], data).map_err(|e| e.to_string())
        }
        Axis::Cols => {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(format!("column concat with row counts {dims:?}"));
            }
            let c: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for (a, d) in args.iter().zip(&dims) {
                    data.extend_from_slice(&a.data()[i * d.1..(i + 1) * d.1]);
                }
            }
            Tensor::new(vec![r, c], data).map_err(|e| e.to_string())
        }
    }
}
