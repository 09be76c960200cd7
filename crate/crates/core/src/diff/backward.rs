use std::collections::BTreeMap;

use super::cosine::unit_rows;
use super::forward::{tile_len, ConvGeom, Evaluation, GELU_C, SQRT_2_OVER_PI};
use super::{Axis, Bindings, Graph, NodeId, Primitive};
use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

/// Gradients of a scalar output with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub value: f64,
    pub grads: BTreeMap<String, Tensor>,
    pub evaluation: Evaluation,
}

impl Graph {
    /// Reverse-mode derivative of `scalar_output` with respect to every
    /// trainable leaf. Leaves the output does not depend on get zero tensors.
    pub fn gradient(&self, bindings: &Bindings<'_>, scalar_output: &str) -> Result<Gradients> {
        let out = self
            .output(scalar_output)
            .ok_or_else(|| Error::UnknownOutput(scalar_output.to_string()))?;
        let evaluation = self.evaluate(bindings)?;
        let grads = self.backward(&evaluation, out, scalar_output)?;
        Ok(Gradients {
            value: evaluation.values[out.0].data()[0],
            grads,
            evaluation,
        })
    }

    pub(crate) fn backward(
        &self,
        ev: &Evaluation,
        out: NodeId,
        out_name: &str,
    ) -> Result<BTreeMap<String, Tensor>> {
        let vals = &ev.values;
        if vals[out.0].len() != 1 {
            return Err(Error::NotScalar(out_name.to_string()));
        }

        // Only propagate along nodes that reach a trainable leaf.
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Primitive::Leaf { trainable, .. } => *trainable,
                _ => node.inputs.iter().any(|j| needs[j.0]),
            };
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[out.0] = Some(Tensor::filled(vals[out.0].shape(), 1.0));

        for idx in (0..=out.0).rev() {
            if !needs[idx] {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Primitive::Leaf { .. } = node.op {
                adj[idx] = Some(g);
                continue;
            }
            if let Primitive::SliceRows { start, .. } = node.op {
                // Scatter straight into the accumulator; avoids a full-size
                // temporary per slice.
                let src = node.inputs[0];
                let c = vals[src.0].cols();
                let acc = adj[src.0].get_or_insert_with(|| Tensor::zeros(vals[src.0].shape()));
                for (a, b) in acc.data_mut()[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g.data())
                {
                    *a += b;
                }
                continue;
            }
            let args: Vec<&Tensor> = node.inputs.iter().map(|i| &vals[i.0]).collect();
            let want: Vec<bool> = node.inputs.iter().map(|i| needs[i.0]).collect();
            let input_grads = adjoint(&node.op, &args, &vals[idx], &g, &want);
            for ((inp, w), ig) in node.inputs.iter().zip(&want).zip(input_grads) {
                if !w {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut adj[inp.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Primitive::Leaf {
                name,
                trainable: true,
            } = &node.op
            {
                let g = adj[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(vals[i].shape()));
                grads.insert(name.clone(), g);
            }
        }
        Ok(grads)
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape().to_vec(), data).expect("adjoint shape")
}

/// Adjoints for each input of one node given the output adjoint `g`.
/// Inputs with `want[i] == false` may be returned as `None`.
fn adjoint(op: &Primitive, args: &[&Tensor], y: &Tensor, g: &Tensor, want: &[bool]) -> Vec<Option<Tensor>> {
    match op {
        Primitive::Leaf { .. } => vec![],
        Primitive::MatMul => {
            let (a, b) = (args[0], args[1]);
            let (m, k) = a.dims2().unwrap();
            let n = b.dims2().unwrap().1;
            let da = want[0].then(|| {
                let bt = b.transpose2();
                let mut out = vec![0.0; m * k];
                matmul_into(g.data(), bt.data(), &mut out, m, n, k);
                like(a, out)
            });
            let db = want[1].then(|| {
                let at = a.transpose2();
                let mut out = vec![0.0; k * n];
                matmul_into(at.data(), g.data(), &mut out, k, m, n);
                like(b, out)
            });
            vec![da, db]
        }
        Primitive::Add => {
            let tl = tile_len(args[0], args[1]).unwrap();
            let db = want[1].then(|| {
                let mut acc = vec![0.0; tl];
                for (i, &gv) in g.data().iter().enumerate() {
                    acc[i % tl] += gv;
                }
                like(args[1], acc)
            });
            vec![want[0].then(|| like(args[0], g.data().to_vec())), db]
        }
        Primitive::Mul => {
            let (a, b) = (args[0], args[1]);
            let tl = tile_len(a, b).unwrap();
            let da = want[0].then(|| {
                let bd = b.data();
                like(
                    a,
                    g.data().iter().enumerate().map(|(i, &gv)| gv * bd[i % tl]).collect(),
                )
            });
            let db = want[1].then(|| {
                let mut acc = vec![0.0; tl];
                for (i, (&gv, &av)) in g.data().iter().zip(a.data()).enumerate() {
                    acc[i % tl] += gv * av;
                }
                like(b, acc)
            });
            vec![da, db]
        }
        Primitive::Scale(c) => vec![Some(g.map(|x| c * x))],
        Primitive::Concat(axis) => {
            let mut out = Vec::with_capacity(args.len());
            match axis {
                Axis::Rows => {
                    let mut off = 0;
                    for (a, &w) in args.iter().zip(want) {
                        let n = a.len();
                        out.push(w.then(|| like(a, g.data()[off..off + n].to_vec())));
                        off += n;
                    }
                }
                Axis::Cols => {
                    let (r, total) = y.dims2().unwrap();
                    let mut col = 0;
                    for (a, &w) in args.iter().zip(want) {
                        let c = a.dims2().unwrap().1;
                        out.push(w.then(|| {
                            let mut d = Vec::with_capacity(r * c);
                            for i in 0..r {
                                d.extend_from_slice(&g.data()[i * total + col..i * total + col + c]);
                            }
                            like(a, d)
                        }));
                        col += c;
                    }
                }
            }
            out
        }
        Primitive::SliceRows { start, .. } => {
            let a = args[0];
            let c = a.cols();
            let mut d = vec![0.0; a.len()];
            d[start * c..start * c + g.len()].copy_from_slice(g.data());
            vec![Some(like(a, d))]
        }
        Primitive::LayerNorm { eps } => {
            let x = args[0];
            let c = x.cols();
            let mut out = vec![0.0; x.len()];
            for ((xr, gr), (yr, or)) in x
                .data()
                .chunks(c)
                .zip(g.data().chunks(c))
                .zip(y.data().chunks(c).zip(out.chunks_mut(c)))
            {
                let n = c as f64;
                let mean = xr.iter().sum::<f64>() / n;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let gm = gr.iter().sum::<f64>() / n;
                let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                for ((o, &gv), &yv) in or.iter_mut().zip(gr).zip(yr) {
                    *o = inv * (gv - gm - yv * gym);
                }
            }
            vec![Some(like(x, out))]
        }
        Primitive::SoftmaxRows => {
            let c = y.cols();
            let mut out = vec![0.0; y.len()];
            for ((yr, gr), or) in y.data().chunks(c).zip(g.data().chunks(c)).zip(out.chunks_mut(c)) {
                let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dotp);
                }
            }
            vec![Some(like(y, out))]
        }
        Primitive::Gelu => {
            let x = args[0];
            let d = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &gv)| {
                    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                    let t = u.tanh();
                    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
                    gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })
                .collect();
            vec![Some(like(x, d))]
        }
        Primitive::Sigmoid => vec![Some(like(
            y,
            y.data().iter().zip(g.data()).map(|(&s, &gv)| gv * s * (1.0 - s)).collect(),
        ))],
        Primitive::Mean => {
            let a = args[0];
            let v = g.data()[0] / a.len() as f64;
            vec![Some(Tensor::filled(a.shape(), v))]
        }
        Primitive::FrobeniusSq => {
            let gv = g.data()[0];
            vec![Some(args[0].map(|x| 2.0 * gv * x))]
        }
        Primitive::CosineSimMatrix => vec![Some(cosine_adjoint(args[0], g))],
        Primitive::Log { lo, hi } => {
            let x = args[0];
            vec![Some(like(
                x,
                x.data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| if x >= *lo && x <= *hi { gv / x } else { 0.0 })
                    .collect(),
            ))]
        }
        Primitive::Transpose => {
            let gt = g.transpose2();
            vec![Some(like(args[0], gt.into_data()))]
        }
        Primitive::Conv3d { stride, padding } => {
            let (x, w, b) = (args[0], args[1], args[2]);
            let geo = ConvGeom::new(x, w, b, *stride, *padding).expect("validated in forward");
            let (cin, cout) = (geo.cin, geo.cout);
            let gd = g.data();
            let mut dx = want[0].then(|| vec![0.0; x.len()]);
            let mut dw = want[1].then(|| vec![0.0; w.len()]);
            let (xd, wd) = (x.data(), w.data());
            geo.for_each_tap(|ob, ib, wb| {
                let go = &gd[ob..ob + cout];
                for ci in 0..cin {
                    let wrow = wb + ci * cout;
                    if let Some(dx) = dx.as_mut() {
                        dx[ib + ci] += go.iter().zip(&wd[wrow..wrow + cout]).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(dw) = dw.as_mut() {
                        let xv = xd[ib + ci];
                        for (d, &gv) in dw[wrow..wrow + cout].iter_mut().zip(go) {
                            *d += xv * gv;
                        }
                    }
                }
            });
            let db = want[2].then(|| {
                let mut acc = vec![0.0; cout];
                for cell in gd.chunks(cout) {
                    for (a, v) in acc.iter_mut().zip(cell) {
                        *a += v;
                    }
                }
                like(b, acc)
            });
            vec![dx.map(|d| like(x, d)), dw.map(|d| like(w, d)), db]
        }
        Primitive::Reshape(_) => vec![Some(like(args[0], g.data().to_vec()))],
    }
}

/// Adjoint of the row-cosine matrix. The diagonal is constant, so only
/// off-diagonal entries carry gradient; zero rows receive none.
fn cosine_adjoint(z: &Tensor, g: &Tensor) -> Tensor {
    let (b, d) = z.dims2().unwrap();
    let (unit, norms) = unit_rows(z.data(), b, d);
    let gd = g.data();
    let mut out = vec![0.0; b * d];
    let mut du = vec![0.0; d];
    for i in 0..b {
        if norms[i] == 0.0 {
            continue;
        }
        du.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..b {
            if j == i || norms[j] == 0.0 {
                continue;
            }
            let w = gd[i * b + j] + gd[j * b + i];
            for (acc, &u) in du.iter_mut().zip(&unit[j * d..(j + 1) * d]) {
                *acc += w * u;
            }
        }
        let ui = &unit[i * d..(i + 1) * d];
        let proj: f64 = du.iter().zip(ui).map(|(a, b)| a * b).sum();
        for ((o, &dv), &uv) in out[i * d..(i + 1) * d].iter_mut().zip(&du).zip(ui) {
            *o = (dv - proj * uv) / norms[i];
        }
    }
    like(z, out)
}
