use std::collections::BTreeMap;

use super::eval::{Aux, Evaluation};
use super::graph::{Graph, NodeId, Op};
use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Gradients of a scalar output with respect to every parameter, by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<S> {
    pub(crate) by_name: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, shape: &[usize], delta: Vec<S>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data.iter_mut().zip(delta) {
                *a = *a + b;
            }
        }
        None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: delta,
            })
        }
    }
}

/// Reverse-mode pass from the named scalar output.
///
/// Every parameter receives a gradient tensor (zeros if the output does not
/// depend on it).
pub fn backward<S: Scalar>(graph: &Graph, eval: &Evaluation<S>, output: &str) -> Result<Gradients<S>> {
    if graph.id != eval.graph_id || eval.values.len() != graph.nodes.len() {
        return Err(Error::ForeignEvaluation);
    }
    let out = graph.output(output)?;
    let out_val = &eval.values[out.0];
    if out_val.len() != 1 {
        return Err(Error::NotScalar(out_val.shape().to_vec()));
    }

    let n = graph.nodes.len();
    let mut grads: Vec<Option<Tensor<S>>> = vec![None; n];
    grads[out.0] = Some(Tensor {
        shape: out_val.shape.clone(),
        data: vec![S::one()],
    });

    for idx in (0..=out.0).rev() {
        if !graph.needs_grad[idx] {
            continue;
        }
        let Some(g) = grads[idx].take() else { continue };
        let op = &graph.nodes[idx];
        if let Op::Param(_) = op {
            grads[idx] = Some(g);
            continue;
        }
        let val = |id: NodeId| &eval.values[id.0];
        let needs = |id: NodeId| graph.needs_grad[id.0];
        let y = &eval.values[idx];
        let push = |id: NodeId, delta: Vec<S>, grads: &mut Vec<Option<Tensor<S>>>| {
            let shape = eval.values[id.0].shape().to_vec();
            accumulate(&mut grads[id.0], &shape, delta);
        };

        match op {
            Op::Input(_) | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, nn) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs(*a) {
                    let mut da = vec![S::zero(); m * k];
                    kernels::gemm(m, nn, k, &g.data, false, &bv.data, true, &mut da, S::zero());
                    push(*a, da, &mut grads);
                }
                if needs(*b) {
                    let mut db = vec![S::zero(); k * nn];
                    kernels::gemm(k, m, nn, &av.data, true, &g.data, false, &mut db, S::zero());
                    push(*b, db, &mut grads);
                }
            }
            Op::Conv2d { input, weight, .. } => {
                let Aux::Cols(cols, geom) = &eval.aux[idx] else {
                    unreachable!("conv2d without cached columns")
                };
                let co = y.shape()[0];
                if needs(*weight) {
                    let mut dw = vec![S::zero(); co * geom.rows()];
                    kernels::gemm(co, geom.cols(), geom.rows(), &g.data, false, cols, true, &mut dw, S::zero());
                    push(*weight, dw, &mut grads);
                }
                if needs(*input) {
                    let wt = val(*weight);
                    let mut dcols = vec![S::zero(); geom.rows() * geom.cols()];
                    kernels::gemm(geom.rows(), co, geom.cols(), &wt.data, true, &g.data, false, &mut dcols, S::zero());
                    let mut dx = vec![S::zero(); geom.ci * geom.h * geom.w];
                    kernels::col2im_add(&dcols, *geom, &mut dx);
                    push(*input, dx, &mut grads);
                }
            }
            Op::ChannelBias(x, b) | Op::ChannelScale(x, b) => {
                let c = val(*b).len();
                let nsp = g.len() / c.max(1);
                let scale = matches!(op, Op::ChannelScale(..));
                if needs(*b) {
                    let xv = val(*x);
                    let db: Vec<S> = (0..c)
                        .map(|ch| {
                            let gs = &g.data[ch * nsp..(ch + 1) * nsp];
                            if scale {
                                let xs = &xv.data[ch * nsp..(ch + 1) * nsp];
                                gs.iter().zip(xs).map(|(&a, &b)| a * b).sum()
                            } else {
                                gs.iter().copied().sum()
                            }
                        })
                        .collect();
                    push(*b, db, &mut grads);
                }
                if needs(*x) {
                    let dx = if scale {
                        let bv = val(*b);
                        let mut d = g.data.clone();
                        for ch in 0..c {
                            for e in &mut d[ch * nsp..(ch + 1) * nsp] {
                                *e = *e * bv.data[ch];
                            }
                        }
                        d
                    } else {
                        g.data.clone()
                    };
                    push(*x, dx, &mut grads);
                }
            }
            Op::MaxPool2(x) => {
                let Aux::Argmax(arg) = &eval.aux[idx] else {
                    unreachable!("max_pool2 without argmax")
                };
                let mut dx = vec![S::zero(); val(*x).len()];
                for (&i, &gv) in arg.iter().zip(&g.data) {
                    dx[i] = dx[i] + gv;
                }
                push(*x, dx, &mut grads);
            }
            Op::Upsample2(x) => {
                let s = val(*x).shape();
                let dx = kernels::upsample2_backward(&g.data, s[0], s[1], s[2]);
                push(*x, dx, &mut grads);
            }
            Op::Concat(a, b) => {
                let split = val(*a).len();
                if needs(*a) {
                    push(*a, g.data[..split].to_vec(), &mut grads);
                }
                if needs(*b) {
                    push(*b, g.data[split..].to_vec(), &mut grads);
                }
            }
            Op::LeakyRelu(x, slope) => {
                let s = S::lit(*slope);
                let dx = val(*x)
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&a, &gv)| if a > S::zero() { gv } else { gv * s })
                    .collect();
                push(*x, dx, &mut grads);
            }
            Op::Softmax(x) => {
                let c = y.shape()[0];
                let nsp = y.len() / c;
                let mut dx = vec![S::zero(); y.len()];
                for i in 0..nsp {
                    let dot: S = (0..c).map(|ch| g.data[ch * nsp + i] * y.data[ch * nsp + i]).sum();
                    for ch in 0..c {
                        let j = ch * nsp + i;
                        dx[j] = y.data[j] * (g.data[j] - dot);
                    }
                }
                push(*x, dx, &mut grads);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    push(*a, g.data.clone(), &mut grads);
                }
                if needs(*b) {
                    push(*b, g.data.clone(), &mut grads);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    push(*a, g.data.clone(), &mut grads);
                }
                if needs(*b) {
                    push(*b, g.data.iter().map(|&v| -v).collect(), &mut grads);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    push(*a, g.data.iter().zip(&bv.data).map(|(&gv, &b)| gv * b).collect(), &mut grads);
                }
                if needs(*b) {
                    push(*b, g.data.iter().zip(&av.data).map(|(&gv, &a)| gv * a).collect(), &mut grads);
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if needs(*a) {
                    push(*a, g.data.iter().zip(&bv.data).map(|(&gv, &b)| gv / b).collect(), &mut grads);
                }
                if needs(*b) {
                    let d = g
                        .data
                        .iter()
                        .zip(&y.data)
                        .zip(&bv.data)
                        .map(|((&gv, &q), &b)| -gv * q / b)
                        .collect();
                    push(*b, d, &mut grads);
                }
            }
            Op::Log(x) => {
                let dx = val(*x).data.iter().zip(&g.data).map(|(&a, &gv)| gv / a).collect();
                push(*x, dx, &mut grads);
            }
            Op::ClampMin(x, floor) => {
                let f = S::lit(*floor);
                let dx = val(*x)
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&a, &gv)| if a < f { S::zero() } else { gv })
                    .collect();
                push(*x, dx, &mut grads);
            }
            Op::Scale(x, factor) => {
                let f = S::lit(*factor);
                push(*x, g.data.iter().map(|&gv| gv * f).collect(), &mut grads);
            }
            Op::AddScalar(x, _) => push(*x, g.data.clone(), &mut grads),
            Op::Sum(x) => {
                let len = val(*x).len();
                push(*x, vec![g.data[0]; len], &mut grads);
            }
            Op::Mean(x) => {
                let len = val(*x).len();
                let gv = g.data[0] / S::from_usize(len).expect("length");
                push(*x, vec![gv; len], &mut grads);
            }
            Op::SumSpatial(x) => {
                let xv = val(*x);
                let c = xv.shape()[0];
                let nsp = xv.len() / c.max(1);
                let dx = (0..c).flat_map(|ch| std::iter::repeat_n(g.data[ch], nsp)).collect();
                push(*x, dx, &mut grads);
            }
            Op::Dropout(x, _) => {
                let dx = match &eval.aux[idx] {
                    Aux::Mask(mask) => g.data.iter().zip(mask).map(|(&gv, &m)| gv * m).collect(),
                    _ => g.data.clone(),
                };
                push(*x, dx, &mut grads);
            }
            Op::InstanceNorm(x, _) => {
                let Aux::InvStd(inv_std) = &eval.aux[idx] else {
                    unreachable!("instance_norm without statistics")
                };
                let c = y.shape()[0];
                let nsp = y.len() / c;
                let dx = kernels::instance_norm_backward(&g.data, &y.data, inv_std, c, nsp);
                push(*x, dx, &mut grads);
            }
        }
    }

    let by_name = graph
        .params
        .iter()
        .map(|(name, shape, id)| {
            let t = grads[id.0].take().unwrap_or_else(|| Tensor::zeros(shape.clone()));
            (name.clone(), t)
        })
        .collect();
    Ok(Gradients { by_name })
}
