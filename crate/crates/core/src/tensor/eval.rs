use rand::Rng;

use super::graph::{Graph, NodeId, Op};
use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Named tensors bound to a graph's inputs and parameters for one evaluation.
#[derive(Clone, Debug)]
pub struct Bindings<'a, S> {
    entries: Vec<(&'a str, &'a Tensor<S>)>,
}

impl<S> Default for Bindings<'_, S> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
        }
    }
}

impl<'a, S> Bindings<'a, S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: &'a str, tensor: &'a Tensor<S>) -> &mut Self {
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = tensor;
        } else {
            self.entries.push((name, tensor));
        }
        self
    }

    pub fn with(mut self, name: &'a str, tensor: &'a Tensor<S>) -> Self {
        self.bind(name, tensor);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor<S>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DropoutMode {
    /// Dropout nodes are the identity.
    #[default]
    Off,
    /// Draw one Bernoulli mask per dropout node from streams keyed by `seed`.
    /// The same seed reproduces the same masks.
    Sample { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub dropout: DropoutMode,
    /// Fail with [`Error::NonFinite`] as soon as any op produces NaN or Inf.
    pub check_finite: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            dropout: DropoutMode::Off,
            check_finite: cfg!(debug_assertions),
        }
    }
}

impl EvalOptions {
    pub fn with_dropout(mut self, dropout: DropoutMode) -> Self {
        self.dropout = dropout;
        self
    }

    pub fn checked(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Aux<S> {
    None,
    Cols(Vec<S>, ConvGeom),
    Argmax(Vec<usize>),
    Mask(Vec<S>),
    InvStd(Vec<S>),
}

/// Activations of one forward pass, retained for [`super::backward`].
#[derive(Clone, Debug)]
pub struct Evaluation<S> {
    pub(crate) graph_id: u64,
    pub(crate) values: Vec<Tensor<S>>,
    pub(crate) aux: Vec<Aux<S>>,
}

impl<S: Scalar> Evaluation<S> {
    pub fn value(&self, node: NodeId) -> &Tensor<S> {
        &self.values[node.0]
    }

    pub fn output(&self, graph: &Graph, name: &str) -> Result<&Tensor<S>> {
        if graph.id != self.graph_id {
            return Err(Error::ForeignEvaluation);
        }
        Ok(self.value(graph.output(name)?))
    }

    pub fn into_output(mut self, graph: &Graph, name: &str) -> Result<Tensor<S>> {
        if graph.id != self.graph_id {
            return Err(Error::ForeignEvaluation);
        }
        let node = graph.output(name)?;
        Ok(std::mem::replace(&mut self.values[node.0], Tensor::zeros(Vec::new())))
    }
}

fn shape_err(op: &Op, msg: impl std::fmt::Display) -> Error {
    Error::Shape(format!("{}: {msg}", op.name()))
}

fn split_channels(shape: &[usize]) -> Option<(usize, usize)> {
    let (&c, rest) = shape.split_first()?;
    Some((c, rest.iter().product()))
}

fn chw(op: &Op, t: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(shape_err(op, format!("expected [c, h, w], got {s:?}"))),
    }
}

fn same_shape<S: Scalar>(op: &Op, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn map<S: Scalar>(a: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

/// Runs the forward pass of every node.
///
/// Parameters are looked up in `bindings` by name and must match their
/// declared shapes. The result is deterministic given the bindings and the
/// dropout seed.
pub fn evaluate<S: Scalar>(
    graph: &Graph,
    bindings: &Bindings<'_, S>,
    opts: &EvalOptions,
) -> Result<Evaluation<S>> {
    let mut values: Vec<Tensor<S>> = Vec::with_capacity(graph.nodes.len());
    let mut aux: Vec<Aux<S>> = Vec::with_capacity(graph.nodes.len());

    for (idx, op) in graph.nodes.iter().enumerate() {
        let v = |n: &NodeId| &values[n.0];
        let mut extra = Aux::None;
        let out: Tensor<S> = match op {
            Op::Input(name) => bindings
                .get(name)
                .ok_or_else(|| Error::UnboundInput(name.clone()))?
                .clone(),
            Op::Param(name) => {
                let t = bindings
                    .get(name)
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                let declared = graph
                    .params
                    .iter()
                    .find(|(n, _, _)| n == name)
                    .map(|(_, s, _)| s.as_slice())
                    .unwrap_or_default();
                if t.shape() != declared {
                    return Err(shape_err(
                        op,
                        format!("`{name}` declared {declared:?}, bound {:?}", t.shape()),
                    ));
                }
                t.clone()
            }
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                let (m, k, n) = match (a.shape(), b.shape()) {
                    ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
                    (sa, sb) => return Err(shape_err(op, format!("{sa:?} x {sb:?}"))),
                };
                let mut data = vec![S::zero(); m * n];
                kernels::gemm(m, k, n, &a.data, false, &b.data, false, &mut data, S::zero());
                Tensor {
                    shape: vec![m, n],
                    data,
                }
            }
            Op::Conv2d {
                input,
                weight,
                padding,
            } => {
                let (x, wt) = (v(input), v(weight));
                let (ci, h, w) = chw(op, x)?;
                let (co, k) = match *wt.shape() {
                    [co, wci, k, k2] if wci == ci && k == k2 => (co, k),
                    ref s => {
                        return Err(shape_err(op, format!("weight {s:?} for input {:?}", x.shape())))
                    }
                };
                if h + 2 * padding < k || w + 2 * padding < k {
                    return Err(shape_err(op, "kernel larger than padded input"));
                }
                let g = ConvGeom {
                    ci,
                    h,
                    w,
                    k,
                    pad: *padding,
                    ho: h + 2 * padding + 1 - k,
                    wo: w + 2 * padding + 1 - k,
                };
                let cols = kernels::im2col(&x.data, g);
                let mut data = vec![S::zero(); co * g.cols()];
                kernels::gemm(co, g.rows(), g.cols(), &wt.data, false, &cols, false, &mut data, S::zero());
                extra = Aux::Cols(cols, g);
                Tensor {
                    shape: vec![co, g.ho, g.wo],
                    data,
                }
            }
            Op::ChannelBias(x, b) | Op::ChannelScale(x, b) => {
                let (x, b) = (v(x), v(b));
                let (c, n) = split_channels(x.shape()).ok_or_else(|| shape_err(op, "scalar input"))?;
                if b.shape() != [c] {
                    return Err(shape_err(op, format!("{:?} for {c} channels", b.shape())));
                }
                let scale = matches!(op, Op::ChannelScale(..));
                let mut data = x.data.clone();
                for ch in 0..c {
                    let bv = b.data[ch];
                    for d in &mut data[ch * n..(ch + 1) * n] {
                        *d = if scale { *d * bv } else { *d + bv };
                    }
                }
                Tensor {
                    shape: x.shape.clone(),
                    data,
                }
            }
            Op::MaxPool2(x) => {
                let x = v(x);
                let (c, h, w) = chw(op, x)?;
                if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
                    return Err(shape_err(op, format!("spatial extents {h}x{w} not even")));
                }
                let (data, arg) = kernels::max_pool2(&x.data, c, h, w);
                extra = Aux::Argmax(arg);
                Tensor {
                    shape: vec![c, h / 2, w / 2],
                    data,
                }
            }
            Op::Upsample2(x) => {
                let x = v(x);
                let (c, h, w) = chw(op, x)?;
                Tensor {
                    shape: vec![c, 2 * h, 2 * w],
                    data: kernels::upsample2(&x.data, c, h, w),
                }
            }
            Op::Concat(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.shape().len() < 2 || a.shape()[1..] != b.shape()[1..] {
                    return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                let mut shape = a.shape.clone();
                shape[0] += b.shape()[0];
                let mut data = a.data.clone();
                data.extend_from_slice(&b.data);
                Tensor { shape, data }
            }
            Op::LeakyRelu(x, slope) => {
                let s = S::lit(*slope);
                map(v(x), |a| if a > S::zero() { a } else { a * s })
            }
            Op::Softmax(x) => {
                let x = v(x);
                let (c, n) = split_channels(x.shape()).ok_or_else(|| shape_err(op, "scalar input"))?;
                Tensor {
                    shape: x.shape.clone(),
                    data: kernels::softmax_channels(&x.data, c, n),
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (v(a), v(b));
                same_shape(op, a, b)?;
                match op {
                    Op::Add(..) => zip_map(a, b, |x, y| x + y),
                    Op::Sub(..) => zip_map(a, b, |x, y| x - y),
                    Op::Mul(..) => zip_map(a, b, |x, y| x * y),
                    _ => zip_map(a, b, |x, y| x / y),
                }
            }
            Op::Log(x) => map(v(x), |a| a.ln()),
            Op::ClampMin(x, floor) => {
                let f = S::lit(*floor);
                map(v(x), |a| if a < f { f } else { a })
            }
            Op::Scale(x, factor) => {
                let f = S::lit(*factor);
                map(v(x), |a| a * f)
            }
            Op::AddScalar(x, value) => {
                let f = S::lit(*value);
                map(v(x), |a| a + f)
            }
            Op::Sum(x) => Tensor::scalar(v(x).data.iter().copied().sum()),
            Op::Mean(x) => {
                let x = v(x);
                if x.is_empty() {
                    return Err(shape_err(op, "mean of empty tensor"));
                }
                let n = S::from_usize(x.len()).expect("length");
                Tensor::scalar(x.data.iter().copied().sum::<S>() / n)
            }
            Op::SumSpatial(x) => {
                let x = v(x);
                let (c, n) = split_channels(x.shape()).ok_or_else(|| shape_err(op, "scalar input"))?;
                Tensor {
                    shape: vec![c],
                    data: (0..c)
                        .map(|ch| x.data[ch * n..(ch + 1) * n].iter().copied().sum())
                        .collect(),
                }
            }
            Op::Dropout(x, p) => {
                let x = v(x);
                match opts.dropout {
                    DropoutMode::Sample { seed } if *p > 0.0 => {
                        let mut r = rng::stream(seed, "dropout", idx as u64);
                        let keep = S::lit(1.0 / (1.0 - p));
                        let mask: Vec<S> = (0..x.len())
                            .map(|_| if r.random::<f64>() < *p { S::zero() } else { keep })
                            .collect();
                        let out = Tensor {
                            shape: x.shape.clone(),
                            data: x.data.iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
                        };
                        extra = Aux::Mask(mask);
                        out
                    }
                    _ => x.clone(),
                }
            }
            Op::InstanceNorm(x, eps) => {
                let x = v(x);
                let (c, n) = split_channels(x.shape()).ok_or_else(|| shape_err(op, "scalar input"))?;
                if n == 0 {
                    return Err(shape_err(op, "empty spatial extent"));
                }
                let (data, inv_std) = kernels::instance_norm(&x.data, c, n, S::lit(*eps));
                extra = Aux::InvStd(inv_std);
                Tensor {
                    shape: x.shape.clone(),
                    data,
                }
            }
        };
        if opts.check_finite && !out.all_finite() {
            return Err(Error::NonFinite {
                op: format!("{} (node {idx})", op.name()),
            });
        }
        values.push(out);
        aux.push(extra);
    }

    Ok(Evaluation {
        graph_id: graph.id,
        values,
        aux,
    })
}
