//! Desk-scale segmentation architectures and flat weight vectors.
//!
//! The mini U-Net has `levels` resolution levels. Each level runs two
//! `conv3x3 -> instance norm -> leaky ReLU` units; the encoder max-pools
//! between levels, the decoder upsamples (nearest neighbour), concatenates
//! the skip connection and runs the same double unit. A final 1x1 conv and
//! a channel softmax produce per-voxel class probabilities.
//!
//! Parameters are declared, and therefore flattened, encoder to decoder and
//! kernel before bias. Instance-norm scales are stored as offsets from one
//! (`y = x̂ · (1 + s) + b`) so every parameter starts centred at zero.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{LabelMap, ProbabilityMap};
use crate::rng;
use crate::tensor::{
    evaluate, finite_diff_check, Bindings, DropoutMode, EvalOptions, GradCheckReport, Graph, NodeId, Tensor,
};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;
/// Additive smoothing of the soft-Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probability floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    MiniUnet,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// U-Net resolution levels.
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub classes: usize,
    /// Level ids after whose encoder and decoder blocks dropout is applied.
    pub dropout_sites: BTreeSet<usize>,
    pub dropout_p: f64,
    /// MLP widths including input and output, e.g. `[2, 8, 2]`.
    pub mlp_layers: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::MiniUnet,
            levels: 3,
            base_channels: 8,
            in_channels: 1,
            classes: 4,
            dropout_sites: BTreeSet::from([1, 2]),
            dropout_p: 0.0,
            mlp_layers: vec![2, 8, 2],
        }
    }
}

impl ModelConfig {
    pub fn mlp(layers: &[usize]) -> Self {
        Self {
            arch: Arch::Mlp,
            in_channels: layers.first().copied().unwrap_or(0),
            classes: layers.last().copied().unwrap_or(0),
            mlp_layers: layers.to_vec(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} not in [0, 1)", self.dropout_p));
        }
        if self.classes < 2 {
            return bad(format!("classes {} < 2", self.classes));
        }
        match self.arch {
            Arch::MiniUnet => {
                if self.levels < 2 {
                    return bad(format!("levels {} < 2", self.levels));
                }
                if self.base_channels < 2 {
                    return bad(format!("base_channels {} < 2", self.base_channels));
                }
                if self.in_channels == 0 {
                    return bad("in_channels must be positive".into());
                }
                if let Some(s) = self.dropout_sites.iter().find(|&&s| s >= self.levels) {
                    return bad(format!("dropout site {s} beyond {} levels", self.levels));
                }
            }
            Arch::Mlp => {
                if self.mlp_layers.len() < 2 || self.mlp_layers.contains(&0) {
                    return bad(format!("invalid mlp layers {:?}", self.mlp_layers));
                }
                if self.mlp_layers.last() != Some(&self.classes)
                    || self.mlp_layers.first() != Some(&self.in_channels)
                {
                    return bad("mlp layers must start at in_channels and end at classes".into());
                }
            }
        }
        Ok(())
    }

    // Sites are wired in even at p = 0, where dropout is the identity.
    fn dropout_at(&self, level: usize) -> bool {
        self.arch == Arch::MiniUnet && self.dropout_sites.contains(&level)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Canonical `(name, offset, shape)` table of a flattened parameter set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl Layout {
    pub fn from_graph(graph: &Graph) -> Self {
        let mut offset = 0;
        let entries = graph
            .parameters()
            .map(|(name, shape)| {
                let e = ParamEntry {
                    name: name.to_owned(),
                    offset,
                    shape: shape.to_vec(),
                };
                offset += e.len();
                e
            })
            .collect();
        Self {
            entries,
            total: offset,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Flattened network parameters: the sampled quantity of the chain.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    values: Vec<f32>,
    layout: Arc<Layout>,
}

impl WeightVector {
    /// Rebuilds a weight vector from a flat buffer.
    pub fn unflatten(values: Vec<f32>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::LayoutMismatch(format!(
                "{} values for a layout of {}",
                values.len(),
                layout.total()
            )));
        }
        Ok(Self { values, layout })
    }

    /// Packs structured tensors (in layout order) into a weight vector.
    pub fn from_tensors(tensors: &[Tensor<f32>], layout: Arc<Layout>) -> Result<Self> {
        if tensors.len() != layout.entries().len() {
            return Err(Error::LayoutMismatch(format!(
                "{} tensors for {} parameters",
                tensors.len(),
                layout.entries().len()
            )));
        }
        let mut values = Vec::with_capacity(layout.total());
        for (t, e) in tensors.iter().zip(layout.entries()) {
            if t.shape() != e.shape.as_slice() {
                return Err(Error::LayoutMismatch(format!(
                    "`{}` expects {:?}, got {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            values.extend_from_slice(t.data());
        }
        Self::unflatten(values, layout)
    }

    /// Splits the flat buffer into one tensor per parameter, in layout order.
    pub fn tensors<S: crate::tensor::Scalar>(&self) -> Vec<Tensor<S>> {
        self.layout
            .entries()
            .iter()
            .map(|e| {
                let slice = &self.values[e.offset..e.offset + e.len()];
                Tensor::new(
                    e.shape.clone(),
                    slice.iter().map(|&v| S::lit(f64::from(v))).collect(),
                )
                .expect("layout consistent")
            })
            .collect()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            layout: Arc::clone(&self.layout),
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }
}

/// Binds parameter tensors (layout order) into `bindings`.
pub fn bind_params<'a, S>(
    layout: &'a Layout,
    tensors: &'a [Tensor<S>],
    bindings: &mut Bindings<'a, S>,
) {
    for (e, t) in layout.entries().iter().zip(tensors) {
        bindings.bind(&e.name, t);
    }
}

/// A built architecture: one graph for prediction and one that appends the
/// Dice + cross-entropy training loss.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    predict_graph: Graph,
    train_graph: Graph,
    layout: Arc<Layout>,
}

pub const IMAGE: &str = "image";
pub const LABEL: &str = "label";
pub const PROBS: &str = "probs";
pub const LOSS: &str = "loss";

struct Builder<'a> {
    g: &'a mut Graph,
    cfg: &'a ModelConfig,
}

impl Builder<'_> {
    fn conv_unit(&mut self, prefix: &str, x: NodeId, cin: usize, cout: usize) -> NodeId {
        let w = self.g.param(&format!("{prefix}.weight"), &[cout, cin, 3, 3]);
        let s = self.g.param(&format!("{prefix}.norm.scale"), &[cout]);
        let b = self.g.param(&format!("{prefix}.norm.shift"), &[cout]);
        let y = self.g.conv2d(x, w, 1);
        let y = self.g.instance_norm(y, NORM_EPS);
        let gain = self.g.add_scalar(s, 1.0);
        let y = self.g.channel_scale(y, gain);
        let y = self.g.channel_bias(y, b);
        self.g.leaky_relu(y, LEAKY_SLOPE)
    }

    fn block(&mut self, prefix: &str, x: NodeId, cin: usize, cout: usize, level: usize) -> NodeId {
        let y = self.conv_unit(&format!("{prefix}.conv0"), x, cin, cout);
        let y = self.conv_unit(&format!("{prefix}.conv1"), y, cout, cout);
        if self.cfg.dropout_at(level) {
            self.g.dropout(y, self.cfg.dropout_p)
        } else {
            y
        }
    }

    fn unet(&mut self) -> NodeId {
        let cfg = self.cfg;
        let x = self.g.input(IMAGE);
        let ch = |l: usize| cfg.base_channels << l;
        let mut skips = Vec::new();
        let mut h = x;
        let mut cin = cfg.in_channels;
        for level in 0..cfg.levels {
            h = self.block(&format!("enc{level}"), h, cin, ch(level), level);
            cin = ch(level);
            if level + 1 < cfg.levels {
                skips.push(h);
                h = self.g.max_pool2(h);
            }
        }
        for level in (0..cfg.levels - 1).rev() {
            let up = self.g.upsample2(h);
            let cat = self.g.concat(up, skips[level]);
            h = self.block(&format!("dec{level}"), cat, ch(level + 1) + ch(level), ch(level), level);
        }
        let w = self.g.param("head.weight", &[cfg.classes, ch(0), 1, 1]);
        let b = self.g.param("head.bias", &[cfg.classes]);
        let logits = self.g.conv2d(h, w, 0);
        let logits = self.g.channel_bias(logits, b);
        self.g.softmax(logits)
    }

    fn mlp(&mut self) -> NodeId {
        let layers = &self.cfg.mlp_layers;
        let mut h = self.g.input(IMAGE);
        for i in 0..layers.len() - 1 {
            let w = self.g.param(&format!("fc{i}.weight"), &[layers[i + 1], layers[i]]);
            let b = self.g.param(&format!("fc{i}.bias"), &[layers[i + 1]]);
            h = self.g.matmul(w, h);
            h = self.g.channel_bias(h, b);
            if i + 2 < layers.len() {
                h = self.g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        self.g.softmax(h)
    }

    fn network(&mut self) -> NodeId {
        match self.cfg.arch {
            Arch::MiniUnet => self.unet(),
            Arch::Mlp => self.mlp(),
        }
    }
}

fn fan_in_uniform(shape: &[usize], rng: &mut impl Rng, out: &mut Vec<f32>, bias_of: Option<usize>) {
    let n: usize = shape.iter().product();
    let fan_in = match bias_of {
        Some(f) => f,
        None => shape[1..].iter().product::<usize>(),
    };
    // He-uniform for leaky ReLU on kernels, 1/sqrt(fan_in) for biases.
    let bound = match bias_of {
        Some(_) => 1.0 / (fan_in as f64).sqrt(),
        None => (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt(),
    };
    out.extend((0..n).map(|_| rng.random_range(-bound..bound) as f32));
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn predict_graph(&self) -> &Graph {
        &self.predict_graph
    }

    /// Loss graph for inputs of the given spatial extent (the cross-entropy
    /// mean needs the voxel count).
    pub fn train_graph(&self) -> &Graph {
        &self.train_graph
    }

    pub fn parameter_count(&self) -> usize {
        self.layout.total()
    }

    pub fn has_dropout(&self) -> bool {
        self.predict_graph.has_dropout()
    }

    pub fn check_layout(&self, w: &WeightVector) -> Result<()> {
        if w.layout().as_ref() != self.layout.as_ref() {
            return Err(Error::LayoutMismatch("weights built for another architecture".into()));
        }
        Ok(())
    }

    /// Validates an input image `[c, h, w]` (U-Net) or `[features, n]` (MLP).
    pub fn check_image<S: crate::tensor::Scalar>(&self, image: &Tensor<S>) -> Result<()> {
        let cfg = &self.config;
        match (cfg.arch, image.shape()) {
            (Arch::MiniUnet, &[c, h, w]) => {
                let m = 1usize << (cfg.levels - 1);
                if c != cfg.in_channels || h == 0 || w == 0 || h % m != 0 || w % m != 0 {
                    return Err(Error::Shape(format!(
                        "image {:?} needs {} channels and extents divisible by {m}",
                        image.shape(),
                        cfg.in_channels
                    )));
                }
            }
            (Arch::Mlp, &[f, _]) if f == cfg.in_channels => {}
            (_, s) => return Err(Error::Shape(format!("unsupported input shape {s:?}"))),
        }
        Ok(())
    }

    /// Per-voxel class probabilities of one forward pass.
    pub fn predict(
        &self,
        weights: &WeightVector,
        image: &Tensor<f32>,
        dropout: DropoutMode,
    ) -> Result<ProbabilityMap> {
        self.check_layout(weights)?;
        self.check_image(image)?;
        let params = weights.tensors::<f32>();
        let mut b = Bindings::new();
        bind_params(&self.layout, &params, &mut b);
        b.bind(IMAGE, image);
        let out = evaluate(&self.predict_graph, &b, &EvalOptions::default().with_dropout(dropout))?
            .into_output(&self.predict_graph, PROBS)?;
        ProbabilityMap::from_tensor(&out)
    }

    /// One stochastic forward pass: a fresh dropout mask is drawn from `rng`.
    pub fn predict_sampled(
        &self,
        weights: &WeightVector,
        image: &Tensor<f32>,
        rng: &mut impl Rng,
    ) -> Result<ProbabilityMap> {
        self.predict(weights, image, DropoutMode::Sample { seed: rng.random() })
    }

    /// Finite-difference check of the training loss in 64-bit at `weights`.
    ///
    /// `max_per_param` limits the perturbed entries per parameter tensor;
    /// dropout masks (if any) are held fixed by `dropout_seed`.
    pub fn loss_gradcheck(
        &self,
        weights: &WeightVector,
        image: &Tensor<f64>,
        labels: &LabelMap,
        dropout_seed: u64,
        max_per_param: Option<usize>,
    ) -> Result<GradCheckReport> {
        self.check_layout(weights)?;
        self.check_image(image)?;
        let mut point: BTreeMap<String, Tensor<f64>> = self
            .layout
            .entries()
            .iter()
            .map(|e| e.name.clone())
            .zip(weights.tensors::<f64>())
            .collect();
        point.insert(IMAGE.to_owned(), image.clone());
        point.insert(LABEL.to_owned(), self.one_hot(labels)?);
        let opts = EvalOptions::default().with_dropout(DropoutMode::Sample { seed: dropout_seed });
        finite_diff_check(&self.train_graph, &point, LOSS, 1e-6, &opts, max_per_param)
    }

    /// One-hot `[C, ..spatial]` encoding of a label map.
    pub fn one_hot<S: crate::tensor::Scalar>(&self, labels: &LabelMap) -> Result<Tensor<S>> {
        let c = self.config.classes;
        let n = labels.len();
        let mut data = vec![S::zero(); c * n];
        for (i, &l) in labels.data().iter().enumerate() {
            if l >= c {
                return Err(Error::Shape(format!("label {l} outside {c} classes")));
            }
            data[l * n + i] = S::one();
        }
        let mut shape = vec![c];
        shape.extend_from_slice(labels.shape());
        Tensor::new(shape, data)
    }
}

/// Builds the architecture and draws initial weights from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<(Model, WeightVector)> {
    let model = build_architecture(config)?;
    let weights = init_weights(&model, seed);
    Ok((model, weights))
}

/// Builds graphs and layout only.
pub fn build_architecture(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut predict_graph = Graph::new();
    let probs = Builder { g: &mut predict_graph, cfg: config }.network();
    predict_graph.set_output(PROBS, probs);

    let mut train_graph = Graph::new();
    let probs = Builder { g: &mut train_graph, cfg: config }.network();
    train_graph.set_output(PROBS, probs);
    let loss = append_loss(&mut train_graph, probs, config.classes);
    train_graph.set_output(LOSS, loss);

    let layout = Arc::new(Layout::from_graph(&predict_graph));
    debug_assert_eq!(layout.as_ref(), &Layout::from_graph(&train_graph));
    Ok(Model { config: config.clone(), predict_graph, train_graph, layout })
}

/// Appends `soft-Dice + cross-entropy` of `probs` (`[C, ..spatial]`) against
/// the one-hot input [`LABEL`] and returns the loss node.
fn append_loss(g: &mut Graph, probs: NodeId, classes: usize) -> NodeId {
    let label = g.input(LABEL);
    let inter = g.mul(probs, label);
    let inter = g.sum_spatial(inter);
    let num = g.add_scalar(inter, DICE_SMOOTH);
    let psum = g.sum_spatial(probs);
    let ysum = g.sum_spatial(label);
    let den = g.add(psum, ysum);
    let den = g.add_scalar(den, 2.0 * DICE_SMOOTH);
    let ratio = g.div(num, den);
    let ratio = g.sum(ratio);
    let dice = g.scale(ratio, -2.0);

    let clamped = g.clamp_min(probs, PROB_FLOOR);
    let logp = g.log(clamped);
    let picked = g.mul(logp, label);
    // mean over C*N entries, rescaled to a mean over voxels
    let picked = g.mean(picked);
    let ce = g.scale(picked, -(classes as f64));
    g.set_output("dice_loss", dice);
    g.set_output("ce_loss", ce);
    g.add(dice, ce)
}

/// Soft-Dice loss `-2 Σ_c (Σ p y + s) / (Σ p + Σ y + 2s)` in plain f64.
pub fn dice_loss(probs: &[f64], onehot: &[f64], classes: usize) -> f64 {
    let n = probs.len() / classes;
    -2.0 * (0..classes)
        .map(|c| {
            let (p, y) = (&probs[c * n..(c + 1) * n], &onehot[c * n..(c + 1) * n]);
            let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
            let ps: f64 = p.iter().sum();
            let ys: f64 = y.iter().sum();
            (inter + DICE_SMOOTH) / (ps + ys + 2.0 * DICE_SMOOTH)
        })
        .sum::<f64>()
}

/// Voxel-mean cross-entropy in plain f64.
pub fn cross_entropy(probs: &[f64], onehot: &[f64], classes: usize) -> f64 {
    let n = probs.len() / classes;
    -probs
        .iter()
        .zip(onehot)
        .map(|(p, y)| p.max(PROB_FLOOR).ln() * y)
        .sum::<f64>()
        / n as f64
}

/// Fan-in scaled uniform initialisation keyed by `seed`.
pub fn init_weights(model: &Model, seed: u64) -> WeightVector {
    let mut rng = rng::stream(seed, "init", 0);
    let mut values = Vec::with_capacity(model.layout.total());
    let entries = model.layout.entries();
    for (i, e) in entries.iter().enumerate() {
        if e.name.ends_with(".norm.scale") || e.name.ends_with(".norm.shift") {
            values.extend(std::iter::repeat_n(0.0f32, e.len()));
        } else if e.name.ends_with(".bias") {
            let fan_in = entries[i - 1].shape[1..].iter().product();
            fan_in_uniform(&e.shape, &mut rng, &mut values, Some(fan_in));
        } else {
            fan_in_uniform(&e.shape, &mut rng, &mut values, None);
        }
    }
    WeightVector::unflatten(values, Arc::clone(&model.layout)).expect("layout total")
}
