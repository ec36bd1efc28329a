//! Training loss, Gaussian prior and mini-batch gradients of the energy
//! `U(w) = L(w) + (λ/2)‖w‖²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{LabelMap, ProbabilityMap};
use crate::model::{self, bind_params, Model, WeightVector};
use crate::rng::derive_seed;
use crate::synth::Sample;
use crate::tensor::{backward, evaluate, Bindings, DropoutMode, EvalOptions, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    /// Prior precision.
    pub lambda: f64,
    pub temperature: f64,
    /// Training-set size; zero means "use the dataset as given".
    pub dataset_size: usize,
    pub batch_size: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EnergyConfig {
    /// Full-size settings: weak prior, batches of 8.
    pub fn paper() -> Self {
        Self {
            lambda: 3e-5,
            temperature: 1e-5,
            dataset_size: 0,
            batch_size: 8,
        }
    }

    /// Settings for the small synthetic runs. With two orders of magnitude
    /// fewer iterations than a full-size run, the prior needs a larger
    /// precision to keep weight norms in check.
    pub fn desk() -> Self {
        Self {
            lambda: 1e-3,
            batch_size: 2,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidConfig(format!("lambda {} must be positive", self.lambda)));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::InvalidConfig(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.batch_size == 0 || (self.dataset_size > 0 && self.batch_size > self.dataset_size) {
            return Err(Error::InvalidConfig(format!(
                "batch size {} outside [1, {}]",
                self.batch_size, self.dataset_size
            )));
        }
        Ok(())
    }
}

fn one_hot_planes(probs: &ProbabilityMap, labels: &LabelMap) -> Result<Vec<f64>> {
    probs.require_labels(labels)?;
    Ok(ProbabilityMap::one_hot(labels, probs.classes())?.data().to_vec())
}

/// `-2 Σ_c (Σ p_c [y=c] + s) / (Σ p_c + Σ [y=c] + 2s)`, in `[-C, 0]`.
pub fn soft_dice_loss(probs: &ProbabilityMap, labels: &LabelMap, smooth: f64) -> Result<f64> {
    let y = one_hot_planes(probs, labels)?;
    let n = probs.voxels();
    Ok(-2.0
        * (0..probs.classes())
            .map(|c| {
                let (p, t) = (probs.class_plane(c), &y[c * n..(c + 1) * n]);
                let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
                let ps: f64 = p.iter().sum();
                let ts: f64 = t.iter().sum();
                (inter + smooth) / (ps + ts + 2.0 * smooth)
            })
            .sum::<f64>())
}

/// Voxel mean of `-ln p(true class)` with probabilities floored at 1e-12.
pub fn cross_entropy_loss(probs: &ProbabilityMap, labels: &LabelMap) -> Result<f64> {
    probs.require_labels(labels)?;
    let n = labels.len();
    Ok(labels
        .data()
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.get(y, i).max(model::PROB_FLOOR).ln())
        .sum::<f64>()
        / n as f64)
}

/// Dice + cross-entropy: the training loss.
pub fn total_loss(probs: &ProbabilityMap, labels: &LabelMap) -> Result<f64> {
    Ok(soft_dice_loss(probs, labels, model::DICE_SMOOTH)? + cross_entropy_loss(probs, labels)?)
}

/// `U = loss + (λ/2)‖w‖²`.
pub fn energy(loss: f64, weights: &WeightVector, lambda: f64) -> f64 {
    loss + 0.5 * lambda * weights.squared_norm()
}

/// Mean batch loss and the flat gradient of the energy.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradient<S> {
    pub loss: f64,
    pub gradient: Vec<S>,
}

/// Loss and flat loss-gradient for a single sample.
pub fn sample_loss_gradient<S: Scalar>(
    model: &Model,
    params: &[Tensor<S>],
    image: &Tensor<S>,
    onehot: &Tensor<S>,
    dropout: DropoutMode,
) -> Result<(f64, Vec<S>)> {
    let graph = model.train_graph();
    let layout = model.layout();
    let mut b = Bindings::new();
    bind_params(layout, params, &mut b);
    b.bind(model::IMAGE, image);
    b.bind(model::LABEL, onehot);
    let ev = evaluate(graph, &b, &EvalOptions::default().with_dropout(dropout))?;
    let loss = ev.output(graph, model::LOSS)?.item().to_f64().unwrap_or(f64::NAN);
    let grads = backward(graph, &ev, model::LOSS)?;
    let mut flat = Vec::with_capacity(layout.total());
    for e in layout.entries() {
        flat.extend_from_slice(grads.get(&e.name).expect("every parameter has a gradient").data());
    }
    Ok((loss, flat))
}

/// `(1/n_b) Σ_i ∇L(f_w(x_i), y_i) + λ w`, evaluated in precision `S`.
///
/// With `DropoutMode::Sample { seed }` each batch element gets its own mask,
/// keyed by `(seed, element index)`.
pub fn minibatch_gradient<S: Scalar>(
    model: &Model,
    weights: &WeightVector,
    batch: &[Sample],
    lambda: f64,
    dropout: DropoutMode,
) -> Result<BatchGradient<S>> {
    model.check_layout(weights)?;
    if batch.is_empty() {
        return Err(Error::Empty("empty mini-batch".into()));
    }
    let params = weights.tensors::<S>();
    let mut sum = vec![S::zero(); weights.len()];
    let mut loss = 0.0;
    for (i, s) in batch.iter().enumerate() {
        model.check_image(&s.image)?;
        let image: Tensor<S> = s.image.cast();
        let onehot = model.one_hot::<S>(&s.label)?;
        let mode = match dropout {
            DropoutMode::Off => DropoutMode::Off,
            DropoutMode::Sample { seed } => DropoutMode::Sample {
                seed: derive_seed(seed, "element", i as u64),
            },
        };
        let (l, g) = sample_loss_gradient(model, &params, &image, &onehot, mode)?;
        loss += l;
        for (a, v) in sum.iter_mut().zip(g) {
            *a = *a + v;
        }
    }
    let inv = S::lit(1.0 / batch.len() as f64);
    let lam = S::lit(lambda);
    for (a, &w) in sum.iter_mut().zip(weights.values()) {
        *a = *a * inv + lam * S::lit(f64::from(w));
    }
    Ok(BatchGradient {
        loss: loss / batch.len() as f64,
        gradient: sum,
    })
}

/// Mean batch loss without gradients, dropout off.
pub fn batch_loss(model: &Model, weights: &WeightVector, batch: &[Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let mut total = 0.0;
    for s in batch {
        let probs = model.predict(weights, &s.image, DropoutMode::Off)?;
        total += total_loss(&probs, &s.label)?;
    }
    Ok(total / batch.len() as f64)
}
