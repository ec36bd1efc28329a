//! Predictive maps, Monte-Carlo marginalisation and voxel-wise entropy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, WeightVector};
use crate::tensor::{DropoutMode, Scalar, Tensor};

/// Tolerance on the per-voxel probability sum.
pub const SUM_TOL: f64 = 1e-5;

/// Per-voxel categorical distribution, stored class-major `[C, ..spatial]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMap {
    classes: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(classes: usize, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if classes == 0 || data.len() != classes * n {
            return Err(Error::Shape(format!(
                "{} values for {classes} classes over {shape:?}",
                data.len()
            )));
        }
        let map = Self { classes, shape, data };
        for i in 0..n {
            let mut sum = 0.0;
            for c in 0..classes {
                let p = map.data[c * n + i];
                if !(p >= 0.0) {
                    return Err(Error::Shape(format!("invalid probability {p} at voxel {i}")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > SUM_TOL {
                return Err(Error::Shape(format!("voxel {i} sums to {sum}")));
            }
        }
        Ok(map)
    }

    /// Converts a `[C, ..spatial]` softmax output.
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        let (&c, rest) = t
            .shape()
            .split_first()
            .ok_or_else(|| Error::Shape("scalar is not a probability map".into()))?;
        let data = t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        Self::new(c, rest.to_vec(), data)
    }

    /// A one-hot map of the given labels.
    pub fn one_hot(labels: &LabelMap, classes: usize) -> Result<Self> {
        let n = labels.len();
        let mut data = vec![0.0; classes * n];
        for (i, &l) in labels.data().iter().enumerate() {
            if l >= classes {
                return Err(Error::Shape(format!("label {l} outside {classes} classes")));
            }
            data[l * n + i] = 1.0;
        }
        Self::new(classes, labels.shape().to_vec(), data)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Spatial shape.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn voxels(&self) -> usize {
        self.data.len() / self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Probability of class `c` at voxel `i`.
    pub fn get(&self, c: usize, i: usize) -> f64 {
        self.data[c * self.voxels() + i]
    }

    pub fn class_plane(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Distribution at voxel `i`.
    pub fn voxel(&self, i: usize) -> Vec<f64> {
        (0..self.classes).map(|c| self.get(c, i)).collect()
    }

    fn check_labels(&self, labels: &LabelMap) -> Result<()> {
        if labels.shape() != self.shape() {
            return Err(Error::Shape(format!(
                "labels {:?} vs probabilities {:?}",
                labels.shape(),
                self.shape
            )));
        }
        if let Some(l) = labels.data().iter().find(|&&l| l >= self.classes) {
            return Err(Error::Shape(format!("label {l} outside {} classes", self.classes)));
        }
        Ok(())
    }

    pub(crate) fn require_labels(&self, labels: &LabelMap) -> Result<()> {
        self.check_labels(labels)
    }
}

/// Hard per-voxel class assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    shape: Vec<usize>,
    data: Vec<usize>,
}

impl LabelMap {
    pub fn new(shape: Vec<usize>, data: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("{} labels for {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, label: usize) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![label; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [usize] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Binary mask of voxels labelled `class`.
    pub fn mask(&self, class: usize) -> crate::metrics::Mask {
        crate::metrics::Mask::from_fn(&self.shape, |i| self.data[i] == class)
    }

    pub fn contains(&self, class: usize) -> bool {
        self.data.contains(&class)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum EntropyMode {
    /// One-vs-rest entropy of class `class`, in `[0, ln 2]`.
    Binary { class: usize },
    /// Full categorical entropy, in `[0, ln C]`.
    Categorical,
}

/// Voxel-wise entropy in nats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyMap {
    pub mode: EntropyMode,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl UncertaintyMap {
    /// Values divided by `ln 2` (binary) or `ln C` (categorical), in `[0, 1]`.
    pub fn normalized(&self, classes: usize) -> Vec<f64> {
        let scale = match self.mode {
            EntropyMode::Binary { .. } => std::f64::consts::LN_2,
            EntropyMode::Categorical => (classes as f64).ln(),
        };
        self.data.iter().map(|h| (h / scale).clamp(0.0, 1.0)).collect()
    }
}

/// `-p ln p` with `0 ln 0 = 0`.
pub fn xlogx(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        -p * p.ln()
    }
}

pub fn binary_entropy(p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    xlogx(p) + xlogx(1.0 - p)
}

pub fn entropy_map(probs: &ProbabilityMap, mode: EntropyMode) -> Result<UncertaintyMap> {
    let n = probs.voxels();
    let data = match mode {
        EntropyMode::Binary { class } => {
            if class >= probs.classes() {
                return Err(Error::InvalidConfig(format!(
                    "class {class} outside {} classes",
                    probs.classes()
                )));
            }
            probs.class_plane(class).iter().map(|&p| binary_entropy(p)).collect()
        }
        EntropyMode::Categorical => (0..n)
            .map(|i| (0..probs.classes()).map(|c| xlogx(probs.get(c, i))).sum())
            .collect(),
    };
    Ok(UncertaintyMap {
        mode,
        shape: probs.shape().to_vec(),
        data,
    })
}

/// Per-voxel argmax; ties go to the lowest class index.
pub fn argmax_segmentation(probs: &ProbabilityMap) -> LabelMap {
    let n = probs.voxels();
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..probs.classes() {
                if probs.get(c, i) > probs.get(best, i) {
                    best = c;
                }
            }
            best
        })
        .collect();
    LabelMap {
        shape: probs.shape().to_vec(),
        data,
    }
}

/// Arithmetic mean of probability maps.
pub fn mean_maps(maps: &[ProbabilityMap]) -> Result<ProbabilityMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Empty("no maps to average".into()))?;
    let mut acc = vec![0.0; first.data.len()];
    for m in maps {
        if m.classes != first.classes || m.shape != first.shape {
            return Err(Error::Shape("maps of different shapes".into()));
        }
        for (a, v) in acc.iter_mut().zip(&m.data) {
            *a += v;
        }
    }
    let k = maps.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    ProbabilityMap::new(first.classes, first.shape.clone(), acc)
}

/// Probability-space average of the predictions of each weight sample.
pub fn ensemble_predict(
    model: &Model,
    samples: &[WeightVector],
    image: &Tensor<f32>,
) -> Result<ProbabilityMap> {
    if samples.is_empty() {
        return Err(Error::Empty("ensemble needs at least one sample".into()));
    }
    let maps = samples
        .iter()
        .map(|w| model.predict(w, image, DropoutMode::Off))
        .collect::<Result<Vec<_>>>()?;
    mean_maps(&maps)
}

/// Mean of `m` forward passes with freshly sampled dropout masks.
pub fn mc_dropout_predict(
    model: &Model,
    weights: &WeightVector,
    image: &Tensor<f32>,
    m: usize,
    rng: &mut impl Rng,
) -> Result<ProbabilityMap> {
    if !model.has_dropout() {
        return Err(Error::InvalidConfig("model has no dropout layers".into()));
    }
    if m == 0 {
        return Err(Error::Empty("at least one forward pass required".into()));
    }
    let maps = (0..m)
        .map(|_| model.predict_sampled(weights, image, rng))
        .collect::<Result<Vec<_>>>()?;
    mean_maps(&maps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map2(p: &[(f64, f64)]) -> ProbabilityMap {
        let n = p.len();
        let mut data = vec![0.0; 2 * n];
        for (i, &(a, b)) in p.iter().enumerate() {
            data[i] = a;
            data[n + i] = b;
        }
        ProbabilityMap::new(2, vec![n], data).unwrap()
    }

    #[test]
    fn rejects_invalid_distributions() {
        assert!(ProbabilityMap::new(2, vec![1], vec![0.7, 0.7]).is_err());
        assert!(ProbabilityMap::new(2, vec![1], vec![-0.1, 1.1]).is_err());
        assert!(ProbabilityMap::new(2, vec![2], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn mean_of_opposite_one_hots_is_uniform() {
        let m = mean_maps(&[map2(&[(1.0, 0.0)]), map2(&[(0.0, 1.0)])]).unwrap();
        assert_eq!(m.voxel(0), vec![0.5, 0.5]);
    }

    #[test]
    fn entropy_values() {
        let m = map2(&[(0.5, 0.5), (1.0, 0.0), (0.0, 1.0)]);
        let h = entropy_map(&m, EntropyMode::Binary { class: 1 }).unwrap();
        assert!((h.data[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(&h.data[1..], &[0.0, 0.0]);
        let u = ProbabilityMap::new(3, vec![1], vec![1.0 / 3.0; 3]).unwrap();
        let h = entropy_map(&u, EntropyMode::Categorical).unwrap();
        assert!((h.data[0] - 3f64.ln()).abs() < 1e-12);
        assert!(entropy_map(&u, EntropyMode::Binary { class: 3 }).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let m = ProbabilityMap::new(3, vec![1], vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(argmax_segmentation(&m).data(), &[1]);
        assert_eq!(argmax_segmentation(&map2(&[(0.5, 0.5)])).data(), &[0]);
        let l = LabelMap::new(vec![4], vec![2, 0, 1, 2]).unwrap();
        let oh = ProbabilityMap::one_hot(&l, 3).unwrap();
        assert_eq!(argmax_segmentation(&oh), l);
    }
}
