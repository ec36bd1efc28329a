//! Weight-space and function-space diversity of posterior samples, and
//! two-dimensional loss-plane slices.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::LabelMap;
use crate::linalg::{dot, symmetric_eigen, SymMatrix};
use crate::metrics::Mask;
use crate::model::{Layout, WeightVector};

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-6;
/// Anchors are stored in f32, so collinearity is judged at that precision.
const COLLINEAR_TOL: f64 = 1e-6;
const DSC_SMOOTH: f64 = crate::model::DICE_SMOOTH;

fn as_f64(w: &WeightVector) -> Vec<f64> {
    w.values().iter().map(|&v| f64::from(v)).collect()
}

fn same_layout(samples: &[WeightVector]) -> Result<()> {
    if let Some(first) = samples.first() {
        if samples.iter().any(|s| s.layout() != first.layout()) {
            return Err(Error::LayoutMismatch("samples with different layouts".into()));
        }
    }
    Ok(())
}

/// Pairwise cosine similarities; the diagonal is exactly one.
pub fn cosine_matrix(samples: &[WeightVector]) -> Result<Vec<Vec<f64>>> {
    if samples.len() < 2 {
        return Err(Error::Empty(format!("{} samples; need at least 2", samples.len())));
    }
    same_layout(samples)?;
    let v: Vec<Vec<f64>> = samples.iter().map(as_f64).collect();
    let norms: Vec<f64> = v.iter().map(|x| dot(x, x).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Degenerate(format!("sample {i} has zero norm")));
    }
    let m = v.len();
    let mut out = vec![vec![1.0; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let c = dot(&v[i], &v[j]) / (norms[i] * norms[j]);
            out[i][j] = c;
            out[j][i] = c;
        }
    }
    Ok(out)
}

/// Mean of the entries `(i, j)` with `group[i] == group[j]` (i ≠ j) and of
/// those with different groups.
pub fn within_between_means(matrix: &[Vec<f64>], group: &[usize]) -> (f64, f64) {
    let (mut w, mut nw, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..matrix.len() {
        for j in 0..matrix.len() {
            if i == j {
                continue;
            }
            if group[i] == group[j] {
                w += matrix[i][j];
                nw += 1;
            } else {
                b += matrix[i][j];
                nb += 1;
            }
        }
    }
    (w / nw as f64, b / nb as f64)
}

/// Singular values (descending) of the matrix whose columns are `cols`,
/// from the eigenvalues of the Gram matrix.
pub fn singular_values(cols: &[Vec<f64>]) -> Vec<f64> {
    let m = cols.len();
    let gram = SymMatrix::from_fn(m, |i, j| dot(&cols[i], &cols[j]));
    symmetric_eigen(&gram).values.into_iter().map(|l| l.max(0.0).sqrt()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub volume: f64,
    pub singular_values: Vec<f64>,
    /// Fewer than `n_sigma` singular values above tolerance.
    pub rank_deficient: bool,
}

/// Product of the `n_sigma` largest singular values of the column matrix.
pub fn explored_volume_columns(cols: &[Vec<f64>], n_sigma: usize) -> Result<VolumeReport> {
    if n_sigma == 0 || cols.len() < n_sigma {
        return Err(Error::InvalidConfig(format!(
            "{} samples cannot span {n_sigma} directions",
            cols.len()
        )));
    }
    let sv = singular_values(cols);
    let tol = RANK_TOL * sv[0];
    let rank = sv.iter().filter(|&&s| s > tol).count();
    if rank < n_sigma {
        log::warn!("sample matrix has rank {rank} < {n_sigma}; volume reported as 0");
        return Ok(VolumeReport {
            volume: 0.0,
            singular_values: sv,
            rank_deficient: true,
        });
    }
    Ok(VolumeReport {
        volume: sv[..n_sigma].iter().product(),
        singular_values: sv,
        rank_deficient: false,
    })
}

pub fn explored_volume(samples: &[WeightVector], n_sigma: usize) -> Result<VolumeReport> {
    same_layout(samples)?;
    let cols: Vec<Vec<f64>> = samples.iter().map(as_f64).collect();
    explored_volume_columns(&cols, n_sigma)
}

/// Voxels where the ensemble prediction disagrees with the ground truth.
pub fn error_mask(ensemble: &LabelMap, truth: &LabelMap) -> Result<Mask> {
    if ensemble.shape() != truth.shape() {
        return Err(Error::Shape("prediction and truth differ in shape".into()));
    }
    Ok(Mask::from_fn(ensemble.shape(), |i| ensemble.data()[i] != truth.data()[i]))
}

/// Smoothed per-class Dice of two error-masked predictions, averaged over
/// foreground classes present in either; 1 when none is present.
pub fn masked_dsc(a: &LabelMap, b: &LabelMap, errors: &Mask, classes: usize) -> f64 {
    let mut total = 0.0;
    let mut present = 0;
    for c in 1..classes {
        let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
        for (i, &e) in errors.data.iter().enumerate() {
            if !e {
                continue;
            }
            let (x, y) = (a.data()[i] == c, b.data()[i] == c);
            na += usize::from(x);
            nb += usize::from(y);
            inter += usize::from(x && y);
        }
        if na + nb > 0 {
            present += 1;
            total += 2.0 * (inter as f64 + DSC_SMOOTH) / ((na + nb) as f64 + 2.0 * DSC_SMOOTH);
        }
    }
    if present == 0 {
        1.0
    } else {
        total / present as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distance {
    pub value: f64,
    /// Images left out because their error mask was empty.
    pub skipped: usize,
}

/// `1 - mean DSC(e∘a, e∘b)` over images with a non-empty error mask.
pub fn functional_distance(a: &[LabelMap], b: &[LabelMap], errors: &[Mask], classes: usize) -> Result<Distance> {
    if a.len() != b.len() || a.len() != errors.len() {
        return Err(Error::Shape("prediction lists of different lengths".into()));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for ((x, y), e) in a.iter().zip(b).zip(errors) {
        if x.shape() != y.shape() || x.len() != e.data.len() {
            return Err(Error::Shape("prediction and mask shapes differ".into()));
        }
        if e.is_empty() {
            continue;
        }
        sum += masked_dsc(x, y, e, classes);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Undefined("every error mask is empty".into()));
    }
    Ok(Distance {
        value: 1.0 - sum / used as f64,
        skipped: a.len() - used,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionalReport {
    /// `(M+1) x (M+1)` distances; the last row/column is the ensemble.
    pub matrix: Vec<Vec<f64>>,
    /// Mean of each row without its diagonal entry.
    pub row_means: Vec<f64>,
    /// Mean distance over distinct sample pairs (ensemble excluded).
    pub mean_pairwise: f64,
    pub skipped_images: usize,
}

/// Functional distances among `sample_preds[m][image]` and the ensemble.
pub fn diversity_confusion(
    sample_preds: &[Vec<LabelMap>],
    ensemble: &[LabelMap],
    truth: &[LabelMap],
    classes: usize,
) -> Result<FunctionalReport> {
    if sample_preds.len() < 2 {
        return Err(Error::Empty("need at least 2 samples".into()));
    }
    let errors = ensemble
        .iter()
        .zip(truth)
        .map(|(e, t)| error_mask(e, t))
        .collect::<Result<Vec<_>>>()?;
    let mut all: Vec<&[LabelMap]> = sample_preds.iter().map(Vec::as_slice).collect();
    all.push(ensemble);
    let n = all.len();
    let mut matrix = vec![vec![0.0; n]; n];
    let mut skipped = 0;
    for i in 0..n {
        for j in i + 1..n {
            let d = functional_distance(all[i], all[j], &errors, classes)?;
            matrix[i][j] = d.value;
            matrix[j][i] = d.value;
            skipped = d.skipped;
        }
    }
    let row_means = matrix
        .iter()
        .map(|row| row.iter().sum::<f64>() / (n - 1) as f64)
        .collect();
    let m = n - 1;
    let mut pair_sum = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            pair_sum += matrix[i][j];
        }
    }
    Ok(FunctionalReport {
        matrix,
        row_means,
        mean_pairwise: pair_sum / (m * (m - 1) / 2) as f64,
        skipped_images: skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum PlaneMode {
    /// Centre the samples and span the plane with two principal directions
    /// (1-based component indices).
    Pca { first: usize, second: usize },
    /// Orthonormalise `(w2 - w1, w3 - w1)` around the origin `w1`.
    GramSchmidt,
}

impl PlaneMode {
    pub fn pca_default() -> Self {
        PlaneMode::Pca { first: 2, second: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        match self.steps {
            0 => vec![],
            1 => vec![self.min],
            n => (0..n)
                .map(|k| self.min + (self.max - self.min) * k as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

/// Origin and orthonormal directions of a 2-D slice through weight space.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub origin: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    layout: Arc<Layout>,
    /// Plane coordinates of the anchors (Gram–Schmidt mode).
    pub anchor_coords: Vec<(f64, f64)>,
}

impl Plane {
    pub fn point(&self, a: f64, b: f64) -> WeightVector {
        let values = self
            .origin
            .iter()
            .zip(&self.u)
            .zip(&self.v)
            .map(|((o, u), v)| (o + a * u + b * v) as f32)
            .collect();
        WeightVector::unflatten(values, Arc::clone(&self.layout)).expect("layout")
    }
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = dot(x, x).sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

pub fn build_plane(mode: PlaneMode, anchors: &[WeightVector]) -> Result<Plane> {
    same_layout(anchors)?;
    let layout = anchors
        .first()
        .ok_or_else(|| Error::Empty("no anchors".into()))?
        .layout()
        .clone();
    let cols: Vec<Vec<f64>> = anchors.iter().map(as_f64).collect();
    match mode {
        PlaneMode::GramSchmidt => {
            if cols.len() != 3 {
                return Err(Error::InvalidConfig(format!("{} anchors; need exactly 3", cols.len())));
            }
            let origin = cols[0].clone();
            let mut u: Vec<f64> = cols[1].iter().zip(&origin).map(|(a, b)| a - b).collect();
            let d3: Vec<f64> = cols[2].iter().zip(&origin).map(|(a, b)| a - b).collect();
            let nu = normalize(&mut u);
            let p = dot(&d3, &u);
            let mut v: Vec<f64> = d3.iter().zip(&u).map(|(a, b)| a - p * b).collect();
            let nv = normalize(&mut v);
            let scale = dot(&d3, &d3).sqrt().max(nu);
            if nu == 0.0 || nv <= COLLINEAR_TOL * scale {
                return Err(Error::Degenerate("anchors are collinear".into()));
            }
            Ok(Plane {
                origin,
                u,
                v,
                layout,
                anchor_coords: vec![(0.0, 0.0), (nu, 0.0), (p, nv)],
            })
        }
        PlaneMode::Pca { first, second } => {
            let m = cols.len();
            if m < 6 {
                return Err(Error::InvalidConfig(format!("{m} samples; need at least 6")));
            }
            if first == 0 || second == 0 || first == second || first.max(second) >= m {
                return Err(Error::InvalidConfig(format!("invalid components ({first}, {second})")));
            }
            let d = cols[0].len();
            let mean: Vec<f64> = (0..d).map(|k| cols.iter().map(|c| c[k]).sum::<f64>() / m as f64).collect();
            let centered: Vec<Vec<f64>> = cols
                .iter()
                .map(|c| c.iter().zip(&mean).map(|(a, b)| a - b).collect())
                .collect();
            let gram = SymMatrix::from_fn(m, |i, j| dot(&centered[i], &centered[j]));
            let eig = symmetric_eigen(&gram);
            let direction = |p: usize| -> Result<Vec<f64>> {
                let lam = eig.values[p - 1];
                if !(lam > RANK_TOL * RANK_TOL * eig.values[0]) {
                    return Err(Error::Degenerate(format!("component {p} has no variance")));
                }
                let mut out = vec![0.0; d];
                for (c, &coef) in centered.iter().zip(&eig.vectors[p - 1]) {
                    for (o, x) in out.iter_mut().zip(c) {
                        *o += coef * x;
                    }
                }
                normalize(&mut out);
                Ok(out)
            };
            Ok(Plane {
                u: direction(first)?,
                v: direction(second)?,
                origin: mean,
                layout,
                anchor_coords: vec![],
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossGrid {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// `loss[i][j]` at `(a[i], b[j])`.
    pub loss: Vec<Vec<f64>>,
    pub anchor_coords: Vec<(f64, f64)>,
}

/// Evaluates `loss` on the grid spanned by the plane of `anchors`.
pub fn loss_plane(
    mode: PlaneMode,
    anchors: &[WeightVector],
    a_axis: Axis,
    b_axis: Axis,
    mut loss: impl FnMut(&WeightVector) -> Result<f64>,
) -> Result<LossGrid> {
    let plane = build_plane(mode, anchors)?;
    let (a, b) = (a_axis.values(), b_axis.values());
    let grid = a
        .iter()
        .map(|&x| b.iter().map(|&y| loss(&plane.point(x, y))).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(LossGrid {
        a,
        b,
        loss: grid,
        anchor_coords: plane.anchor_coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(v: &[usize]) -> LabelMap {
        LabelMap::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn masked_dsc_extremes() {
        let e = Mask::from_fn(&[1, 4], |_| true);
        assert!((masked_dsc(&lm(&[1, 2, 0, 1]), &lm(&[1, 2, 0, 1]), &e, 3) - 1.0).abs() < 1e-15);
        assert!(masked_dsc(&lm(&[1, 1, 0, 0]), &lm(&[2, 2, 0, 0]), &e, 3) < 1e-5);
        assert_eq!(masked_dsc(&lm(&[0, 0, 0, 0]), &lm(&[0, 0, 0, 0]), &e, 3), 1.0);
    }

    #[test]
    fn all_empty_masks_are_undefined() {
        let e = vec![Mask::empty(1, 2)];
        assert!(matches!(
            functional_distance(&[lm(&[1, 0])], &[lm(&[0, 1])], &e, 2),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn axis_values() {
        assert_eq!(Axis { min: -1.0, max: 1.0, steps: 3 }.values(), vec![-1.0, 0.0, 1.0]);
    }
}
