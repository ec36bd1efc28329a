//! Overlap, surface-distance and voxel-wise calibration metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{LabelMap, ProbabilityMap};

pub const DEFAULT_BINS: usize = 10;
const NLL_FLOOR: f64 = 1e-12;

/// Binary 2-D mask `[h, w]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} voxels for {height}x{width}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Builds from a spatial shape; 1-D shapes are treated as a single row.
    pub fn from_fn(shape: &[usize], f: impl Fn(usize) -> bool) -> Self {
        let (height, width) = match shape {
            [h, w] => (*h, *w),
            _ => (1, shape.iter().product()),
        };
        Self {
            height,
            width,
            data: (0..height * width).map(f).collect(),
        }
    }

    pub fn rect(height: usize, width: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Self {
        Self::from_fn(&[height, width], |i| rows.contains(&(i / width)) && cols.contains(&(i % width)))
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    /// Voxels of the mask with a 4-neighbour outside the mask (or the image).
    pub fn border(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if !self.get(r, c) {
                    continue;
                }
                let edge = r == 0
                    || c == 0
                    || r + 1 == self.height
                    || c + 1 == self.width
                    || !self.get(r - 1, c)
                    || !self.get(r + 1, c)
                    || !self.get(r, c - 1)
                    || !self.get(r, c + 1);
                if edge {
                    out.push((r, c));
                }
            }
        }
        out
    }

    fn same_shape(&self, other: &Mask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape(format!(
                "masks {}x{} and {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    a.same_shape(b)?;
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Average symmetric surface distance with per-axis `spacing` (row, column).
///
/// Errors with [`Error::Undefined`] when either mask is empty.
pub fn assd(a: &Mask, b: &Mask, spacing: [f64; 2]) -> Result<f64> {
    a.same_shape(b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::Undefined("surface distance of an empty mask".into()));
    }
    let (sa, sb) = (a.border(), b.border());
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> f64 {
        from.iter()
            .map(|&(r, c)| {
                to.iter()
                    .map(|&(r2, c2)| {
                        let dr = (r as f64 - r2 as f64) * spacing[0];
                        let dc = (c as f64 - c2 as f64) * spacing[1];
                        dr * dr + dc * dc
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * (directed(&sa, &sb) + directed(&sb, &sa)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub brier: f64,
    pub nll: f64,
    pub voxels: usize,
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationReport {
    /// ECE recomputed from the bin table.
    pub fn ece_from_bins(&self) -> f64 {
        if self.voxels == 0 {
            return 0.0;
        }
        self.bins
            .iter()
            .map(|b| b.count as f64 / self.voxels as f64 * (b.mean_confidence - b.mean_accuracy).abs())
            .sum()
    }
}

/// Index of the right-closed bin `((i)/B, (i+1)/B]` holding `conf`; zero
/// lands in the first bin.
pub fn bin_index(conf: f64, bins: usize) -> usize {
    let b = bins as f64;
    let mut i = ((conf * b).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    // guard against rounding in conf * B
    while i + 1 < bins && conf > (i + 1) as f64 / b {
        i += 1;
    }
    while i > 0 && conf <= i as f64 / b {
        i -= 1;
    }
    i
}

/// Pools voxels from any number of maps into one calibration report.
#[derive(Clone, Debug)]
pub struct CalibrationAccumulator {
    bins: usize,
    foreground_only: bool,
    count: Vec<usize>,
    conf_sum: Vec<f64>,
    correct: Vec<usize>,
    brier_sum: f64,
    nll_sum: f64,
    voxels: usize,
}

impl CalibrationAccumulator {
    pub fn new(bins: usize) -> Self {
        assert!(bins >= 1, "at least one bin");
        Self {
            bins,
            foreground_only: false,
            count: vec![0; bins],
            conf_sum: vec![0.0; bins],
            correct: vec![0; bins],
            brier_sum: 0.0,
            nll_sum: 0.0,
            voxels: 0,
        }
    }

    /// Restrict to voxels whose true label is not background (class 0).
    pub fn foreground_only(mut self, on: bool) -> Self {
        self.foreground_only = on;
        self
    }

    pub fn add(&mut self, probs: &ProbabilityMap, labels: &LabelMap) -> Result<()> {
        probs.require_labels(labels)?;
        let c = probs.classes();
        for (i, &y) in labels.data().iter().enumerate() {
            if self.foreground_only && y == 0 {
                continue;
            }
            let mut best = 0;
            let mut sq = 0.0;
            for k in 0..c {
                let p = probs.get(k, i);
                if p > probs.get(best, i) {
                    best = k;
                }
                let t = if k == y { 1.0 } else { 0.0 };
                sq += (p - t) * (p - t);
            }
            let conf = probs.get(best, i);
            let b = bin_index(conf, self.bins);
            self.count[b] += 1;
            self.conf_sum[b] += conf;
            self.correct[b] += usize::from(best == y);
            self.brier_sum += sq;
            self.nll_sum += -probs.get(y, i).max(NLL_FLOOR).ln();
            self.voxels += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> CalibrationReport {
        let n = self.voxels as f64;
        let bins: Vec<CalibrationBin> = (0..self.bins)
            .map(|i| {
                let k = self.count[i];
                let (mc, ma) = if k == 0 {
                    (0.0, 0.0)
                } else {
                    (self.conf_sum[i] / k as f64, self.correct[i] as f64 / k as f64)
                };
                CalibrationBin {
                    lower: i as f64 / self.bins as f64,
                    upper: (i + 1) as f64 / self.bins as f64,
                    count: k,
                    mean_confidence: mc,
                    mean_accuracy: ma,
                }
            })
            .collect();
        let mut report = CalibrationReport {
            ece: 0.0,
            brier: if n > 0.0 { self.brier_sum / n } else { 0.0 },
            nll: if n > 0.0 { self.nll_sum / n } else { 0.0 },
            voxels: self.voxels,
            bins,
        };
        report.ece = report.ece_from_bins();
        report
    }
}

pub fn calibration(probs: &ProbabilityMap, labels: &LabelMap, bins: usize) -> Result<CalibrationReport> {
    let mut acc = CalibrationAccumulator::new(bins);
    acc.add(probs, labels)?;
    Ok(acc.finish())
}

pub fn ece(probs: &ProbabilityMap, labels: &LabelMap, bins: usize) -> Result<f64> {
    Ok(calibration(probs, labels, bins)?.ece)
}

pub fn brier(probs: &ProbabilityMap, labels: &LabelMap) -> Result<f64> {
    Ok(calibration(probs, labels, 1)?.brier)
}

pub fn nll(probs: &ProbabilityMap, labels: &LabelMap) -> Result<f64> {
    Ok(calibration(probs, labels, 1)?.nll)
}

/// Mean and (population) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}
