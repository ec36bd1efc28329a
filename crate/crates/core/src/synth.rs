//! Synthetic cardiac-like segmentation scenes, a controllable intensity
//! shift, and training-time augmentation.
//!
//! Classes: 0 background, 1 "LV" disk, 2 "MYO" annulus around the disk,
//! 3 "RV" blob next to the annulus.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::LabelMap;
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

pub const CLASSES: usize = 4;
const RV_STRETCH: f64 = 1.25;

/// One image `[1, h, w]` with its label map `[h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: LabelMap,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.label.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.label.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    /// Contrast exponent reached at full severity.
    pub gamma: f64,
    /// Invert intensities (`1 - x`) of shifted images.
    pub invert: bool,
    /// Noise std added at full severity.
    pub extra_noise: f64,
    /// Draw a per-image severity in `[0, 1]`; otherwise every image gets 1.
    pub random_severity: bool,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            gamma: 8.0,
            invert: false,
            extra_noise: 0.5,
            random_severity: true,
        }
    }
}

impl ShiftConfig {
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            invert: false,
            extra_noise: 0.0,
            random_severity: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Mean intensity of background, LV, MYO, RV.
    pub intensities: [f64; CLASSES],
    pub noise_std: f64,
    /// LV disk radius range in pixels.
    pub lv_radius: (f64, f64),
    /// Annulus thickness range.
    pub myo_thickness: (f64, f64),
    /// RV blob radius range.
    pub rv_radius: (f64, f64),
    /// Maximum offset of the LV centre from the image centre.
    pub max_offset: f64,
    pub shift: ShiftConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            intensities: [0.15, 0.85, 0.4, 0.65],
            noise_std: 0.08,
            lv_radius: (3.0, 4.5),
            myo_thickness: (1.5, 2.5),
            rv_radius: (2.5, 3.5),
            max_offset: 1.5,
            shift: ShiftConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("image {}x{} too small", self.height, self.width));
        }
        for (name, (lo, hi)) in [
            ("lv_radius", self.lv_radius),
            ("myo_thickness", self.myo_thickness),
            ("rv_radius", self.rv_radius),
        ] {
            if !(lo > 0.0 && hi >= lo) {
                return bad(format!("degenerate {name} range ({lo}, {hi})"));
            }
        }
        let reach = self.max_offset + self.lv_radius.1 + self.myo_thickness.1 + (0.6 + RV_STRETCH) * self.rv_radius.1;
        let half = (self.height.min(self.width) as f64 - 1.0) / 2.0;
        if reach >= half {
            return bad(format!("structures reach {reach:.1} px, beyond the frame radius {half:.1}"));
        }
        if !(self.noise_std >= 0.0 && self.shift.extra_noise >= 0.0 && self.shift.gamma > 0.0) {
            return bad("noise levels must be >= 0 and gamma > 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Counts {
    pub train: usize,
    pub val: usize,
    pub test_in: usize,
    pub test_shift: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Self {
            train: 48,
            val: 16,
            test_in: 24,
            test_shift: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scene: SceneConfig,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test_in: Vec<Sample>,
    pub test_shift: Vec<Sample>,
    /// Shift severity of each `test_shift` image.
    pub shift_severity: Vec<f64>,
}

/// Draws one scene. Intensities are noisy and unclamped.
pub fn render_scene(cfg: &SceneConfig, rng: &mut impl Rng) -> Sample {
    let (h, w) = (cfg.height, cfg.width);
    let u = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };
    let cy = (h as f64 - 1.0) / 2.0 + u(rng, (-cfg.max_offset, cfg.max_offset));
    let cx = (w as f64 - 1.0) / 2.0 + u(rng, (-cfg.max_offset, cfg.max_offset));
    let r_lv = u(rng, cfg.lv_radius);
    let r_myo = r_lv + u(rng, cfg.myo_thickness);
    let r_rv = u(rng, cfg.rv_radius);
    let angle = std::f64::consts::PI + u(rng, (-0.6, 0.6));
    let d_rv = r_myo + 0.6 * r_rv;
    let (ry, rx) = (cy + d_rv * angle.sin(), cx + d_rv * angle.cos());
    // slight anisotropy of the RV blob
    let stretch = u(rng, (1.0 / RV_STRETCH, RV_STRETCH));

    let mut labels = vec![0usize; h * w];
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            let d = (dy * dy + dx * dx).sqrt();
            let (ey, ex) = ((r as f64 - ry) / stretch, (c as f64 - rx) * stretch);
            labels[r * w + c] = if d <= r_lv {
                1
            } else if d <= r_myo {
                2
            } else if (ey * ey + ex * ex).sqrt() <= r_rv {
                3
            } else {
                0
            };
        }
    }
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    // low-frequency bias field
    let (gy, gx) = (u(rng, (-0.004, 0.004)), u(rng, (-0.004, 0.004)));
    let data = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let (r, c) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
            let bias = 1.0 + gy * r + gx * c;
            (cfg.intensities[l] * bias + noise.sample(rng)) as f32
        })
        .collect();
    Sample {
        image: Tensor::new(vec![1, h, w], data).expect("shape"),
        label: LabelMap::new(vec![h, w], labels).expect("shape"),
    }
}

/// Applies the domain shift at `severity` in `[0, 1]`.
pub fn apply_shift(image: &Tensor<f32>, shift: &ShiftConfig, severity: f64, rng: &mut impl Rng) -> Tensor<f32> {
    let gamma = shift.gamma.powf(severity);
    let sd = shift.extra_noise * severity;
    let noise = Normal::new(0.0, sd.max(0.0)).expect("finite std");
    let data = image
        .data()
        .iter()
        .map(|&v| {
            let mut x = f64::from(v);
            if gamma != 1.0 {
                x = x.clamp(0.0, 1.0).powf(gamma);
            }
            if shift.invert {
                x = 1.0 - x;
            }
            if sd > 0.0 {
                x += noise.sample(rng);
            }
            x as f32
        })
        .collect();
    Tensor::new(image.shape().to_vec(), data).expect("shape")
}

fn split_stream(seed: u64, split: &str, index: usize) -> crate::rng::StreamRng {
    stream(derive_seed(seed, "scene", 0), split, index as u64)
}

pub fn generate_dataset(scene: &SceneConfig, counts: Counts, seed: u64) -> Result<Dataset> {
    scene.validate()?;
    if counts.train == 0 || counts.val == 0 || counts.test_in == 0 || counts.test_shift == 0 {
        return Err(Error::InvalidConfig(format!("every split needs >= 1 image: {counts:?}")));
    }
    let make = |split: &str, n: usize| -> Vec<Sample> {
        (0..n).map(|i| render_scene(scene, &mut split_stream(seed, split, i))).collect()
    };
    let train = make("train", counts.train);
    let val = make("val", counts.val);
    let test_in = make("test_in", counts.test_in);
    // shifted images reuse the in-domain test scenes, keyed by index
    let mut test_shift = Vec::with_capacity(counts.test_shift);
    let mut shift_severity = Vec::with_capacity(counts.test_shift);
    for i in 0..counts.test_shift {
        let base = render_scene(scene, &mut split_stream(seed, "test_in", i));
        let mut rng = split_stream(seed, "shift", i);
        let severity = if scene.shift.random_severity {
            rng.random::<f64>()
        } else {
            1.0
        };
        test_shift.push(Sample {
            image: apply_shift(&base.image, &scene.shift, severity, &mut rng),
            label: base.label,
        });
        shift_severity.push(severity);
    }
    Ok(Dataset {
        scene: scene.clone(),
        seed,
        train,
        val,
        test_in,
        test_shift,
        shift_severity,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_horizontal: f64,
    pub flip_vertical: f64,
    /// Rotations drawn uniformly from `[-max, max]` degrees.
    pub rotation_deg: f64,
    pub intensity_scale: (f64, f64),
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_horizontal: 0.5,
            flip_vertical: 0.5,
            rotation_deg: 15.0,
            intensity_scale: (0.9, 1.1),
            noise_std: 0.02,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn identity() -> Self {
        Self {
            enabled: true,
            flip_horizontal: 0.0,
            flip_vertical: 0.0,
            rotation_deg: 0.0,
            intensity_scale: (1.0, 1.0),
            noise_std: 0.0,
        }
    }
}

pub fn flip_horizontal(s: &Sample) -> Sample {
    remap(s, |r, c, _h, w| (r, w - 1 - c))
}

pub fn flip_vertical(s: &Sample) -> Sample {
    remap(s, |r, c, h, _w| (h - 1 - r, c))
}

fn remap(s: &Sample, f: impl Fn(usize, usize, usize, usize) -> (usize, usize)) -> Sample {
    let (h, w) = (s.height(), s.width());
    let mut img = vec![0f32; h * w];
    let mut lab = vec![0usize; h * w];
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = f(r, c, h, w);
            img[r * w + c] = s.image.data()[sr * w + sc];
            lab[r * w + c] = s.label.data()[sr * w + sc];
        }
    }
    Sample {
        image: Tensor::new(vec![1, h, w], img).expect("shape"),
        label: LabelMap::new(vec![h, w], lab).expect("shape"),
    }
}

/// Rotates by `degrees` (counter-clockwise) about the image centre: bilinear
/// for the image (edge-clamped), nearest neighbour for labels (background
/// outside the frame).
pub fn rotate(s: &Sample, degrees: f64) -> Sample {
    let (h, w) = (s.height(), s.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let src = s.image.data();
    let mut img = vec![0f32; h * w];
    let mut lab = vec![0usize; h * w];
    let at = |r: isize, c: isize| -> f64 {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        f64::from(src[r * w + c])
    };
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            // inverse rotation of the output coordinate
            let sy = cy + cos * dy - sin * dx;
            let sx = cx + sin * dy + cos * dx;
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                lab[r * w + c] = s.label.data()[ny as usize * w + nx as usize];
            }
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            img[r * w + c] = v as f32;
        }
    }
    Sample {
        image: Tensor::new(vec![1, h, w], img).expect("shape"),
        label: LabelMap::new(vec![h, w], lab).expect("shape"),
    }
}

/// Random geometric transforms applied to image and label, intensity
/// transforms to the image only.
pub fn augment(s: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    if !cfg.enabled {
        return s.clone();
    }
    let mut out = s.clone();
    if cfg.flip_horizontal > 0.0 && rng.random::<f64>() < cfg.flip_horizontal {
        out = flip_horizontal(&out);
    }
    if cfg.flip_vertical > 0.0 && rng.random::<f64>() < cfg.flip_vertical {
        out = flip_vertical(&out);
    }
    if cfg.rotation_deg > 0.0 {
        let a = rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg);
        out = rotate(&out, a);
    }
    let (lo, hi) = cfg.intensity_scale;
    let scale = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("finite std"));
    if scale != 1.0 || noise.is_some() {
        for v in out.image.data_mut() {
            let mut x = f64::from(*v) * scale;
            if let Some(n) = &noise {
                x += n.sample(rng);
            }
            *v = x as f32;
        }
    }
    out
}

/// Number of 4-connected components of the pixels labelled `class`.
pub fn components(label: &LabelMap, class: usize) -> usize {
    let (h, w) = (label.shape()[0], label.shape()[1]);
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for start in 0..h * w {
        if seen[start] || label.data()[start] != class {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if !seen[j] && label.data()[j] == class {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
    }
    count
}
