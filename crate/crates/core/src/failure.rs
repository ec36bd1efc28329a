//! Image-level confidence from voxel-wise entropy and its evaluation as a
//! failure detector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Mask;

/// Soft true-foreground, false-foreground and false-background maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMaps {
    pub tf: Vec<f64>,
    pub ff: Vec<f64>,
    pub fb: Vec<f64>,
}

/// `TF = S (1 - H)`, `FF = S H`, `FB = (1 - S) H` with `H` in `[0, 1]`.
pub fn tf_ff_fb(seg: &Mask, entropy: &[f64]) -> Result<SoftMaps> {
    if seg.data.len() != entropy.len() {
        return Err(Error::Shape(format!(
            "mask of {} voxels vs entropy of {}",
            seg.data.len(),
            entropy.len()
        )));
    }
    let mut m = SoftMaps {
        tf: Vec::with_capacity(entropy.len()),
        ff: Vec::with_capacity(entropy.len()),
        fb: Vec::with_capacity(entropy.len()),
    };
    for (&s, &h) in seg.data.iter().zip(entropy) {
        let s = if s { 1.0 } else { 0.0 };
        m.tf.push(s * (1.0 - h));
        m.ff.push(s * h);
        m.fb.push((1.0 - s) * h);
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confidence {
    pub score: f64,
    /// The score was defined as 0 because `2|TF| + |FF| + |FB|` vanished.
    pub degenerate: bool,
}

/// `2|TF| / (2|TF| + |FF| + |FB|)`, a Dice analogue in `[0, 1]`.
pub fn confidence_score(seg: &Mask, entropy: &[f64]) -> Result<Confidence> {
    let m = tf_ff_fb(seg, entropy)?;
    let tf: f64 = m.tf.iter().sum();
    let ff: f64 = m.ff.iter().sum();
    let fb: f64 = m.fb.iter().sum();
    let den = 2.0 * tf + ff + fb;
    Ok(if den > 0.0 {
        Confidence {
            score: (2.0 * tf / den).clamp(0.0, 1.0),
            degenerate: false,
        }
    } else {
        Confidence {
            score: 0.0,
            degenerate: true,
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureRule {
    /// Low Dice and large surface distance.
    And,
    /// Either criterion alone.
    Or,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailureConfig {
    pub dice_threshold: f64,
    /// In pixels.
    pub assd_threshold: f64,
    pub rule: FailureRule,
}

impl Default for FailureConfig {
    fn default() -> Self {
        Self {
            dice_threshold: 0.8,
            assd_threshold: 2.0,
            rule: FailureRule::And,
        }
    }
}

/// Failure label; `assd = None` (undefined, an empty mask) counts as
/// exceeding the distance threshold.
pub fn label_failure(dice: f64, assd: Option<f64>, cfg: &FailureConfig) -> bool {
    let low = dice < cfg.dice_threshold;
    let far = assd.is_none_or(|d| d > cfg.assd_threshold);
    match cfg.rule {
        FailureRule::And => low && far,
        FailureRule::Or => low || far,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub auc: f64,
    pub points: Vec<RocPoint>,
}

/// ROC of the detector "confidence at or below the threshold predicts a
/// failure"; `failures[i]` marks the positives. Tied scores move together,
/// which makes the trapezoid area equal the pair-counting statistic.
pub fn roc_auc(confidence: &[f64], failures: &[bool]) -> Result<Roc> {
    if confidence.len() != failures.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    let pos = failures.iter().filter(|&&f| f).count();
    let neg = failures.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("need both failures and successes".into()));
    }
    if confidence.iter().any(|c| c.is_nan()) {
        return Err(Error::NonFinite { op: "roc scores".into() });
    }
    let mut order: Vec<usize> = (0..confidence.len()).collect();
    order.sort_by(|&a, &b| confidence[a].total_cmp(&confidence[b]));
    let mut points = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = confidence[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && confidence[order[i]] == t {
            if failures[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(Roc {
        auc: auc / (pos * neg) as f64,
        points,
    })
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape("need two equally long series of length >= 2".into()));
    }
    Ok(pearson(&ranks(x), &ranks(y)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub image: usize,
    pub class: usize,
    pub dice: f64,
    pub assd: Option<f64>,
    pub confidence: f64,
    pub degenerate_confidence: bool,
    pub failure: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: usize,
    /// `None` when only one outcome occurred.
    pub auc: Option<f64>,
    pub spearman: Option<f64>,
    pub failures: usize,
    pub roc: Vec<RocPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub rows: Vec<FailureRow>,
    pub classes: Vec<ClassSummary>,
}

/// Per-class AUC and confidence/Dice rank correlation over `rows`.
pub fn summarize(rows: Vec<FailureRow>) -> FailureReport {
    let mut classes: Vec<usize> = rows.iter().map(|r| r.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let summaries = classes
        .into_iter()
        .map(|c| {
            let sel: Vec<&FailureRow> = rows.iter().filter(|r| r.class == c).collect();
            let conf: Vec<f64> = sel.iter().map(|r| r.confidence).collect();
            let fail: Vec<bool> = sel.iter().map(|r| r.failure).collect();
            let dice: Vec<f64> = sel.iter().map(|r| r.dice).collect();
            let roc = roc_auc(&conf, &fail).ok();
            ClassSummary {
                class: c,
                auc: roc.as_ref().map(|r| r.auc),
                spearman: spearman(&conf, &dice).ok().filter(|s| s.is_finite()),
                failures: fail.iter().filter(|&&f| f).count(),
                roc: roc.map(|r| r.points).unwrap_or_default(),
            }
        })
        .collect();
    FailureReport {
        rows,
        classes: summaries,
    }
}
