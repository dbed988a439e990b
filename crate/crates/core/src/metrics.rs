//! Segmentation scores: confusion counts, IoU/Dice and percentile Hausdorff.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        ConfusionCounts { tp: vec![0; num_classes], fp: vec![0; num_classes], fn_: vec![0; num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Data(format!(
                "cannot merge counts over {} and {} classes",
                self.num_classes(),
                other.num_classes()
            )));
        }
        for c in 0..self.num_classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        Ok(())
    }
}

/// Per-class counts of two label masks of equal length.
pub fn confusion(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!("mask sizes differ: {} vs {}", pred.len(), gt.len())));
    }
    let mut c = ConfusionCounts::new(num_classes);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(Error::Data(format!("label {} out of range for {num_classes} classes", p.max(g))));
        }
        if p == g {
            c.tp[p] += 1;
        } else {
            c.fp[p] += 1;
            c.fn_[g] += 1;
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Two classes, background 0 and foreground 1.
    Binary,
    Multiclass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub per_class_iou: Vec<f64>,
    pub per_class_dice: Vec<f64>,
    /// Means over all classes, background included.
    pub miou: f64,
    pub mdice: f64,
    /// Mean Dice over the foreground classes `1..K`.
    pub dsc_mean: f64,
    /// Classes absent from both prediction and ground truth; scored 1.
    pub empty_classes: Vec<usize>,
}

pub fn scores(c: &ConfusionCounts, mode: ScoreMode) -> Result<Scores> {
    let k = c.num_classes();
    if mode == ScoreMode::Binary && k != 2 {
        return Err(Error::Data(format!("binary scoring needs 2 classes, got {k}")));
    }
    if k == 0 {
        return Err(Error::Data("no classes to score".into()));
    }
    let mut iou = Vec::with_capacity(k);
    let mut dice = Vec::with_capacity(k);
    let mut empty = Vec::new();
    for i in 0..k {
        let (tp, fp, fn_) = (c.tp[i] as f64, c.fp[i] as f64, c.fn_[i] as f64);
        if tp + fp + fn_ == 0.0 {
            empty.push(i);
            iou.push(1.0);
            dice.push(1.0);
        } else {
            iou.push(tp / (tp + fp + fn_));
            dice.push(2.0 * tp / (2.0 * tp + fp + fn_));
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 1.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let fg = if k > 1 { &dice[1..] } else { &dice[..] };
    Ok(Scores { miou: mean(&iou), mdice: mean(&dice), dsc_mean: mean(fg), per_class_iou: iou, per_class_dice: dice, empty_classes: empty })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HausdorffFlag {
    Ok,
    BothEmpty,
    /// Exactly one mask is empty; the distance is the image diagonal.
    OneEmpty,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hausdorff {
    pub distance: f64,
    pub flag: HausdorffFlag,
}

/// Foreground pixels with a 4-neighbour outside the mask (the image edge
/// counts as outside).
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !(at(yi - 1, xi) && at(yi + 1, xi) && at(yi, xi - 1) && at(yi, xi + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Nearest-rank percentile of `values` (sorted in place), `p ∈ (0, 100]`.
fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

fn directed(from: &[(usize, usize)], to: &[(usize, usize)], p: f64) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(ty, tx)| {
                    let (dy, dx) = (y as f64 - ty as f64, x as f64 - tx as f64);
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    percentile(&mut d, p)
}

/// Symmetric percentile Hausdorff distance between the boundaries of two
/// binary masks, in pixels.
pub fn hausdorff(pred: &[bool], gt: &[bool], h: usize, w: usize, percentile_p: f64) -> Result<Hausdorff> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(Error::Data(format!("masks must have {h}×{w} pixels")));
    }
    if !(percentile_p > 0.0 && percentile_p <= 100.0) {
        return Err(Error::Config(format!("percentile {percentile_p} must lie in (0, 100]")));
    }
    let (bp, bg) = (boundary(pred, h, w), boundary(gt, h, w));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => Ok(Hausdorff { distance: 0.0, flag: HausdorffFlag::BothEmpty }),
        (true, false) | (false, true) => Ok(Hausdorff {
            distance: ((h * h + w * w) as f64).sqrt(),
            flag: HausdorffFlag::OneEmpty,
        }),
        (false, false) => Ok(Hausdorff {
            distance: directed(&bp, &bg, percentile_p).max(directed(&bg, &bp, percentile_p)),
            flag: HausdorffFlag::Ok,
        }),
    }
}

/// Evaluation summary with a fixed JSON layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub per_class_iou: Vec<f64>,
    pub per_class_dice: Vec<f64>,
    pub miou: f64,
    pub mdice: f64,
    pub dsc_mean: f64,
    pub hd: f64,
    pub hd95: f64,
    pub params: u64,
    pub flops: u64,
}

impl MetricsReport {
    pub fn new(s: &Scores, hd: f64, hd95: f64, params: u64, flops: u64) -> Self {
        MetricsReport {
            per_class_iou: s.per_class_iou.clone(),
            per_class_dice: s.per_class_dice.clone(),
            miou: s.miou,
            mdice: s.mdice,
            dsc_mean: s.dsc_mean,
            hd,
            hd95,
            params,
            flops,
        }
    }
}
