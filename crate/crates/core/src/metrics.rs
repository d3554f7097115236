//! Pixel-level detection metrics and ROC sweeps.

use std::fmt::Write as _;

use irdet_tensor::Real;

use crate::data::Dataset;
use crate::error::Result;
use crate::net::Model;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    /// Counts of `prob >= threshold` against a binary mask.
    pub fn from_pixels(prob: &[f64], mask: &[f64], threshold: f64) -> Self {
        let mut c = Counts::default();
        for (&p, &m) in prob.iter().zip(mask) {
            match (p >= threshold, m > 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }

    /// `TP / (T + P − TP)`; 1 when both masks are empty.
    pub fn iou(self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    /// `TP / (TP + FN)`; 1 when there is nothing to detect.
    pub fn pd(self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, 1.0)
    }

    /// `FP / (FP + TN)`; 0 when there is no background.
    pub fn fa(self) -> f64 {
        ratio(self.fp, self.fp + self.tn, 0.0)
    }
}

fn ratio(a: u64, b: u64, empty: f64) -> f64 {
    if b == 0 {
        empty
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fa: f64,
    pub pd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub iou: f64,
    pub niou: f64,
    pub pd: f64,
    pub fa: f64,
    pub per_sample_iou: Vec<f64>,
    pub counts: Counts,
    pub threshold: f64,
    pub roc_points: Vec<RocPoint>,
}

impl MetricReport {
    pub fn from_sample_counts(per_sample: &[Counts], threshold: f64) -> Self {
        let counts = per_sample.iter().fold(Counts::default(), |a, &c| a.add(c));
        let per_sample_iou: Vec<f64> = per_sample.iter().map(|c| c.iou()).collect();
        let niou = if per_sample_iou.is_empty() {
            0.0
        } else {
            per_sample_iou.iter().sum::<f64>() / per_sample_iou.len() as f64
        };
        Self {
            iou: counts.iou(),
            niou,
            pd: counts.pd(),
            fa: counts.fa(),
            per_sample_iou,
            counts,
            threshold,
            roc_points: Vec::new(),
        }
    }

    /// `key: value` lines: the four metrics, then the counts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "iou: {}", self.iou).unwrap();
        writeln!(s, "niou: {}", self.niou).unwrap();
        writeln!(s, "pd: {}", self.pd).unwrap();
        writeln!(s, "fa: {}", self.fa).unwrap();
        writeln!(
            s,
            "counts: tp={} fp={} fn={} tn={}",
            self.counts.tp, self.counts.fp, self.counts.fn_, self.counts.tn
        )
        .unwrap();
        s
    }
}

/// Per-sample probabilities and masks flattened to `f64`.
pub struct Predictions {
    pub probs: Vec<Vec<f64>>,
    pub masks: Vec<Vec<f64>>,
}

impl Predictions {
    pub fn evaluate(&self, threshold: f64) -> MetricReport {
        let counts: Vec<Counts> = self
            .probs
            .iter()
            .zip(&self.masks)
            .map(|(p, m)| Counts::from_pixels(p, m, threshold))
            .collect();
        MetricReport::from_sample_counts(&counts, threshold)
    }

    pub fn roc(&self, thresholds: &[f64]) -> Vec<RocPoint> {
        thresholds
            .iter()
            .map(|&t| {
                let c = self
                    .probs
                    .iter()
                    .zip(&self.masks)
                    .fold(Counts::default(), |a, (p, m)| a.add(Counts::from_pixels(p, m, t)));
                RocPoint {
                    threshold: t,
                    fa: c.fa(),
                    pd: c.pd(),
                }
            })
            .collect()
    }
}

/// Inference over the dataset, `batch` samples at a time.
pub fn predict_dataset<T: Real>(model: &Model<T>, data: &Dataset, batch: usize) -> Result<Predictions> {
    let mut probs = Vec::with_capacity(data.len());
    let mut masks = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (images, m) = data.batch::<T>(chunk)?;
        let p = model.predict(&images)?;
        let per = p.numel() / chunk.len();
        for j in 0..chunk.len() {
            probs.push(p.data()[j * per..(j + 1) * per].iter().map(|v| v.as_f64()).collect());
            masks.push(m.data()[j * per..(j + 1) * per].iter().map(|v| v.as_f64()).collect());
        }
    }
    Ok(Predictions { probs, masks })
}

pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset, threshold: f64) -> Result<MetricReport> {
    Ok(predict_dataset(model, data, 4)?.evaluate(threshold))
}

/// Descending thresholds: `+∞`, `steps` interior points, then 0. The
/// endpoints pin the curve to (0, 0) and (1, 1).
pub fn roc_thresholds(steps: usize) -> Vec<f64> {
    let mut t = vec![f64::INFINITY];
    t.extend((1..=steps).rev().map(|i| i as f64 / (steps + 1) as f64));
    t.push(0.0);
    t
}

pub fn roc_sweep<T: Real>(model: &Model<T>, data: &Dataset, thresholds: &[f64]) -> Result<Vec<RocPoint>> {
    Ok(predict_dataset(model, data, 4)?.roc(thresholds))
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold,fa,pd\n");
    for p in points {
        writeln!(s, "{},{},{}", p.threshold, p.fa, p.pd).unwrap();
    }
    s
}
