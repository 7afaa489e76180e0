//! Pixel confusion counts and the IoU, F1-score and accuracy metrics,
//! with micro (pixel-pooled) and per-image aggregation.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{load_patch_pair, DatasetManifest, MaskPatch, Split};
use crate::error::{Error, Result};
use crate::model::Model;

/// Pixel tallies with PV as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// `TP / (TP + FN + FP)`; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fn_ + self.fp;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }

    /// `2TP / (2TP + FN + FP)`; 1 when both masks are empty.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fn_ + self.fp;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    /// `(TP + TN) / total`.
    pub fn accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Metric("accuracy of zero evaluated pixels".into())),
            t => Ok((self.tp + self.tn) as f64 / t as f64),
        }
    }

    /// Counts with prediction and ground truth exchanged.
    pub fn swapped(&self) -> Self {
        ConfusionCounts {
            fp: self.fn_,
            fn_: self.fp,
            ..*self
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Tallies binary label slices (nonzero is PV).
pub fn confusion_slices(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn confusion(pred: &MaskPatch, gt: &MaskPatch) -> Result<ConfusionCounts> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    confusion_slices(&pred.data, &gt.data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub iou: f64,
    pub f1: f64,
    pub accuracy: f64,
}

impl MetricSummary {
    pub fn from_counts(c: &ConfusionCounts) -> Result<Self> {
        Ok(MetricSummary {
            iou: c.iou(),
            f1: c.f1(),
            accuracy: c.accuracy()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub image: String,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub images: Vec<ImageResult>,
    /// Entries that could not be evaluated, with the reason.
    pub errors: Vec<(String, String)>,
}

impl MetricReport {
    pub fn from_results(images: Vec<ImageResult>) -> Self {
        MetricReport {
            images,
            errors: Vec::new(),
        }
    }

    pub fn micro_counts(&self) -> ConfusionCounts {
        self.images.iter().map(|r| r.counts).sum()
    }

    /// Metrics of the pooled counts.
    pub fn micro(&self) -> Result<MetricSummary> {
        MetricSummary::from_counts(&self.micro_counts())
    }

    /// Unweighted mean of per-image metrics.
    pub fn per_image_mean(&self) -> Result<MetricSummary> {
        if self.images.is_empty() {
            return Err(Error::Metric("no images evaluated".into()));
        }
        let mut sum = MetricSummary {
            iou: 0.0,
            f1: 0.0,
            accuracy: 0.0,
        };
        for r in &self.images {
            let m = MetricSummary::from_counts(&r.counts)?;
            sum.iou += m.iou;
            sum.f1 += m.f1;
            sum.accuracy += m.accuracy;
        }
        let n = self.images.len() as f64;
        Ok(MetricSummary {
            iou: sum.iou / n,
            f1: sum.f1 / n,
            accuracy: sum.accuracy / n,
        })
    }

    /// CSV with a `micro` row followed by one row per image.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image", "iou", "f1_score", "accuracy", "tp", "tn", "fp", "fn"])?;
        let rows = std::iter::once(("micro".to_string(), self.micro_counts()))
            .chain(self.images.iter().map(|r| (r.image.clone(), r.counts)));
        for (name, c) in rows {
            let m = MetricSummary::from_counts(&c)?;
            w.write_record([
                name,
                format!("{:.6}", m.iou),
                format!("{:.6}", m.f1),
                format!("{:.6}", m.accuracy),
                c.tp.to_string(),
                c.tn.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Metric(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Aligned table with IoU, F1-score and accuracy in percent.
    pub fn to_table(&self) -> Result<String> {
        let micro = self.micro()?;
        let mean = self.per_image_mean()?;
        let mut s = String::new();
        writeln!(s, "{:<16} {:>8} {:>10} {:>10}", "aggregation", "IoU", "F1-score", "Accuracy").unwrap();
        for (name, m) in [("micro", micro), ("per-image mean", mean)] {
            writeln!(
                s,
                "{:<16} {:>8.2} {:>10.2} {:>10.2}",
                name,
                100.0 * m.iou,
                100.0 * m.f1,
                100.0 * m.accuracy
            )
            .unwrap();
        }
        writeln!(s, "images: {}  failed: {}", self.images.len(), self.errors.len()).unwrap();
        Ok(s)
    }
}

/// Predicts every entry of `split` and scores it against its mask.
/// Entries that fail to load are listed in `errors` and skipped.
pub fn evaluate_dataset(model: &Model, manifest: &DatasetManifest, root: &Path, split: Split) -> Result<MetricReport> {
    let entries: Vec<_> = manifest.split(split).collect();
    if entries.is_empty() {
        return Err(Error::Manifest(format!("split {split} is empty")));
    }
    let outcomes: Vec<_> = entries
        .par_iter()
        .map(|e| {
            let (img, mask) = load_patch_pair(&root.join(&e.image), &root.join(&e.mask))?;
            let pred = model.predict(&img)?;
            confusion(&pred.mask, &mask)
        })
        .collect();
    let mut report = MetricReport::default();
    for (e, outcome) in entries.iter().zip(outcomes) {
        match outcome {
            Ok(counts) => report.images.push(ImageResult {
                image: e.image.clone(),
                counts,
            }),
            Err(err @ (Error::Io { .. } | Error::Decode { .. } | Error::Channels { .. } | Error::PairShape { .. })) => {
                report.errors.push((e.image.clone(), err.to_string()))
            }
            Err(err) => return Err(err),
        }
    }
    Ok(report)
}
