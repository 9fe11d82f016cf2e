use std::fmt;
use std::str::FromStr;

use crate::autodiff::Labels;
use crate::error::{Error, Result};

/// Counts indexed by `(target class, predicted class)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, target: usize, pred: usize) -> u64 {
        self.counts[target * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &Labels, target: &Labels) -> Result<()> {
        if (pred.n, pred.h, pred.w) != (target.n, target.h, target.w) {
            return Err(Error::dim(format!(
                "prediction ({}, {}, {}) and target ({}, {}, {}) differ in shape",
                pred.n, pred.h, pred.w, target.n, target.h, target.w
            )));
        }
        let k = self.num_classes;
        if let Some(&bad) = pred.data().iter().chain(target.data()).find(|&&c| c >= k) {
            return Err(Error::arg(format!(
                "class id {bad} out of range for {k} classes"
            )));
        }
        for (&p, &t) in pred.data().iter().zip(target.data()) {
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Per-class intersection over union; a class absent from both
    /// prediction and target scores 1.
    pub fn iou(&self) -> Vec<f64> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..k).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                if union == 0 {
                    1.0
                } else {
                    tp as f64 / union as f64
                }
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let iou = self.iou();
        if iou.is_empty() {
            return 0.0;
        }
        iou.iter().sum::<f64>() / iou.len() as f64
    }
}

/// Mean IoU of one prediction against its target.
pub fn miou(pred: &Labels, target: &Labels, num_classes: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, target)?;
    Ok(cm.miou())
}

/// How a dataset-level score is aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MiouMode {
    /// One confusion matrix over every pixel of every image.
    #[default]
    Pooled,
    /// mIoU per image, then the mean over images.
    PerImage,
}

impl FromStr for MiouMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(MiouMode::Pooled),
            "per-image" => Ok(MiouMode::PerImage),
            _ => Err(Error::arg(format!(
                "unknown mIoU mode {s:?}, expected pooled or per-image"
            ))),
        }
    }
}

impl fmt::Display for MiouMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MiouMode::Pooled => "pooled",
            MiouMode::PerImage => "per-image",
        })
    }
}

/// Accumulates a dataset score image by image.
#[derive(Clone, Debug)]
pub struct MiouAccumulator {
    mode: MiouMode,
    pooled: ConfusionMatrix,
    per_image: Vec<f64>,
}

impl MiouAccumulator {
    pub fn new(num_classes: usize, mode: MiouMode) -> Self {
        MiouAccumulator {
            mode,
            pooled: ConfusionMatrix::new(num_classes),
            per_image: Vec::new(),
        }
    }

    pub fn add(&mut self, pred: &Labels, target: &Labels) -> Result<()> {
        let mut cm = ConfusionMatrix::new(self.pooled.num_classes());
        cm.add(pred, target)?;
        self.per_image.push(cm.miou());
        self.pooled.merge(&cm);
        Ok(())
    }

    pub fn confusion(&self) -> &ConfusionMatrix {
        &self.pooled
    }

    pub fn value(&self) -> f64 {
        match self.mode {
            MiouMode::Pooled => self.pooled.miou(),
            MiouMode::PerImage if self.per_image.is_empty() => 0.0,
            MiouMode::PerImage => self.per_image.iter().sum::<f64>() / self.per_image.len() as f64,
        }
    }
}
