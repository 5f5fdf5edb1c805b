//! Pixel-level confusion counts and precision, recall, F1 and IoU.

use std::ops::{Add, AddAssign};

use dbswin_tensor::{sigmoid, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Tallies binary predictions against a binary mask.
    pub fn from_binary(pred: &[bool], mask: &[bool]) -> Result<Self> {
        if pred.len() != mask.len() {
            return Err(Error::Data(format!(
                "prediction has {} pixels, mask has {}",
                pred.len(),
                mask.len()
            )));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &m) in pred.iter().zip(mask) {
            match (p, m) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// Precision `TP / (TP + FP)`.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self.is_empty_agreement())
    }

    /// Recall `TP / (TP + FN)`.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.is_empty_agreement())
    }

    /// Harmonic mean of precision and recall.
    pub fn f1(&self) -> f64 {
        if self.is_empty_agreement() {
            return 1.0;
        }
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// IoU `TP / (TP + FP + FN)`.
    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_, self.is_empty_agreement())
    }

    /// No road predicted and none present.
    fn is_empty_agreement(&self) -> bool {
        self.tp == 0 && self.fp == 0 && self.fn_ == 0
    }

    pub fn report(&self) -> MetricReport {
        MetricReport {
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
            iou: self.iou(),
        }
    }
}

fn ratio(num: u64, den: u64, empty: bool) -> f64 {
    if den == 0 {
        if empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: ConfusionCounts) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = ConfusionCounts>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), Add::add)
    }
}

/// Road where `sigmoid(logit) ≥ threshold`.
pub fn predict(logits: &Tensor, threshold: f64) -> Vec<bool> {
    logits.data().iter().map(|&x| sigmoid(x) >= threshold).collect()
}

/// Confusion counts of logits thresholded at 0.5 on the sigmoid.
pub fn confusion(logits: &Tensor, mask: &Tensor) -> Result<ConfusionCounts> {
    if logits.shape() != mask.shape() {
        return Err(Error::Data(format!(
            "logits {:?} and mask {:?} differ in shape",
            logits.shape(),
            mask.shape()
        )));
    }
    let mut m = Vec::with_capacity(mask.numel());
    for &v in mask.data() {
        if v != 0.0 && v != 1.0 {
            return Err(Error::Data(format!("mask value {v} is not binary")));
        }
        m.push(v == 1.0);
    }
    ConfusionCounts::from_binary(&predict(logits, 0.5), &m)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "precision,recall,f1,iou";

    /// `precision,recall,f1,iou` in percent with two decimals.
    pub fn csv_row(&self) -> String {
        format!(
            "{:.2},{:.2},{:.2},{:.2}",
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1,
            100.0 * self.iou
        )
    }
}
