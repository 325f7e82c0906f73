//! Confusion-matrix bookkeeping and the derived quality metrics.

use crate::error::{Error, Result};

/// K x K count matrix; rows index ground truth, columns index predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

/// Overall accuracy, mean per-class accuracy, mean intersection-over-union.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub oa: f64,
    pub macc: f64,
    pub miou: f64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> ConfusionMatrix {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        assert!(truth < self.k && pred < self.k, "label {truth}/{pred} out of range {}", self.k);
        self.counts[truth * self.k + pred] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn from_labels(k: usize, truth: &[usize], pred: &[usize]) -> ConfusionMatrix {
        assert_eq!(truth.len(), pred.len());
        let mut cm = ConfusionMatrix::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p);
        }
        cm
    }

    /// OA = trace/total. mAcc averages diag/row-sum, mIoU averages
    /// diag/(row+col-diag); both skip classes absent from truth and
    /// prediction alike.
    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Usage("metrics on an empty confusion matrix".into()));
        }
        let mut trace = 0u64;
        let mut acc_sum = 0.0;
        let mut iou_sum = 0.0;
        let mut present = 0usize;
        for c in 0..self.k {
            let diag = self.count(c, c);
            trace += diag;
            let row: u64 = (0..self.k).map(|j| self.count(c, j)).sum();
            let col: u64 = (0..self.k).map(|i| self.count(i, c)).sum();
            if row == 0 && col == 0 {
                continue;
            }
            present += 1;
            if row > 0 {
                acc_sum += diag as f64 / row as f64;
            }
            let union = row + col - diag;
            iou_sum += diag as f64 / union as f64;
        }
        Ok(Metrics {
            oa: trace as f64 / total as f64,
            macc: acc_sum / present as f64,
            miou: iou_sum / present as f64,
        })
    }
}
