//! Classification accuracy and segmentation IOU.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Fraction of rows whose label is among the `k` largest logits.
/// Ties are broken toward the lower class index.
pub fn top_k_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    if logits.shape.len() != 2 || logits.shape[0] != labels.len() {
        return Err(Error::shape("logits", &[labels.len()], &logits.shape));
    }
    if labels.is_empty() {
        return Err(Error::Empty);
    }
    let c = logits.shape[1];
    let hits = logits
        .data
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let target = row[y];
            let above = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > target || (v == target && j < y))
                .count();
            above < k
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-pixel argmax over the class axis of `N,K,H,W` logits.
pub fn pixel_argmax(logits: &Tensor) -> Result<Vec<usize>> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if logits.data[(b * k + c) * hw + p] > logits.data[(b * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    /// `counts[truth * classes + predicted]`
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, predicted: &[usize], truth: &[usize]) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::LengthMismatch { left: predicted.len(), right: truth.len() });
        }
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= self.classes || t >= self.classes {
                return Err(Error::invalid(format!("class {} out of range", p.max(t))));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` for classes absent from
    /// both truth and prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let row: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
                let col: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IOU over classes that occur in truth or prediction.
    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let diag: u64 = (0..self.classes).map(|c| self.counts[c * self.classes + c]).sum();
        if total == 0 {
            0.0
        } else {
            diag as f64 / total as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top5_never_below_top1() {
        let logits = Tensor::new(&[3, 6], (0..18).map(|i| ((i * 7) % 11) as f64).collect()).unwrap();
        let labels = [0, 3, 5];
        let t1 = top_k_accuracy(&logits, &labels, 1).unwrap();
        let t5 = top_k_accuracy(&logits, &labels, 5).unwrap();
        assert!(t5 >= t1);
        assert_eq!(top_k_accuracy(&logits, &labels, 6).unwrap(), 1.0);
    }

    #[test]
    fn perfect_prediction_has_unit_miou() {
        let truth = [0, 1, 2, 2, 1, 0, 3];
        let mut cm = ConfusionMatrix::new(4);
        cm.add(&truth, &truth).unwrap();
        assert_eq!(cm.mean_iou(), 1.0);
    }

    #[test]
    fn single_class_prediction_on_balanced_pair() {
        // class 0: TP 50, FP 50 -> 0.5; class 1: TP 0 -> 0
        let truth: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&vec![0; 100], &truth).unwrap();
        assert_eq!(cm.class_iou(), vec![Some(0.5), Some(0.0)]);
        assert_eq!(cm.mean_iou(), 0.25);
    }
}
