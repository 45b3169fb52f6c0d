//! Confusion-matrix based mIoU.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    /// Row = target, column = prediction.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, target: usize, pred: usize) -> u64 {
        self.counts[target * self.num_classes + pred]
    }

    /// Accumulates every pixel whose target is not `ignore`.
    pub fn update(&mut self, pred: &[u8], target: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != target.len() {
            return Err(Error::ShapeMismatch { op: "miou", dim: "pixels", expected: target.len(), found: pred.len() });
        }
        let n = self.num_classes;
        for (&p, &t) in pred.iter().zip(target) {
            if t == ignore {
                continue;
            }
            if t as usize >= n || p as usize >= n {
                return Err(invalid("miou", "label outside the class range"));
            }
            self.counts[t as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP / (TP + FP + FN)` per class; `None` for classes absent from both
    /// prediction and target.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let n = self.num_classes;
        (0..n)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..n).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..n).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::Empty { what: "set of valid pixels" });
        }
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// mIoU and per-class IoU of `pred` against `target`.
pub fn miou(pred: &[u8], target: &[u8], num_classes: usize, ignore: u8) -> Result<(f64, Vec<Option<f64>>)> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.update(pred, target, ignore)?;
    Ok((cm.miou()?, cm.iou()))
}

/// Per-pixel argmax over the channel axis of `[N,C,H,W]` logits; ties go
/// to the lowest class.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = logits.dims4("argmax")?;
    let plane = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for i in 0..plane {
            let mut best = 0;
            let mut best_v = d[b * c * plane + i];
            for k in 1..c {
                let v = d[(b * c + k) * plane + i];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// mIoU of predicting the single most frequent class everywhere, where
/// `majority` comes from `histogram` (ties: lowest class).
pub fn majority_baseline(histogram: &[u64], targets: &[&[u8]], ignore: u8) -> Result<f64> {
    let majority = histogram
        .iter()
        .enumerate()
        .fold(0, |best, (c, &v)| if v > histogram[best] { c } else { best });
    let mut cm = ConfusionMatrix::new(histogram.len());
    for t in targets {
        cm.update(&vec![majority as u8; t.len()], t, ignore)?;
    }
    cm.miou()
}

/// Confusion matrix of `forward` over `samples`, evaluated in chunks of
/// `batch_size` at full resolution.
pub fn evaluate_with(
    samples: &[crate::data::SegSample],
    batch_size: usize,
    num_classes: usize,
    mut forward: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = crate::data::collate(chunk)?;
        let logits = forward(&batch.images)?;
        if !logits.is_finite() {
            return Err(Error::NonFinite { what: "evaluation logits".into() });
        }
        cm.update(&argmax_labels(&logits)?, &batch.labels, crate::data::IGNORE_INDEX)?;
    }
    Ok(cm)
}
