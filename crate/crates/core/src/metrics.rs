//! Confusion-matrix IoU and per-pixel cosine similarity statistics.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{dot, Mat};

/// Square count matrix, row = truth, column = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(LabError::data(format!(
                "class pair ({truth}, {pred}) outside a {}-class confusion matrix",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn record_all(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(LabError::shape("truth and prediction lengths differ"));
        }
        truth.iter().zip(pred).try_for_each(|(t, p)| self.record(*t, *p))
    }

    /// Adds another partial matrix; integer addition, so merge order is irrelevant.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(LabError::shape("merging confusion matrices of different size"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// `TP / (TP + FP + FN)` per class; `None` when the class never occurs in
/// truth or prediction.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    let n = cm.classes();
    (0..n)
        .map(|c| {
            let tp = cm.get(c, c);
            let truth: u64 = (0..n).map(|p| cm.get(c, p)).sum();
            let pred: u64 = (0..n).map(|t| cm.get(t, c)).sum();
            let denom = truth + pred - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}

/// Mean IoU over the present classes of `range`. `Ok(None)` when no class
/// of the range is present.
pub fn miou_range(ious: &[Option<f64>], range: RangeInclusive<usize>) -> Result<Option<f64>> {
    if range.is_empty() {
        return Err(LabError::config("metrics.range", "empty class range"));
    }
    if *range.end() >= ious.len() {
        return Err(LabError::config(
            "metrics.range",
            format!("range {range:?} exceeds {} classes", ious.len()),
        ));
    }
    let present: Vec<f64> = ious[range].iter().flatten().copied().collect();
    Ok((!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64))
}

/// Cosine similarity of one pixel pair; zero-norm vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Per-pixel cosine similarity between two feature grids (pixels are rows).
pub fn cosine_similarities(a: &Mat, b: &Mat) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(LabError::shape(format!(
            "feature grids {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((0..a.rows()).map(|i| cosine(a.row(i), b.row(i))).collect())
}

pub fn cosine_stats(a: &Mat, b: &Mat) -> Result<MeanStd> {
    Ok(MeanStd::of(&cosine_similarities(a, b)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm_from(truth: &[usize], pred: &[usize], n: usize) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(n);
        cm.record_all(truth, pred).unwrap();
        cm
    }

    #[test]
    fn perfect_prediction() {
        let labels = [0, 1, 2, 2, 1, 0];
        let ious = iou_per_class(&cm_from(&labels, &labels, 3));
        assert!(ious.iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn disjoint_prediction_is_zero() {
        let ious = iou_per_class(&cm_from(&[1, 1, 0, 0], &[0, 0, 1, 1], 2));
        assert_eq!(ious, vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn partial_overlap() {
        // Class 1: 10 truth pixels, 10 predicted, 5 shared.
        let mut truth = vec![1; 10];
        truth.extend(vec![0; 5]);
        let mut pred = vec![1; 5];
        pred.extend(vec![0; 5]);
        pred.extend(vec![1; 5]);
        let ious = iou_per_class(&cm_from(&truth, &pred, 2));
        assert!((ious[1].unwrap() - 5.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_skipped() {
        let ious = iou_per_class(&cm_from(&[0, 0], &[0, 0], 3));
        assert_eq!(ious, vec![Some(1.0), None, None]);
        assert_eq!(miou_range(&ious, 0..=2).unwrap(), Some(1.0));
        assert_eq!(miou_range(&ious, 1..=2).unwrap(), None);
    }

    #[test]
    fn range_means() {
        let ious = vec![Some(0.5), Some(1.0), Some(0.25)];
        assert_eq!(miou_range(&ious, 2..=2).unwrap(), Some(0.25));
        assert_eq!(miou_range(&ious, 0..=1).unwrap(), Some(0.75));
        assert_eq!(miou_range(&[Some(0.4); 4], 0..=3).unwrap(), Some(0.4));
        #[allow(clippy::reversed_empty_ranges)]
        let empty = 2..=1;
        assert!(matches!(miou_range(&ious, empty), Err(LabError::Config { .. })));
        assert!(miou_range(&ious, 0..=3).is_err());
    }

    #[test]
    fn out_of_range_record_is_rejected() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.record(2, 0).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = Mat::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap();
        let s = cosine_stats(&a, &a).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-15 && s.std < 1e-15);
        let s2 = cosine_stats(&a, &a.scale(2.0)).unwrap();
        assert!((s2.mean - 1.0).abs() < 1e-15);
        let orth = Mat::from_rows(&[[-2.0, 1.0], [2.0, 1.0]]).unwrap();
        assert!(cosine_stats(&a, &orth).unwrap().mean.abs() < 1e-15);
        let zero = Mat::zeros(2, 2);
        assert_eq!(cosine_stats(&a, &zero).unwrap().mean, 0.0);
        assert!(cosine_stats(&a, &Mat::zeros(3, 2)).is_err());
    }

    proptest! {
        #[test]
        fn confusion_invariants(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200),
            perm_seed in 0u64..1000,
        ) {
            let (truth, pred): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let cm = cm_from(&truth, &pred, 4);
            prop_assert_eq!(cm.total(), pairs.len() as u64);
            let ious = iou_per_class(&cm);
            prop_assert!(ious.iter().flatten().all(|v| (0.0..=1.0).contains(v)));

            let mut perm: Vec<usize> = (0..4).collect();
            crate::numerics::Rng::new(perm_seed).shuffle(&mut perm);
            let pt: Vec<_> = truth.iter().map(|c| perm[*c]).collect();
            let pp: Vec<_> = pred.iter().map(|c| perm[*c]).collect();
            let permuted = iou_per_class(&cm_from(&pt, &pp, 4));
            for c in 0..4 {
                prop_assert_eq!(permuted[perm[c]], ious[c]);
            }

            let half = pairs.len() / 2;
            let mut merged = cm_from(&truth[..half], &pred[..half], 4);
            merged.merge(&cm_from(&truth[half..], &pred[half..], 4)).unwrap();
            prop_assert_eq!(merged, cm);
        }

        #[test]
        fn cosine_is_symmetric(a in prop::collection::vec(-3.0f64..3.0, 12), b in prop::collection::vec(-3.0f64..3.0, 12)) {
            let ma = Mat::new(4, 3, a).unwrap();
            let mb = Mat::new(4, 3, b).unwrap();
            prop_assert_eq!(cosine_stats(&ma, &mb).unwrap(), cosine_stats(&mb, &ma).unwrap());
        }
    }
}
