use footscan_core::detector::{BoundingBox, Detection};

use crate::detector_oracle::pixel_count_iou;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl MatchCounts {
    pub fn add(&mut self, other: MatchCounts) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
    }

    pub fn precision(&self) -> f64 {
        let predicted = self.true_positives + self.false_positives;
        if predicted == 0 {
            1.0
        } else {
            self.true_positives as f64 / predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let actual = self.true_positives + self.false_negatives;
        if actual == 0 {
            1.0
        } else {
            self.true_positives as f64 / actual as f64
        }
    }
}

/// Greedy one-to-one matching in prediction order; a prediction matches the
/// unclaimed ground-truth box with the highest IoU if that IoU reaches
/// `min_iou`.
pub fn match_detections(predicted: &[Detection], truth: &[BoundingBox], min_iou: f64) -> MatchCounts {
    let mut claimed = vec![false; truth.len()];
    let mut counts = MatchCounts::default();
    for p in predicted {
        let best = truth
            .iter()
            .enumerate()
            .filter(|(i, _)| !claimed[*i])
            .map(|(i, t)| (i, pixel_count_iou(&p.bbox, t)))
            .filter(|(_, v)| *v >= min_iou)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((i, _)) => {
                claimed[i] = true;
                counts.true_positives += 1;
            }
            None => counts.false_positives += 1,
        }
    }
    counts.false_negatives = claimed.iter().filter(|c| !**c).count();
    counts
}
