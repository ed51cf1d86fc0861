use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::RelationInstance;

/// Laplace smoothing constant of the log-frequency table.
pub const PRIOR_SMOOTHING: f64 = 1e-3;

/// Per subject/object class pair log-frequency of every predicate, added to
/// relation logits. Pairs never seen in training have an all-zero slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBias {
    table: Tensor,
}

impl PriorBias {
    pub fn zeros(num_object_classes: usize, num_classes: usize) -> Self {
        let n = num_object_classes + 1;
        Self {
            table: Tensor::zeros(&[n, n, num_classes]),
        }
    }

    pub fn from_tensor(table: Tensor) -> Result<Self> {
        let s = table.shape();
        if s.len() != 3 || s[0] != s[1] || !table.is_finite() {
            return Err(Error::invalid(format!(
                "prior bias must be a finite [n, n, c] tensor, got shape {s:?}"
            )));
        }
        Ok(Self { table })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.table
    }

    /// Object classes including background (`N_O + 1`).
    pub fn object_slots(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.table.shape()[2]
    }

    pub fn slice(&self, subject: usize, object: usize) -> Result<&[f64]> {
        let n = self.object_slots();
        if subject >= n || object >= n {
            return Err(Error::invalid(format!(
                "object class pair ({subject}, {object}) out of range 0..{n}"
            )));
        }
        let c = self.num_classes();
        let start = (subject * n + object) * c;
        Ok(&self.table.data()[start..start + c])
    }
}

/// `log((count(s,o,r) + eps) / (count(s,o) + eps * C))` per pair, zero for unseen pairs.
pub fn build_prior_bias(
    train: &[RelationInstance],
    num_object_classes: usize,
    num_classes: usize,
) -> Result<PriorBias> {
    if train.is_empty() {
        return Err(Error::invalid("cannot build a prior from an empty training set"));
    }
    let n = num_object_classes + 1;
    let mut counts = vec![0u64; n * n * num_classes];
    for inst in train {
        if inst.subject_class >= n || inst.object_class >= n || inst.gt_predicate >= num_classes {
            return Err(Error::invalid(format!(
                "instance ({}, {}, {}) outside the vocabulary",
                inst.subject_class, inst.object_class, inst.gt_predicate
            )));
        }
        counts[(inst.subject_class * n + inst.object_class) * num_classes + inst.gt_predicate] += 1;
    }
    let mut table = Tensor::zeros(&[n, n, num_classes]);
    let eps = PRIOR_SMOOTHING;
    for (pair_counts, out) in counts
        .chunks(num_classes)
        .zip(table.data_mut().chunks_mut(num_classes))
    {
        let total: u64 = pair_counts.iter().sum();
        if total == 0 {
            continue;
        }
        let denom = total as f64 + eps * num_classes as f64;
        for (o, &c) in out.iter_mut().zip(pair_counts) {
            *o = ((c as f64 + eps) / denom).ln();
        }
    }
    PriorBias::from_tensor(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple(s: usize, o: usize, r: usize) -> RelationInstance {
        RelationInstance {
            image_id: 0,
            subject_class: s,
            object_class: o,
            gt_predicate: r,
            subject_feature: vec![],
            object_feature: vec![],
            union_feature: vec![],
            subject_label_dist: vec![],
            object_label_dist: vec![],
        }
    }

    #[test]
    fn single_observation_dominates() {
        let prior = build_prior_bias(&[triple(1, 2, 3)], 3, 5).unwrap();
        let slice = prior.slice(1, 2).unwrap();
        let argmax = (0..5).max_by(|&a, &b| slice[a].total_cmp(&slice[b])).unwrap();
        assert_eq!(argmax, 3);
        assert!(prior.slice(0, 0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_ratio_between_observed_relations() {
        let mut train = vec![triple(1, 1, 2); 3];
        train.push(triple(1, 1, 4));
        let prior = build_prior_bias(&train, 2, 6).unwrap();
        let slice = prior.slice(1, 1).unwrap();
        let eps = PRIOR_SMOOTHING;
        let expected = ((3.0 + eps) / (1.0 + eps)).ln();
        assert!((slice[2] - slice[4] - expected).abs() < 1e-12);
        // Direct evaluation of one entry.
        let direct = ((3.0 + eps) / (4.0 + 6.0 * eps)).ln();
        assert!((slice[2] - direct).abs() < 1e-12);
    }

    #[test]
    fn empty_and_out_of_range() {
        assert!(build_prior_bias(&[], 2, 3).is_err());
        assert!(build_prior_bias(&[triple(5, 0, 0)], 2, 3).is_err());
        let prior = PriorBias::zeros(2, 3);
        assert!(prior.slice(3, 0).is_err());
    }
}
