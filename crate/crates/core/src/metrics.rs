//! Recall-style evaluation over ranked (pair, predicate) candidates.

use std::collections::BTreeMap;

use crate::datagen::GroupSplit;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedPrediction {
    pub image_id: usize,
    pub subject_class: usize,
    pub object_class: usize,
    pub predicate: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct GroundTruthTriple {
    pub image_id: usize,
    pub subject_class: usize,
    pub object_class: usize,
    pub predicate: usize,
}

type Triple = (usize, usize, usize);

/// Descending score; ties go to the lower predicate, then lower subject and
/// object class, so the ranking is a total order.
fn rank_order(a: &RankedPrediction, b: &RankedPrediction) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.predicate.cmp(&b.predicate))
        .then(a.subject_class.cmp(&b.subject_class))
        .then(a.object_class.cmp(&b.object_class))
}

/// Hits and ground-truth totals per predicate class.
#[derive(Debug, Clone, PartialEq, Eq)]
struct ClassCounts {
    hits: Vec<u64>,
    totals: Vec<u64>,
}

fn count_hits(
    preds: &[RankedPrediction],
    gts: &[GroundTruthTriple],
    k: usize,
    num_classes: usize,
) -> Result<ClassCounts> {
    if k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    if gts.is_empty() {
        return Err(Error::invalid("no ground-truth relations to evaluate"));
    }
    if let Some(p) = preds.iter().find(|p| !p.score.is_finite()) {
        return Err(Error::invalid(format!("non-finite score in image {}", p.image_id)));
    }

    let mut by_image_preds: BTreeMap<usize, Vec<RankedPrediction>> = BTreeMap::new();
    for p in preds {
        by_image_preds.entry(p.image_id).or_default().push(*p);
    }
    let mut by_image_gts: BTreeMap<usize, BTreeMap<Triple, u64>> = BTreeMap::new();
    let mut counts = ClassCounts {
        hits: vec![0; num_classes],
        totals: vec![0; num_classes],
    };
    for g in gts {
        if g.predicate >= num_classes {
            return Err(Error::invalid(format!("ground-truth predicate {} out of range", g.predicate)));
        }
        *by_image_gts
            .entry(g.image_id)
            .or_default()
            .entry((g.subject_class, g.object_class, g.predicate))
            .or_default() += 1;
        counts.totals[g.predicate] += 1;
    }

    for (image, gt_counts) in &by_image_gts {
        let Some(list) = by_image_preds.get_mut(image) else {
            continue;
        };
        list.sort_by(rank_order);
        let mut top: BTreeMap<Triple, u64> = BTreeMap::new();
        for p in list.iter().take(k) {
            *top.entry((p.subject_class, p.object_class, p.predicate)).or_default() += 1;
        }
        // Identical triples are interchangeable, so the maximum one-to-one
        // matching per triple is the smaller of the two multiplicities.
        for (triple, &n_gt) in gt_counts {
            let n_pred = top.get(triple).copied().unwrap_or(0);
            counts.hits[triple.2] += n_gt.min(n_pred);
        }
    }
    Ok(counts)
}

fn max_class(preds: &[RankedPrediction], gts: &[GroundTruthTriple]) -> usize {
    preds
        .iter()
        .map(|p| p.predicate)
        .chain(gts.iter().map(|g| g.predicate))
        .max()
        .map_or(1, |m| m + 1)
}

/// Micro-averaged recall: total hits over total ground truths.
pub fn recall_at_k(preds: &[RankedPrediction], gts: &[GroundTruthTriple], k: usize) -> Result<f64> {
    let c = count_hits(preds, gts, k, max_class(preds, gts))?;
    Ok(c.hits.iter().sum::<u64>() as f64 / c.totals.iter().sum::<u64>() as f64)
}

/// Unweighted mean of per-predicate recall over classes with ground truth.
/// The vector is indexed by predicate, `None` where a class has no ground truth.
pub fn mean_recall_at_k(
    preds: &[RankedPrediction],
    gts: &[GroundTruthTriple],
    k: usize,
    num_classes: usize,
) -> Result<(f64, Vec<Option<f64>>)> {
    let c = count_hits(preds, gts, k, num_classes)?;
    let per: Vec<Option<f64>> = c
        .hits
        .iter()
        .zip(&c.totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::invalid("no predicate class has ground truth"));
    }
    Ok((present.iter().sum::<f64>() / present.len() as f64, per))
}

pub fn mean_at_k(r: f64, mr: f64) -> f64 {
    (r + mr) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRecall {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

fn group_mean(per_predicate: &[Option<f64>], members: &[usize]) -> Option<f64> {
    let vals: Vec<f64> = members
        .iter()
        .filter_map(|&p| per_predicate.get(p).copied().flatten())
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean per-predicate recall within each frequency group; a group with no
/// evaluated class is `None`.
pub fn group_mean_recall(per_predicate: &[Option<f64>], groups: &GroupSplit) -> GroupRecall {
    GroupRecall {
        many: group_mean(per_predicate, &groups.many),
        medium: group_mean(per_predicate, &groups.medium),
        few: group_mean(per_predicate, &groups.few),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KReport {
    pub k: usize,
    pub r_at_k: f64,
    pub mr_at_k: f64,
    pub m_at_k: f64,
    pub per_predicate: Vec<Option<f64>>,
    pub groups: GroupRecall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_k: Vec<KReport>,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&KReport> {
        self.per_k.iter().find(|r| r.k == k)
    }
}

pub fn evaluate_predictions(
    preds: &[RankedPrediction],
    gts: &[GroundTruthTriple],
    ks: &[usize],
    num_classes: usize,
    groups: &GroupSplit,
) -> Result<EvalReport> {
    let per_k = ks
        .iter()
        .map(|&k| {
            let r = recall_at_k(preds, gts, k)?;
            let (mr, per_predicate) = mean_recall_at_k(preds, gts, k, num_classes)?;
            Ok(KReport {
                k,
                r_at_k: r,
                mr_at_k: mr,
                m_at_k: mean_at_k(r, mr),
                groups: group_mean_recall(&per_predicate, groups),
                per_predicate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { per_k })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(image: usize, s: usize, o: usize, pred: usize, score: f64) -> RankedPrediction {
        RankedPrediction {
            image_id: image,
            subject_class: s,
            object_class: o,
            predicate: pred,
            score,
        }
    }

    fn g(image: usize, s: usize, o: usize, pred: usize) -> GroundTruthTriple {
        GroundTruthTriple {
            image_id: image,
            subject_class: s,
            object_class: o,
            predicate: pred,
        }
    }

    #[test]
    fn perfect_and_empty() {
        let gts = [g(0, 1, 2, 3), g(1, 2, 2, 1)];
        let preds = [p(0, 1, 2, 3, 0.9), p(1, 2, 2, 1, 0.8), p(1, 2, 2, 2, 0.1)];
        assert_eq!(recall_at_k(&preds, &gts, 1).unwrap(), 1.0);
        let misses = [p(0, 1, 2, 4, 0.9), p(1, 1, 1, 1, 0.8)];
        assert_eq!(recall_at_k(&misses, &gts, 5).unwrap(), 0.0);
    }

    #[test]
    fn two_of_three_in_top_two() {
        let gts = [g(0, 1, 2, 1), g(0, 2, 3, 2), g(0, 3, 1, 3)];
        let preds = [
            p(0, 1, 2, 1, 0.9),
            p(0, 2, 3, 2, 0.8),
            p(0, 3, 1, 3, 0.7),
            p(0, 3, 1, 1, 0.1),
        ];
        let r = recall_at_k(&preds, &gts, 2).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn prediction_matches_at_most_one_gt() {
        // Two identical gt triples, one matching prediction.
        let gts = [g(0, 1, 1, 2), g(0, 1, 1, 2)];
        let preds = [p(0, 1, 1, 2, 0.5)];
        assert_eq!(recall_at_k(&preds, &gts, 10).unwrap(), 0.5);
    }

    #[test]
    fn invalid_k_and_empty_gts() {
        let gts = [g(0, 1, 1, 1)];
        assert!(recall_at_k(&[], &gts, 0).is_err());
        assert!(recall_at_k(&[], &[], 5).is_err());
    }

    #[test]
    fn mean_recall_examples() {
        let gts = [g(0, 1, 1, 1), g(0, 1, 2, 1)];
        let preds = [p(0, 1, 1, 1, 0.9)];
        let r = recall_at_k(&preds, &gts, 5).unwrap();
        let (mr, _) = mean_recall_at_k(&preds, &gts, 5, 3).unwrap();
        assert_eq!(r, mr);

        let gts = [g(0, 1, 1, 1), g(0, 1, 2, 2)];
        let (mr, per) = mean_recall_at_k(&preds, &gts, 5, 3).unwrap();
        assert_eq!(mr, 0.5);
        assert_eq!(per, vec![None, Some(1.0), Some(0.0)]);
    }

    #[test]
    fn tie_break_prefers_lower_predicate() {
        let gts = [g(0, 1, 1, 1)];
        let a = [p(0, 1, 1, 2, 0.5), p(0, 1, 1, 1, 0.5)];
        let b = [p(0, 1, 1, 1, 0.5), p(0, 1, 1, 2, 0.5)];
        assert_eq!(recall_at_k(&a, &gts, 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&b, &gts, 1).unwrap(), 1.0);
    }

    #[test]
    fn mean_at_k_arithmetic() {
        assert!((mean_at_k(0.490, 0.404) - 0.447).abs() < 1e-12);
        assert_eq!(mean_at_k(0.3, 0.3), 0.3);
        assert_eq!(mean_at_k(1.0, 0.0), 0.5);
    }

    #[test]
    fn group_means() {
        let groups = GroupSplit {
            many: vec![1, 2],
            medium: vec![3, 4],
            few: vec![5, 6],
        };
        let per = [None, Some(1.0), Some(1.0), Some(0.5), Some(0.5), Some(0.0), Some(0.0)];
        let r = group_mean_recall(&per, &groups);
        assert_eq!((r.many, r.medium, r.few), (Some(1.0), Some(0.5), Some(0.0)));

        let constant = [None, Some(0.3), Some(0.3), Some(0.3), Some(0.3), Some(0.3), Some(0.3)];
        let r = group_mean_recall(&constant, &groups);
        assert_eq!((r.many, r.medium, r.few), (Some(0.3), Some(0.3), Some(0.3)));

        let absent = [None, Some(1.0), Some(1.0), None, None, Some(0.0), None];
        assert_eq!(group_mean_recall(&absent, &groups).medium, None);
    }
}
