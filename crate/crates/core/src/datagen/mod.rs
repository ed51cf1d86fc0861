//! Synthetic long-tailed relation data.
//!
//! Predicates come in families: one head predicate plus `tails_per_head`
//! refinements whose union features sit at the head's anchor plus a small
//! fixed per-tail offset. Counts follow a Zipf law over predicate rank with
//! every head ranked above every tail, so predicate index equals rank.

mod format;
mod prior;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use format::{
    load_dataset_dir, read_dataset, read_vocab, save_dataset_dir, write_dataset, write_vocab,
    DatasetHeader, DATASET_FORMAT_VERSION, TEST_FILE, TRAIN_FILE, VOCAB_FILE,
};
pub use prior::{build_prior_bias, PriorBias, PRIOR_SMOOTHING};

pub const BACKGROUND: usize = 0;

/// Predicate labels, training frequencies and the head/tail family structure.
/// Index 0 is the background class.
#[derive(Debug, Clone, PartialEq)]
pub struct PredicateVocabulary {
    pub names: Vec<String>,
    pub train_counts: Vec<u64>,
    /// Head predicates map to themselves, tails to their head, background to `None`.
    pub parent_of: Vec<Option<usize>>,
}

impl PredicateVocabulary {
    /// Number of foreground predicates `N_R`.
    pub fn num_predicates(&self) -> usize {
        self.names.len() - 1
    }

    /// Logit width `N_R + 1`.
    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn is_structural_head(&self, predicate: usize) -> bool {
        self.parent_of[predicate] == Some(predicate)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.names.len();
        if n < 2 || self.train_counts.len() != n || self.parent_of.len() != n {
            return Err(Error::invalid("vocabulary vectors disagree in length"));
        }
        if self.parent_of[BACKGROUND].is_some() {
            return Err(Error::invalid("background must not have a parent"));
        }
        for (i, parent) in self.parent_of.iter().enumerate().skip(1) {
            match parent {
                Some(p) if *p >= 1 && *p < n && self.parent_of[*p] == Some(*p) => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "predicate {i} lacks a valid head parent"
                    )))
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub num_object_classes: usize,
    pub num_head_predicates: usize,
    pub tails_per_head: usize,
    pub feature_dim: usize,
    pub zipf_exponent: f64,
    pub tail_offset_scale: f64,
    pub noise_scale: f64,
    pub num_train: usize,
    pub num_test: usize,
    pub relations_per_image: usize,
    /// Weight of the uniform component mixed into each object-label one-hot.
    pub label_noise: f64,
    /// Probability that an instance uses its family's preferred subject/object class.
    pub pair_affinity: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_object_classes: 10,
            num_head_predicates: 16,
            tails_per_head: 2,
            feature_dim: 16,
            zipf_exponent: 1.2,
            tail_offset_scale: 0.3,
            noise_scale: 1.0,
            num_train: 5000,
            num_test: 960,
            relations_per_image: 20,
            label_noise: 0.2,
            pair_affinity: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn num_predicates(&self) -> usize {
        self.num_head_predicates * (1 + self.tails_per_head)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_head_predicates < 1 {
            return Err(Error::config("num_head_predicates must be at least 1"));
        }
        if self.feature_dim < 4 {
            return Err(Error::config("feature_dim must be at least 4"));
        }
        if self.num_object_classes < 1 {
            return Err(Error::config("num_object_classes must be at least 1"));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(Error::config("zipf_exponent must be positive"));
        }
        if self.num_train < self.num_predicates() {
            return Err(Error::config(format!(
                "num_train {} is smaller than the {} predicates",
                self.num_train,
                self.num_predicates()
            )));
        }
        if self.num_test < self.num_predicates() {
            return Err(Error::config(
                "num_test must give every predicate at least one test sample",
            ));
        }
        if self.relations_per_image < 1 {
            return Err(Error::config("relations_per_image must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) || !(0.0..=1.0).contains(&self.pair_affinity)
        {
            return Err(Error::config("label_noise and pair_affinity must lie in [0, 1]"));
        }
        if !(self.tail_offset_scale >= 0.0) || !(self.noise_scale >= 0.0) {
            return Err(Error::config("scales must be nonnegative"));
        }
        Ok(())
    }
}

/// One subject-predicate-object sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationInstance {
    pub image_id: usize,
    pub subject_class: usize,
    pub object_class: usize,
    pub gt_predicate: usize,
    pub subject_feature: Vec<f64>,
    pub object_feature: Vec<f64>,
    pub union_feature: Vec<f64>,
    pub subject_label_dist: Vec<f64>,
    pub object_label_dist: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: PredicateVocabulary,
    pub num_object_classes: usize,
    pub feature_dim: usize,
    pub train: Vec<RelationInstance>,
    pub test: Vec<RelationInstance>,
}

/// Contiguous runs of instances sharing an `image_id`.
pub fn group_by_image(instances: &[RelationInstance]) -> Vec<&[RelationInstance]> {
    instances
        .chunk_by(|a, b| a.image_id == b.image_id)
        .collect()
}

/// Zipf counts over ranks `1..=n`, rounded by largest remainder so they sum
/// to `total` exactly.
pub fn zipf_counts(n: usize, exponent: f64, total: usize) -> Result<Vec<u64>> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-exponent)).collect();
    let norm: f64 = raw.iter().sum();
    let exact: Vec<f64> = raw.iter().map(|v| v / norm * total as f64).collect();
    let mut counts: Vec<u64> = exact.iter().map(|v| v.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    // Largest fractional part first, ties by lower rank.
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned as usize) {
        counts[i] += 1;
    }
    if let Some(rank) = counts.iter().position(|&c| c == 0) {
        return Err(Error::config(format!(
            "predicate at rank {} would receive no training samples",
            rank + 1
        )));
    }
    Ok(counts)
}

fn build_vocab(cfg: &GeneratorConfig) -> Result<PredicateVocabulary> {
    let heads = cfg.num_head_predicates;
    let n = cfg.num_predicates();
    let counts = zipf_counts(n, cfg.zipf_exponent, cfg.num_train)?;

    let mut names = vec!["__background__".to_string()];
    let mut parent_of = vec![None];
    let mut train_counts = vec![0];
    for idx in 1..=n {
        let pos = idx - 1;
        let head = pos % heads + 1;
        if pos < heads {
            names.push(format!("head{head:02}"));
        } else {
            names.push(format!("head{head:02}_tail{}", pos / heads));
        }
        parent_of.push(Some(head));
        train_counts.push(counts[pos]);
    }
    Ok(PredicateVocabulary {
        names,
        train_counts,
        parent_of,
    })
}

struct Generator<'a> {
    cfg: &'a GeneratorConfig,
    vocab: &'a PredicateVocabulary,
    object_anchors: Vec<Vec<f64>>,
    head_anchors: Vec<Vec<f64>>,
    tail_offsets: Vec<Vec<f64>>,
    preferred_pair: Vec<(usize, usize)>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

impl Generator<'_> {
    fn sample_class(&self, rng: &mut ChaCha8Rng, preferred: usize) -> usize {
        if rng.random::<f64>() < self.cfg.pair_affinity {
            preferred
        } else {
            rng.random_range(1..=self.cfg.num_object_classes)
        }
    }

    fn label_dist(&self, rng: &mut ChaCha8Rng, class: usize) -> Vec<f64> {
        let width = self.cfg.num_object_classes + 1;
        let u: Vec<f64> = (0..width).map(|_| rng.random::<f64>()).collect();
        let total: f64 = u.iter().sum();
        let eta = self.cfg.label_noise;
        let mut d: Vec<f64> = u.iter().map(|v| eta * v / total).collect();
        d[class] += 1.0 - eta;
        let s: f64 = d.iter().sum();
        d.iter_mut().for_each(|v| *v /= s);
        d
    }

    fn noisy(&self, rng: &mut ChaCha8Rng, mean: &[f64]) -> Vec<f64> {
        mean.iter()
            .map(|m| m + self.cfg.noise_scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn instance(&self, rng: &mut ChaCha8Rng, predicate: usize) -> RelationInstance {
        let head = self.vocab.parent_of[predicate].expect("foreground predicate");
        let (pref_s, pref_o) = self.preferred_pair[head - 1];
        let subject_class = self.sample_class(rng, pref_s);
        let object_class = self.sample_class(rng, pref_o);

        let mut mean = self.head_anchors[head - 1].clone();
        if head != predicate {
            for (m, o) in mean.iter_mut().zip(&self.tail_offsets[predicate - 1]) {
                *m += self.cfg.tail_offset_scale * o;
            }
        }
        RelationInstance {
            image_id: 0,
            subject_class,
            object_class,
            gt_predicate: predicate,
            subject_feature: self.noisy(rng, &self.object_anchors[subject_class]),
            object_feature: self.noisy(rng, &self.object_anchors[object_class]),
            union_feature: self.noisy(rng, &mean),
            subject_label_dist: self.label_dist(rng, subject_class),
            object_label_dist: self.label_dist(rng, object_class),
        }
    }

    fn split(&self, rng: &mut ChaCha8Rng, per_predicate: &[u64]) -> Vec<RelationInstance> {
        let mut out = Vec::new();
        for (p, &count) in per_predicate.iter().enumerate().skip(1) {
            for _ in 0..count {
                out.push(self.instance(rng, p));
            }
        }
        out.shuffle(rng);
        for (i, inst) in out.iter_mut().enumerate() {
            inst.image_id = i / self.cfg.relations_per_image;
        }
        out
    }
}

/// Builds the vocabulary plus train and (class-balanced) test splits.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let vocab = build_vocab(cfg)?;
    let n = vocab.num_predicates();
    let dim = cfg.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let object_anchors = (0..=cfg.num_object_classes)
        .map(|_| gaussian_vec(&mut rng, dim))
        .collect();
    let head_anchors = (0..cfg.num_head_predicates)
        .map(|_| gaussian_vec(&mut rng, dim))
        .collect();
    let tail_offsets = (0..n).map(|_| gaussian_vec(&mut rng, dim)).collect();
    let preferred_pair = (0..cfg.num_head_predicates)
        .map(|_| {
            (
                rng.random_range(1..=cfg.num_object_classes),
                rng.random_range(1..=cfg.num_object_classes),
            )
        })
        .collect();
    let generator = Generator {
        cfg,
        vocab: &vocab,
        object_anchors,
        head_anchors,
        tail_offsets,
        preferred_pair,
    };

    let train = generator.split(&mut rng, &vocab.train_counts);
    let per_class = (cfg.num_test / n) as u64;
    let mut test_counts = vec![per_class; n + 1];
    test_counts[BACKGROUND] = 0;
    let test = generator.split(&mut rng, &test_counts);

    Ok(Dataset {
        vocab,
        num_object_classes: cfg.num_object_classes,
        feature_dim: dim,
        train,
        test,
    })
}

/// Predicates with more than `threshold` training samples; background excluded.
pub fn head_set(vocab: &PredicateVocabulary, threshold: u64) -> BTreeSet<usize> {
    vocab
        .train_counts
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &c)| c > threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Many/Medium/Few frequency groups of foreground predicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSplit {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
}

/// Sorts foreground predicates by descending count (ties: lower index first)
/// and cuts into `ceil(N/3)`, `ceil((N - ceil(N/3))/2)` and the remainder.
pub fn group_split(vocab: &PredicateVocabulary) -> GroupSplit {
    let mut order: Vec<usize> = (1..vocab.num_classes()).collect();
    order.sort_by(|&a, &b| {
        vocab.train_counts[b]
            .cmp(&vocab.train_counts[a])
            .then(a.cmp(&b))
    });
    let n = order.len();
    let many = n.div_ceil(3);
    let medium = (n - many).div_ceil(2);
    GroupSplit {
        many: order[..many].to_vec(),
        medium: order[many..many + medium].to_vec(),
        few: order[many + medium..].to_vec(),
    }
}
