//! Plain-text dataset and vocabulary files.
//!
//! Dataset: a header line
//! `sgght-dataset <version> <N_O> <N_R> <feature_dim>` followed by one relation
//! per line: `image_id subject_class object_class gt_predicate`, then the
//! subject, object and union features and the subject and object label
//! distributions, all space separated. Floats use Rust's shortest
//! round-trip formatting so a write/read cycle is lossless.
//!
//! Vocabulary: header `sgght-vocab <version> <N_R>` then
//! `index name train_count parent_index` per predicate, background first
//! with parent `-1`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{PredicateVocabulary, RelationInstance};

pub const DATASET_FORMAT_VERSION: u32 = 1;

pub fn write_dataset(
    path: &Path,
    instances: &[RelationInstance],
    num_object_classes: usize,
    num_predicates: usize,
    feature_dim: usize,
) -> Result<()> {
    let mut out = format!(
        "sgght-dataset {DATASET_FORMAT_VERSION} {num_object_classes} {num_predicates} {feature_dim}\n"
    );
    for inst in instances {
        write!(
            out,
            "{} {} {} {}",
            inst.image_id, inst.subject_class, inst.object_class, inst.gt_predicate
        )
        .expect("writing to String");
        for v in inst
            .subject_feature
            .iter()
            .chain(&inst.object_feature)
            .chain(&inst.union_feature)
            .chain(&inst.subject_label_dist)
            .chain(&inst.object_label_dist)
        {
            write!(out, " {v}").expect("writing to String");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub struct DatasetHeader {
    pub num_object_classes: usize,
    pub num_predicates: usize,
    pub feature_dim: usize,
}

fn parse<T: std::str::FromStr>(tok: Option<&str>, what: &'static str, line: usize) -> Result<T> {
    tok.ok_or_else(|| Error::format(what, format!("line {line}: missing field")))?
        .parse()
        .map_err(|_| Error::format(what, format!("line {line}: unparsable field")))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<RelationInstance>)> {
    const WHAT: &str = "dataset file";
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(WHAT, "empty file"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("sgght-dataset") {
        return Err(Error::format(WHAT, "missing sgght-dataset header"));
    }
    let version: u32 = parse(toks.next(), WHAT, 1)?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::format(WHAT, format!("unsupported version {version}")));
    }
    let header = DatasetHeader {
        num_object_classes: parse(toks.next(), WHAT, 1)?,
        num_predicates: parse(toks.next(), WHAT, 1)?,
        feature_dim: parse(toks.next(), WHAT, 1)?,
    };
    let fd = header.feature_dim;
    let ld = header.num_object_classes + 1;
    let width = 4 + 3 * fd + 2 * ld;

    let mut instances = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != width {
            return Err(Error::format(
                WHAT,
                format!("line {lineno}: expected {width} fields, found {}", toks.len()),
            ));
        }
        let mut it = toks.iter().copied();
        let image_id = parse(it.next(), WHAT, lineno)?;
        let subject_class: usize = parse(it.next(), WHAT, lineno)?;
        let object_class: usize = parse(it.next(), WHAT, lineno)?;
        let gt_predicate: usize = parse(it.next(), WHAT, lineno)?;
        if subject_class > header.num_object_classes
            || object_class > header.num_object_classes
            || gt_predicate > header.num_predicates
        {
            return Err(Error::format(WHAT, format!("line {lineno}: index out of range")));
        }
        let mut take = |n: usize| -> Result<Vec<f64>> {
            (0..n).map(|_| parse(it.next(), WHAT, lineno)).collect()
        };
        instances.push(RelationInstance {
            image_id,
            subject_class,
            object_class,
            gt_predicate,
            subject_feature: take(fd)?,
            object_feature: take(fd)?,
            union_feature: take(fd)?,
            subject_label_dist: take(ld)?,
            object_label_dist: take(ld)?,
        });
    }
    Ok((header, instances))
}

pub fn write_vocab(path: &Path, vocab: &PredicateVocabulary) -> Result<()> {
    let mut out = format!(
        "sgght-vocab {DATASET_FORMAT_VERSION} {}\n",
        vocab.num_predicates()
    );
    for (i, name) in vocab.names.iter().enumerate() {
        let parent = vocab.parent_of[i].map_or(-1, |p| p as i64);
        writeln!(out, "{i} {name} {} {parent}", vocab.train_counts[i]).expect("writing to String");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<PredicateVocabulary> {
    const WHAT: &str = "vocabulary file";
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(WHAT, "empty file"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("sgght-vocab") {
        return Err(Error::format(WHAT, "missing sgght-vocab header"));
    }
    let version: u32 = parse(toks.next(), WHAT, 1)?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::format(WHAT, format!("unsupported version {version}")));
    }
    let n: usize = parse(toks.next(), WHAT, 1)?;

    let mut vocab = PredicateVocabulary {
        names: Vec::with_capacity(n + 1),
        train_counts: Vec::with_capacity(n + 1),
        parent_of: Vec::with_capacity(n + 1),
    };
    for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let lineno = i + 2;
        let mut toks = line.split_whitespace();
        let index: usize = parse(toks.next(), WHAT, lineno)?;
        if index != i {
            return Err(Error::format(WHAT, format!("line {lineno}: index {index} out of order")));
        }
        let name: String = parse(toks.next(), WHAT, lineno)?;
        let count: u64 = parse(toks.next(), WHAT, lineno)?;
        let parent: i64 = parse(toks.next(), WHAT, lineno)?;
        vocab.names.push(name);
        vocab.train_counts.push(count);
        vocab.parent_of.push(usize::try_from(parent).ok());
    }
    if vocab.names.len() != n + 1 {
        return Err(Error::format(
            WHAT,
            format!("expected {} entries, found {}", n + 1, vocab.names.len()),
        ));
    }
    vocab
        .validate()
        .map_err(|e| Error::format(WHAT, e.to_string()))?;
    Ok(vocab)
}

pub const VOCAB_FILE: &str = "vocab.txt";
pub const TRAIN_FILE: &str = "train.txt";
pub const TEST_FILE: &str = "test.txt";

/// Writes `vocab.txt`, `train.txt` and `test.txt` into `dir`, creating it.
pub fn save_dataset_dir(dir: &Path, ds: &super::Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = ds.vocab.num_predicates();
    write_vocab(&dir.join(VOCAB_FILE), &ds.vocab)?;
    write_dataset(&dir.join(TRAIN_FILE), &ds.train, ds.num_object_classes, n, ds.feature_dim)?;
    write_dataset(&dir.join(TEST_FILE), &ds.test, ds.num_object_classes, n, ds.feature_dim)?;
    Ok(())
}

pub fn load_dataset_dir(dir: &Path) -> Result<super::Dataset> {
    let vocab = read_vocab(&dir.join(VOCAB_FILE))?;
    let (h_train, train) = read_dataset(&dir.join(TRAIN_FILE))?;
    let (h_test, test) = read_dataset(&dir.join(TEST_FILE))?;
    for h in [&h_train, &h_test] {
        if h.num_predicates != vocab.num_predicates()
            || h.num_object_classes != h_train.num_object_classes
            || h.feature_dim != h_train.feature_dim
        {
            return Err(Error::format("dataset directory", "split headers disagree with the vocabulary"));
        }
    }
    Ok(super::Dataset {
        vocab,
        num_object_classes: h_train.num_object_classes,
        feature_dim: h_train.feature_dim,
        train,
        test,
    })
}
