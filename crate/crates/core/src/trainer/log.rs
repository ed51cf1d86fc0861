//! Training log and report rendering.
//!
//! Log file lines:
//! - `sgght-trainlog <version>`
//! - `config <key>=<value>` for every training setting
//! - `loss <iter> <alpha> <lambda_head> <l_ce> <l_crm> <l_hybrid> <l_sc> <l_kd> <l_total>`
//! - `eval <iter> <K> <R> <mR> <M>`
//! - `recall <iter> <K> <predicate> <name> <train_count> <recall|NA>`

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datagen::PredicateVocabulary;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::{EvalReport, GroupRecall, KReport};
use crate::schedules::{branch_alpha, predicate_lambda};

use super::config::{apply_train_key, train_config_to_string};
use super::TrainConfig;

pub const TRAIN_LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    /// Weight of a head predicate in the re-weighted loss at this iteration.
    pub lambda_head: f64,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub entries: Vec<LogEntry>,
    pub evals: Vec<(usize, EvalReport)>,
}

impl TrainLog {
    pub fn loss_trace(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.breakdown.l_total).collect()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Writes the log; `vocab` supplies names and counts for recall lines.
pub fn write_train_log(path: &Path, log: &TrainLog, vocab: &PredicateVocabulary) -> Result<()> {
    let mut out = format!("sgght-trainlog {TRAIN_LOG_VERSION}\n");
    for line in train_config_to_string(&log.config).lines() {
        writeln!(out, "config {line}").expect("writing to String");
    }
    let every = log.config.log_every.max(1);
    let last = log.entries.last().map(|e| e.iteration);
    for e in &log.entries {
        if e.iteration % every != 0 && Some(e.iteration) != last && e.iteration != 1 {
            continue;
        }
        let b = &e.breakdown;
        writeln!(
            out,
            "loss {} {} {} {} {} {} {} {} {}",
            e.iteration, b.alpha_used, e.lambda_head, b.l_ce, b.l_crm, b.l_hybrid, b.l_sc, b.l_kd, b.l_total
        )
        .expect("writing to String");
    }
    for (iter, report) in &log.evals {
        for kr in &report.per_k {
            writeln!(out, "eval {iter} {} {} {} {}", kr.k, kr.r_at_k, kr.mr_at_k, kr.m_at_k)
                .expect("writing to String");
            for (p, r) in kr.per_predicate.iter().enumerate().skip(1) {
                writeln!(
                    out,
                    "recall {iter} {} {p} {} {} {}",
                    kr.k,
                    vocab.names.get(p).map_or("?", |s| s.as_str()),
                    vocab.train_counts.get(p).copied().unwrap_or(0),
                    fmt_opt(*r)
                )
                .expect("writing to String");
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Per-predicate recall rows recovered from a log.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallRow {
    pub iteration: usize,
    pub k: usize,
    pub predicate: usize,
    pub name: String,
    pub train_count: u64,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLog {
    pub log: TrainLog,
    pub recalls: Vec<RecallRow>,
}

fn field<T: std::str::FromStr>(tok: Option<&str>, line: usize) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::format("training log", format!("line {line}: bad field")))
}

pub fn read_train_log(path: &Path) -> Result<ParsedLog> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == format!("sgght-trainlog {TRAIN_LOG_VERSION}") => {}
        _ => return Err(Error::format("training log", "missing sgght-trainlog header")),
    }
    let mut config = TrainConfig::default();
    let mut entries = Vec::new();
    let mut evals: Vec<(usize, EvalReport)> = Vec::new();
    let mut recalls = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let mut t = line.split_whitespace();
        match t.next() {
            Some("config") => {
                let kv = t.next().unwrap_or("");
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::format("training log", format!("line {lineno}: bad config")))?;
                apply_train_key(&mut config, k, v)?;
            }
            Some("loss") => {
                let iteration = field(t.next(), lineno)?;
                let alpha_used = field(t.next(), lineno)?;
                let lambda_head = field(t.next(), lineno)?;
                let mut v = [0.0; 6];
                for x in v.iter_mut() {
                    *x = field(t.next(), lineno)?;
                }
                if entries.last().is_some_and(|e: &LogEntry| e.iteration >= iteration) {
                    return Err(Error::format(
                        "training log",
                        format!("line {lineno}: iterations not increasing"),
                    ));
                }
                entries.push(LogEntry {
                    iteration,
                    lambda_head,
                    breakdown: LossBreakdown {
                        l_ce: v[0],
                        l_crm: v[1],
                        l_hybrid: v[2],
                        l_sc: v[3],
                        l_kd: v[4],
                        l_total: v[5],
                        alpha_used,
                    },
                });
            }
            Some("eval") => {
                let iter: usize = field(t.next(), lineno)?;
                let k = field(t.next(), lineno)?;
                let kr = KReport {
                    k,
                    r_at_k: field(t.next(), lineno)?,
                    mr_at_k: field(t.next(), lineno)?,
                    m_at_k: field(t.next(), lineno)?,
                    per_predicate: Vec::new(),
                    groups: GroupRecall {
                        many: None,
                        medium: None,
                        few: None,
                    },
                };
                match evals.last_mut() {
                    Some((it, rep)) if *it == iter => rep.per_k.push(kr),
                    _ => evals.push((iter, EvalReport { per_k: vec![kr] })),
                }
            }
            Some("recall") => {
                let iteration = field(t.next(), lineno)?;
                let k = field(t.next(), lineno)?;
                let predicate = field(t.next(), lineno)?;
                let name: String = field(t.next(), lineno)?;
                let train_count = field(t.next(), lineno)?;
                let raw: String = field(t.next(), lineno)?;
                let recall = if raw == "NA" {
                    None
                } else {
                    Some(field(Some(raw.as_str()), lineno)?)
                };
                recalls.push(RecallRow {
                    iteration,
                    k,
                    predicate,
                    name,
                    train_count,
                    recall,
                });
            }
            None => {}
            Some(other) => {
                return Err(Error::format(
                    "training log",
                    format!("line {lineno}: unknown record `{other}`"),
                ))
            }
        }
    }
    config.validate()?;
    Ok(ParsedLog {
        log: TrainLog {
            config,
            entries,
            evals,
        },
        recalls,
    })
}

/// Schedule trace (logged vs recomputed weights) plus the per-predicate
/// recall table of the last snapshot, most frequent predicate first.
pub fn render_schedule_report(parsed: &ParsedLog) -> String {
    let cfg = &parsed.log.config;
    let mut out = String::from("# schedule trace\niteration\talpha_logged\talpha_schedule\tlambda_head_logged\tlambda_head_schedule\n");
    for e in &parsed.log.entries {
        let alpha = if cfg.clb_only {
            1.0
        } else {
            branch_alpha(e.iteration, &cfg.schedule)
        };
        let lambda = predicate_lambda(e.iteration, true, &cfg.schedule);
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            e.iteration, e.breakdown.alpha_used, alpha, e.lambda_head, lambda
        )
        .expect("writing to String");
    }
    if let Some(last) = parsed.recalls.iter().map(|r| r.iteration).max() {
        let mut ks: Vec<usize> = parsed
            .recalls
            .iter()
            .filter(|r| r.iteration == last)
            .map(|r| r.k)
            .collect();
        ks.sort_unstable();
        ks.dedup();
        let mut rows: Vec<&RecallRow> = parsed
            .recalls
            .iter()
            .filter(|r| r.iteration == last && r.k == ks[0])
            .collect();
        rows.sort_by(|a, b| b.train_count.cmp(&a.train_count).then(a.predicate.cmp(&b.predicate)));
        write!(out, "# per-predicate recall at iteration {last}\npredicate\tname\ttrain_count")
            .expect("writing to String");
        for k in &ks {
            write!(out, "\trecall@{k}").expect("writing to String");
        }
        out.push('\n');
        for row in rows {
            write!(out, "{}\t{}\t{}", row.predicate, row.name, row.train_count)
                .expect("writing to String");
            for k in &ks {
                let r = parsed
                    .recalls
                    .iter()
                    .find(|x| x.iteration == last && x.k == *k && x.predicate == row.predicate)
                    .and_then(|x| x.recall);
                write!(out, "\t{}", fmt_opt(r)).expect("writing to String");
            }
            out.push('\n');
        }
    }
    out
}

/// `metric\tK\tvalue` table followed by per-predicate recall sorted by
/// descending training frequency.
pub fn render_eval_report(report: &EvalReport, vocab: &PredicateVocabulary) -> String {
    let mut out = String::from("metric\tK\tvalue\n");
    for kr in &report.per_k {
        for (name, v) in [
            ("R@K", Some(kr.r_at_k)),
            ("mR@K", Some(kr.mr_at_k)),
            ("M@K", Some(kr.m_at_k)),
            ("group_many@K", kr.groups.many),
            ("group_medium@K", kr.groups.medium),
            ("group_few@K", kr.groups.few),
        ] {
            writeln!(out, "{name}\t{}\t{}", kr.k, fmt_opt(v)).expect("writing to String");
        }
    }
    out.push_str("\npredicate\tname\ttrain_count");
    for kr in &report.per_k {
        write!(out, "\trecall@{}", kr.k).expect("writing to String");
    }
    out.push('\n');
    let mut order: Vec<usize> = (1..vocab.num_classes()).collect();
    order.sort_by(|&a, &b| {
        vocab.train_counts[b]
            .cmp(&vocab.train_counts[a])
            .then(a.cmp(&b))
    });
    for p in order {
        write!(out, "{p}\t{}\t{}", vocab.names[p], vocab.train_counts[p]).expect("writing to String");
        for kr in &report.per_k {
            write!(out, "\t{}", fmt_opt(kr.per_predicate.get(p).copied().flatten()))
                .expect("writing to String");
        }
        out.push('\n');
    }
    out
}
