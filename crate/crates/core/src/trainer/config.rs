//! Flat `key=value` configuration files. Blank lines and `#` comments are
//! ignored; unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::datagen::GeneratorConfig;
use crate::error::{Error, Result};
use crate::schedules::{ScheduleConfig, ScheduleKind};

use super::TrainConfig;

pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(out)
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::config(format!("cannot parse `{raw}` for `{key}`")))
}

fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::config(format!("`{key}` expects true/false, got `{raw}`"))),
    }
}

pub fn generator_config_from_str(text: &str) -> Result<GeneratorConfig> {
    let mut cfg = GeneratorConfig::default();
    for (k, v) in parse_key_values(text)? {
        match k.as_str() {
            "num_object_classes" => cfg.num_object_classes = value(&k, &v)?,
            "num_head_predicates" => cfg.num_head_predicates = value(&k, &v)?,
            "tails_per_head" => cfg.tails_per_head = value(&k, &v)?,
            "feature_dim" => cfg.feature_dim = value(&k, &v)?,
            "zipf_exponent" => cfg.zipf_exponent = value(&k, &v)?,
            "tail_offset_scale" => cfg.tail_offset_scale = value(&k, &v)?,
            "noise_scale" => cfg.noise_scale = value(&k, &v)?,
            "num_train" => cfg.num_train = value(&k, &v)?,
            "num_test" => cfg.num_test = value(&k, &v)?,
            "relations_per_image" => cfg.relations_per_image = value(&k, &v)?,
            "label_noise" => cfg.label_noise = value(&k, &v)?,
            "pair_affinity" => cfg.pair_affinity = value(&k, &v)?,
            "seed" => cfg.seed = value(&k, &v)?,
            _ => return Err(Error::config(format!("unknown key `{k}`"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Applies one `key=value` pair to a training configuration.
pub fn apply_train_key(cfg: &mut TrainConfig, k: &str, v: &str) -> Result<()> {
    let s: &mut ScheduleConfig = &mut cfg.schedule;
    match k {
        "k1" => s.k1 = value(k, v)?,
        "k2" => s.k2 = value(k, v)?,
        "total_iterations" => s.total = value(k, v)?,
        "beta1" => s.beta1 = value(k, v)?,
        "beta2" => s.beta2 = value(k, v)?,
        "head_threshold" => s.head_threshold = value(k, v)?,
        "schedule_kind" => s.kind = ScheduleKind::parse(v)?,
        "tau" => cfg.tau = value(k, v)?,
        "mu" => cfg.mu = value(k, v)?,
        "beta_en" => cfg.beta_en = value(k, v)?,
        "learning_rate" => cfg.learning_rate = value(k, v)?,
        "batch_size" => cfg.batch_size = value(k, v)?,
        "hidden_dim" => cfg.hidden_dim = value(k, v)?,
        "scm_dim" => cfg.scm_dim = value(k, v)?,
        "seed" => cfg.seed = value(k, v)?,
        "log_every" => cfg.log_every = value(k, v)?,
        "eval_every" => cfg.eval_every = value(k, v)?,
        "disable_crm" => cfg.disable_crm = flag(k, v)?,
        "disable_scm" => cfg.disable_scm = flag(k, v)?,
        "disable_kd" => cfg.disable_kd = flag(k, v)?,
        "clb_only" => cfg.clb_only = flag(k, v)?,
        "defer_flb_terms" => cfg.defer_flb_terms = flag(k, v)?,
        _ => return Err(Error::config(format!("unknown key `{k}`"))),
    }
    Ok(())
}

pub fn train_config_from_str(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (k, v) in parse_key_values(text)? {
        apply_train_key(&mut cfg, &k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical `key=value` rendering, readable by [`train_config_from_str`].
pub fn train_config_to_string(cfg: &TrainConfig) -> String {
    let s = &cfg.schedule;
    let mut out = String::new();
    let pairs: [(&str, String); 22] = [
        ("k1", s.k1.to_string()),
        ("k2", s.k2.to_string()),
        ("total_iterations", s.total.to_string()),
        ("beta1", s.beta1.to_string()),
        ("beta2", s.beta2.to_string()),
        ("head_threshold", s.head_threshold.to_string()),
        ("schedule_kind", s.kind.name()),
        ("tau", cfg.tau.to_string()),
        ("mu", cfg.mu.to_string()),
        ("beta_en", cfg.beta_en.to_string()),
        ("learning_rate", cfg.learning_rate.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("hidden_dim", cfg.hidden_dim.to_string()),
        ("scm_dim", cfg.scm_dim.to_string()),
        ("seed", cfg.seed.to_string()),
        ("log_every", cfg.log_every.to_string()),
        ("eval_every", cfg.eval_every.to_string()),
        ("disable_crm", cfg.disable_crm.to_string()),
        ("disable_scm", cfg.disable_scm.to_string()),
        ("disable_kd", cfg.disable_kd.to_string()),
        ("clb_only", cfg.clb_only.to_string()),
        ("defer_flb_terms", cfg.defer_flb_terms.to_string()),
    ];
    for (k, v) in pairs {
        writeln!(out, "{k}={v}").expect("writing to String");
    }
    out
}
