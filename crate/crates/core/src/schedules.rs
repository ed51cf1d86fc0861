//! Curriculum schedules: the decay family, the branch weight and the
//! per-predicate head weight.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    /// `1 - t/T`
    Linear,
    /// `nu^(t/T)`, fast then slow.
    Exponential { nu: f64 },
    /// `1 - (t/T)^2`, slow then fast.
    Parabolic,
}

pub const DEFAULT_EXPONENTIAL_NU: f64 = 0.01;

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "parabolic" => Ok(Self::Parabolic),
            "exponential" => Ok(Self::Exponential {
                nu: DEFAULT_EXPONENTIAL_NU,
            }),
            other => match other.strip_prefix("exponential:") {
                Some(nu) => nu
                    .parse()
                    .map(|nu| Self::Exponential { nu })
                    .map_err(|_| Error::config(format!("bad exponential base `{nu}`"))),
                None => Err(Error::config(format!("unknown schedule kind `{other}`"))),
            },
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Linear => "linear".into(),
            Self::Parabolic => "parabolic".into(),
            Self::Exponential { nu } => format!("exponential:{nu}"),
        }
    }
}

/// Decay value at progress `t` of `T`; 1 at `t = 0`, nonincreasing.
pub fn schedule_value(kind: ScheduleKind, t: f64, total: f64) -> Result<f64> {
    if !(total > 0.0) {
        return Err(Error::invalid(format!("schedule horizon must be positive, got {total}")));
    }
    if !(0.0..=total).contains(&t) {
        return Err(Error::invalid(format!("schedule time {t} outside [0, {total}]")));
    }
    let x = t / total;
    Ok(match kind {
        ScheduleKind::Linear => 1.0 - x,
        ScheduleKind::Exponential { nu } => nu.powf(x),
        ScheduleKind::Parabolic => 1.0 - x * x,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub k1: usize,
    pub k2: usize,
    pub total: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Sample-count threshold above which a predicate is a head predicate.
    pub head_threshold: u64,
    pub kind: ScheduleKind,
}

impl ScheduleConfig {
    /// The published full-scale constants.
    pub fn published() -> Self {
        Self {
            k1: 10_000,
            k2: 20_000,
            total: 40_000,
            beta1: 0.1,
            beta2: 0.2,
            head_threshold: 10_000,
            kind: ScheduleKind::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0 < self.k1 && self.k1 < self.k2 && self.k2 <= self.total) {
            return Err(Error::config(format!(
                "need 0 < K1 < K2 <= K, got K1={} K2={} K={}",
                self.k1, self.k2, self.total
            )));
        }
        if !(0.0..=1.0).contains(&self.beta1) || !(0.0..=1.0).contains(&self.beta2) {
            return Err(Error::config("beta1 and beta2 must lie in [0, 1]"));
        }
        if let ScheduleKind::Exponential { nu } = self.kind {
            if !(nu > 0.0 && nu < 1.0) {
                return Err(Error::config(format!("exponential base {nu} not in (0, 1)")));
            }
        }
        Ok(())
    }
}

impl Default for ScheduleConfig {
    /// Desk scale: the published iteration counts divided by ten. The head
    /// threshold is scaled to the default synthetic dataset separately by
    /// the training configuration.
    fn default() -> Self {
        Self {
            k1: 1_000,
            k2: 2_000,
            total: 4_000,
            ..Self::published()
        }
    }
}

/// Weight of the coarse branch's loss at iteration `k`.
pub fn branch_alpha(k: usize, cfg: &ScheduleConfig) -> f64 {
    if k <= cfg.k1 {
        1.0
    } else if k <= cfg.k2 {
        let phi = schedule_value(cfg.kind, (k - cfg.k1) as f64, (cfg.k2 - cfg.k1) as f64)
            .expect("validated schedule");
        phi.max(cfg.beta1)
    } else {
        cfg.beta1
    }
}

/// Loss weight of a predicate at iteration `k`: 1 for tails, decaying to
/// `beta2` for heads between `K1` and `K`.
pub fn predicate_lambda(k: usize, is_head: bool, cfg: &ScheduleConfig) -> f64 {
    if !is_head {
        return 1.0;
    }
    let span = (cfg.total - cfg.k1) as f64;
    let t = (k.saturating_sub(cfg.k1) as f64).min(span);
    let phi = schedule_value(cfg.kind, t, span).expect("validated schedule");
    phi.max(cfg.beta2)
}
