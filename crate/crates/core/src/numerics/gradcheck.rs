//! Central-difference gradient verification.
//!
//! The loss closure receives the parameters and a gradient accumulator. It
//! must return the scalar loss and add its analytic gradient into the
//! accumulator; during the finite-difference sweeps the accumulator is a
//! scratch buffer and its contents are ignored.

use crate::error::{Error, Result};

use super::params::{GradStore, ParamStore};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Check at most this many entries per parameter, evenly strided.
    /// `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            max_entries_per_param: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks every parameter entry with step `eps`.
pub fn grad_check<F>(loss_fn: F, params: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut GradStore) -> Result<f64>,
{
    grad_check_with(
        loss_fn,
        params,
        GradCheckConfig {
            eps,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(
    loss_fn: F,
    params: &ParamStore,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut GradStore) -> Result<f64>,
{
    if !(cfg.eps > 0.0) {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let mut analytic = params.zero_grads_like();
    let base = loss_fn(params, &mut analytic)?;
    if !base.is_finite() {
        return Err(Error::invalid("loss is non-finite at the unperturbed point"));
    }

    let mut scratch = params.zero_grads_like();
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.value(&name).len();
        let stride = match cfg.max_entries_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let original = params.value(&name).data()[idx];
            let mut eval = |value: f64, probe: &mut ParamStore| -> Result<f64> {
                probe.value_mut(&name).expect("name exists").data_mut()[idx] = value;
                scratch.zero();
                let l = loss_fn(probe, &mut scratch)?;
                if !l.is_finite() {
                    return Err(Error::NonFiniteGradCheck {
                        param: name.clone(),
                        index: idx,
                    });
                }
                Ok(l)
            };
            let plus = eval(original + cfg.eps, &mut probe)?;
            let minus = eval(original - cfg.eps, &mut probe)?;
            probe.value_mut(&name).expect("name exists").data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic.get(&name).expect("same layout").data()[idx];
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
