//! Training objectives. Each per-sample loss returns its value together with
//! the gradient with respect to the logits it consumes.

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, softmax_unchecked};

/// Per-class loss weights; background (index 0) is always 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub w: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            w: vec![1.0; num_classes],
        }
    }
}

/// Every component of one training step's objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_crm: f64,
    pub l_hybrid: f64,
    pub l_sc: f64,
    pub l_kd: f64,
    pub l_total: f64,
    pub alpha_used: f64,
}

impl LossBreakdown {
    pub fn assemble(alpha: f64, l_ce: f64, l_crm: f64, l_sc: f64, l_kd: f64, mu: f64) -> Self {
        let l_hybrid = hybrid_loss(alpha, l_ce, l_crm);
        Self {
            l_ce,
            l_crm,
            l_hybrid,
            l_sc,
            l_kd,
            l_total: total_loss(l_hybrid, l_sc, l_kd, mu),
            alpha_used: alpha,
        }
    }

    pub fn is_finite(&self) -> Option<&'static str> {
        [
            ("l_ce", self.l_ce),
            ("l_crm", self.l_crm),
            ("l_sc", self.l_sc),
            ("l_kd", self.l_kd),
            ("l_total", self.l_total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

fn check_target(z: &[f64], y: usize) -> Result<()> {
    if y >= z.len() {
        return Err(Error::invalid(format!(
            "target class {y} outside {} logits",
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logits contain non-finite values"));
    }
    Ok(())
}

/// `-log softmax(z)[y]` and its gradient `softmax(z) - onehot(y)`.
pub fn cross_entropy(z: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    check_target(z, y)?;
    let loss = log_sum_exp(z) - z[y];
    let mut grad = softmax_unchecked(z);
    grad[y] -= 1.0;
    Ok((loss, grad))
}

/// Class-balanced weights `(1 - beta) / (1 - beta^n)`, mean-normalized over
/// foreground classes. `counts[0]` is the background and is ignored.
pub fn effective_number_weights(counts: &[u64], beta_en: f64) -> Result<ClassWeights> {
    if !(0.0..1.0).contains(&beta_en) {
        return Err(Error::config(format!("beta_en {beta_en} not in [0, 1)")));
    }
    if counts.len() < 2 {
        return Err(Error::config("need at least one foreground class"));
    }
    let mut w = vec![1.0; counts.len()];
    if beta_en == 0.0 {
        return Ok(ClassWeights { w });
    }
    for (i, &n) in counts.iter().enumerate().skip(1) {
        if n == 0 {
            return Err(Error::config(format!("class {i} has no samples")));
        }
        w[i] = (1.0 - beta_en) / (1.0 - beta_en.powf(n as f64));
    }
    let mean = w[1..].iter().sum::<f64>() / (w.len() - 1) as f64;
    w[1..].iter_mut().for_each(|v| *v /= mean);
    Ok(ClassWeights { w })
}

/// Re-weighted cross-entropy `lambda_y * w_y * CE(z, y)`.
pub fn crm_loss(
    z: &[f64],
    y: usize,
    weights: &ClassWeights,
    lambda_y: f64,
) -> Result<(f64, Vec<f64>)> {
    if weights.w.len() != z.len() {
        return Err(Error::invalid("class weights and logits differ in width"));
    }
    let (ce, mut grad) = cross_entropy(z, y)?;
    let scale = lambda_y * weights.w[y];
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((scale * ce, grad))
}

/// Temperature-softened distribution over the `head` entries of `z` only.
fn restricted_soft(z: &[f64], head: &[usize], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = head.iter().map(|&i| z[i] / tau).collect();
    softmax_unchecked(&scaled)
}

/// Distillation from teacher logits `z_c` to student logits `z_o`,
/// restricted to the head predicates. Returns the loss and its gradient with
/// respect to `z_o` (zero outside `head`); the teacher is a constant.
pub fn kd_loss(z_c: &[f64], z_o: &[f64], tau: f64, head: &[usize]) -> Result<(f64, Vec<f64>)> {
    if head.len() < 2 {
        return Err(Error::config(
            "distillation needs at least two head predicates",
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature {tau} must be positive")));
    }
    if z_c.len() != z_o.len() || head.iter().any(|&i| i >= z_o.len()) {
        return Err(Error::invalid("teacher/student logits or head set mismatch"));
    }
    let p = restricted_soft(z_c, head, tau);
    let scaled: Vec<f64> = head.iter().map(|&i| z_o[i] / tau).collect();
    let lse = log_sum_exp(&scaled);
    let q = softmax_unchecked(&scaled);

    let loss = -p
        .iter()
        .zip(&scaled)
        .map(|(pi, si)| pi * (si - lse))
        .sum::<f64>();
    let mut grad = vec![0.0; z_o.len()];
    for (k, &i) in head.iter().enumerate() {
        grad[i] = (q[k] - p[k]) / tau;
    }
    Ok((loss, grad))
}

/// Entropy of the teacher's restricted softened distribution; the lower
/// bound of [`kd_loss`].
pub fn kd_entropy(z_c: &[f64], tau: f64, head: &[usize]) -> f64 {
    restricted_soft(z_c, head, tau)
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

pub fn hybrid_loss(alpha: f64, l_ce: f64, l_crm: f64) -> f64 {
    alpha * l_ce + (1.0 - alpha) * l_crm
}

pub fn total_loss(l_hybrid: f64, l_sc: f64, l_kd: f64, mu: f64) -> f64 {
    l_hybrid + l_sc + mu * l_kd
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_closed_forms() {
        let (l, g) = cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
        let (l, _) = cross_entropy(&[100.0, 0.0], 0).unwrap();
        assert!(l <= 1e-10);
    }

    #[test]
    fn cross_entropy_invalid_target() {
        assert!(matches!(
            cross_entropy(&[0.0, 1.0], 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn effective_number_reductions() {
        let w = effective_number_weights(&[0, 100, 10, 1], 0.0).unwrap();
        assert_eq!(w.w, vec![1.0; 4]);
        for beta in [0.5, 0.9, 0.999] {
            let w = effective_number_weights(&[7, 5, 5, 5], beta).unwrap();
            for v in &w.w {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn effective_number_direct_evaluation() {
        let beta: f64 = 0.999;
        let raw: Vec<f64> = [100.0, 10.0, 1.0]
            .iter()
            .map(|n: &f64| (1.0 - beta) / (1.0 - beta.powf(*n)))
            .collect();
        let mean = raw.iter().sum::<f64>() / 3.0;
        let w = effective_number_weights(&[0, 100, 10, 1], beta).unwrap();
        assert_eq!(w.w[0], 1.0);
        for (k, r) in raw.iter().enumerate() {
            assert!((w.w[k + 1] - r / mean).abs() < 1e-12);
        }
        assert!(w.w[1] < w.w[2] && w.w[2] < w.w[3]);
    }

    #[test]
    fn effective_number_zero_count() {
        assert!(matches!(
            effective_number_weights(&[0, 4, 0], 0.9),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn crm_reductions() {
        let z = [0.3, -0.2, 1.4];
        let w = ClassWeights::uniform(3);
        assert_eq!(crm_loss(&z, 2, &w, 1.0).unwrap(), cross_entropy(&z, 2).unwrap());
        let (l, _) = crm_loss(&[0.0, 0.0], 0, &ClassWeights::uniform(2), 0.5).unwrap();
        assert!((l - 0.5 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kd_stationary_at_teacher() {
        let z = [0.1, 2.0, -1.0, 0.7, 3.0];
        let head = [1, 2, 3];
        let (l, g) = kd_loss(&z, &z, 2.0, &head).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        assert!((l - kd_entropy(&z, 2.0, &head)).abs() < 1e-12);
    }

    #[test]
    fn kd_uniform_limit() {
        let zc = [0.0, 5.0, -3.0, 2.0, 1.0];
        let zo = [1.0, -4.0, 0.5, 3.0, -2.0];
        let head = [1, 2, 3, 4];
        let (l, _) = kd_loss(&zc, &zo, 1000.0, &head).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn kd_needs_two_heads() {
        assert!(matches!(
            kd_loss(&[0.0, 1.0], &[0.0, 1.0], 2.0, &[1]),
            Err(Error::Config(_))
        ));
        assert!(kd_loss(&[0.0, 1.0], &[0.0, 1.0], 0.0, &[0, 1]).is_err());
    }

    #[test]
    fn hybrid_and_total_arithmetic() {
        assert_eq!(hybrid_loss(1.0, 2.0, 4.0), 2.0);
        assert!((hybrid_loss(0.1, 2.0, 4.0) - 3.8).abs() < 1e-12);
        assert!((total_loss(1.0, 0.5, 2.0, 0.05) - 1.6).abs() < 1e-12);
        assert_eq!(total_loss(1.0, 0.5, 2.0, 0.0), 1.5);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.05), 0.0);
        let b = LossBreakdown::assemble(0.1, 2.0, 4.0, 0.5, 2.0, 0.05);
        assert!((b.l_total - (b.l_hybrid + b.l_sc + 0.05 * b.l_kd)).abs() < 1e-10);
    }
}
