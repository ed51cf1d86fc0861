use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax input contains non-finite values"));
    }
    Ok(softmax_unchecked(z))
}

pub(crate) fn softmax_unchecked(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// `log(sum(exp(z)))`, stable.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Pulls a gradient wrt softmax outputs back to the logits: `J^T g`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, gi)| pi * (gi - dot)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y = W x + b` with `W` stored `[out, in]`.
pub fn linear_forward(w: &Tensor, b: Option<&Tensor>, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.rows(), w.cols());
    debug_assert_eq!(cols, x.len());
    let wd = w.data();
    let mut y = match b {
        Some(b) => b.data().to_vec(),
        None => vec![0.0; rows],
    };
    for (r, yr) in y.iter_mut().enumerate() {
        *yr += dot(&wd[r * cols..(r + 1) * cols], x);
    }
    y
}

/// Accumulates `dW += dy x^T`, `db += dy` and returns `dx = W^T dy`.
pub fn linear_backward(
    w: &Tensor,
    x: &[f64],
    dy: &[f64],
    gw: &mut Tensor,
    gb: Option<&mut Tensor>,
) -> Vec<f64> {
    let cols = w.cols();
    let wd = w.data();
    let gwd = gw.data_mut();
    let mut dx = vec![0.0; cols];
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let wrow = &wd[r * cols..(r + 1) * cols];
        let grow = &mut gwd[r * cols..(r + 1) * cols];
        for c in 0..cols {
            grow[c] += g * x[c];
            dx[c] += g * wrow[c];
        }
    }
    if let Some(gb) = gb {
        for (a, b) in gb.data_mut().iter_mut().zip(dy) {
            *a += b;
        }
    }
    dx
}

/// Like [`linear_backward`] but skips the input gradient.
pub fn linear_backward_params(
    x: &[f64],
    dy: &[f64],
    gw: &mut Tensor,
    gb: Option<&mut Tensor>,
) {
    let cols = gw.cols();
    let gwd = gw.data_mut();
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (a, xc) in gwd[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *a += g * xc;
        }
    }
    if let Some(gb) = gb {
        for (a, b) in gb.data_mut().iter_mut().zip(dy) {
            *a += b;
        }
    }
}

pub fn relu(x: &mut [f64]) {
    x.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_closed_forms() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant() {
        let z = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 1000.0).collect();
        let a = softmax(&z).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let w = Tensor::from_vec(&[2, 3], vec![0.2, -0.5, 1.1, 0.7, 0.3, -0.9]).unwrap();
        let b = Tensor::vector(vec![0.1, -0.2]);
        let x = [0.5, -1.5, 2.0];
        let upstream = [1.3, -0.4];
        let loss = |w: &Tensor, x: &[f64]| dot(&linear_forward(w, Some(&b), x), &upstream);

        let mut gw = Tensor::zeros(&[2, 3]);
        let mut gb = Tensor::zeros(&[2]);
        let dx = linear_backward(&w, &x, &upstream, &mut gw, Some(&mut gb));

        let eps = 1e-6;
        for i in 0..3 {
            let (mut xp, mut xm) = (x, x);
            xp[i] += eps;
            xm[i] -= eps;
            let fd = (loss(&w, &xp) - loss(&w, &xm)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() / fd.abs().max(1e-8) < 1e-4);
        }
        for i in 0..6 {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.data_mut()[i] += eps;
            wm.data_mut()[i] -= eps;
            let fd = (loss(&wp, &x) - loss(&wm, &x)) / (2.0 * eps);
            assert!((fd - gw.data()[i]).abs() / fd.abs().max(1e-8) < 1e-4);
        }
        assert_eq!(gb.data(), &upstream);
    }
}
