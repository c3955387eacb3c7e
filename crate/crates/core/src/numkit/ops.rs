use crate::error::{Error, Result};

/// Softmax with max-subtraction so logits up to &plusmn;1e4 cannot overflow.
pub fn stable_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Numeric("softmax of empty vector".into()));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("softmax input contains non-finite entry".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// `ln(sum_j exp(z_j))`, max-subtracted.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Central-difference gradient oracle: `(f(p + h e_k) - f(p - h e_k)) / 2h`
/// per coordinate. Every gradient in this crate is checked against it.
pub fn finite_difference_grad<F>(mut f: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 {
        return Err(Error::Numeric("finite-difference step must be positive".into()));
    }
    let mut p = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for k in 0..point.len() {
        let orig = p[k];
        p[k] = orig + h;
        let fp = f(&p);
        p[k] = orig - h;
        let fm = f(&p);
        p[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "objective non-finite while probing coordinate {k}"
            )));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error used by all gradient checks: `|a - b| / max(|a|, |b|, floor)`.
/// The floor makes the comparison absolute below 1e-4, where central
/// differences on an O(1) objective run out of accurate digits.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}
