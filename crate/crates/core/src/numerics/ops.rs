use crate::error::{Error, Result};

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Domain(format!("{what} of an empty vector")));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("{what} of non-finite input {x}")));
    }
    Ok(())
}

/// `log Σ exp(vᵢ)` with max subtraction.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    check_finite(v, "log-sum-exp")?;
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Numerically stable softmax. Entries are strictly positive unless the
/// input spread exceeds the f64 exponent range.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    check_finite(v, "softmax")?;
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(v)?;
    Ok(v.iter().map(|x| x - lse).collect())
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy_from_logits(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Domain(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    let lse = log_sum_exp(logits)?;
    // lse >= max >= logits[label]; clamp rounding so the loss is never negative
    Ok((lse - logits[label]).max(0.0))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}
