//! Normalized per-layer importance weights.

use crate::error::{Error, Result};

/// Softmax of layer logits: nonnegative weights that sum to one. Invariant to
/// adding a constant to every logit.
pub fn layer_weights(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("no layer logits"));
    }
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite layer logit {v}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / total).collect())
}

/// Index of the largest weight; the first one wins ties.
pub fn argmax(weights: &[f64]) -> Option<usize> {
    weights
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &w)| match best {
            Some((_, bw)) if bw >= w => best,
            _ => Some((i, w)),
        })
        .map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits_are_uniform() {
        let w = layer_weights(&[0.0; 13]).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0 / 13.0).abs() < 1e-15));
    }

    #[test]
    fn shift_invariant_and_normalized() {
        let a = layer_weights(&[0.3, -1.2, 2.5, 0.0]).unwrap();
        let b = layer_weights(&[100.3, 98.8, 102.5, 100.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&a), Some(2));
    }

    #[test]
    fn rejects_bad_logits() {
        assert!(layer_weights(&[]).is_err());
        assert!(layer_weights(&[f64::NAN]).is_err());
        assert_eq!(argmax(&[]), None);
        assert_eq!(argmax(&[0.5, 0.5]), Some(0));
    }
}
