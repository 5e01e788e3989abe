//! Converts five level-token logits (bad, poor, fair, good, excellent) into a
//! score in [1, 5]: the softmax-weighted mean of the level values.

use crate::error::{arg_err, Result};

pub const LEVELS: [&str; 5] = ["bad", "poor", "fair", "good", "excellent"];

fn check_finite(v: &[f64; 5]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(arg_err!("level values must be finite: {v:?}"));
    }
    Ok(())
}

/// `sum_i i * softmax(x)_i`, stabilized by subtracting the maximum logit.
/// The result lies strictly inside (1, 5) whenever the logit spread is small
/// enough for every probability to register in double precision (about 36);
/// beyond that it rounds onto the nearest endpoint.
pub fn softmax_score(logits: &[f64; 5]) -> Result<f64> {
    check_finite(logits)?;
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|x| (x - m).exp());
    let z: f64 = e.iter().sum();
    Ok(weighted(&e) / z)
}

/// Score for an already-normalized distribution over the five levels.
pub fn probability_score(probs: &[f64; 5]) -> Result<f64> {
    check_finite(probs)?;
    if probs.iter().any(|p| *p < 0.0) {
        return Err(arg_err!("probabilities must be nonnegative: {probs:?}"));
    }
    let z: f64 = probs.iter().sum();
    if (z - 1.0).abs() > 1e-9 {
        return Err(arg_err!("probabilities sum to {z}, not 1"));
    }
    Ok(weighted(probs))
}

fn weighted(w: &[f64; 5]) -> f64 {
    w.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum()
}

/// Parses `a,b,c,d,e`.
pub fn parse_logits(s: &str) -> Result<[f64; 5]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        return Err(arg_err!("expected 5 comma-separated values, got {}", parts.len()));
    }
    let mut out = [0.0; 5];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .parse()
            .map_err(|_| arg_err!("not a number: {p:?}"))?;
    }
    Ok(out)
}
