//! Small dense-vector kernels. Storage is f32, accumulation is f64.

use crate::error::{Error, Result};

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[inline]
pub fn norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

/// `acc += scale * v`
#[inline]
pub fn accumulate(acc: &mut [f64], v: &[f32], scale: f64) {
    debug_assert_eq!(acc.len(), v.len());
    for (a, &x) in acc.iter_mut().zip(v) {
        *a += scale * x as f64;
    }
}

pub fn scaled_to_f32(v: &[f64], scale: f64) -> Vec<f32> {
    v.iter().map(|&x| (x * scale) as f32).collect()
}

/// Divides by the L2 norm, in f64, and rounds to f32.
pub fn normalize_f64(v: &[f64]) -> Result<Vec<f32>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !n.is_finite() || n <= 0.0 {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector with norm {n}"
        )));
    }
    Ok(scaled_to_f32(v, 1.0 / n))
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Cosine similarity; zero when either side has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let d = norm(a) * norm(b);
    if d > 0.0 {
        dot(a, b) / d
    } else {
        0.0
    }
}

/// Max-subtracted softmax over `logits`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    for x in &mut w {
        *x /= z;
    }
    w
}
