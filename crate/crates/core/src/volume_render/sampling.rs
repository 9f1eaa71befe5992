use rand::Rng;

use crate::error::{config, invalid, Result};

/// One uniform draw inside each of `n` equal-width bins of `[near, far]`.
pub fn stratified_samples<R: Rng + ?Sized>(near: f64, far: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(near > 0.0 && near < far && far.is_finite()) {
        return Err(config(format!("ray bounds need 0 < near < far, got [{near}, {far}]")));
    }
    if n == 0 {
        return Err(config("at least one coarse sample per ray is required"));
    }
    let width = (far - near) / n as f64;
    Ok((0..n)
        .map(|i| near + (i as f64 + rng.random::<f64>()) * width)
        .collect())
}

/// Draws `n_fine` depths from the piecewise-constant density whose bins are
/// `[t_i, t_{i+1}]` with mass `w_i`. The last coarse weight has no bin and is
/// ignored. All-zero weights fall back to equal mass per bin. The returned
/// depths are sorted.
pub fn importance_samples<R: Rng + ?Sized>(
    coarse_depths: &[f64],
    coarse_weights: &[f64],
    n_fine: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = coarse_depths.len();
    if n < 2 {
        return Err(invalid(format!("importance sampling needs at least 2 coarse depths, got {n}")));
    }
    if coarse_weights.len() != n {
        return Err(invalid(format!(
            "{} coarse weights for {n} depths",
            coarse_weights.len()
        )));
    }
    if let Some(w) = coarse_weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(invalid(format!("coarse weights must be finite and non-negative, found {w}")));
    }
    if coarse_depths.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(invalid("coarse depths must be strictly increasing"));
    }
    let bins = &coarse_weights[..n - 1];
    let mut cdf = Vec::with_capacity(n);
    cdf.push(0.0);
    let mut acc = 0.0;
    let uniform = bins.iter().sum::<f64>() <= 0.0;
    for &w in bins {
        acc += if uniform { 1.0 } else { w };
        cdf.push(acc);
    }
    let total = acc;
    let mut out: Vec<f64> = (0..n_fine)
        .map(|_| {
            let x = rng.random::<f64>() * total;
            let mut k = cdf.partition_point(|c| *c <= x).saturating_sub(1).min(n - 2);
            while cdf[k + 1] <= cdf[k] && k > 0 {
                k -= 1;
            }
            let mass = cdf[k + 1] - cdf[k];
            let frac = if mass > 0.0 { ((x - cdf[k]) / mass).clamp(0.0, 1.0) } else { 0.5 };
            coarse_depths[k] + frac * (coarse_depths[k + 1] - coarse_depths[k])
        })
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Sorted union of two sorted depth lists.
pub fn merge_sorted(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}
