//! Emission–absorption compositing of one ray.

use crate::error::{invalid, Result};

/// Guard on the weight sum when normalising the expected depth.
pub const DEPTH_EPS: f64 = 1e-10;

/// Depths, spacings and radiance of the samples along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySampleSet {
    depths: Vec<f64>,
    deltas: Vec<f64>,
    sigmas: Vec<f64>,
    /// `depths.len() × channels`, sample-major.
    colors: Vec<f64>,
    channels: usize,
}

impl RaySampleSet {
    pub fn new(depths: Vec<f64>, deltas: Vec<f64>, sigmas: Vec<f64>, colors: Vec<f64>, channels: usize) -> Result<Self> {
        let n = depths.len();
        if n == 0 {
            return Err(invalid("a ray needs at least one sample"));
        }
        if deltas.len() != n || sigmas.len() != n || colors.len() != n * channels {
            return Err(invalid("one radiance and one spacing per depth required"));
        }
        if depths.iter().any(|t| !(*t > 0.0)) || depths.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid("depths must be positive and strictly increasing"));
        }
        if deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(invalid("sample spacings must be positive"));
        }
        if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) || colors.iter().any(|c| !c.is_finite()) {
            return Err(invalid("densities must be finite and nonnegative, colors finite"));
        }
        Ok(Self {
            depths,
            deltas,
            sigmas,
            colors,
            channels,
        })
    }

    /// Spacings derived as `t[i+1] − t[i]`, with the last sample extending to
    /// `far`.
    pub fn with_far_plane(depths: Vec<f64>, far: f64, sigmas: Vec<f64>, colors: Vec<f64>, channels: usize) -> Result<Self> {
        let deltas = deltas_to_far(&depths, far);
        Self::new(depths, deltas, sigmas, colors, channels)
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn colors(&self) -> &[f64] {
        &self.colors
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

pub(crate) fn deltas_to_far(depths: &[f64], far: f64) -> Vec<f64> {
    let n = depths.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let next = if i + 1 < n { depths[i + 1] } else { far };
        out.push(next - depths[i]);
    }
    out
}

/// Accumulated quantities of one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct Composited {
    pub feature: Vec<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub weights: Vec<f64>,
}

/// `α_i = 1 − exp(−σ_i Δ_i)`, `T_i = Π_{j<i} (1 − α_j)`, `w_i = T_i α_i`.
pub fn composite(samples: &RaySampleSet) -> Composited {
    let n = samples.len();
    let mut feature = vec![0.0; samples.channels];
    let mut weights = vec![0.0; n];
    let (depth, opacity) = composite_kernel(
        &samples.sigmas,
        &samples.colors,
        &samples.depths,
        &samples.deltas,
        samples.channels,
        &mut feature,
        &mut weights,
    );
    Composited {
        feature,
        depth,
        opacity,
        weights,
    }
}

/// Front-to-back compositing shared by the renderer and the tape.
/// Returns `(depth, opacity)`; `feature` is overwritten.
#[inline]
pub(crate) fn composite_kernel(
    sigmas: &[f64],
    colors: &[f64],
    depths: &[f64],
    deltas: &[f64],
    ch: usize,
    feature: &mut [f64],
    weights: &mut [f64],
) -> (f64, f64) {
    feature.fill(0.0);
    let mut transmittance = 1.0;
    let mut wsum = 0.0;
    let mut wdepth = 0.0;
    for i in 0..sigmas.len() {
        let alpha = 1.0 - (-sigmas[i] * deltas[i]).exp();
        let w = transmittance * alpha;
        weights[i] = w;
        let c = &colors[i * ch..(i + 1) * ch];
        for (f, cv) in feature.iter_mut().zip(c) {
            *f += w * cv;
        }
        wsum += w;
        wdepth += w * depths[i];
        transmittance *= 1.0 - alpha;
    }
    // Σ w = 1 − T_final; the product form stays inside [0, 1] under rounding
    (wdepth / wsum.max(DEPTH_EPS), 1.0 - transmittance)
}

/// Reverse pass of [`composite_kernel`] for one ray given output adjoints.
/// Adds into `g_sigma` (per sample) and `g_color` (per sample × channel).
#[allow(clippy::too_many_arguments)]
pub(crate) fn composite_backward(
    sigmas: &[f64],
    colors: &[f64],
    depths: &[f64],
    deltas: &[f64],
    ch: usize,
    g_feature: &[f64],
    g_depth: f64,
    g_opacity: f64,
    g_sigma: Option<&mut [f64]>,
    g_color: Option<&mut [f64]>,
    scratch: &mut Vec<f64>,
) {
    let n = sigmas.len();
    // scratch layout: [w (n) | T_{i+1} (n) | g_w (n)]
    scratch.clear();
    scratch.resize(3 * n, 0.0);
    let (w, rest) = scratch.split_at_mut(n);
    let (t_next, g_w) = rest.split_at_mut(n);
    let mut transmittance = 1.0;
    let mut wsum = 0.0;
    let mut wdepth = 0.0;
    for i in 0..n {
        let alpha = 1.0 - (-sigmas[i] * deltas[i]).exp();
        w[i] = transmittance * alpha;
        wsum += w[i];
        wdepth += w[i] * depths[i];
        transmittance *= 1.0 - alpha;
        t_next[i] = transmittance;
    }
    let denom = wsum.max(DEPTH_EPS);
    let depth = wdepth / denom;
    for i in 0..n {
        let c = &colors[i * ch..(i + 1) * ch];
        let mut g = g_opacity;
        for (gf, cv) in g_feature.iter().zip(c) {
            g += gf * cv;
        }
        let dd = if wsum > DEPTH_EPS {
            (depths[i] - depth) / wsum
        } else {
            depths[i] / DEPTH_EPS
        };
        g_w[i] = g + g_depth * dd;
    }
    if let Some(gc) = g_color {
        for i in 0..n {
            for k in 0..ch {
                gc[i * ch + k] += g_feature[k] * w[i];
            }
        }
    }
    if let Some(gs) = g_sigma {
        let mut suffix = 0.0;
        for i in (0..n).rev() {
            let g_s = g_w[i] * t_next[i] - suffix;
            gs[i] += g_s * deltas[i];
            suffix += g_w[i] * w[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(depths: &[f64], far: f64, sigmas: &[f64], colors: &[f64], ch: usize) -> RaySampleSet {
        RaySampleSet::with_far_plane(depths.to_vec(), far, sigmas.to_vec(), colors.to_vec(), ch).unwrap()
    }

    #[test]
    fn empty_density_is_transparent() {
        let s = set(&[1.0, 2.0, 3.0], 4.0, &[0.0; 3], &[0.3, 0.6, 0.9], 1);
        let c = composite(&s);
        assert_eq!(c.feature, vec![0.0]);
        assert_eq!(c.opacity, 0.0);
        assert_eq!(c.depth, 0.0);
    }

    #[test]
    fn single_sample() {
        let (sigma, delta) = (0.7f64, 0.4f64);
        let a = 1.0 - (-sigma * delta).exp();
        let s = RaySampleSet::new(vec![2.5], vec![delta], vec![sigma], vec![0.2, 0.8], 2).unwrap();
        let c = composite(&s);
        assert!((c.opacity - a).abs() < 1e-15);
        assert!((c.feature[0] - a * 0.2).abs() < 1e-15);
        assert!((c.feature[1] - a * 0.8).abs() < 1e-15);
        assert!((c.depth - 2.5).abs() < 1e-12);
    }

    #[test]
    fn constant_density_telescopes() {
        let s = 1.3;
        let (near, far) = (2.0, 4.5);
        for n in [1usize, 2, 7, 48, 96] {
            // irregular partition
            let mut depths: Vec<f64> = (0..n)
                .map(|i| near + (far - near) * ((i as f64 + 0.3 * ((i * 7 % 5) as f64) / 5.0) / n as f64))
                .collect();
            depths[0] = near;
            let c = composite(&set(&depths, far, &vec![s; n], &vec![0.0; n], 1));
            let want = 1.0 - (-s * (far - near)).exp();
            assert!((c.opacity - want).abs() < 1e-9, "n={n}");
        }
    }

    #[test]
    fn rejects_unsorted_depths() {
        assert!(RaySampleSet::new(vec![2.0, 1.0], vec![1.0, 1.0], vec![0.0; 2], vec![0.0; 2], 1).is_err());
    }
}
