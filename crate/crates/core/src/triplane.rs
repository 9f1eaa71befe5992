//! Triplane storage, clamped bilinear plane sampling and radiance decoding.
//!
//! A point `x = (x, y, z)` is projected onto the three axis-aligned planes
//! `XY -> (x, y)`, `YZ -> (y, z)` and `ZX -> (z, x)`. Each projection is
//! looked up with clamp-to-edge bilinear filtering, the three feature vectors
//! are summed and a small MLP turns the sum into `(c, σ)`.
//!
//! Texel `i` of a plane with `res` texels per side has its center at
//! `u = -1 + (2i + 1) / res` (the half-texel convention), so `[-1, 1]` spans
//! the plane edge to edge.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config, invalid, Result};
use crate::io::{expect_magic, format_err, read_f32_vec, read_u32, write_f32_slice, write_u32};
use crate::math::{sigmoid, softplus, Vec3};

const TRIPLANE_MAGIC: &[u8; 4] = b"TPL1";
const DECODER_MAGIC: &[u8; 4] = b"DEC1";

/// The three planes, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneAxis {
    Xy = 0,
    Yz = 1,
    Zx = 2,
}

impl PlaneAxis {
    pub const ALL: [PlaneAxis; 3] = [PlaneAxis::Xy, PlaneAxis::Yz, PlaneAxis::Zx];

    /// Projects a point onto this plane's `(u, v)` coordinates.
    #[inline]
    pub fn project(self, x: Vec3) -> [f64; 2] {
        match self {
            PlaneAxis::Xy => [x[0], x[1]],
            PlaneAxis::Yz => [x[1], x[2]],
            PlaneAxis::Zx => [x[2], x[0]],
        }
    }
}

/// Three `resolution × resolution × channels` feature planes.
#[derive(Debug, Clone, PartialEq)]
pub struct TriPlane {
    resolution: usize,
    channels: usize,
    /// Plane-major, row-major, channel-last.
    data: Vec<f64>,
}

impl TriPlane {
    pub fn new(resolution: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if resolution == 0 || channels == 0 {
            return Err(config("triplane resolution and channels must be positive"));
        }
        let expected = 3 * resolution * resolution * channels;
        if data.len() != expected {
            return Err(config(format!(
                "triplane data has {} values, expected {expected}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("triplane features must be finite"));
        }
        Ok(Self {
            resolution,
            channels,
            data,
        })
    }

    pub fn zeros(resolution: usize, channels: usize) -> Self {
        Self::new(
            resolution,
            channels,
            vec![0.0; 3 * resolution * resolution * channels],
        )
        .expect("positive shape")
    }

    pub fn random<R: Rng + ?Sized>(resolution: usize, channels: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..3 * resolution * resolution * channels)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new(resolution, channels, data).expect("finite random features")
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane_len(&self) -> usize {
        self.resolution * self.resolution * self.channels
    }

    pub fn plane(&self, axis: PlaneAxis) -> PlaneView<'_> {
        let n = self.plane_len();
        let start = axis as usize * n;
        PlaneView {
            resolution: self.resolution,
            channels: self.channels,
            data: &self.data[start..start + n],
        }
    }

    pub fn texel(&self, axis: PlaneAxis, row: usize, col: usize) -> &[f64] {
        let c = self.channels;
        let off = ((axis as usize * self.resolution + row) * self.resolution + col) * c;
        &self.data[off..off + c]
    }

    pub fn texel_mut(&mut self, axis: PlaneAxis, row: usize, col: usize) -> &mut [f64] {
        let c = self.channels;
        let off = ((axis as usize * self.resolution + row) * self.resolution + col) * c;
        &mut self.data[off..off + c]
    }

    /// Element-wise sum; shapes must match.
    pub fn try_add(&self, other: &TriPlane) -> Result<TriPlane> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        TriPlane::new(self.resolution, self.channels, data)
    }

    pub fn check_same_shape(&self, other: &TriPlane) -> Result<()> {
        if self.resolution != other.resolution || self.channels != other.channels {
            return Err(config(format!(
                "triplane shapes differ: {}x{} vs {}x{}",
                self.resolution, self.channels, other.resolution, other.channels
            )));
        }
        Ok(())
    }

    /// Sum of the three projected plane features at `x`, after clamping `x`
    /// to `[-1, 1]³`.
    pub fn features_at(&self, x: Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.accumulate_features(x, &mut out);
        out
    }

    pub(crate) fn accumulate_features(&self, x: Vec3, out: &mut [f64]) {
        let taps = point_taps(self.resolution, self.channels, clamp_point(x));
        gather_taps(&self.data, &taps, self.channels, out);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4);
        out.extend_from_slice(TRIPLANE_MAGIC);
        write_u32(&mut out, self.resolution as u32).expect("vec write");
        write_u32(&mut out, self.channels as u32).expect("vec write");
        write_f32_slice(&mut out, &self.data).expect("vec write");
        out
    }

    pub fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        expect_magic(r, TRIPLANE_MAGIC, path)?;
        let res = read_u32(r).map_err(|_| format_err(path, "truncated header"))? as usize;
        let ch = read_u32(r).map_err(|_| format_err(path, "truncated header"))? as usize;
        if res == 0 || ch == 0 || res > 1 << 14 || ch > 1 << 12 {
            return Err(format_err(path, format!("implausible shape {res}x{ch}")));
        }
        let data = read_f32_vec(r, 3 * res * res * ch)
            .map_err(|_| format_err(path, "truncated feature data"))?;
        TriPlane::new(res, ch, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f, path)
    }
}

/// Borrowed view of one plane.
#[derive(Debug, Clone, Copy)]
pub struct PlaneView<'a> {
    pub resolution: usize,
    pub channels: usize,
    pub data: &'a [f64],
}

/// The uv coordinate of texel `i`'s center.
pub fn texel_center(i: usize, resolution: usize) -> f64 {
    (2 * i + 1) as f64 / resolution as f64 - 1.0
}

/// Four-texel bilinear footprint of one lookup.
///
/// `offsets` index the start of each texel's channel run relative to the
/// owning buffer; `du`/`dv` carry the derivative of each weight with respect
/// to the continuous `u`/`v` coordinates (zero where clamping is active).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub offsets: [usize; 4],
    pub weights: [f64; 4],
    pub du: [f64; 4],
    pub dv: [f64; 4],
}

#[inline]
fn axis_coord(u: f64, res: usize) -> (usize, usize, f64, f64) {
    let pix = ((u + 1.0) * res as f64 - 1.0) * 0.5;
    let max = (res - 1) as f64;
    let (p, slope) = if pix <= 0.0 {
        (0.0, 0.0)
    } else if pix >= max {
        (max, 0.0)
    } else {
        (pix, 0.5 * res as f64)
    };
    if res == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let i0 = (p.floor() as usize).min(res - 2);
    let f = p - i0 as f64;
    (i0, i0 + 1, f, slope)
}

#[inline]
pub(crate) fn plane_tap(res: usize, ch: usize, base: usize, uv: [f64; 2]) -> Tap {
    let (c0, c1, fu, su) = axis_coord(uv[0], res);
    let (r0, r1, fv, sv) = axis_coord(uv[1], res);
    let at = |r: usize, c: usize| base + (r * res + c) * ch;
    Tap {
        offsets: [at(r0, c0), at(r0, c1), at(r1, c0), at(r1, c1)],
        weights: [
            (1.0 - fu) * (1.0 - fv),
            fu * (1.0 - fv),
            (1.0 - fu) * fv,
            fu * fv,
        ],
        du: [-(1.0 - fv) * su, (1.0 - fv) * su, -fv * su, fv * su],
        dv: [-(1.0 - fu) * sv, -fu * sv, (1.0 - fu) * sv, fu * sv],
    }
}

#[inline]
pub(crate) fn clamp_point(x: Vec3) -> Vec3 {
    [
        x[0].clamp(-1.0, 1.0),
        x[1].clamp(-1.0, 1.0),
        x[2].clamp(-1.0, 1.0),
    ]
}

/// Taps for the three planes of an (already clamped) point.
#[inline]
pub(crate) fn point_taps(res: usize, ch: usize, x: Vec3) -> [Tap; 3] {
    let n = res * res * ch;
    [
        plane_tap(res, ch, 0, PlaneAxis::Xy.project(x)),
        plane_tap(res, ch, n, PlaneAxis::Yz.project(x)),
        plane_tap(res, ch, 2 * n, PlaneAxis::Zx.project(x)),
    ]
}

/// `out += Σ_planes Σ_corners w · texel`, planes in storage order.
#[inline]
pub(crate) fn gather_taps(data: &[f64], taps: &[Tap], ch: usize, out: &mut [f64]) {
    for tap in taps {
        let t0 = &data[tap.offsets[0]..tap.offsets[0] + ch];
        let t1 = &data[tap.offsets[1]..tap.offsets[1] + ch];
        let t2 = &data[tap.offsets[2]..tap.offsets[2] + ch];
        let t3 = &data[tap.offsets[3]..tap.offsets[3] + ch];
        let w = tap.weights;
        for c in 0..ch {
            out[c] += w[0] * t0[c] + w[1] * t1[c] + w[2] * t2[c] + w[3] * t3[c];
        }
    }
}

/// Bilinear lookup of one plane at `uv` with clamp-to-edge addressing.
pub fn sample_plane(plane: PlaneView<'_>, uv: [f64; 2]) -> Result<Vec<f64>> {
    if !uv[0].is_finite() || !uv[1].is_finite() {
        return Err(invalid(format!("non-finite plane coordinate {uv:?}")));
    }
    let tap = plane_tap(plane.resolution, plane.channels, 0, uv);
    let mut out = vec![0.0; plane.channels];
    gather_taps(plane.data, &[tap], plane.channels, &mut out);
    Ok(out)
}

/// uv sample locations for each of the three planes.
pub type PlaneSamples = [Vec<[f64; 2]>; 3];

/// Draws `n` uniform uv locations per plane.
pub fn random_plane_samples<R: Rng + ?Sized>(n: usize, rng: &mut R) -> PlaneSamples {
    let mut draw = || {
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect::<Vec<_>>()
    };
    [draw(), draw(), draw()]
}

/// Mean absolute difference of sampled features over every point, plane and
/// channel.
/// The two triplanes may differ in resolution.
pub fn triplane_l1(a: &TriPlane, b: &TriPlane, samples: &PlaneSamples) -> Result<f64> {
    if a.channels() != b.channels() {
        return Err(config(format!(
            "triplanes carry {} and {} channels",
            a.channels(),
            b.channels()
        )));
    }
    let count: usize = samples.iter().map(Vec::len).sum();
    if count == 0 {
        return Err(config("triplane_l1 needs at least one sample point"));
    }
    let mut total = 0.0;
    for (axis, uvs) in PlaneAxis::ALL.iter().zip(samples) {
        for &uv in uvs {
            let fa = sample_plane(a.plane(*axis), uv)?;
            let fb = sample_plane(b.plane(*axis), uv)?;
            total += fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).sum::<f64>();
        }
    }
    Ok(total / (count * a.channels()) as f64)
}

/// Nonlinearity between hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Softplus,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Softplus => softplus(x),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Linear),
            1 => Some(Activation::Softplus),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Output mapping for the feature/color channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorActivation {
    Identity,
    Sigmoid,
}

impl ColorActivation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ColorActivation::Identity => x,
            ColorActivation::Sigmoid => sigmoid(x),
        }
    }

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ColorActivation::Identity),
            1 => Some(ColorActivation::Sigmoid),
            _ => None,
        }
    }
}

/// Fully connected layer, `y = x W + b` with `W` stored `inputs × outputs`
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    /// Writes `x W + b` into `out`. The dot product accumulates in input
    /// order before the bias is added; the tape's matmul follows the same
    /// order so both paths agree bit for bit.
    #[inline]
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (k, &xk) in x.iter().enumerate() {
            let row = &self.weight[k * self.outputs..(k + 1) * self.outputs];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xk * w;
            }
        }
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
    }
}

/// `(c, σ)` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Radiance {
    pub color: Vec<f64>,
    pub sigma: f64,
}

/// MLP from summed triplane features to `d_c` feature channels plus a raw
/// density that is passed through softplus.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceDecoder {
    layers: Vec<DenseLayer>,
    hidden_activation: Activation,
    color_activation: ColorActivation,
}

impl RadianceDecoder {
    pub fn new(
        layers: Vec<DenseLayer>,
        hidden_activation: Activation,
        color_activation: ColorActivation,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(config("decoder needs at least one layer"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(config(format!("decoder layer {k} has a zero width")));
            }
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(config(format!("decoder layer {k} has inconsistent storage")));
            }
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(invalid(format!("decoder layer {k} holds non-finite values")));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(config(format!(
                    "decoder layers do not chain: {} outputs feed {} inputs",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        if layers.last().unwrap().outputs < 2 {
            return Err(config("decoder output must hold at least one feature and a density"));
        }
        Ok(Self {
            layers,
            hidden_activation,
            color_activation,
        })
    }

    /// Randomly initialised decoder with the given widths
    /// (`[channels, hidden.., d_c + 1]`).
    pub fn random<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(config("decoder widths need an input and an output"));
        }
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer::random(w[0], w[1], rng))
            .collect();
        Self::new(layers, Activation::Softplus, ColorActivation::Sigmoid)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn color_activation(&self) -> ColorActivation {
        self.color_activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    /// Number of feature channels `d_c` (the raw output minus the density).
    pub fn feature_dim(&self) -> usize {
        self.layers.last().unwrap().outputs - 1
    }

    /// `DEC1`, layer count, activation codes, then per layer its widths,
    /// weights and biases as little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DECODER_MAGIC);
        for v in [self.layers.len() as u32, self.hidden_activation.code(), self.color_activation.code()] {
            write_u32(&mut out, v).expect("vec write");
        }
        for l in &self.layers {
            write_u32(&mut out, l.inputs as u32).expect("vec write");
            write_u32(&mut out, l.outputs as u32).expect("vec write");
            write_f32_slice(&mut out, &l.weight).expect("vec write");
            write_f32_slice(&mut out, &l.bias).expect("vec write");
        }
        out
    }

    pub fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        expect_magic(r, DECODER_MAGIC, path)?;
        let mut header = || read_u32(r).map_err(|_| format_err(path, "truncated header"));
        let (n, hidden, color) = (header()? as usize, header()?, header()?);
        if n == 0 || n > 64 {
            return Err(format_err(path, format!("implausible layer count {n}")));
        }
        let hidden = Activation::from_code(hidden).ok_or_else(|| format_err(path, format!("unknown activation {hidden}")))?;
        let color = ColorActivation::from_code(color).ok_or_else(|| format_err(path, format!("unknown color activation {color}")))?;
        let mut layers = Vec::with_capacity(n);
        for k in 0..n {
            let bad = |_| format_err(path, format!("truncated layer {k}"));
            let inputs = read_u32(r).map_err(bad)? as usize;
            let outputs = read_u32(r).map_err(bad)? as usize;
            if inputs > 1 << 16 || outputs > 1 << 16 {
                return Err(format_err(path, format!("implausible layer {k} shape {inputs}x{outputs}")));
            }
            let weight = read_f32_vec(r, inputs * outputs).map_err(bad)?;
            let bias = read_f32_vec(r, outputs).map_err(bad)?;
            layers.push(DenseLayer { inputs, outputs, weight, bias });
        }
        RadianceDecoder::new(layers, hidden, color)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f, path)
    }

    pub fn max_width(&self) -> usize {
        self.layers.iter().map(|l| l.outputs.max(l.inputs)).max().unwrap()
    }

    pub fn check_triplane(&self, tp: &TriPlane) -> Result<()> {
        if tp.channels() != self.input_dim() {
            return Err(config(format!(
                "decoder expects {} input channels, triplane has {}",
                self.input_dim(),
                tp.channels()
            )));
        }
        Ok(())
    }

    /// Runs the MLP on `features`, returning the raw final-layer output.
    pub fn raw_output(&self, features: &[f64]) -> Vec<f64> {
        let mut scratch = DecodeScratch::new(self);
        self.raw_into(features, &mut scratch).to_vec()
    }

    fn raw_into<'s>(&self, features: &[f64], s: &'s mut DecodeScratch) -> &'s [f64] {
        let DecodeScratch { a, b } = s;
        a[..features.len()].copy_from_slice(features);
        let mut width = features.len();
        let mut cur: &mut Vec<f64> = a;
        let mut next: &mut Vec<f64> = b;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            layer.forward_into(&cur[..width], &mut next[..layer.outputs]);
            if k != last {
                for v in &mut next[..layer.outputs] {
                    *v = self.hidden_activation.apply(*v);
                }
            }
            width = layer.outputs;
            std::mem::swap(&mut cur, &mut next);
        }
        let out: &'s Vec<f64> = cur;
        &out[..width]
    }

    /// Decodes summed features into `color` (length `d_c`) and returns σ.
    pub(crate) fn decode_features_into(
        &self,
        features: &[f64],
        scratch: &mut DecodeScratch,
        color: &mut [f64],
    ) -> f64 {
        let ca = self.color_activation;
        let raw = self.raw_into(features, scratch);
        let dc = raw.len() - 1;
        for (c, r) in color.iter_mut().zip(&raw[..dc]) {
            *c = ca.apply(*r);
        }
        softplus(raw[dc])
    }
}

/// Reusable buffers for per-point decoding.
pub(crate) struct DecodeScratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl DecodeScratch {
    pub(crate) fn new(dec: &RadianceDecoder) -> Self {
        let w = dec.max_width();
        Self {
            a: vec![0.0; w],
            b: vec![0.0; w],
        }
    }
}

/// `(c, σ) = MLP(T_xy(x) + T_yz(x) + T_zx(x))`, with `x` clamped per axis to
/// `[-1, 1]`.
pub fn decode_radiance(tp: &TriPlane, dec: &RadianceDecoder, x: Vec3) -> Result<Radiance> {
    dec.check_triplane(tp)?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(invalid(format!("non-finite point {x:?}")));
    }
    let feats = tp.features_at(x);
    let mut scratch = DecodeScratch::new(dec);
    let mut color = vec![0.0; dec.feature_dim()];
    let sigma = dec.decode_features_into(&feats, &mut scratch, &mut color);
    Ok(Radiance { color, sigma })
}
