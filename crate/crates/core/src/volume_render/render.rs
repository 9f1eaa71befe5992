use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{upsample_forward, CompositeLayout, Tape, Var};
use crate::camera::{generate_rays, CameraPose};
use crate::deform::RotationField;
use crate::error::{config, Result};
use crate::io::FloatMap;
use crate::math::{self, Vec3};
use crate::triplane::{DecodeScratch, RadianceDecoder, TriPlane};

use super::composite::{composite_kernel, deltas_to_far};
use super::sampling::{importance_samples, merge_sorted, stratified_samples};

/// Anything that maps a canonical-space point to `(σ, color)`.
pub trait RadianceField: Sync {
    type Scratch: Send;

    fn channels(&self) -> usize;

    fn scratch(&self) -> Self::Scratch;

    /// Writes the color into `color` and returns σ.
    fn eval(&self, x: Vec3, scratch: &mut Self::Scratch, color: &mut [f64]) -> f64;
}

/// A triplane decoded by a radiance MLP.
#[derive(Debug, Clone, Copy)]
pub struct TriplaneField<'a> {
    pub triplane: &'a TriPlane,
    pub decoder: &'a RadianceDecoder,
}

impl<'a> TriplaneField<'a> {
    pub fn new(triplane: &'a TriPlane, decoder: &'a RadianceDecoder) -> Result<Self> {
        decoder.check_triplane(triplane)?;
        Ok(Self { triplane, decoder })
    }
}

pub struct TriplaneScratch {
    features: Vec<f64>,
    decode: DecodeScratch,
}

impl RadianceField for TriplaneField<'_> {
    type Scratch = TriplaneScratch;

    fn channels(&self) -> usize {
        self.decoder.feature_dim()
    }

    fn scratch(&self) -> TriplaneScratch {
        TriplaneScratch {
            features: vec![0.0; self.triplane.channels()],
            decode: DecodeScratch::new(self.decoder),
        }
    }

    fn eval(&self, x: Vec3, s: &mut TriplaneScratch, color: &mut [f64]) -> f64 {
        s.features.fill(0.0);
        self.triplane.accumulate_features(x, &mut s.features);
        self.decoder.decode_features_into(&s.features, &mut s.decode, color)
    }
}

/// Replaces the density of `base` wherever `density` returns a value.
pub struct DensityOverride<F, D> {
    pub base: F,
    pub density: D,
}

impl<F, D> RadianceField for DensityOverride<F, D>
where
    F: RadianceField,
    D: Fn(Vec3) -> Option<f64> + Sync,
{
    type Scratch = F::Scratch;

    fn channels(&self) -> usize {
        self.base.channels()
    }

    fn scratch(&self) -> F::Scratch {
        self.base.scratch()
    }

    fn eval(&self, x: Vec3, s: &mut F::Scratch, color: &mut [f64]) -> f64 {
        let sigma = self.base.eval(x, s, color);
        (self.density)(x).unwrap_or(sigma)
    }
}

/// Constant-color field with an analytic density.
pub struct ProceduralField<D> {
    pub color: Vec<f64>,
    pub density: D,
}

impl<D> RadianceField for ProceduralField<D>
where
    D: Fn(Vec3) -> f64 + Sync,
{
    type Scratch = ();

    fn channels(&self) -> usize {
        self.color.len()
    }

    fn scratch(&self) {}

    fn eval(&self, x: Vec3, _: &mut (), color: &mut [f64]) -> f64 {
        color.copy_from_slice(&self.color);
        (self.density)(x)
    }
}

/// Ray budget and bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub coarse_samples: usize,
    pub fine_samples: usize,
    /// Explicit `[near, far]`; when unset, `‖camera position‖ ∓ margin`.
    pub bounds: Option<(f64, f64)>,
    pub depth_margin: f64,
    pub upsample_factor: usize,
}

pub const DEFAULT_COARSE_SAMPLES: usize = 48;
pub const DEFAULT_FINE_SAMPLES: usize = 48;
pub const DEFAULT_UPSAMPLE_FACTOR: usize = 4;
/// Side length of the neural (pre-upsampling) render used in training.
pub const DEFAULT_RENDER_RESOLUTION: usize = 128;

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            coarse_samples: DEFAULT_COARSE_SAMPLES,
            fine_samples: DEFAULT_FINE_SAMPLES,
            bounds: None,
            depth_margin: 1.0,
            upsample_factor: DEFAULT_UPSAMPLE_FACTOR,
        }
    }
}

impl RenderSettings {
    pub fn samples_per_ray(&self) -> usize {
        self.coarse_samples + self.fine_samples
    }

    pub fn near_far(&self, cam: &CameraPose) -> Result<(f64, f64)> {
        let (near, far) = match self.bounds {
            Some(b) => b,
            None => {
                let r = math::norm(cam.translation);
                ((r - self.depth_margin).max(1e-3), r + self.depth_margin)
            }
        };
        if !(near > 0.0 && near < far && far.is_finite()) {
            return Err(config(format!("ray bounds need 0 < near < far, got [{near}, {far}]")));
        }
        Ok((near, far))
    }
}

/// Final sample positions of every ray, ready for shading.
#[derive(Debug, Clone)]
pub struct RayPlan {
    pub res: usize,
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    /// `res² × samples` depths, ray-major.
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
    /// Sample positions in canonical space.
    pub points: Vec<Vec3>,
}

impl RayPlan {
    pub fn rays(&self) -> usize {
        self.res * self.res
    }

    pub fn layout(&self, channels: usize) -> CompositeLayout {
        CompositeLayout {
            rays: self.rays(),
            samples: self.samples,
            channels,
            depths: Arc::new(self.depths.clone()),
            deltas: Arc::new(self.deltas.clone()),
        }
    }
}

fn ray_rng(seed: u64, pixel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel as u64);
    rng
}

fn canonical(deform: Option<&RotationField>, x: Vec3) -> Vec3 {
    match deform {
        Some(f) => f.to_canonical(x),
        None => x,
    }
}

struct RayPlanPart {
    depths: Vec<f64>,
    deltas: Vec<f64>,
    points: Vec<Vec3>,
}

/// Runs the coarse pass and importance sampling for every pixel.
///
/// Each pixel draws from its own generator stream, so the plan depends only
/// on `seed` and not on how rays are scheduled.
pub fn plan_rays<F: RadianceField>(
    field: &F,
    deform: Option<&RotationField>,
    cam: &CameraPose,
    res: usize,
    settings: &RenderSettings,
    seed: u64,
) -> Result<RayPlan> {
    let (near, far) = settings.near_far(cam)?;
    if settings.coarse_samples == 0 {
        return Err(config("at least one coarse sample per ray is required"));
    }
    if settings.fine_samples > 0 && settings.coarse_samples < 2 {
        return Err(config("fine sampling needs at least 2 coarse samples"));
    }
    let rays = generate_rays(cam, res)?;
    let ch = field.channels();
    let parts: Vec<RayPlanPart> = rays
        .par_iter()
        .enumerate()
        .map_init(
            || (field.scratch(), Vec::new(), Vec::new(), Vec::new(), vec![0.0; ch]),
            |(scratch, sig, col, w, feat), (pixel, ray)| -> Result<RayPlanPart> {
                let mut rng = ray_rng(seed, pixel);
                let coarse = stratified_samples(near, far, settings.coarse_samples, &mut rng)?;
                let depths = if settings.fine_samples > 0 {
                    let n = coarse.len();
                    sig.resize(n, 0.0);
                    col.resize(n * ch, 0.0);
                    w.resize(n, 0.0);
                    for (i, &t) in coarse.iter().enumerate() {
                        let x = canonical(deform, ray.at(t));
                        sig[i] = field.eval(x, scratch, &mut col[i * ch..(i + 1) * ch]);
                    }
                    let deltas = deltas_to_far(&coarse, far);
                    composite_kernel(sig, col, &coarse, &deltas, ch, feat, w);
                    let fine = importance_samples(&coarse, w, settings.fine_samples, &mut rng)?;
                    merge_sorted(&coarse, &fine)
                } else {
                    coarse
                };
                let deltas = deltas_to_far(&depths, far);
                let points = depths.iter().map(|&t| canonical(deform, ray.at(t))).collect();
                Ok(RayPlanPart { depths, deltas, points })
            },
        )
        .collect::<Result<_>>()?;
    let samples = settings.samples_per_ray();
    let mut plan = RayPlan {
        res,
        samples,
        near,
        far,
        depths: Vec::with_capacity(parts.len() * samples),
        deltas: Vec::with_capacity(parts.len() * samples),
        points: Vec::with_capacity(parts.len() * samples),
    };
    for p in parts {
        plan.depths.extend(p.depths);
        plan.deltas.extend(p.deltas);
        plan.points.extend(p.points);
    }
    Ok(plan)
}

/// Feature, depth and opacity images plus the upsampled RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub res: usize,
    pub channels: usize,
    /// `res² × channels`, row-major from the top-left pixel.
    pub feature: Vec<f64>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
    pub final_res: usize,
    /// `final_res² × 3` in `[0, 1]`.
    pub rgb: Vec<f64>,
}

impl RenderOutput {
    pub fn depth_map(&self) -> FloatMap {
        FloatMap {
            width: self.res,
            height: self.res,
            channels: 1,
            data: self.depth.clone(),
        }
    }

    pub fn opacity_map(&self) -> FloatMap {
        FloatMap {
            width: self.res,
            height: self.res,
            channels: 1,
            data: self.opacity.clone(),
        }
    }

    /// The first three feature channels.
    pub fn feature_map(&self) -> FloatMap {
        let data = self
            .feature
            .chunks(self.channels)
            .flat_map(|c| c[..3].iter().copied())
            .collect();
        FloatMap {
            width: self.res,
            height: self.res,
            channels: 3,
            data,
        }
    }

    /// Feature channel `k` alone.
    pub fn feature_channel_map(&self, k: usize) -> FloatMap {
        FloatMap {
            width: self.res,
            height: self.res,
            channels: 1,
            data: self.feature.iter().skip(k).step_by(self.channels).copied().collect(),
        }
    }

    pub fn rgb_map(&self) -> FloatMap {
        FloatMap {
            width: self.final_res,
            height: self.final_res,
            channels: 3,
            data: self.rgb.clone(),
        }
    }

    /// Writes `feature.pfm`, one `feature_<k>.pfm` per channel beyond the
    /// third, `depth.pfm`, `opacity.pfm` and `final.pfm` into `dir`.
    pub fn save_float_maps(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.feature_map().save(&dir.join("feature.pfm"))?;
        for k in 3..self.channels {
            self.feature_channel_map(k).save(&dir.join(format!("feature_{k}.pfm")))?;
        }
        self.depth_map().save(&dir.join("depth.pfm"))?;
        self.opacity_map().save(&dir.join("opacity.pfm"))?;
        self.rgb_map().save(&dir.join("final.pfm"))?;
        Ok(())
    }
}

/// Decodes and composites every planned sample.
pub fn shade_plan<F: RadianceField>(field: &F, plan: &RayPlan, upsample_factor: usize) -> Result<RenderOutput> {
    let ch = field.channels();
    let s = plan.samples;
    let stride = ch + 2;
    let mut packed = vec![0.0; plan.rays() * stride];
    packed.par_chunks_mut(stride).enumerate().for_each_init(
        || (field.scratch(), vec![0.0; s], vec![0.0; s * ch], vec![0.0; s]),
        |(scratch, sig, col, w), (ray, out)| {
            let range = ray * s..(ray + 1) * s;
            for (i, x) in plan.points[range.clone()].iter().enumerate() {
                sig[i] = field.eval(*x, scratch, &mut col[i * ch..(i + 1) * ch]);
            }
            let (feat, tail) = out.split_at_mut(ch);
            let (d, o) = composite_kernel(sig, col, &plan.depths[range.clone()], &plan.deltas[range], ch, feat, w);
            tail[0] = d;
            tail[1] = o;
        },
    );
    unpack(packed, plan.res, ch, upsample_factor)
}

fn unpack(packed: Vec<f64>, res: usize, ch: usize, factor: usize) -> Result<RenderOutput> {
    let stride = ch + 2;
    let rgb = upsample_stub_strided(&packed, res, stride, factor)?;
    let mut feature = Vec::with_capacity(res * res * ch);
    let mut depth = Vec::with_capacity(res * res);
    let mut opacity = Vec::with_capacity(res * res);
    for px in packed.chunks(stride) {
        feature.extend_from_slice(&px[..ch]);
        depth.push(px[ch]);
        opacity.push(px[ch + 1]);
    }
    Ok(RenderOutput {
        res,
        channels: ch,
        feature,
        depth,
        opacity,
        final_res: res * factor,
        rgb,
    })
}

fn upsample_stub_strided(img: &[f64], res: usize, ch: usize, factor: usize) -> Result<Vec<f64>> {
    if ch < 3 {
        return Err(config(format!("upsampling needs at least 3 feature channels, got {ch}")));
    }
    if factor == 0 {
        return Err(config("upsample factor must be at least 1"));
    }
    let mut out = upsample_forward(img, res, ch, factor);
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Bilinear upsampling of the first three channels of a `res × res × ch`
/// image by `factor`, clamped to `[0, 1]`. Pixel centers sit at half-integer
/// positions and edges are clamped.
pub fn upsample_stub(image: &[f64], res: usize, ch: usize, factor: usize) -> Result<Vec<f64>> {
    if ch < 3 {
        return Err(config(format!("upsampling needs at least 3 feature channels, got {ch}")));
    }
    if image.len() != res * res * ch {
        return Err(config(format!(
            "image has {} values, expected {res}×{res}×{ch}",
            image.len()
        )));
    }
    upsample_stub_strided(image, res, ch, factor)
}

/// Plans, shades and upsamples one view of `field`.
pub fn render_field<F: RadianceField>(
    field: &F,
    deform: Option<&RotationField>,
    cam: &CameraPose,
    res: usize,
    settings: &RenderSettings,
    seed: u64,
) -> Result<RenderOutput> {
    if field.channels() < 3 {
        return Err(config(format!(
            "rendering needs at least 3 feature channels, got {}",
            field.channels()
        )));
    }
    let plan = plan_rays(field, deform, cam, res, settings, seed)?;
    shade_plan(field, &plan, settings.upsample_factor)
}

/// `I = R(T, θ)` for a triplane scene.
pub fn render_image(
    tp: &TriPlane,
    dec: &RadianceDecoder,
    deform: Option<&RotationField>,
    cam: &CameraPose,
    res: usize,
    settings: &RenderSettings,
    seed: u64,
) -> Result<RenderOutput> {
    let field = TriplaneField::new(tp, dec)?;
    render_field(&field, deform, cam, res, settings, seed)
}

/// Tape handles for a decoder's layers.
#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub layers: Vec<(Var, Var)>,
}

impl DecoderVars {
    /// Records the decoder weights, as parameters when `trainable`.
    pub fn record(tape: &mut Tape, dec: &RadianceDecoder, trainable: bool) -> Self {
        let layers = dec
            .layers()
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect();
        Self { layers }
    }
}

/// Decodes `N × C` summed features into `(σ, colors)` on the tape.
pub fn decode_on_tape(tape: &mut Tape, dec: &RadianceDecoder, vars: &DecoderVars, features: Var) -> (Var, Var) {
    use crate::triplane::{Activation, ColorActivation};
    let layers = dec.layers();
    let n = tape.size(features) / layers[0].inputs;
    let mut h = features;
    for (k, (layer, (w, b))) in layers.iter().zip(&vars.layers).enumerate() {
        h = tape.matmul(h, *w, n, layer.inputs, layer.outputs);
        h = tape.add_row(h, *b, layer.outputs);
        if k + 1 != layers.len() {
            h = match dec.hidden_activation() {
                Activation::Linear => h,
                Activation::Softplus => tape.softplus(h),
                Activation::Tanh => tape.tanh(h),
            };
        }
    }
    let out = layers.last().unwrap().outputs;
    let dc = out - 1;
    let raw_color = tape.columns(h, out, 0, dc);
    let color = match dec.color_activation() {
        ColorActivation::Identity => raw_color,
        ColorActivation::Sigmoid => tape.sigmoid(raw_color),
    };
    let raw_sigma = tape.columns(h, out, dc, 1);
    let sigma = tape.softplus(raw_sigma);
    (sigma, color)
}

/// Tape outputs of a differentiable render.
#[derive(Debug, Clone, Copy)]
pub struct TapeRender {
    /// `rays × (channels + 2)`: features, depth, opacity.
    pub packed: Var,
    /// `final_res² × 3`.
    pub rgb: Var,
    pub res: usize,
    pub channels: usize,
    pub final_res: usize,
}

impl TapeRender {
    pub fn feature(&self, tape: &mut Tape) -> Var {
        tape.columns(self.packed, self.channels + 2, 0, self.channels)
    }

    pub fn depth(&self, tape: &mut Tape) -> Var {
        tape.columns(self.packed, self.channels + 2, self.channels, 1)
    }

    pub fn opacity(&self, tape: &mut Tape) -> Var {
        tape.columns(self.packed, self.channels + 2, self.channels + 1, 1)
    }

    /// Reads back a [`RenderOutput`] identical to the plain renderer's.
    pub fn to_output(&self, tape: &Tape) -> RenderOutput {
        let stride = self.channels + 2;
        let packed = tape.value(self.packed);
        let mut feature = Vec::with_capacity(self.res * self.res * self.channels);
        let mut depth = Vec::with_capacity(self.res * self.res);
        let mut opacity = Vec::with_capacity(self.res * self.res);
        for px in packed.chunks(stride) {
            feature.extend_from_slice(&px[..self.channels]);
            depth.push(px[self.channels]);
            opacity.push(px[self.channels + 1]);
        }
        RenderOutput {
            res: self.res,
            channels: self.channels,
            feature,
            depth,
            opacity,
            final_res: self.final_res,
            rgb: tape.value(self.rgb).to_vec(),
        }
    }
}

/// Differentiable render of the triplane node `planes` along a fixed plan.
pub fn render_tape(
    tape: &mut Tape,
    planes: Var,
    tp_res: usize,
    dec: &RadianceDecoder,
    dec_vars: &DecoderVars,
    plan: &RayPlan,
    upsample_factor: usize,
) -> Result<TapeRender> {
    let ch_in = dec.input_dim();
    if tape.size(planes) != 3 * tp_res * tp_res * ch_in {
        return Err(config(format!(
            "triplane node has {} values, expected 3×{tp_res}²×{ch_in}",
            tape.size(planes)
        )));
    }
    let dc = dec.feature_dim();
    if dc < 3 {
        return Err(config(format!("upsampling needs at least 3 feature channels, got {dc}")));
    }
    let feats = tape.gather(planes, tp_res, ch_in, Arc::new(plan.points.clone()));
    let (sigma, color) = decode_on_tape(tape, dec, dec_vars, feats);
    let packed = tape.composite(sigma, color, plan.layout(dc));
    let up = tape.upsample(packed, plan.res, dc + 2, upsample_factor);
    let rgb = tape.clamp01(up);
    Ok(TapeRender {
        packed,
        rgb,
        res: plan.res,
        channels: dc,
        final_res: plan.res * upsample_factor,
    })
}
