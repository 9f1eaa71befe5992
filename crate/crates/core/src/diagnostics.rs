//! Finite-difference checks over the main differentiable chains.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_difference_check, Fault, GradCheck, Program, Tape, Var};
use crate::camera::{frontal_camera, CameraDistribution};
use crate::error::{config, Result};
use crate::math::Vec3;
use crate::training::{loss_4d_on_tape, ActiveLosses, HookRegistry, LossInputs, LossWeights};
use crate::triplane::{RadianceDecoder, TriPlane};
use crate::volume_render::{decode_on_tape, plan_rays, render_tape, DecoderVars, RenderSettings, TriplaneField};

/// Names of every check, in run order.
pub const CHECK_NAMES: [&str; 3] = ["decoder", "composite", "loss4d"];

/// One differentiable program with its evaluation point and pass threshold.
pub struct GradientCase {
    pub name: &'static str,
    pub step: f64,
    pub tolerance: f64,
    pub inputs: Vec<f64>,
    /// Named consecutive slices of `inputs`.
    pub segments: Vec<(String, usize)>,
    program: Box<dyn Program + Send + Sync>,
}

impl std::fmt::Debug for GradientCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradientCase")
            .field("name", &self.name)
            .field("step", &self.step)
            .field("tolerance", &self.tolerance)
            .field("inputs", &self.inputs.len())
            .finish()
    }
}

impl GradientCase {
    /// `segment[offset]` for a flat input index.
    pub fn locate(&self, index: usize) -> String {
        let mut start = 0;
        for (name, len) in &self.segments {
            if index < start + len {
                return format!("{name}[{}]", index - start);
            }
            start += len;
        }
        format!("input[{index}]")
    }

    pub fn run(&self, fault: Option<Fault>) -> Result<CaseReport> {
        let subset: Vec<usize> = (0..self.inputs.len()).collect();
        let check = match fault {
            None => finite_difference_check(self.program.as_ref(), &self.inputs, self.step, &subset)?,
            Some(f) => {
                let faulty = |tape: &mut Tape, x: Var| {
                    tape.inject_fault(f);
                    self.program.build(tape, x)
                };
                finite_difference_check(&faulty, &self.inputs, self.step, &subset)?
            }
        };
        let worst = check.worst_index.map(|i| self.locate(i));
        Ok(CaseReport {
            name: self.name,
            tolerance: self.tolerance,
            passed: check.max_relative_error < self.tolerance,
            worst,
            check,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: &'static str,
    pub tolerance: f64,
    pub passed: bool,
    /// Located parameter with the largest relative error.
    pub worst: Option<String>,
    pub check: GradCheck,
}

impl CaseReport {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {} params, max rel err {:.3e} (< {:.0e}) at {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.check.checked,
            self.check.max_relative_error,
            self.tolerance,
            self.worst.as_deref().unwrap_or("-"),
        )
    }
}

/// Builds the named case for `seed`.
pub fn gradient_case(name: &str, seed: u64) -> Result<GradientCase> {
    match name {
        "decoder" => decoder_case(seed),
        "composite" => composite_case(seed),
        "loss4d" => loss4d_case(seed),
        other => Err(config(format!(
            "unknown gradient check `{other}`; known: {}",
            CHECK_NAMES.join(", ")
        ))),
    }
}

fn uniform(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn decoder_segments(dec: &RadianceDecoder) -> Vec<(String, usize)> {
    let mut seg = Vec::new();
    for (k, l) in dec.layers().iter().enumerate() {
        seg.push((format!("decoder.{k}.weight"), l.weight.len()));
        seg.push((format!("decoder.{k}.bias"), l.bias.len()));
    }
    seg
}

fn decoder_vars_from(tape: &mut Tape, dec: &RadianceDecoder, flat: Var, offset: usize) -> DecoderVars {
    let mut at = offset;
    let layers = dec
        .layers()
        .iter()
        .map(|l| {
            let w = tape.slice(flat, at..at + l.weight.len());
            at += l.weight.len();
            let b = tape.slice(flat, at..at + l.bias.len());
            at += l.bias.len();
            (w, b)
        })
        .collect();
    DecoderVars { layers }
}

/// Triplane gather plus decoder MLP, differentiated in planes and weights.
fn decoder_case(seed: u64) -> Result<GradientCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (res, ch, points) = (4, 4, 12);
    let dec = RadianceDecoder::random(&[ch, 8, 4], &mut rng)?;
    let tp = TriPlane::random(res, ch, 0.5, &mut rng);
    let pts: Vec<Vec3> = (0..points)
        .map(|_| [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)])
        .collect();
    let pts = Arc::new(pts);
    let w_sigma = uniform(points, -1.0, 1.0, &mut rng);
    let w_color = uniform(points * 3, -1.0, 1.0, &mut rng);

    let mut inputs = tp.data().to_vec();
    let n_planes = inputs.len();
    for l in dec.layers() {
        inputs.extend(&l.weight);
        inputs.extend(&l.bias);
    }
    let mut segments = vec![("planes".to_string(), n_planes)];
    segments.extend(decoder_segments(&dec));
    let dec_c = dec.clone();
    let program = move |t: &mut Tape, x: Var| -> Result<Var> {
        let planes = t.slice(x, 0..n_planes);
        let vars = decoder_vars_from(t, &dec_c, x, n_planes);
        let f = t.gather(planes, res, ch, pts.clone());
        let (sigma, color) = decode_on_tape(t, &dec_c, &vars, f);
        let ws = t.constant(w_sigma.clone());
        let wc = t.constant(w_color.clone());
        let a = t.mul(sigma, ws);
        let b = t.mul(color, wc);
        let b = t.mul(b, b);
        let (a, b) = (t.sum(a), t.sum(b));
        Ok(t.add(a, b))
    };
    Ok(GradientCase {
        name: "decoder",
        step: 1e-4,
        tolerance: 1e-4,
        inputs,
        segments,
        program: Box::new(program),
    })
}

/// One ray with 48 coarse and 48 fine samples from a real plan, composited
/// and compared with a fixed target.
fn composite_case(seed: u64) -> Result<GradientCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dec = RadianceDecoder::random(&[4, 8, 4], &mut rng)?;
    let tp = TriPlane::random(8, 4, 0.8, &mut rng);
    let cam = frontal_camera(&CameraDistribution::default())?;
    let settings = RenderSettings::default();
    let plan = plan_rays(&TriplaneField::new(&tp, &dec)?, None, &cam, 1, &settings, seed)?;
    let (n, ch) = (plan.samples, 3);
    let layout = plan.layout(ch);
    let target = uniform(ch + 2, 0.0, 1.0, &mut rng);
    let mut inputs = uniform(n, -3.0, 2.0, &mut rng);
    inputs.extend(uniform(n * ch, -2.0, 2.0, &mut rng));
    let program = move |t: &mut Tape, x: Var| -> Result<Var> {
        let s = t.slice(x, 0..n);
        let s = t.softplus(s);
        let c = t.slice(x, n..n + n * ch);
        let c = t.sigmoid(c);
        let o = t.composite(s, c, layout.clone());
        let tg = t.constant(target.clone());
        let d = t.sub(o, tg);
        let d = t.mul(d, d);
        Ok(t.sum(d))
    };
    Ok(GradientCase {
        name: "composite",
        step: 1e-3,
        tolerance: 1e-3,
        inputs,
        segments: vec![("sigma_raw".into(), n), ("color_raw".into(), n * ch)],
        program: Box::new(program),
    })
}

/// Differentiable 8×8 render of a small triplane scored by the reenactment
/// loss with every term active.
fn loss4d_case(seed: u64) -> Result<GradientCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (res, ch, side) = (4, 4, 8);
    let dec = RadianceDecoder::random(&[ch, 8, 4], &mut rng)?;
    let tp = TriPlane::random(res, ch, 0.6, &mut rng);
    let cam = frontal_camera(&CameraDistribution::default())?;
    let settings = RenderSettings {
        coarse_samples: 8,
        fine_samples: 8,
        upsample_factor: 1,
        ..RenderSettings::default()
    };
    let plan = plan_rays(&TriplaneField::new(&tp, &dec)?, None, &cam, side, &settings, seed)?;
    let target = uniform(side * side * 3, 0.0, 1.0, &mut rng);
    let inputs = tp.data().to_vec();
    let n = inputs.len();
    let program = move |t: &mut Tape, x: Var| -> Result<Var> {
        let vars = DecoderVars::record(t, &dec, false);
        let r = render_tape(t, x, res, &dec, &vars, &plan, 1)?;
        let pred = LossInputs::image(r.rgb, r.final_res);
        let truth = LossInputs::image(t.constant(target.clone()), r.final_res);
        let loss = loss_4d_on_tape(t, &pred, &truth, ActiveLosses::All, &LossWeights::default(), &HookRegistry::with_defaults())?;
        Ok(loss.total)
    };
    Ok(GradientCase {
        name: "loss4d",
        step: 1e-3,
        tolerance: 1e-3,
        inputs,
        segments: vec![("planes".into(), n)],
        program: Box::new(program),
    })
}
