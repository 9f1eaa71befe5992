use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::camera::{sample_camera, CameraPose};
use crate::error::{config, Error, Result};
use crate::image::Image;
use crate::synthesizer::{Mode, MotionEmbedding, MotionStub, ToyReconstructor};
use crate::triplane::{random_plane_samples, RadianceDecoder, TriPlane};
use crate::volume_render::{
    plan_rays, render_image, render_tape, DecoderVars, RenderOutput, RenderSettings, TriplaneField,
};

use super::config::TrainConfig;
use super::loss::{loss_3d_on_tape, loss_4d_on_tape, HookRegistry, LossInputs, LossReport, TERMS_3D, TERMS_4D};
use super::optim::Optimizer;
use super::schedule::schedule_draw;
use super::scene::{render_rgb, SyntheticScene};

/// One logged training step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub report: LossReport,
}

/// Per-step losses, one tab-separated line per step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    columns: Vec<&'static str>,
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new(columns: &[&'static str]) -> Self {
        Self {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `# step total <terms…>` followed by one line per row.
    pub fn header(&self) -> String {
        let mut s = String::from("# step\ttotal");
        for c in &self.columns {
            s.push('\t');
            s.push_str(c);
        }
        s
    }

    pub fn format_row(&self, row: &MetricsRow) -> String {
        let mut s = format!("{}\t{:.9e}", row.step, row.report.total);
        for c in &self.columns {
            let _ = write!(s, "\t{:.9e}", row.report.value(c));
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        for r in &self.rows {
            s.push_str(&self.format_row(r));
            s.push('\n');
        }
        s
    }
}

/// Evaluation L1 at one point of training.
///
/// Stage 1 scores held-out views against the scenes' ground truth. Stage 2
/// scores cross-view self-reenactment of the real driving frames and also
/// reports the same pairs at held-out views against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub step: usize,
    pub l1: f64,
    pub novel_view_l1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub model: ToyReconstructor,
    pub log: MetricsLog,
    /// Always holds the step-0 value first and the final value last.
    pub evaluations: Vec<Evaluation>,
}

impl StageOutput {
    pub fn initial_l1(&self) -> f64 {
        self.evaluations.first().map_or(f64::NAN, |e| e.l1)
    }

    pub fn final_l1(&self) -> f64 {
        self.evaluations.last().map_or(f64::NAN, |e| e.l1)
    }
}

/// Called after every optimizer step with the updated model.
pub type StepObserver<'a> = dyn FnMut(&MetricsRow, &ToyReconstructor) -> Result<()> + 'a;

fn step_seed(base: u64, step: usize, salt: u64) -> u64 {
    base ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Seed offset between the draws of one accumulated batch.
const BATCH_SALT: u64 = 16;

fn accumulate(sum: &mut Vec<Vec<f64>>, grads: Vec<Vec<f64>>) {
    if sum.is_empty() {
        *sum = grads;
        return;
    }
    for (s, g) in sum.iter_mut().zip(grads) {
        for (a, b) in s.iter_mut().zip(g) {
            *a += b;
        }
    }
}

fn batch_mean(mut sum: Vec<Vec<f64>>, n: usize) -> Vec<Vec<f64>> {
    if n > 1 {
        let inv = 1.0 / n as f64;
        sum.iter_mut().flatten().for_each(|g| *g *= inv);
    }
    sum
}

fn model_input(img: &Image, side: usize) -> Result<Image> {
    if img.side() == side {
        return Ok(img.clone());
    }
    if !img.side().is_multiple_of(side) {
        return Err(config(format!("cannot shrink a {}² image to {side}²", img.side())));
    }
    img.downsample(img.side() / side)
}

/// Renders a decoded triplane with no deformation.
pub fn render_triplane(tp: &TriPlane, dec: &RadianceDecoder, cam: &CameraPose, res: usize, settings: &RenderSettings, seed: u64) -> Result<RenderOutput> {
    render_image(tp, dec, None, cam, res, settings, seed)
}

/// `I(θ_i) = R(Ψ_3d(frame), θ_i)` for every camera, from a single triplane
/// inference.
pub fn make_pseudo_views(
    psi3d: &ToyReconstructor,
    frame: &Image,
    cams: &[CameraPose],
    decoder: &RadianceDecoder,
    res: usize,
    settings: &RenderSettings,
    seed: u64,
) -> Result<Vec<Image>> {
    if psi3d.mode() != Mode::ThreeD {
        return Err(config("pseudo views need the 3D-mode synthesizer"));
    }
    if cams.is_empty() {
        return Ok(Vec::new());
    }
    let input = model_input(frame, psi3d.config().image_side)?;
    let tp = psi3d.reconstruct(&input, None)?;
    cams.iter()
        .enumerate()
        .map(|(i, cam)| render_rgb(&render_triplane(&tp, decoder, cam, res, settings, seed.wrapping_add(i as u64))?))
        .collect()
}

fn check_scenes(scenes: &[SyntheticScene]) -> Result<()> {
    if scenes.is_empty() {
        return Err(config("training needs at least one scene"));
    }
    let dec = scenes[0].decoder();
    if scenes.iter().any(|s| s.decoder() != dec) {
        return Err(config("all scenes must share one decoder"));
    }
    Ok(())
}

fn held_view(cfg: &TrainConfig, k: usize) -> Result<CameraPose> {
    let d = &cfg.cameras;
    let yaw = if k.is_multiple_of(2) { d.yaw.hi } else { d.yaw.lo } * 0.6;
    let pitch = d.pitch.lo + 0.7 * d.pitch.width();
    CameraPose::orbit(
        [d.look_at_x.midpoint(), d.look_at_y.midpoint(), d.look_at_z.midpoint()],
        pitch,
        yaw,
        0.0,
        d.radius.midpoint(),
        d.fov_deg,
        d.image_size,
    )
}

struct Stage1Eval {
    inputs: Vec<Image>,
    views: Vec<CameraPose>,
    truths: Vec<Image>,
}

impl Stage1Eval {
    fn build(scenes: &[SyntheticScene], cfg: &TrainConfig) -> Result<Self> {
        let settings = cfg.render_settings();
        let (mut inputs, mut views, mut truths) = (Vec::new(), Vec::new(), Vec::new());
        for s in scenes {
            for f in 0..s.frames() {
                let real = s.real_frame(f, cfg.render_resolution, &settings)?;
                inputs.push(model_input(&render_rgb(&real)?, cfg.model.image_side)?);
                let view = held_view(cfg, f)?;
                let truth = s.render(f, &view, cfg.render_resolution, &settings, step_seed(cfg.seed, f, s.id() + 11))?;
                truths.push(render_rgb(&truth)?);
                views.push(view);
            }
        }
        Ok(Self { inputs, views, truths })
    }

    fn run(&self, model: &ToyReconstructor, dec: &RadianceDecoder, cfg: &TrainConfig) -> Result<f64> {
        let settings = cfg.render_settings();
        let mut total = 0.0;
        for ((input, view), truth) in self.inputs.iter().zip(&self.views).zip(&self.truths) {
            let tp = model.reconstruct(input, None)?;
            let out = render_triplane(&tp, dec, view, cfg.render_resolution, &settings, cfg.seed ^ 0xe7a1)?;
            total += render_rgb(&out)?.l1(truth)?;
        }
        Ok(total / self.truths.len() as f64)
    }
}

fn predicted_triplane(tape: &Tape, planes: crate::autodiff::Var, cfg: &TrainConfig, step: usize) -> Result<TriPlane> {
    let values = tape.value(planes);
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Divergence { step, value: *bad });
    }
    TriPlane::new(cfg.model.triplane_res, cfg.model.triplane_channels, values.to_vec())
}

fn should_eval(cfg: &TrainConfig, step: usize) -> bool {
    step == cfg.steps || (cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every))
}

fn check_finite(step: usize, report: &LossReport) -> Result<()> {
    if !report.total.is_finite() {
        return Err(Error::Divergence {
            step,
            value: report.total,
        });
    }
    Ok(())
}

/// Static reconstruction training: render a scene at `θ_p`, reconstruct it,
/// supervise the reconstruction's render at `θ_q`.
pub fn train_stage1(
    scenes: &[SyntheticScene],
    model: ToyReconstructor,
    cfg: &TrainConfig,
    hooks: &HookRegistry,
    observer: Option<&mut StepObserver<'_>>,
) -> Result<StageOutput> {
    cfg.validate()?;
    check_scenes(scenes)?;
    if model.mode() != Mode::ThreeD {
        return Err(config("stage 1 trains the 3D-mode synthesizer"));
    }
    let mut observer = observer;
    let mut model = model;
    let dec = scenes[0].decoder().clone();
    let settings = cfg.render_settings();
    let (res, side) = (cfg.render_resolution, cfg.model.image_side);
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = MetricsLog::new(&TERMS_3D);
    let eval = Stage1Eval::build(scenes, cfg)?;
    let mut evaluations = vec![Evaluation {
        step: 0,
        l1: eval.run(&model, &dec, cfg)?,
        novel_view_l1: None,
    }];

    for step in 1..=cfg.steps {
        let mut reports = Vec::with_capacity(cfg.batch_size);
        let mut batch_grads = Vec::new();
        for b in 0..cfg.batch_size {
            let salt = BATCH_SALT * b as u64;
            let scene = &scenes[rng.random_range(0..scenes.len())];
            let frame = rng.random_range(0..scene.frames());
            let theta_p = sample_camera(&cfg.cameras, &mut rng)?;
            let theta_q = sample_camera(&cfg.cameras, &mut rng)?;
            let uvs = Arc::new(random_plane_samples(cfg.triplane_samples, &mut rng));

            let seen = scene.render(frame, &theta_p, res, &settings, step_seed(cfg.seed, step, salt + 1))?;
            let input = model_input(&render_rgb(&seen)?, side)?;
            let truth = scene.render(frame, &theta_q, res, &settings, step_seed(cfg.seed, step, salt + 2))?;

            let mut tape = Tape::new();
            let vars = model.params().record(&mut tape, true);
            let planes = model.forward(&mut tape, &vars, &input, None)?;
            let tp = predicted_triplane(&tape, planes, cfg, step)?;
            let field = TriplaneField::new(&tp, &dec)?;
            let plan = plan_rays(&field, None, &theta_q, res, &settings, step_seed(cfg.seed, step, salt + 3))?;
            let dec_vars = DecoderVars::record(&mut tape, &dec, false);
            let render = render_tape(&mut tape, planes, tp.resolution(), &dec, &dec_vars, &plan, cfg.upsample_factor)?;
            let pred = LossInputs {
                rgb: render.rgb,
                side: render.final_res,
                depth: Some(render.depth(&mut tape)),
                opacity: Some(render.opacity(&mut tape)),
                planes: Some((planes, tp.resolution(), tp.channels())),
            };
            let gt = LossInputs::constants(&mut tape, &truth, scene.reference_triplane(frame));
            let loss = loss_3d_on_tape(&mut tape, &pred, &gt, &uvs, &cfg.weights, hooks)?;
            let report = loss.report(&tape);
            check_finite(step, &report)?;
            let grads = tape.backward(loss.total)?;
            accumulate(&mut batch_grads, vars.gradients(&grads));
            reports.push(report);
        }
        let report = LossReport::mean(&reports)?;
        opt.set_progress(step, cfg.steps);
        opt.step(model.params_mut(), &batch_mean(batch_grads, cfg.batch_size))?;

        let row = MetricsRow { step, report };
        if let Some(obs) = observer.as_mut() {
            obs(&row, &model)?;
        }
        log.push(row);
        if should_eval(cfg, step) {
            evaluations.push(Evaluation {
                step,
                l1: eval.run(&model, &dec, cfg)?,
                novel_view_l1: None,
            });
        }
    }
    Ok(StageOutput {
        model,
        log,
        evaluations,
    })
}

/// Frozen inputs of the reenactment stage: real frames, their embeddings and
/// the frozen synthesizer's triplane of every frame.
struct VideoCache {
    /// `[scene][frame]` final images at the frames' own cameras.
    real: Vec<Vec<Image>>,
    inputs: Vec<Vec<Image>>,
    embeddings: Vec<Vec<MotionEmbedding>>,
    pseudo: Vec<Vec<TriPlane>>,
}

impl VideoCache {
    fn build(psi3d: &ToyReconstructor, scenes: &[SyntheticScene], stub: &MotionStub, cfg: &TrainConfig) -> Result<Self> {
        let settings = cfg.render_settings();
        let mut c = VideoCache {
            real: Vec::new(),
            inputs: Vec::new(),
            embeddings: Vec::new(),
            pseudo: Vec::new(),
        };
        for s in scenes {
            let mut real = Vec::new();
            let mut inputs = Vec::new();
            let mut emb = Vec::new();
            let mut pseudo = Vec::new();
            for f in 0..s.frames() {
                let img = render_rgb(&s.real_frame(f, cfg.render_resolution, &settings)?)?;
                let input = model_input(&img, cfg.model.image_side)?;
                emb.push(stub.embed(&img)?);
                pseudo.push(psi3d.reconstruct(&input, None)?);
                inputs.push(input);
                real.push(img);
            }
            c.real.push(real);
            c.inputs.push(inputs);
            c.embeddings.push(emb);
            c.pseudo.push(pseudo);
        }
        Ok(c)
    }
}

struct Stage2Eval {
    /// `(scene, source, driving)` triples.
    cases: Vec<(usize, usize, usize)>,
    /// Driving embeddings taken from the frozen model's view of each driving
    /// frame at a held-out camera.
    drivers: Vec<MotionEmbedding>,
    views: Vec<CameraPose>,
    truths: Vec<Image>,
}

impl Stage2Eval {
    fn build(scenes: &[SyntheticScene], cache: &VideoCache, dec: &RadianceDecoder, stub: &MotionStub, cfg: &TrainConfig) -> Result<Self> {
        let settings = cfg.render_settings();
        let mut e = Stage2Eval {
            cases: Vec::new(),
            drivers: Vec::new(),
            views: Vec::new(),
            truths: Vec::new(),
        };
        for (k, s) in scenes.iter().enumerate() {
            for src in 0..s.frames() {
                for drv in (0..s.frames()).filter(|d| *d != src) {
                    let view = held_view(cfg, src + drv)?;
                    let seed = step_seed(cfg.seed, drv, s.id() + 17);
                    let seen = render_triplane(&cache.pseudo[k][drv], dec, &view, cfg.render_resolution, &settings, seed)?;
                    e.drivers.push(stub.embed(&render_rgb(&seen)?)?);
                    let truth = s.render(drv, &view, cfg.render_resolution, &settings, seed)?;
                    e.truths.push(render_rgb(&truth)?);
                    e.views.push(view);
                    e.cases.push((k, src, drv));
                }
            }
        }
        Ok(e)
    }

    fn run(&self, step: usize, psi: &ToyReconstructor, scenes: &[SyntheticScene], cache: &VideoCache, dec: &RadianceDecoder, cfg: &TrainConfig) -> Result<Evaluation> {
        let settings = cfg.render_settings();
        let (mut reenact, mut novel) = (0.0, 0.0);
        for (((&(k, s, d), v_d), view), truth) in self.cases.iter().zip(&self.drivers).zip(&self.views).zip(&self.truths) {
            let tp = psi.reconstruct(&cache.inputs[k][s], Some((&cache.embeddings[k][s], v_d)))?;
            let at_frame = render_triplane(&tp, dec, scenes[k].camera(d), cfg.render_resolution, &settings, cfg.seed ^ 0xe7a2)?;
            reenact += render_rgb(&at_frame)?.l1(&cache.real[k][d])?;
            let at_view = render_triplane(&tp, dec, view, cfg.render_resolution, &settings, cfg.seed ^ 0xe7a3)?;
            novel += render_rgb(&at_view)?.l1(truth)?;
        }
        let n = self.cases.len() as f64;
        Ok(Evaluation {
            step,
            l1: reenact / n,
            novel_view_l1: Some(novel / n),
        })
    }
}

/// Cross-view self-reenactment training of `psi` against the frozen
/// `psi3d`, which only ever enters the computation as constants.
pub fn train_stage2(
    psi3d: &ToyReconstructor,
    psi: ToyReconstructor,
    scenes: &[SyntheticScene],
    stub: &MotionStub,
    cfg: &TrainConfig,
    hooks: &HookRegistry,
    observer: Option<&mut StepObserver<'_>>,
) -> Result<StageOutput> {
    cfg.validate()?;
    check_scenes(scenes)?;
    if psi3d.mode() != Mode::ThreeD || psi.mode() != Mode::FourD {
        return Err(config("stage 2 needs a 3D-mode teacher and a 4D-mode student"));
    }
    if stub.dim() != psi.config().motion_dim {
        return Err(config(format!(
            "motion stub emits {} values, model expects {}",
            stub.dim(),
            psi.config().motion_dim
        )));
    }
    let mut observer = observer;
    let mut psi = psi;
    let dec = scenes[0].decoder().clone();
    let settings = cfg.render_settings();
    let res = cfg.render_resolution;
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = MetricsLog::new(&TERMS_4D);
    let cache = VideoCache::build(psi3d, scenes, stub, cfg)?;
    let eval = Stage2Eval::build(scenes, &cache, &dec, stub, cfg)?;
    let mut evaluations = vec![eval.run(0, &psi, scenes, &cache, &dec, cfg)?];

    for step in 1..=cfg.steps {
        let mut reports = Vec::with_capacity(cfg.batch_size);
        let mut batch_grads = Vec::new();
        for b in 0..cfg.batch_size {
            let batch_salt = BATCH_SALT * b as u64;
            let k = rng.random_range(0..scenes.len());
            let scene = &scenes[k];
            let draw = schedule_draw(&mut rng, &cfg.rates, scene.frames(), &cfg.cameras)?;
            let (s, d) = (draw.source, draw.driving);
            let pseudo = |cam: &CameraPose, salt: u64| -> Result<Image> {
                render_rgb(&render_triplane(&cache.pseudo[k][d], &dec, cam, res, &settings, step_seed(cfg.seed, step, batch_salt + salt))?)
            };
            let v_d = if draw.use_real_for_p {
                cache.embeddings[k][d].clone()
            } else {
                stub.embed(&pseudo(&draw.theta_p, 1)?)?
            };
            let (target, target_cam) = if draw.use_real_for_q {
                (cache.real[k][d].clone(), scene.camera(d).clone())
            } else {
                (pseudo(&draw.theta_q, 2)?, draw.theta_q.clone())
            };
            let v_s = &cache.embeddings[k][s];

            let mut tape = Tape::new();
            let vars = psi.params().record(&mut tape, true);
            let planes = psi.forward(&mut tape, &vars, &cache.inputs[k][s], Some((v_s, &v_d)))?;
            let tp = predicted_triplane(&tape, planes, cfg, step)?;
            let field = TriplaneField::new(&tp, &dec)?;
            let plan = plan_rays(&field, None, &target_cam, res, &settings, step_seed(cfg.seed, step, batch_salt + 3))?;
            let dec_vars = DecoderVars::record(&mut tape, &dec, false);
            let render = render_tape(&mut tape, planes, tp.resolution(), &dec, &dec_vars, &plan, cfg.upsample_factor)?;
            let pred = LossInputs::image(render.rgb, render.final_res);
            let truth = LossInputs::image(tape.constant(target.into_data()), render.final_res);
            let loss = loss_4d_on_tape(&mut tape, &pred, &truth, draw.active, &cfg.weights, hooks)?;
            let report = loss.report(&tape);
            check_finite(step, &report)?;
            let grads = tape.backward(loss.total)?;
            accumulate(&mut batch_grads, vars.gradients(&grads));
            reports.push(report);
        }
        let report = LossReport::mean(&reports)?;
        opt.set_progress(step, cfg.steps);
        opt.step(psi.params_mut(), &batch_mean(batch_grads, cfg.batch_size))?;

        let row = MetricsRow { step, report };
        if let Some(obs) = observer.as_mut() {
            obs(&row, &psi)?;
        }
        log.push(row);
        if should_eval(cfg, step) {
            evaluations.push(eval.run(step, &psi, scenes, &cache, &dec, cfg)?);
        }
    }
    Ok(StageOutput {
        model: psi,
        log,
        evaluations,
    })
}

/// Mean absolute difference between `psi`'s renders for two driving
/// embeddings, everything else fixed.
pub fn motion_sensitivity(
    psi: &ToyReconstructor,
    source: &Image,
    v_s: &MotionEmbedding,
    drivers: (&MotionEmbedding, &MotionEmbedding),
    dec: &RadianceDecoder,
    cam: &CameraPose,
    cfg: &TrainConfig,
) -> Result<f64> {
    let input = model_input(source, psi.config().image_side)?;
    let settings = cfg.render_settings();
    let render = |vd: &MotionEmbedding| -> Result<Image> {
        let tp = psi.reconstruct(&input, Some((v_s, vd)))?;
        render_rgb(&render_triplane(&tp, dec, cam, cfg.render_resolution, &settings, cfg.seed)?)
    };
    render(drivers.0)?.l1(&render(drivers.1)?)
}
