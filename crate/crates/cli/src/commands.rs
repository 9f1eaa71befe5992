use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tp4d_core::autodiff::Fault;
use tp4d_core::camera::{sample_camera, CameraDistribution, CameraManifest, CameraPose};
use tp4d_core::deform::RotationField;
use tp4d_core::diagnostics::gradient_case;
use tp4d_core::error::{Error, Result};
use tp4d_core::synthesizer::{MotionStub, ToyReconstructor};
use tp4d_core::training::{
    ground_truth_decoder, make_pseudo_views, render_rgb, train_stage1, train_stage2, HookRegistry, MetricsRow,
    SceneConfig, StageOutput, SyntheticScene, TrainConfig,
};
use tp4d_core::triplane::{RadianceDecoder, TriPlane};
use tp4d_core::volume_render::{render_image, RenderSettings};

use crate::raster::{read_png, write_png};
use crate::{CameraArgs, CheckGradArgs, DatasetArgs, Outcome, RenderArgs, SceneArgs, TrainArgs};

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn load_distribution(path: Option<&Path>) -> Result<CameraDistribution> {
    match path {
        Some(p) => CameraDistribution::from_toml(&fs::read_to_string(p)?, p),
        None => Ok(CameraDistribution::default()),
    }
}

pub fn render(a: &RenderArgs) -> Result<Outcome> {
    let tp = TriPlane::load(&a.triplane)?;
    let dec = RadianceDecoder::load(&a.decoder)?;
    let cam = CameraPose::load(&a.camera)?;
    let field = a.deform.as_deref().map(RotationField::load).transpose()?;
    let settings = RenderSettings {
        coarse_samples: a.coarse,
        fine_samples: a.fine,
        upsample_factor: a.upsample,
        ..RenderSettings::default()
    };
    let out = render_image(&tp, &dec, field.as_ref(), &cam, a.resolution, &settings, a.seed)?;
    out.save_float_maps(&a.out)?;
    write_png(&a.out.join("rgb.png"), &render_rgb(&out)?)?;
    println!(
        "rendered {r}² -> {f}² into {}",
        a.out.display(),
        r = out.res,
        f = out.final_res
    );
    Ok(Outcome::Success)
}

pub fn check_grad(a: &CheckGradArgs) -> Result<Outcome> {
    let names: Vec<&str> = a.cases.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let fault = match a.inject_fault.as_deref() {
        Some("composite-sigma-sign") => Some(Fault::CompositeSigmaSign),
        _ => None,
    };
    if names.is_empty() {
        println!("0 checks selected; nothing to do");
        return Ok(Outcome::Success);
    }
    let mut failed = Vec::new();
    for name in &names {
        let report = gradient_case(name, a.seed)?.run(fault)?;
        println!("{}", report.line());
        if !report.passed {
            failed.push(report);
        }
    }
    match failed.iter().max_by(|x, y| x.check.max_relative_error.total_cmp(&y.check.max_relative_error)) {
        None => {
            println!("{} checks passed", names.len());
            Ok(Outcome::Success)
        }
        Some(worst) => {
            println!(
                "{} of {} checks failed; worst parameter: {} {}",
                failed.len(),
                names.len(),
                worst.name,
                worst.worst.as_deref().unwrap_or("-")
            );
            Ok(Outcome::ValidationFailed)
        }
    }
}

fn generate_scenes(cfg: &TrainConfig) -> Result<Vec<SyntheticScene>> {
    (0..cfg.scenes as u64)
        .map(|id| SyntheticScene::generate(id, &cfg.scene, &cfg.cameras))
        .collect()
}

pub fn train(a: &TrainArgs) -> Result<Outcome> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let psi3d = match (a.stage, &a.psi3d) {
        (2, None) => return Err(config_error("stage 2 needs a stage-1 checkpoint (--psi3d)")),
        (2, Some(p)) if !p.exists() => {
            return Err(config_error(format!("stage-1 checkpoint {} does not exist", p.display())))
        }
        (2, Some(p)) => Some(ToyReconstructor::load(p)?),
        _ => None,
    };
    println!("# effective configuration (stage {})", a.stage);
    print!("{}", cfg.to_toml());
    println!("# end configuration");

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    let ckpt_dir = a.out.join("checkpoints");
    if a.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir)?;
    }
    let mut observer = |row: &MetricsRow, model: &ToyReconstructor| -> Result<()> {
        if a.checkpoint_every > 0 && row.step.is_multiple_of(a.checkpoint_every) {
            model.save(&ckpt_dir.join(format!("step_{:06}.ckpt", row.step)))?;
        }
        Ok(())
    };
    let scenes = generate_scenes(&cfg)?;
    let hooks = HookRegistry::with_defaults();
    let (out, name): (StageOutput, &str) = match psi3d {
        None => {
            let model = ToyReconstructor::new_3d(cfg.model.clone(), cfg.model_seed)?;
            (train_stage1(&scenes, model, &cfg, &hooks, Some(&mut observer))?, "psi3d.ckpt")
        }
        Some(psi3d) => {
            let before = psi3d.params().digest();
            let stub = MotionStub::new(cfg.motion_grid, cfg.model.motion_dim, cfg.motion_seed)?;
            let psi = ToyReconstructor::init_from_3d(&psi3d, cfg.model_seed.wrapping_add(1))?;
            let out = train_stage2(&psi3d, psi, &scenes, &stub, &cfg, &hooks, Some(&mut observer))?;
            if a.audit {
                println!("psi3d unchanged: {}", psi3d.params().digest() == before);
            }
            (out, "psi.ckpt")
        }
    };
    fs::write(a.out.join("metrics.tsv"), out.log.to_tsv())?;
    out.model.save(&a.out.join(name))?;
    let total = out.log.rows().last().map_or(f64::NAN, |r| r.report.total);
    println!(
        "final step {} total {:.6e} {} l1 {:.6e} -> {:.6e}",
        out.log.len(),
        total,
        if a.stage == 1 { "held-view" } else { "cross-view" },
        out.initial_l1(),
        out.final_l1()
    );
    Ok(Outcome::Success)
}

/// One pseudo view in a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub frame: usize,
    pub view: usize,
    pub source: String,
    pub image: String,
    /// Render seed of this view.
    pub seed: u64,
    pub camera: CameraManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub resolution: usize,
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub upsample_factor: usize,
    pub view: Vec<ViewRecord>,
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Format {
            path: dir.to_path_buf(),
            reason: format!("cannot read frame directory: {e}"),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn frame_seed(seed: u64, frame: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add((frame as u64) << 20)
}

pub fn make_dataset(a: &DatasetArgs) -> Result<Outcome> {
    let psi3d = ToyReconstructor::load(&a.psi3d)?;
    let dec = match &a.decoder {
        Some(p) => RadianceDecoder::load(p)?,
        None => ground_truth_decoder(),
    };
    let dist = load_distribution(a.distribution.as_deref())?;
    let settings = RenderSettings::default();
    let frames = frame_files(&a.frames)?;
    fs::create_dir_all(&a.out)?;
    let mut manifest = DatasetManifest {
        resolution: a.resolution,
        coarse_samples: settings.coarse_samples,
        fine_samples: settings.fine_samples,
        upsample_factor: settings.upsample_factor,
        view: Vec::new(),
    };
    for (f, path) in frames.iter().enumerate() {
        let frame = read_png(path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        rng.set_stream(f as u64);
        let cams = (0..a.views)
            .map(|_| sample_camera(&dist, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let base = frame_seed(a.seed, f);
        let views = make_pseudo_views(&psi3d, &frame, &cams, &dec, a.resolution, &settings, base)?;
        let source = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for (v, (img, cam)) in views.iter().zip(&cams).enumerate() {
            let image = format!("frame{f:03}_view{v:02}.png");
            write_png(&a.out.join(&image), img)?;
            manifest.view.push(ViewRecord {
                frame: f,
                view: v,
                source: source.clone(),
                image,
                seed: base.wrapping_add(v as u64),
                camera: cam.to_manifest(),
            });
        }
    }
    let text = toml::to_string(&manifest).map_err(|e| config_error(format!("manifest: {e}")))?;
    fs::write(a.out.join("manifest.toml"), text)?;
    println!("{} frames, {} views written to {}", frames.len(), manifest.view.len(), a.out.display());
    Ok(Outcome::Success)
}

#[derive(Debug, Serialize)]
struct CameraList {
    camera: Vec<CameraManifest>,
}

pub fn sample_cameras(a: &CameraArgs) -> Result<Outcome> {
    let dist = load_distribution(a.distribution.as_deref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let camera = (0..a.count)
        .map(|_| sample_camera(&dist, &mut rng).map(|c| c.to_manifest()))
        .collect::<Result<Vec<_>>>()?;
    let text = toml::to_string(&CameraList { camera }).map_err(|e| config_error(format!("camera list: {e}")))?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, text)?;
    println!("{} cameras written to {}", a.count, a.out.display());
    Ok(Outcome::Success)
}

pub fn make_scene(a: &SceneArgs) -> Result<Outcome> {
    let cfg = SceneConfig {
        frames: a.frames,
        ..SceneConfig::default()
    };
    let scene = SyntheticScene::generate(a.seed, &cfg, &CameraDistribution::default())?;
    let frames_dir = a.out.join("frames");
    fs::create_dir_all(&frames_dir)?;
    scene.triplane().save(&a.out.join("triplane.tpl"))?;
    scene.decoder().save(&a.out.join("decoder.dec"))?;
    let settings = RenderSettings::default();
    for f in 0..scene.frames() {
        scene.camera(f).save(&a.out.join(format!("camera_{f:03}.toml")))?;
        if f > 0 {
            scene.field(f).save(&a.out.join(format!("field_{f:03}.rot")))?;
        }
        let img = render_rgb(&scene.real_frame(f, a.resolution, &settings)?)?;
        write_png(&frames_dir.join(format!("frame_{f:03}.png")), &img)?;
    }
    println!("scene {} with {} frames written to {}", a.seed, scene.frames(), a.out.display());
    Ok(Outcome::Success)
}
