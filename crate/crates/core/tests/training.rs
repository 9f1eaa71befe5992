use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tp4d_core::autodiff::{Tape, Var};
use tp4d_core::camera::CameraDistribution;
use tp4d_core::image::Image;
use tp4d_core::synthesizer::{MotionStub, ParameterSet, ToyReconstructor};
use tp4d_core::training::loss::{ADV, DEPTH, ID, L1, LPIPS, OPACITY, TRIPLANE};
use tp4d_core::training::*;
use tp4d_core::triplane::{random_plane_samples, triplane_l1, TriPlane};
use tp4d_core::volume_render::RenderOutput;
use tp4d_core::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_render(res: usize, final_res: usize, seed: u64) -> RenderOutput {
    let mut r = rng(seed);
    let mut v = |n: usize| (0..n).map(|_| r.random_range(0.0..0.8)).collect::<Vec<f64>>();
    RenderOutput {
        res,
        channels: 3,
        feature: v(res * res * 3),
        depth: v(res * res),
        opacity: v(res * res),
        final_res,
        rgb: v(final_res * final_res * 3),
    }
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn pool(img: &[f64], side: usize) -> Vec<f64> {
    let h = side / 2;
    let mut out = vec![0.0; h * h * 3];
    for r in 0..h {
        for c in 0..h {
            for k in 0..3 {
                let at = |rr: usize, cc: usize| img[(rr * side + cc) * 3 + k];
                out[(r * h + c) * 3 + k] =
                    0.25 * (at(2 * r, 2 * c) + at(2 * r, 2 * c + 1) + at(2 * r + 1, 2 * c) + at(2 * r + 1, 2 * c + 1));
            }
        }
    }
    out
}

fn multiscale_oracle(a: &[f64], b: &[f64], side: usize, scales: usize) -> f64 {
    let (mut a, mut b, mut s) = (a.to_vec(), b.to_vec(), side);
    let mut levels = vec![mean_abs(&a, &b)];
    while levels.len() < scales && s % 2 == 0 {
        a = pool(&a, s);
        b = pool(&b, s);
        s /= 2;
        levels.push(mean_abs(&a, &b));
    }
    levels.iter().sum::<f64>() / levels.len() as f64
}

#[test]
fn identical_inputs_give_zero_for_every_term() {
    let out = random_render(4, 16, 1);
    let tp = TriPlane::random(8, 4, 0.5, &mut rng(2));
    let uvs = random_plane_samples(64, &mut rng(3));
    let r = loss_3d((&out, Some(&tp)), (&out, Some(&tp)), &uvs, &LossWeights::default(), &HookRegistry::with_defaults()).unwrap();
    assert_eq!(r.terms.len(), TERMS_3D.len());
    for t in &r.terms {
        assert_eq!(t.value, 0.0, "{}", t.name);
    }
    assert_eq!(r.total, 0.0);
}

#[test]
fn constant_offset_gives_exact_l1() {
    let pred = random_render(4, 16, 4);
    let mut truth = pred.clone();
    for v in &mut truth.rgb {
        *v += 0.1;
    }
    let uvs = random_plane_samples(8, &mut rng(5));
    let r = loss_3d((&pred, None), (&truth, None), &uvs, &LossWeights::default(), &HookRegistry::with_defaults()).unwrap();
    assert!((r.value(L1) - 0.1).abs() < 1e-12);
    // the pooled pyramid keeps a uniform offset
    assert!((r.value(LPIPS) - 0.1).abs() < 1e-12);
    assert_eq!(r.value(DEPTH), 0.0);
    assert_eq!(r.value(OPACITY), 0.0);
}

#[test]
fn loss_3d_matches_term_by_term_oracle() {
    let pred = random_render(4, 16, 6);
    let truth = random_render(4, 16, 7);
    let ta = TriPlane::random(8, 4, 0.5, &mut rng(8));
    let tb = TriPlane::random(8, 4, 0.5, &mut rng(9));
    let uvs = random_plane_samples(200, &mut rng(10));
    let mut r = rng(11);
    let weights = LossWeights {
        l1: r.random_range(0.1..2.0),
        lpips: r.random_range(0.1..2.0),
        id: r.random_range(0.1..2.0),
        adv: r.random_range(0.1..2.0),
        depth: r.random_range(0.1..2.0),
        opacity: r.random_range(0.1..2.0),
        triplane: r.random_range(0.1..2.0),
    };
    let rep = loss_3d((&pred, Some(&ta)), (&truth, Some(&tb)), &uvs, &weights, &HookRegistry::with_defaults()).unwrap();

    let expect = [
        (L1, mean_abs(&pred.rgb, &truth.rgb)),
        (LPIPS, multiscale_oracle(&pred.rgb, &truth.rgb, 16, 4)),
        (ID, 0.0),
        (ADV, 0.0),
        (DEPTH, mean_abs(&pred.depth, &truth.depth)),
        (OPACITY, mean_abs(&pred.opacity, &truth.opacity)),
        (TRIPLANE, triplane_l1(&ta, &tb, &uvs).unwrap()),
    ];
    let mut total = 0.0;
    for (name, want) in expect {
        let t = rep.term(name).unwrap();
        assert!((t.value - want).abs() < 1e-6, "{name}: {} vs {want}", t.value);
        assert_eq!(t.weight, weights.get(name));
        total += t.weight * want;
    }
    assert!((rep.total - total).abs() < 1e-6);
}

#[test]
fn triplane_term_compares_across_resolutions() {
    let out = random_render(4, 16, 40);
    let coarse = TriPlane::random(8, 4, 0.5, &mut rng(41));
    let uvs = random_plane_samples(64, &mut rng(42));
    let hooks = HookRegistry::with_defaults();
    let w = LossWeights::default();
    // a constant plane reads the same value at any resolution
    let flat = |res| TriPlane::new(res, 4, vec![0.3; 3 * res * res * 4]).unwrap();
    let same = loss_3d((&out, Some(&flat(8))), (&out, Some(&flat(32))), &uvs, &w, &hooks).unwrap();
    assert!(same.value(TRIPLANE).abs() < 1e-12);
    let fine = TriPlane::random(32, 4, 0.5, &mut rng(43));
    let rep = loss_3d((&out, Some(&coarse)), (&out, Some(&fine)), &uvs, &w, &hooks).unwrap();
    assert!((rep.value(TRIPLANE) - triplane_l1(&coarse, &fine, &uvs).unwrap()).abs() < 1e-12);
    let other = TriPlane::random(8, 3, 0.5, &mut rng(44));
    assert!(matches!(
        loss_3d((&out, Some(&coarse)), (&out, Some(&other)), &uvs, &w, &hooks),
        Err(Error::Config(_))
    ));
}

#[test]
fn triplane_term_is_dropped_without_reference() {
    let pred = random_render(4, 16, 12);
    let truth = random_render(4, 16, 13);
    let tp = TriPlane::random(8, 4, 0.5, &mut rng(14));
    let uvs = random_plane_samples(16, &mut rng(15));
    let rep = loss_3d((&pred, Some(&tp)), (&truth, None), &uvs, &LossWeights::default(), &HookRegistry::with_defaults()).unwrap();
    let t = rep.term(TRIPLANE).unwrap();
    assert_eq!((t.value, t.weight), (0.0, 0.0));
}

#[test]
fn loss_4d_respects_active_set() {
    let a = Image::new(16, random_render(4, 16, 16).rgb).unwrap();
    let b = Image::new(16, random_render(4, 16, 17).rgb).unwrap();
    let hooks = HookRegistry::with_defaults();
    let w = LossWeights::default();
    let all = loss_4d(&a, &b, ActiveLosses::All, &w, &hooks).unwrap();
    let lp = loss_4d(&a, &b, ActiveLosses::LpipsOnly, &w, &hooks).unwrap();
    assert_eq!(all.terms.iter().map(|t| t.name).collect::<Vec<_>>(), TERMS_4D.to_vec());
    assert!((all.total - (all.value(L1) + all.value(LPIPS))).abs() < 1e-12);
    assert!((lp.total - lp.value(LPIPS)).abs() < 1e-12);
    for t in &lp.terms {
        assert_eq!(t.weight != 0.0, t.name == LPIPS, "{}", t.name);
    }
    let same = loss_4d(&a, &a, ActiveLosses::All, &w, &hooks).unwrap();
    assert_eq!(same.total, 0.0);
}

#[test]
fn missing_hook_with_weight_is_a_config_error() {
    let a = Image::new(8, vec![0.2; 192]).unwrap();
    let mut hooks = HookRegistry::with_defaults();
    hooks.remove(LPIPS);
    let w = LossWeights::default();
    assert!(matches!(loss_4d(&a, &a, ActiveLosses::All, &w, &hooks), Err(Error::Config(_))));
    let w0 = LossWeights { lpips: 0.0, ..w };
    assert!(loss_4d(&a, &a, ActiveLosses::All, &w0, &hooks).is_ok());
}

#[test]
fn custom_hooks_replace_defaults() {
    struct Constant(f64);
    impl ImageLoss for Constant {
        fn build(&self, tape: &mut Tape, _: Var, _: Var, _: usize) -> tp4d_core::Result<Var> {
            Ok(tape.scalar(self.0))
        }
    }
    let a = Image::new(8, vec![0.2; 192]).unwrap();
    let mut hooks = HookRegistry::with_defaults();
    hooks.register(ID, Constant(0.25));
    let rep = loss_4d(&a, &a, ActiveLosses::All, &LossWeights::default(), &hooks).unwrap();
    assert_eq!(rep.value(ID), 0.25);
    assert_eq!(rep.total, 0.25);
}

#[test]
fn negative_weights_are_rejected() {
    let a = Image::new(8, vec![0.2; 192]).unwrap();
    let w = LossWeights { l1: -1.0, ..LossWeights::default() };
    assert!(loss_4d(&a, &a, ActiveLosses::All, &w, &HookRegistry::with_defaults()).is_err());
}

#[test]
fn substitution_frequencies_match_rates() {
    let rates = SubstitutionRates::default();
    let cams = CameraDistribution::default();
    let mut r = rng(20);
    let n = 100_000;
    let (mut p, mut q) = (0usize, 0usize);
    for _ in 0..n {
        let d = schedule_draw(&mut r, &rates, 3, &cams).unwrap();
        assert_ne!(d.source, d.driving);
        assert!(d.source < 3 && d.driving < 3);
        assert_eq!(d.active == ActiveLosses::All, d.use_real_for_q);
        p += d.use_real_for_p as usize;
        q += d.use_real_for_q as usize;
    }
    let (fp, fq) = (p as f64 / n as f64, q as f64 / n as f64);
    assert!((fp - 0.10).abs() <= 0.003, "{fp}");
    assert!((fq - 0.80).abs() <= 0.004, "{fq}");
}

#[test]
fn zero_rates_always_use_pseudo_views() {
    let rates = SubstitutionRates { p_sub_p: 0.0, p_sub_q: 0.0 };
    let mut r = rng(21);
    for _ in 0..2000 {
        let d = schedule_draw(&mut r, &rates, 2, &CameraDistribution::default()).unwrap();
        assert!(!d.use_real_for_p && !d.use_real_for_q);
        assert_eq!(d.active, ActiveLosses::LpipsOnly);
    }
}

#[test]
fn schedule_rejects_short_videos_and_bad_rates() {
    let cams = CameraDistribution::default();
    assert!(matches!(
        schedule_draw(&mut rng(0), &SubstitutionRates::default(), 1, &cams),
        Err(Error::Config(_))
    ));
    let bad = SubstitutionRates { p_sub_p: 1.5, p_sub_q: 0.5 };
    assert!(schedule_draw(&mut rng(0), &bad, 3, &cams).is_err());
}

#[test]
fn schedule_is_deterministic() {
    let cams = CameraDistribution::default();
    let rates = SubstitutionRates::default();
    let a: Vec<_> = {
        let mut r = rng(22);
        (0..50).map(|_| schedule_draw(&mut r, &rates, 4, &cams).unwrap()).collect()
    };
    let mut r = rng(22);
    let b: Vec<_> = (0..50).map(|_| schedule_draw(&mut r, &rates, 4, &cams).unwrap()).collect();
    assert_eq!(a, b);
}

fn two_group_params() -> ParameterSet {
    let mut p = ParameterSet::new();
    p.insert("head.weight", vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    p.insert("blocks.0.cross.wv", vec![2, 2], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
    p
}

#[test]
fn zero_learning_rate_freezes_weights() {
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let cfg = OptimizerConfig {
            kind,
            learning_rate: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(cfg).unwrap();
        let mut p = two_group_params();
        let before = p.clone();
        let g = vec![vec![1.0, -1.0, 2.0, 0.5]; 2];
        for _ in 0..3 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
    }
}

#[test]
fn motion_layers_train_at_two_and_a_half_times_the_base_rate() {
    let cfg = OptimizerConfig {
        kind: OptimizerKind::Sgd,
        learning_rate: 0.01,
        momentum: 0.0,
        ..OptimizerConfig::default()
    };
    let opt = Optimizer::new(cfg.clone()).unwrap();
    assert_eq!(MOTION_RATE_MULTIPLIER, 2.5);
    assert_eq!(opt.rate_for("head.weight"), 0.01);
    assert_eq!(opt.rate_for("blocks.3.cross.wq"), 0.01 * 2.5);
    assert_eq!(opt.rate_for("blocks.0.attn.wq"), 0.01);

    let mut opt = opt;
    let mut p = two_group_params();
    let before = p.clone();
    let g = vec![vec![1.0, 1.0, 1.0, 1.0]; 2];
    opt.step(&mut p, &g).unwrap();
    for (a, b) in p.iter().zip(before.iter()) {
        let step = b.data[0] - a.data[0];
        let want = if a.name.contains("cross") { 0.025 } else { 0.01 };
        assert!((step - want).abs() < 1e-15, "{}: {step}", a.name);
    }
}

#[test]
fn cosine_schedule_runs_from_full_rate_to_the_floor() {
    let cfg = OptimizerConfig::default();
    assert_eq!(cfg.schedule, RateSchedule::Cosine);
    assert_eq!(cfg.rate_scale(1, 2000), 1.0);
    assert!((cfg.rate_scale(2000, 2000) - cfg.final_rate_fraction).abs() < 1e-15);
    let mid = 0.5 * (1.0 + cfg.final_rate_fraction);
    assert!((cfg.rate_scale(1001, 2001) - mid).abs() < 1e-12);
    assert_eq!(cfg.rate_scale(1, 1), 1.0);
    let flat = OptimizerConfig {
        schedule: RateSchedule::Constant,
        ..cfg
    };
    assert!((1..50).all(|s| flat.rate_scale(s, 49) == 1.0));
}

#[test]
fn progress_scales_both_rate_groups() {
    let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
    opt.set_progress(100, 100);
    let f = opt.config().final_rate_fraction * opt.config().learning_rate;
    assert!((opt.rate_for("head.weight") - f).abs() < 1e-18);
    assert!((opt.rate_for("blocks.0.cross.wv") - 2.5 * f).abs() < 1e-18);
}

#[test]
fn schedule_floor_is_validated() {
    for bad in [-0.1, 1.5, f64::NAN] {
        let cfg = OptimizerConfig {
            final_rate_fraction: bad,
            ..OptimizerConfig::default()
        };
        assert!(cfg.validate().is_err(), "{bad}");
    }
}

proptest::proptest! {
    #[test]
    fn cosine_schedule_is_monotone_and_bounded(total in 2usize..5000, floor in 0.0f64..1.0) {
        let cfg = OptimizerConfig { final_rate_fraction: floor, ..OptimizerConfig::default() };
        let mut prev = f64::INFINITY;
        for step in (1..=total).step_by((total / 97).max(1)) {
            let s = cfg.rate_scale(step, total);
            proptest::prop_assert!(s <= prev + 1e-15 && s >= floor - 1e-15 && s <= 1.0);
            prev = s;
        }
    }
}

#[test]
fn adam_first_step_moves_each_weight_by_the_rate() {
    let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
    let mut p = two_group_params();
    let before = p.clone();
    let g = vec![vec![3.0, -0.2, 1e-3, 50.0]; 2];
    opt.step(&mut p, &g).unwrap();
    for (a, b) in p.iter().zip(before.iter()) {
        let rate = opt.rate_for(&a.name);
        let eps = opt.config().epsilon;
        for ((x, y), g) in a.data.iter().zip(&b.data).zip(&g[0]) {
            let want = rate * g / (g.abs() + eps);
            assert!(((y - x) - want).abs() < 1e-12 * rate, "{}: {} vs {want}", a.name, y - x);
        }
    }
}

#[test]
fn optimizer_rejects_mismatched_gradients() {
    let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
    let mut p = two_group_params();
    assert!(opt.step(&mut p, &[vec![0.0; 4]]).is_err());
    assert!(opt.step(&mut p, &[vec![0.0; 4], vec![0.0; 3]]).is_err());
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        steps: 2,
        scenes: 1,
        render_resolution: 8,
        coarse_samples: 8,
        fine_samples: 8,
        triplane_samples: 64,
        ..TrainConfig::default()
    };
    cfg.scene.frames = 2;
    cfg.scene.triplane_res = 16;
    cfg.scene.extra_blobs = 1;
    cfg.scene.grid_side = 8;
    cfg
}

fn scenes(cfg: &TrainConfig) -> Vec<SyntheticScene> {
    (0..cfg.scenes as u64)
        .map(|i| SyntheticScene::generate(i, &cfg.scene, &cfg.cameras).unwrap())
        .collect()
}

fn fresh_3d(cfg: &TrainConfig) -> ToyReconstructor {
    ToyReconstructor::new_3d(cfg.model.clone(), cfg.model_seed).unwrap()
}

#[test]
fn zero_steps_leave_the_model_untouched() {
    let cfg = TrainConfig { steps: 0, ..small_config() };
    let sc = scenes(&cfg);
    let model = fresh_3d(&cfg);
    let digest = model.params().digest();
    let out = train_stage1(&sc, model, &cfg, &HookRegistry::with_defaults(), None).unwrap();
    assert_eq!(out.model.params().digest(), digest);
    assert!(out.log.is_empty());
    assert_eq!(out.log.to_tsv().lines().count(), 1);
    assert_eq!(out.evaluations.len(), 1);
}

#[test]
fn stage1_is_reproducible_and_logs_every_step() {
    let cfg = small_config();
    let sc = scenes(&cfg);
    let hooks = HookRegistry::with_defaults();
    let mut seen = 0;
    let mut obs = |row: &MetricsRow, _: &ToyReconstructor| -> tp4d_core::Result<()> {
        seen += 1;
        assert_eq!(row.step, seen);
        Ok(())
    };
    let a = train_stage1(&sc, fresh_3d(&cfg), &cfg, &hooks, Some(&mut obs)).unwrap();
    let b = train_stage1(&sc, fresh_3d(&cfg), &cfg, &hooks, None).unwrap();
    assert_eq!(seen, cfg.steps);
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.params().digest(), b.model.params().digest());
    assert_ne!(a.model.params().digest(), fresh_3d(&cfg).params().digest());

    let tsv = a.log.to_tsv();
    let lines: Vec<_> = tsv.lines().collect();
    assert_eq!(lines.len(), cfg.steps + 1);
    assert_eq!(lines[0], "# step\ttotal\tl1\tlpips\tid\tadv\tdepth\topacity\ttriplane");
    for (i, l) in lines[1..].iter().enumerate() {
        let cols: Vec<_> = l.split('\t').collect();
        assert_eq!(cols.len(), 9);
        assert_eq!(cols[0], (i + 1).to_string());
        assert!(cols[1..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
}

#[test]
fn nan_loss_stops_training_with_divergence() {
    struct Poison;
    impl ImageLoss for Poison {
        fn build(&self, tape: &mut Tape, _: Var, _: Var, _: usize) -> tp4d_core::Result<Var> {
            Ok(tape.scalar(f64::NAN))
        }
    }
    let cfg = small_config();
    let sc = scenes(&cfg);
    let mut hooks = HookRegistry::with_defaults();
    hooks.register(LPIPS, Poison);
    match train_stage1(&sc, fresh_3d(&cfg), &cfg, &hooks, None) {
        Err(Error::Divergence { step, value }) => {
            assert_eq!(step, 1);
            assert!(value.is_nan());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn stage1_rejects_4d_models_and_empty_scene_lists() {
    let cfg = small_config();
    let sc = scenes(&cfg);
    let psi = ToyReconstructor::init_from_3d(&fresh_3d(&cfg), 3).unwrap();
    let hooks = HookRegistry::with_defaults();
    assert!(matches!(train_stage1(&sc, psi, &cfg, &hooks, None), Err(Error::Config(_))));
    assert!(matches!(train_stage1(&[], fresh_3d(&cfg), &cfg, &hooks, None), Err(Error::Config(_))));
}

#[test]
fn stage2_leaves_the_frozen_model_unchanged() {
    let cfg = small_config();
    let sc = scenes(&cfg);
    let psi3d = fresh_3d(&cfg);
    let digest = psi3d.params().digest();
    let stub = MotionStub::new(cfg.motion_grid, cfg.model.motion_dim, cfg.motion_seed).unwrap();
    let psi = ToyReconstructor::init_from_3d(&psi3d, 5).unwrap();
    let before = psi.params().digest();
    let out = train_stage2(&psi3d, psi, &sc, &stub, &cfg, &HookRegistry::with_defaults(), None).unwrap();
    assert_eq!(psi3d.params().digest(), digest);
    assert_ne!(out.model.params().digest(), before);
    assert_eq!(out.log.len(), cfg.steps);
    assert_eq!(out.log.header(), "# step\ttotal\tl1\tlpips\tid\tadv");
}

#[test]
fn report_mean_averages_values_weights_and_totals() {
    let term = |name, value, weight| LossTerm { name, value, weight };
    let a = LossReport {
        terms: vec![term(L1, 0.2, 1.0), term(TRIPLANE, 0.4, 1.0)],
        total: 0.6,
    };
    let b = LossReport {
        terms: vec![term(L1, 0.4, 1.0), term(TRIPLANE, 0.0, 0.0)],
        total: 0.4,
    };
    assert_eq!(LossReport::mean(std::slice::from_ref(&a)).unwrap(), a);
    let m = LossReport::mean(&[a.clone(), b]).unwrap();
    assert!((m.value(L1) - 0.3).abs() < 1e-15);
    assert!((m.value(TRIPLANE) - 0.2).abs() < 1e-15);
    assert_eq!(m.term(TRIPLANE).unwrap().weight, 0.5);
    assert!((m.total - 0.5).abs() < 1e-15);
    assert!(LossReport::mean(&[]).is_err());
    let short = LossReport {
        terms: vec![term(L1, 0.1, 1.0)],
        total: 0.1,
    };
    assert!(matches!(LossReport::mean(&[a, short]), Err(Error::Config(_))));
}

#[test]
fn batched_steps_are_reproducible_and_validated() {
    let cfg = TrainConfig {
        batch_size: 2,
        ..small_config()
    };
    let sc = scenes(&cfg);
    let hooks = HookRegistry::with_defaults();
    let a = train_stage1(&sc, fresh_3d(&cfg), &cfg, &hooks, None).unwrap();
    let b = train_stage1(&sc, fresh_3d(&cfg), &cfg, &hooks, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), cfg.steps);
    assert_eq!(a.model.params().digest(), b.model.params().digest());
    let single = train_stage1(&sc, fresh_3d(&cfg), &TrainConfig { batch_size: 1, ..cfg.clone() }, &hooks, None).unwrap();
    assert_ne!(single.model.params().digest(), a.model.params().digest());

    let psi3d = fresh_3d(&cfg);
    let stub = MotionStub::new(cfg.motion_grid, cfg.model.motion_dim, cfg.motion_seed).unwrap();
    let run = || {
        let psi = ToyReconstructor::init_from_3d(&psi3d, 5).unwrap();
        train_stage2(&psi3d, psi, &sc, &stub, &cfg, &hooks, None).unwrap()
    };
    assert_eq!(run().log, run().log);

    let zero = TrainConfig {
        batch_size: 0,
        ..small_config()
    };
    assert!(matches!(zero.validate(), Err(Error::Config(_))));
}

#[test]
fn stage2_reports_cross_view_and_held_view_scores() {
    let cfg = TrainConfig {
        eval_every: 1,
        ..small_config()
    };
    let sc = scenes(&cfg);
    let psi3d = fresh_3d(&cfg);
    let stub = MotionStub::new(cfg.motion_grid, cfg.model.motion_dim, cfg.motion_seed).unwrap();
    let psi = ToyReconstructor::init_from_3d(&psi3d, 5).unwrap();
    let out = train_stage2(&psi3d, psi, &sc, &stub, &cfg, &HookRegistry::with_defaults(), None).unwrap();
    assert_eq!(out.evaluations.iter().map(|e| e.step).collect::<Vec<_>>(), (0..=cfg.steps).collect::<Vec<_>>());
    for e in &out.evaluations {
        assert!(e.l1 > 0.0 && e.l1.is_finite());
        assert!(e.novel_view_l1.is_some_and(|v| v > 0.0 && v.is_finite()));
    }
    let s1 = train_stage1(&sc, psi3d, &cfg, &HookRegistry::with_defaults(), None).unwrap();
    assert!(s1.evaluations.iter().all(|e| e.novel_view_l1.is_none()));
}

#[test]
fn stage2_with_zero_motion_values_starts_from_the_frozen_model() {
    let cfg = small_config();
    let sc = scenes(&cfg);
    let psi3d = fresh_3d(&cfg);
    let stub = MotionStub::new(cfg.motion_grid, cfg.model.motion_dim, cfg.motion_seed).unwrap();
    let mut psi = ToyReconstructor::init_from_3d(&psi3d, 5).unwrap();
    psi.zero_motion_values();
    let settings = cfg.render_settings();
    let s = &sc[0];
    let src = render_rgb(&s.real_frame(0, cfg.render_resolution, &settings).unwrap()).unwrap();
    let drv = render_rgb(&s.real_frame(1, cfg.render_resolution, &settings).unwrap()).unwrap();
    let input = src.downsample(src.side() / cfg.model.image_side).unwrap();
    let (vs, vd) = (stub.embed(&src).unwrap(), stub.embed(&drv).unwrap());
    let a = psi.reconstruct(&input, Some((&vs, &vd))).unwrap();
    let b = psi3d.reconstruct(&input, None).unwrap();
    assert_eq!(a, b);
    let cam = s.camera(1);
    let ra = render_triplane(&a, s.decoder(), cam, cfg.render_resolution, &settings, 9).unwrap();
    let rb = render_triplane(&b, s.decoder(), cam, cfg.render_resolution, &settings, 9).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(
        motion_sensitivity(&psi, &src, &vs, (&vs, &vd), s.decoder(), cam, &cfg).unwrap(),
        0.0
    );
}

#[test]
fn driving_embedding_reaches_the_render() {
    let mut cfg = small_config();
    // an untrained head at the default scale maps every token to ~0
    cfg.model.head_init = 0.5;
    let sc = scenes(&cfg);
    let psi = ToyReconstructor::init_from_3d(&fresh_3d(&cfg), 5).unwrap();
    let stub = MotionStub::new(cfg.motion_grid, cfg.model.motion_dim, cfg.motion_seed).unwrap();
    let settings = cfg.render_settings();
    let s = &sc[0];
    let src = render_rgb(&s.real_frame(0, cfg.render_resolution, &settings).unwrap()).unwrap();
    let drv = render_rgb(&s.real_frame(1, cfg.render_resolution, &settings).unwrap()).unwrap();
    let (vs, vd) = (stub.embed(&src).unwrap(), stub.embed(&drv).unwrap());
    let same = motion_sensitivity(&psi, &src, &vs, (&vd, &vd), s.decoder(), s.camera(0), &cfg).unwrap();
    let diff = motion_sensitivity(&psi, &src, &vs, (&vs, &vd), s.decoder(), s.camera(0), &cfg).unwrap();
    assert_eq!(same, 0.0);
    assert!(diff > 1e-4, "{diff}");
}

#[test]
fn stage2_rejects_mismatched_models() {
    let cfg = small_config();
    let sc = scenes(&cfg);
    let psi3d = fresh_3d(&cfg);
    let stub = MotionStub::new(cfg.motion_grid, cfg.model.motion_dim, cfg.motion_seed).unwrap();
    let hooks = HookRegistry::with_defaults();
    assert!(train_stage2(&psi3d, fresh_3d(&cfg), &sc, &stub, &cfg, &hooks, None).is_err());
    let psi = ToyReconstructor::init_from_3d(&psi3d, 5).unwrap();
    let narrow = MotionStub::new(cfg.motion_grid, 8, 1).unwrap();
    assert!(train_stage2(&psi3d, psi, &sc, &narrow, &cfg, &hooks, None).is_err());
}

#[test]
fn pseudo_views_follow_the_camera_list() {
    let cfg = small_config();
    let sc = scenes(&cfg);
    let psi3d = fresh_3d(&cfg);
    let settings = cfg.render_settings();
    let s = &sc[0];
    let frame = render_rgb(&s.real_frame(1, cfg.render_resolution, &settings).unwrap()).unwrap();
    let none = make_pseudo_views(&psi3d, &frame, &[], s.decoder(), cfg.render_resolution, &settings, 0).unwrap();
    assert!(none.is_empty());
    let cams = vec![s.camera(0).clone(), s.camera(1).clone()];
    let a = make_pseudo_views(&psi3d, &frame, &cams, s.decoder(), cfg.render_resolution, &settings, 4).unwrap();
    let b = make_pseudo_views(&psi3d, &frame, &cams, s.decoder(), cfg.render_resolution, &settings, 4).unwrap();
    assert_eq!(a.len(), 2);
    assert_eq!(a, b);
    assert!(a.iter().all(|i| i.side() == cfg.final_resolution()));
    let psi = ToyReconstructor::init_from_3d(&psi3d, 1).unwrap();
    assert!(make_pseudo_views(&psi, &frame, &cams, s.decoder(), cfg.render_resolution, &settings, 4).is_err());
}

#[test]
fn scenes_are_seeded_and_start_at_rest() {
    let cfg = small_config();
    let a = SyntheticScene::generate(3, &cfg.scene, &cfg.cameras).unwrap();
    let b = SyntheticScene::generate(3, &cfg.scene, &cfg.cameras).unwrap();
    let c = SyntheticScene::generate(4, &cfg.scene, &cfg.cameras).unwrap();
    assert_eq!(a.triplane(), b.triplane());
    assert_ne!(a.triplane(), c.triplane());
    assert_eq!(a.decoder(), c.decoder());
    assert_eq!(a.frames(), cfg.scene.frames);
    assert!(a.reference_triplane(0).is_some());
    assert!(a.reference_triplane(1).is_none());
    let settings = cfg.render_settings();
    let rest = a.render(0, a.camera(0), 8, &settings, 1).unwrap();
    let plain = render_triplane(a.triplane(), a.decoder(), a.camera(0), 8, &settings, 1).unwrap();
    assert_eq!(rest, plain);
    let moved = a.render(1, a.camera(0), 8, &settings, 1).unwrap();
    assert_ne!(moved.rgb, rest.rgb);
    assert!(a.render(9, a.camera(0), 8, &settings, 1).is_err());
}

#[test]
fn scenes_need_two_frames() {
    let mut cfg = small_config();
    cfg.scene.frames = 1;
    assert!(matches!(
        SyntheticScene::generate(0, &cfg.scene, &cfg.cameras),
        Err(Error::Config(_))
    ));
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = small_config();
    cfg.optimizer.clip_norm = Some(2.0);
    cfg.rates.p_sub_q = 0.5;
    let text = cfg.to_toml();
    let back = TrainConfig::from_toml(&text, Path::new("run.toml")).unwrap();
    assert_eq!(back, cfg);
    let partial = TrainConfig::from_toml("steps = 7\n", Path::new("run.toml")).unwrap();
    assert_eq!(partial.steps, 7);
    assert_eq!(partial.optimizer, OptimizerConfig::default());
}

#[test]
fn config_rejects_unknown_keys_and_bad_shapes() {
    match TrainConfig::from_toml("stepz = 7\n", Path::new("run.toml")) {
        Err(Error::Format { path, .. }) => assert_eq!(path, Path::new("run.toml")),
        other => panic!("expected a format error, got {other:?}"),
    }
    let bad = TrainConfig {
        render_resolution: 7,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = TrainConfig {
        scenes: 0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn tape_loss_total_skips_zero_weight_terms() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![0.0; 48]);
    let b = tape.constant(vec![1.0; 48]);
    let p = LossInputs::image(a, 4);
    let t = LossInputs::image(b, 4);
    let w = LossWeights { l1: 0.0, ..LossWeights::default() };
    let loss = loss_4d_on_tape(&mut tape, &p, &t, ActiveLosses::All, &w, &HookRegistry::with_defaults()).unwrap();
    let rep = loss.report(&tape);
    assert_eq!(rep.value(L1), 1.0);
    assert_eq!(rep.total, 1.0);
}
