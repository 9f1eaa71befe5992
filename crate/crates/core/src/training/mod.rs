//! Two-stage training on procedural heads: a static image-to-triplane
//! synthesizer first, then motion-driven reenactment supervised across views.

mod config;
pub mod loss;
mod optim;
mod scene;
mod schedule;
mod stage;

pub use config::{TrainConfig, TOY_RENDER_RESOLUTION};
pub use loss::{
    loss_3d, loss_3d_on_tape, loss_4d, loss_4d_on_tape, ActiveLosses, HookRegistry, ImageLoss, LossInputs,
    LossReport, LossTerm, LossWeights, MultiScaleL1, TapeLoss, ZeroLoss, TERMS_3D, TERMS_4D,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, RateSchedule, MOTION_RATE_MULTIPLIER};
pub use scene::{ground_truth_decoder, render_rgb, SceneConfig, SyntheticScene, NECK_PIVOT, SCENE_CHANNELS};
pub use schedule::{schedule_draw, ScheduleDraw, SubstitutionRates, DEFAULT_P_SUB_P, DEFAULT_P_SUB_Q};
pub use stage::{
    make_pseudo_views, motion_sensitivity, render_triplane, train_stage1, train_stage2, Evaluation, MetricsLog,
    MetricsRow, StageOutput, StepObserver,
};
