//! Hierarchical ray sampling, emission–absorption compositing and the
//! fixed upsampler.

pub mod composite;
mod render;
mod sampling;

pub use composite::{composite, Composited, RaySampleSet, DEPTH_EPS};
pub use render::{
    decode_on_tape, plan_rays, render_field, render_image, render_tape, shade_plan, upsample_stub, DecoderVars,
    DensityOverride, ProceduralField, RadianceField, RayPlan, RenderOutput, RenderSettings, TapeRender, TriplaneField,
    TriplaneScratch, DEFAULT_COARSE_SAMPLES, DEFAULT_FINE_SAMPLES, DEFAULT_RENDER_RESOLUTION, DEFAULT_UPSAMPLE_FACTOR,
};
pub use sampling::{importance_samples, merge_sorted, stratified_samples};
