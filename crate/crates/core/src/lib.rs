#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod camera;
pub mod deform;
pub mod diagnostics;
pub mod error;
pub mod image;
pub mod io;
pub mod math;
pub mod synthesizer;
pub mod training;
pub mod triplane;
pub mod volume_render;

pub use error::{Error, Result};
