use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{sample_camera, CameraDistribution, CameraPose};
use crate::error::{config, invalid, Result};

use super::loss::ActiveLosses;

/// Probabilities of replacing a pseudo view by the real driving frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubstitutionRates {
    /// For the motion view `θ_p`.
    pub p_sub_p: f64,
    /// For the supervision view `θ_q`.
    pub p_sub_q: f64,
}

pub const DEFAULT_P_SUB_P: f64 = 0.10;
pub const DEFAULT_P_SUB_Q: f64 = 0.80;

impl Default for SubstitutionRates {
    fn default() -> Self {
        Self {
            p_sub_p: DEFAULT_P_SUB_P,
            p_sub_q: DEFAULT_P_SUB_Q,
        }
    }
}

impl SubstitutionRates {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_sub_p", self.p_sub_p), ("p_sub_q", self.p_sub_q)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// Sampling outcome of one reenactment iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleDraw {
    pub source: usize,
    pub driving: usize,
    pub theta_p: CameraPose,
    pub theta_q: CameraPose,
    pub use_real_for_p: bool,
    pub use_real_for_q: bool,
    pub active: ActiveLosses,
}

/// Draws source and driving frames, two pseudo-view cameras and two
/// independent substitution flags, in that order.
pub fn schedule_draw<R: Rng + ?Sized>(
    rng: &mut R,
    rates: &SubstitutionRates,
    frames: usize,
    cameras: &CameraDistribution,
) -> Result<ScheduleDraw> {
    rates.validate()?;
    if frames < 2 {
        return Err(config(format!("reenactment needs at least 2 frames, got {frames}")));
    }
    let source = rng.random_range(0..frames);
    let mut driving = rng.random_range(0..frames - 1);
    if driving >= source {
        driving += 1;
    }
    let theta_p = sample_camera(cameras, rng)?;
    let theta_q = sample_camera(cameras, rng)?;
    let use_real_for_p = rng.random_bool(rates.p_sub_p);
    let use_real_for_q = rng.random_bool(rates.p_sub_q);
    Ok(ScheduleDraw {
        source,
        driving,
        theta_p,
        theta_q,
        use_real_for_p,
        use_real_for_q,
        active: if use_real_for_q {
            ActiveLosses::All
        } else {
            ActiveLosses::LpipsOnly
        },
    })
}
