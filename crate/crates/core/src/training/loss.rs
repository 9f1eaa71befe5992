use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config, Result};
use crate::image::Image;
use crate::triplane::{PlaneSamples, TriPlane};
use crate::volume_render::RenderOutput;

pub const L1: &str = "l1";
pub const LPIPS: &str = "lpips";
pub const ID: &str = "id";
pub const ADV: &str = "adv";
pub const DEPTH: &str = "depth";
pub const OPACITY: &str = "opacity";
pub const TRIPLANE: &str = "triplane";

/// Every term of the static reconstruction loss, in report order.
pub const TERMS_3D: [&str; 7] = [L1, LPIPS, ID, ADV, DEPTH, OPACITY, TRIPLANE];
/// Every term of the reenactment loss, in report order.
pub const TERMS_4D: [&str; 4] = [L1, LPIPS, ID, ADV];

/// Per-term loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub l1: f64,
    pub lpips: f64,
    pub id: f64,
    pub adv: f64,
    pub depth: f64,
    pub opacity: f64,
    pub triplane: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            lpips: 1.0,
            id: 1.0,
            adv: 1.0,
            depth: 1.0,
            opacity: 1.0,
            triplane: 1.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, name: &str) -> f64 {
        match name {
            L1 => self.l1,
            LPIPS => self.lpips,
            ID => self.id,
            ADV => self.adv,
            DEPTH => self.depth,
            OPACITY => self.opacity,
            TRIPLANE => self.triplane,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for name in TERMS_3D {
            let w = self.get(name);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(config(format!("loss weight `{name}` must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

/// One weighted loss term.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub name: &'static str,
    pub value: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn term(&self, name: &str) -> Option<&LossTerm> {
        self.terms.iter().find(|t| t.name == name)
    }

    /// Value of `name`, zero when the term is absent.
    pub fn value(&self, name: &str) -> f64 {
        self.term(name).map_or(0.0, |t| t.value)
    }

    /// Term-wise mean of reports over the same terms; values and weights are
    /// averaged separately.
    pub fn mean(reports: &[LossReport]) -> Result<LossReport> {
        let Some(first) = reports.first() else {
            return Err(config("cannot average zero loss reports"));
        };
        if reports.len() == 1 {
            return Ok(first.clone());
        }
        let n = reports.len() as f64;
        let mut terms = Vec::with_capacity(first.terms.len());
        for t in &first.terms {
            let (mut value, mut weight) = (0.0, 0.0);
            for r in reports {
                let other = r
                    .term(t.name)
                    .ok_or_else(|| config(format!("loss report lacks the `{}` term", t.name)))?;
                value += other.value;
                weight += other.weight;
            }
            terms.push(LossTerm {
                name: t.name,
                value: value / n,
                weight: weight / n,
            });
        }
        Ok(LossReport {
            terms,
            total: reports.iter().map(|r| r.total).sum::<f64>() / n,
        })
    }
}

/// A pluggable image-space loss evaluated on the tape.
pub trait ImageLoss: Send + Sync {
    /// Scalar, non-negative loss between two `side × side` RGB images.
    fn build(&self, tape: &mut Tape, pred: Var, truth: Var, side: usize) -> Result<Var>;
}

/// Mean of L1 distances over a pyramid of 2× average-pooled images; the
/// default stand-in for a perceptual loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiScaleL1 {
    pub scales: usize,
}

impl Default for MultiScaleL1 {
    fn default() -> Self {
        Self { scales: 4 }
    }
}

impl ImageLoss for MultiScaleL1 {
    fn build(&self, tape: &mut Tape, pred: Var, truth: Var, side: usize) -> Result<Var> {
        if self.scales == 0 {
            return Err(config("multi-scale L1 needs at least one scale"));
        }
        let (mut a, mut b, mut s) = (pred, truth, side);
        let mut levels = Vec::with_capacity(self.scales);
        for level in 0..self.scales {
            if level > 0 {
                if s % 2 != 0 {
                    break;
                }
                a = tape.avg_pool2(a, s, 3);
                b = tape.avg_pool2(b, s, 3);
                s /= 2;
            }
            levels.push(mean_abs_diff(tape, a, b));
        }
        let n = levels.len() as f64;
        let mut total = levels[0];
        for l in &levels[1..] {
            total = tape.add(total, *l);
        }
        Ok(tape.scale(total, 1.0 / n))
    }
}

/// Always zero; the default for identity and adversarial terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ZeroLoss;

impl ImageLoss for ZeroLoss {
    fn build(&self, tape: &mut Tape, _: Var, _: Var, _: usize) -> Result<Var> {
        Ok(tape.scalar(0.0))
    }
}

/// Image-loss hooks keyed by term name.
#[derive(Default)]
pub struct HookRegistry {
    hooks: BTreeMap<String, Arc<dyn ImageLoss>>,
}

impl std::fmt::Debug for HookRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.hooks.keys()).finish()
    }
}

impl HookRegistry {
    /// No hooks at all.
    pub fn empty() -> Self {
        Self::default()
    }

    /// Multi-scale L1 for `lpips`, zero for `id` and `adv`.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(LPIPS, MultiScaleL1::default());
        r.register(ID, ZeroLoss);
        r.register(ADV, ZeroLoss);
        r
    }

    pub fn register(&mut self, name: impl Into<String>, hook: impl ImageLoss + 'static) {
        self.hooks.insert(name.into(), Arc::new(hook));
    }

    pub fn remove(&mut self, name: &str) {
        self.hooks.remove(name);
    }

    pub fn get(&self, name: &str) -> Option<&dyn ImageLoss> {
        self.hooks.get(name).map(|h| h.as_ref())
    }
}

/// Which reenactment terms a draw supervises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveLosses {
    All,
    LpipsOnly,
}

impl ActiveLosses {
    pub fn contains(self, name: &str) -> bool {
        match self {
            ActiveLosses::All => TERMS_4D.contains(&name),
            ActiveLosses::LpipsOnly => name == LPIPS,
        }
    }

    pub fn names(self) -> Vec<&'static str> {
        TERMS_4D.into_iter().filter(|n| self.contains(n)).collect()
    }
}

fn mean_abs_diff(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let d = tape.abs(d);
    tape.mean(d)
}

/// Render quantities of one side of a loss, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs {
    /// `side × side × 3` final image.
    pub rgb: Var,
    pub side: usize,
    pub depth: Option<Var>,
    pub opacity: Option<Var>,
    /// Flat triplane with its resolution and channel count.
    pub planes: Option<(Var, usize, usize)>,
}

impl LossInputs {
    pub fn image(rgb: Var, side: usize) -> Self {
        Self {
            rgb,
            side,
            depth: None,
            opacity: None,
            planes: None,
        }
    }

    /// Records a finished render (and optionally its triplane) as constants.
    pub fn constants(tape: &mut Tape, out: &RenderOutput, triplane: Option<&TriPlane>) -> Self {
        Self {
            rgb: tape.constant(out.rgb.clone()),
            side: out.final_res,
            depth: Some(tape.constant(out.depth.clone())),
            opacity: Some(tape.constant(out.opacity.clone())),
            planes: triplane.map(|t| (tape.constant(t.data().to_vec()), t.resolution(), t.channels())),
        }
    }
}

/// A loss recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapeLoss {
    pub total: Var,
    pub terms: Vec<(&'static str, f64, Var)>,
}

impl TapeLoss {
    pub fn report(&self, tape: &Tape) -> LossReport {
        LossReport {
            terms: self
                .terms
                .iter()
                .map(|&(name, weight, v)| LossTerm {
                    name,
                    value: tape.scalar_value(v),
                    weight,
                })
                .collect(),
            total: tape.scalar_value(self.total),
        }
    }
}

struct TermBuilder<'a> {
    hooks: &'a HookRegistry,
    terms: Vec<(&'static str, f64, Var)>,
}

impl TermBuilder<'_> {
    fn push(&mut self, name: &'static str, weight: f64, v: Var) {
        self.terms.push((name, weight, v));
    }

    fn hook(&mut self, tape: &mut Tape, name: &'static str, weight: f64, pred: &LossInputs, truth: &LossInputs) -> Result<()> {
        let v = match self.hooks.get(name) {
            Some(h) => h.build(tape, pred.rgb, truth.rgb, pred.side)?,
            None if weight != 0.0 => {
                return Err(config(format!("loss term `{name}` has weight {weight} but no registered hook")))
            }
            None => tape.scalar(0.0),
        };
        self.push(name, weight, v);
        Ok(())
    }

    fn finish(self, tape: &mut Tape) -> TapeLoss {
        let mut total = tape.scalar(0.0);
        for &(_, w, v) in &self.terms {
            if w != 0.0 {
                let t = tape.scale(v, w);
                total = tape.add(total, t);
            }
        }
        TapeLoss {
            total,
            terms: self.terms,
        }
    }
}

fn check_sides(tape: &Tape, pred: &LossInputs, truth: &LossInputs) -> Result<()> {
    let want = pred.side * pred.side * 3;
    if pred.side != truth.side || tape.size(pred.rgb) != want || tape.size(truth.rgb) != want {
        return Err(config(format!(
            "loss images do not match: {}² prediction vs {}² target",
            pred.side, truth.side
        )));
    }
    Ok(())
}

fn map_term(tape: &mut Tape, name: &str, a: Option<Var>, b: Option<Var>) -> Result<Var> {
    match (a, b) {
        (Some(a), Some(b)) if tape.size(a) == tape.size(b) => Ok(mean_abs_diff(tape, a, b)),
        (Some(_), Some(_)) => Err(config(format!("{name} maps differ in size"))),
        _ => Err(config(format!("{name} loss needs {name} maps on both sides"))),
    }
}

/// Static reconstruction loss on the tape. The triplane term is only
/// evaluated when both sides carry a triplane and is reported as zero with
/// weight zero otherwise.
pub fn loss_3d_on_tape(
    tape: &mut Tape,
    pred: &LossInputs,
    truth: &LossInputs,
    uvs: &Arc<PlaneSamples>,
    weights: &LossWeights,
    hooks: &HookRegistry,
) -> Result<TapeLoss> {
    weights.validate()?;
    check_sides(tape, pred, truth)?;
    let mut b = TermBuilder {
        hooks,
        terms: Vec::with_capacity(TERMS_3D.len()),
    };
    let l1 = mean_abs_diff(tape, pred.rgb, truth.rgb);
    b.push(L1, weights.l1, l1);
    for name in [LPIPS, ID, ADV] {
        b.hook(tape, name, weights.get(name), pred, truth)?;
    }
    let depth = map_term(tape, DEPTH, pred.depth, truth.depth)?;
    b.push(DEPTH, weights.depth, depth);
    let opacity = map_term(tape, OPACITY, pred.opacity, truth.opacity)?;
    b.push(OPACITY, weights.opacity, opacity);
    match (pred.planes, truth.planes) {
        (Some((pa, ra, ca)), Some((pb, rb, cb))) => {
            if ca != cb {
                return Err(config(format!("triplanes carry {ca} and {cb} channels")));
            }
            if uvs.iter().all(Vec::is_empty) {
                return Err(config("triplane loss needs at least one sample point"));
            }
            let fa = tape.sample_planes(pa, ra, ca, uvs.clone());
            let fb = tape.sample_planes(pb, rb, cb, uvs.clone());
            let t = mean_abs_diff(tape, fa, fb);
            b.push(TRIPLANE, weights.triplane, t);
        }
        _ => {
            let z = tape.scalar(0.0);
            b.push(TRIPLANE, 0.0, z);
        }
    }
    Ok(b.finish(tape))
}

/// Reenactment loss on the tape; terms outside `active` get weight zero.
pub fn loss_4d_on_tape(
    tape: &mut Tape,
    pred: &LossInputs,
    truth: &LossInputs,
    active: ActiveLosses,
    weights: &LossWeights,
    hooks: &HookRegistry,
) -> Result<TapeLoss> {
    weights.validate()?;
    check_sides(tape, pred, truth)?;
    let mut b = TermBuilder {
        hooks,
        terms: Vec::with_capacity(TERMS_4D.len()),
    };
    let w = |name: &str| if active.contains(name) { weights.get(name) } else { 0.0 };
    let l1 = mean_abs_diff(tape, pred.rgb, truth.rgb);
    b.push(L1, w(L1), l1);
    for name in [LPIPS, ID, ADV] {
        b.hook(tape, name, w(name), pred, truth)?;
    }
    Ok(b.finish(tape))
}

/// Static reconstruction loss between two finished renders.
pub fn loss_3d(
    pred: (&RenderOutput, Option<&TriPlane>),
    truth: (&RenderOutput, Option<&TriPlane>),
    uvs: &PlaneSamples,
    weights: &LossWeights,
    hooks: &HookRegistry,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let p = LossInputs::constants(&mut tape, pred.0, pred.1);
    let t = LossInputs::constants(&mut tape, truth.0, truth.1);
    let loss = loss_3d_on_tape(&mut tape, &p, &t, &Arc::new(uvs.clone()), weights, hooks)?;
    Ok(loss.report(&tape))
}

/// Reenactment loss between two images.
pub fn loss_4d(pred: &Image, truth: &Image, active: ActiveLosses, weights: &LossWeights, hooks: &HookRegistry) -> Result<LossReport> {
    let mut tape = Tape::new();
    let p = LossInputs::image(tape.constant(pred.data().to_vec()), pred.side());
    let t = LossInputs::image(tape.constant(truth.data().to_vec()), truth.side());
    let loss = loss_4d_on_tape(&mut tape, &p, &t, active, weights, hooks)?;
    Ok(loss.report(&tape))
}
