use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config, Result};
use crate::image::Image;
use crate::triplane::TriPlane;

use super::motion::MotionEmbedding;
use super::params::{ParamVars, ParameterSet};

/// Architecture of the toy reconstructor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub image_side: usize,
    pub patch: usize,
    pub dim: usize,
    pub blocks: usize,
    /// Blocks before this index attend to `v_s`, the rest to `v_d`.
    pub split: usize,
    pub motion_dim: usize,
    pub ff_dim: usize,
    pub triplane_res: usize,
    pub triplane_channels: usize,
    /// Standard deviation of the token-to-triplane head at initialisation.
    pub head_init: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            patch: 4,
            dim: 64,
            blocks: 4,
            split: 2,
            motion_dim: 32,
            ff_dim: 128,
            triplane_res: 32,
            triplane_channels: 4,
            head_init: 0.01,
        }
    }
}

impl ToyConfig {
    pub fn tokens_side(&self) -> usize {
        self.image_side / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.tokens_side() * self.tokens_side()
    }

    /// Texels per token along each plane axis.
    pub fn texel_block(&self) -> usize {
        self.triplane_res / self.tokens_side()
    }

    pub fn head_outputs(&self) -> usize {
        3 * self.texel_block() * self.texel_block() * self.triplane_channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_side,
            self.patch,
            self.dim,
            self.blocks,
            self.motion_dim,
            self.ff_dim,
            self.triplane_res,
            self.triplane_channels,
        ];
        if positive.contains(&0) {
            return Err(config("reconstructor sizes must all be positive"));
        }
        if !self.image_side.is_multiple_of(self.patch) {
            return Err(config(format!(
                "image side {} is not divisible by patch size {}",
                self.image_side, self.patch
            )));
        }
        if !self.triplane_res.is_multiple_of(self.tokens_side()) {
            return Err(config(format!(
                "triplane resolution {} is not a multiple of the {}-token grid",
                self.triplane_res,
                self.tokens_side()
            )));
        }
        if self.split > self.blocks {
            return Err(config(format!(
                "split index {} exceeds block count {}",
                self.split, self.blocks
            )));
        }
        if !(self.head_init >= 0.0 && self.head_init.is_finite()) {
            return Err(config("head_init must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// Whether motion cross-attention is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// All cross-attention sublayers disabled.
    ThreeD,
    FourD,
}

/// Patch-embedding transformer that maps an image to a triplane.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyReconstructor {
    config: ToyConfig,
    mode: Mode,
    params: ParameterSet,
}

fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `true` for the weights that only exist for motion injection.
pub fn is_motion_param(name: &str) -> bool {
    name.contains(".cross.")
}

fn cross_names(k: usize) -> [String; 3] {
    [
        format!("blocks.{k}.cross.wq"),
        format!("blocks.{k}.cross.wk"),
        format!("blocks.{k}.cross.wv"),
    ]
}

impl ToyReconstructor {
    /// Freshly initialised model in 3D mode.
    pub fn new_3d(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let d = c.dim;
        let pin = c.patch * c.patch * 3;
        let mut p = ParameterSet::new();
        p.insert("embed.weight", vec![pin, d], normal(&mut rng, pin * d, (1.0 / pin as f64).sqrt()))?;
        p.insert("embed.bias", vec![d], vec![0.0; d])?;
        p.insert("pos", vec![c.tokens(), d], normal(&mut rng, c.tokens() * d, 0.5))?;
        let sd = (1.0 / d as f64).sqrt();
        for k in 0..c.blocks {
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("blocks.{k}.attn.{w}"), vec![d, d], normal(&mut rng, d * d, sd))?;
            }
            p.insert(format!("blocks.{k}.ff.w1"), vec![d, c.ff_dim], normal(&mut rng, d * c.ff_dim, sd))?;
            p.insert(format!("blocks.{k}.ff.b1"), vec![c.ff_dim], vec![0.0; c.ff_dim])?;
            let sf = (1.0 / c.ff_dim as f64).sqrt();
            p.insert(format!("blocks.{k}.ff.w2"), vec![c.ff_dim, d], normal(&mut rng, c.ff_dim * d, sf))?;
            p.insert(format!("blocks.{k}.ff.b2"), vec![d], vec![0.0; d])?;
        }
        let ho = c.head_outputs();
        p.insert("head.weight", vec![d, ho], normal(&mut rng, d * ho, c.head_init))?;
        p.insert("head.bias", vec![ho], vec![0.0; ho])?;
        let tl = 3 * c.triplane_res * c.triplane_res * c.triplane_channels;
        p.insert("triplane_bias", vec![tl], vec![0.0; tl])?;
        Ok(Self {
            config,
            mode: Mode::ThreeD,
            params: p,
        })
    }

    /// 4D model sharing every weight of `psi3d`, with freshly seeded motion
    /// cross-attention.
    pub fn init_from_3d(psi3d: &ToyReconstructor, seed: u64) -> Result<Self> {
        if psi3d.mode != Mode::ThreeD {
            return Err(config("init_from_3d expects a 3D-mode model"));
        }
        let c = psi3d.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = psi3d.params.clone();
        let (d, dm) = (c.dim, c.motion_dim);
        for k in 0..c.blocks {
            let [q, kk, v] = cross_names(k);
            params.insert(q, vec![d, d], normal(&mut rng, d * d, (1.0 / d as f64).sqrt()))?;
            params.insert(kk, vec![dm, d], normal(&mut rng, dm * d, (1.0 / dm as f64).sqrt()))?;
            params.insert(v, vec![dm, d], normal(&mut rng, dm * d, (1.0 / dm as f64).sqrt()))?;
        }
        Ok(Self {
            config: c,
            mode: Mode::FourD,
            params,
        })
    }

    pub(crate) fn from_parts(cfg: ToyConfig, mode: Mode, params: ParameterSet) -> Result<Self> {
        cfg.validate()?;
        let probe = match mode {
            Mode::ThreeD => Self::new_3d(cfg.clone(), 0)?,
            Mode::FourD => Self::init_from_3d(&Self::new_3d(cfg.clone(), 0)?, 0)?,
        };
        for t in probe.params.iter() {
            let got = params.require(&t.name)?;
            if got.shape != t.shape {
                return Err(config_err_shape(&t.name, &t.shape, &got.shape));
            }
        }
        if params.len() != probe.params.len() {
            return Err(config(format!(
                "checkpoint has {} tensors, architecture expects {}",
                params.len(),
                probe.params.len()
            )));
        }
        Ok(Self {
            config: cfg,
            mode,
            params,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Zeroes every cross-attention value projection.
    pub fn zero_motion_values(&mut self) {
        for t in self.params.iter_mut() {
            if is_motion_param(&t.name) && t.name.ends_with(".wv") {
                t.data.fill(0.0);
            }
        }
    }

    fn patches(&self, image: &Image) -> Result<Vec<f64>> {
        let c = &self.config;
        if image.side() != c.image_side {
            return Err(config(format!(
                "reconstructor expects {}² input, got {}²",
                c.image_side,
                image.side()
            )));
        }
        let (ts, p) = (c.tokens_side(), c.patch);
        let mut out = Vec::with_capacity(c.tokens() * p * p * 3);
        for ti in 0..ts {
            for tj in 0..ts {
                for r in 0..p {
                    for col in 0..p {
                        out.extend_from_slice(image.pixel(ti * p + r, tj * p + col));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Maps triplane storage order to the head's per-token output order.
    fn head_permutation(&self) -> Vec<usize> {
        let c = &self.config;
        let (res, ch, ts, t) = (c.triplane_res, c.triplane_channels, c.tokens_side(), c.texel_block());
        let per_token = c.head_outputs();
        let mut idx = Vec::with_capacity(3 * res * res * ch);
        for plane in 0..3 {
            for row in 0..res {
                for col in 0..res {
                    let token = (row / t) * ts + col / t;
                    let local = (plane * t + row % t) * t + col % t;
                    for k in 0..ch {
                        idx.push(token * per_token + local * ch + k);
                    }
                }
            }
        }
        idx
    }

    /// Records the forward pass and returns the flat triplane node.
    /// `motion` is `(v_s, v_d)` and is ignored in 3D mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        image: &Image,
        motion: Option<(&MotionEmbedding, &MotionEmbedding)>,
    ) -> Result<Var> {
        let c = &self.config;
        let (n, d) = (c.tokens(), c.dim);
        let pin = c.patch * c.patch * 3;
        let motion = match (self.mode, motion) {
            (Mode::ThreeD, _) => None,
            (Mode::FourD, None) => return Err(config("4D reconstruction needs source and driving embeddings")),
            (Mode::FourD, Some((vs, vd))) => {
                for v in [vs, vd] {
                    if v.dim() != c.motion_dim {
                        return Err(config(format!(
                            "motion embedding has dimension {}, model expects {}",
                            v.dim(),
                            c.motion_dim
                        )));
                    }
                }
                Some((tape.constant(vs.as_slice().to_vec()), tape.constant(vd.as_slice().to_vec())))
            }
        };

        let patches = tape.constant(self.patches(image)?);
        let mut x = tape.matmul(patches, vars.get("embed.weight")?, n, pin, d);
        x = tape.add_row(x, vars.get("embed.bias")?, d);
        x = tape.add(x, vars.get("pos")?);
        let inv = 1.0 / (d as f64).sqrt();
        for k in 0..c.blocks {
            let h = tape.layer_norm(x, d);
            let q = tape.matmul(h, vars.get(&format!("blocks.{k}.attn.wq"))?, n, d, d);
            let kk = tape.matmul(h, vars.get(&format!("blocks.{k}.attn.wk"))?, n, d, d);
            let v = tape.matmul(h, vars.get(&format!("blocks.{k}.attn.wv"))?, n, d, d);
            let kt = tape.transpose(kk, n, d);
            let s = tape.matmul(q, kt, n, d, n);
            let s = tape.scale(s, inv);
            let a = tape.row_softmax(s, n);
            let o = tape.matmul(a, v, n, n, d);
            let o = tape.matmul(o, vars.get(&format!("blocks.{k}.attn.wo"))?, n, d, d);
            x = tape.add(x, o);

            if let Some((vs, vd)) = motion {
                let e = if k < c.split { vs } else { vd };
                let [wq, wk, wv] = cross_names(k);
                x = cross_attention_on_tape(
                    tape,
                    x,
                    e,
                    vars.get(&wq)?,
                    vars.get(&wk)?,
                    vars.get(&wv)?,
                    n,
                    d,
                    c.motion_dim,
                );
            }

            let h = tape.layer_norm(x, d);
            let f = tape.matmul(h, vars.get(&format!("blocks.{k}.ff.w1"))?, n, d, c.ff_dim);
            let f = tape.add_row(f, vars.get(&format!("blocks.{k}.ff.b1"))?, c.ff_dim);
            let f = tape.tanh(f);
            let f = tape.matmul(f, vars.get(&format!("blocks.{k}.ff.w2"))?, n, c.ff_dim, d);
            let f = tape.add_row(f, vars.get(&format!("blocks.{k}.ff.b2"))?, d);
            x = tape.add(x, f);
        }
        let ho = c.head_outputs();
        let out = tape.matmul(x, vars.get("head.weight")?, n, d, ho);
        let out = tape.add_row(out, vars.get("head.bias")?, ho);
        let planes = tape.select(out, Arc::new(self.head_permutation()));
        Ok(tape.add(planes, vars.get("triplane_bias")?))
    }

    /// `Ψ(Î_s, v_s, v_d)`, or `Ψ_3d(Î)` in 3D mode.
    pub fn reconstruct(
        &self,
        image: &Image,
        motion: Option<(&MotionEmbedding, &MotionEmbedding)>,
    ) -> Result<TriPlane> {
        let mut tape = Tape::new();
        let vars = self.params.record(&mut tape, false);
        let out = self.forward(&mut tape, &vars, image, motion)?;
        let c = &self.config;
        TriPlane::new(c.triplane_res, c.triplane_channels, tape.take_value(out))
    }
}

fn config_err_shape(name: &str, want: &[usize], got: &[usize]) -> crate::Error {
    config(format!("parameter `{name}` has shape {got:?}, expected {want:?}"))
}

/// `x + softmax(q kᵀ/√d) v` with `q = x W_Q`, `k = e W_K`, `v = e W_V` and a
/// single key/value row.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_on_tape(
    tape: &mut Tape,
    x: Var,
    e: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    n: usize,
    d: usize,
    dm: usize,
) -> Var {
    let q = tape.matmul(x, wq, n, d, d);
    let key = tape.matmul(e, wk, 1, dm, d);
    let val = tape.matmul(e, wv, 1, dm, d);
    // a 1 × d row and its d × 1 transpose share the same layout
    let logits = tape.matmul(q, key, n, d, 1);
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = tape.row_softmax(logits, 1);
    let o = tape.matmul(attn, val, n, 1, d);
    tape.add(x, o)
}

/// Plain evaluation of one motion cross-attention sublayer on `n × d`
/// tokens. Weight shapes: `W_Q` is `d × d`, `W_K` and `W_V` are `d_m × d`.
pub fn cross_attention_block(
    tokens: &[f64],
    d: usize,
    v: &MotionEmbedding,
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
) -> Result<Vec<f64>> {
    let dm = v.dim();
    if d == 0 || !tokens.len().is_multiple_of(d) {
        return Err(config(format!("{} token values do not split into rows of {d}", tokens.len())));
    }
    if wq.len() != d * d || wk.len() != dm * d || wv.len() != dm * d {
        return Err(config(format!(
            "cross-attention weights must be {d}×{d}, {dm}×{d}, {dm}×{d}"
        )));
    }
    let n = tokens.len() / d;
    let mut tape = Tape::new();
    let x = tape.constant(tokens.to_vec());
    let e = tape.constant(v.as_slice().to_vec());
    let (q, k, val) = (tape.constant(wq.to_vec()), tape.constant(wk.to_vec()), tape.constant(wv.to_vec()));
    let out = cross_attention_on_tape(&mut tape, x, e, q, k, val, n, d, dm);
    Ok(tape.take_value(out))
}
