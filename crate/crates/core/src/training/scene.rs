use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{sample_camera, CameraDistribution, CameraPose};
use crate::deform::{build_neck_field, Falloff, RotationField, DEFAULT_GRID_SIDE};
use crate::error::{config, Result};
use crate::image::Image;
use crate::math::Vec3;
use crate::triplane::{texel_center, Activation, ColorActivation, DenseLayer, PlaneAxis, RadianceDecoder, TriPlane};
use crate::volume_render::{render_image, RenderOutput, RenderSettings};

/// Channels of a ground-truth triplane: one density channel, three color
/// channels.
pub const SCENE_CHANNELS: usize = 4;

/// Neck pivot shared by every procedural head.
pub const NECK_PIVOT: Vec3 = [0.0, -0.45, 0.0];

/// Shape of the procedural scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub triplane_res: usize,
    /// Blobs besides the central head blob.
    pub extra_blobs: usize,
    pub frames: usize,
    /// Largest neck rotation per axis, radians, as `[pitch, yaw, roll]`.
    pub max_neck_rotation: [f64; 3],
    pub grid_side: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            triplane_res: 32,
            extra_blobs: 3,
            frames: 3,
            max_neck_rotation: [0.25, 0.45, 0.15],
            grid_side: DEFAULT_GRID_SIDE,
        }
    }
}

/// The fixed decoder every procedural scene is rendered with.
///
/// Channel 0 drives density through `σ = softplus(6·softplus(10f₀ − 13) − 8)`,
/// so a summed feature below about 1.1 is nearly empty space. Channels 1–3 map
/// to color through `sigmoid(2·softplus(2f) − 2)`.
pub fn ground_truth_decoder() -> RadianceDecoder {
    let mut hidden = DenseLayer::zeros(SCENE_CHANNELS, SCENE_CHANNELS);
    let mut out = DenseLayer::zeros(SCENE_CHANNELS, SCENE_CHANNELS);
    hidden.weight[0] = 10.0;
    hidden.bias[0] = -13.0;
    for k in 1..SCENE_CHANNELS {
        hidden.weight[k * SCENE_CHANNELS + k] = 2.0;
        // hidden color unit k feeds output k - 1
        out.weight[k * SCENE_CHANNELS + (k - 1)] = 2.0;
        out.bias[k - 1] = -2.0;
    }
    out.weight[SCENE_CHANNELS - 1] = 6.0;
    out.bias[SCENE_CHANNELS - 1] = -8.0;
    RadianceDecoder::new(vec![hidden, out], Activation::Softplus, ColorActivation::Sigmoid)
        .expect("fixed decoder is well formed")
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    center: Vec3,
    radius: f64,
    color: Vec3,
}

/// A procedural head: frozen triplane and decoder plus one neck rotation
/// field and one "video" camera per frame.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    id: u64,
    triplane: TriPlane,
    decoder: RadianceDecoder,
    fields: Vec<RotationField>,
    cameras: Vec<CameraPose>,
}

impl SyntheticScene {
    /// Scene `id` drawn from its own seeded stream. Frame 0 is the rest pose.
    pub fn generate(id: u64, cfg: &SceneConfig, cameras: &CameraDistribution) -> Result<Self> {
        if cfg.frames < 2 {
            return Err(config(format!("a scene needs at least 2 frames, got {}", cfg.frames)));
        }
        if cfg.triplane_res < 2 {
            return Err(config("scene triplane resolution must be at least 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(id);
        rng.set_stream(0x5ce4e);
        let mut color = || [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let base = color();
        let head_color = color();
        let mut blobs = vec![Blob {
            center: [0.0, 0.04, 0.0],
            radius: 0.24,
            color: head_color,
        }];
        for _ in 0..cfg.extra_blobs {
            let dir = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.6..1.0),
                rng.random_range(-0.2..1.0),
            ];
            let len = crate::math::norm(dir).max(1e-3);
            let reach = rng.random_range(0.16..0.24);
            let center = [
                dir[0] / len * reach,
                0.04 + dir[1] / len * reach,
                dir[2] / len * reach,
            ];
            let c = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            blobs.push(Blob {
                center,
                radius: rng.random_range(0.08..0.13),
                color: c,
            });
        }
        blobs.push(Blob {
            center: [0.0, -0.3, -0.03],
            radius: 0.11,
            color: head_color,
        });
        let triplane = blob_triplane(cfg.triplane_res, &blobs, base);

        let mut fields = Vec::with_capacity(cfg.frames);
        for t in 0..cfg.frames {
            let rot = if t == 0 {
                [0.0; 3]
            } else {
                let m = cfg.max_neck_rotation;
                [
                    rng.random_range(-m[0]..=m[0]),
                    rng.random_range(-m[1]..=m[1]),
                    rng.random_range(-m[2]..=m[2]),
                ]
            };
            let falloff = Falloff::Smoothstep { low: 0.08, high: 0.45 };
            fields.push(build_neck_field(cfg.grid_side, rot, NECK_PIVOT, |h| falloff.weight(h))?);
        }
        let mut cam_rng = ChaCha8Rng::seed_from_u64(id);
        cam_rng.set_stream(0xca3);
        let cameras = (0..cfg.frames)
            .map(|_| sample_camera(cameras, &mut cam_rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            id,
            triplane,
            decoder: ground_truth_decoder(),
            fields,
            cameras,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn frames(&self) -> usize {
        self.fields.len()
    }

    pub fn triplane(&self) -> &TriPlane {
        &self.triplane
    }

    pub fn decoder(&self) -> &RadianceDecoder {
        &self.decoder
    }

    pub fn field(&self, frame: usize) -> &RotationField {
        &self.fields[frame]
    }

    /// The camera the "video" frame was captured with.
    pub fn camera(&self, frame: usize) -> &CameraPose {
        &self.cameras[frame]
    }

    /// The triplane that reproduces `frame` without any deformation, which
    /// only exists for the rest pose.
    pub fn reference_triplane(&self, frame: usize) -> Option<&TriPlane> {
        (frame == 0).then_some(&self.triplane)
    }

    pub fn render(&self, frame: usize, cam: &CameraPose, res: usize, settings: &RenderSettings, seed: u64) -> Result<RenderOutput> {
        if frame >= self.frames() {
            return Err(config(format!("scene has {} frames, asked for {frame}", self.frames())));
        }
        let deform = (frame != 0).then(|| &self.fields[frame]);
        render_image(&self.triplane, &self.decoder, deform, cam, res, settings, seed)
    }

    /// The frame as seen by its own camera.
    pub fn real_frame(&self, frame: usize, res: usize, settings: &RenderSettings) -> Result<RenderOutput> {
        let seed = self.id.wrapping_mul(1_000_003).wrapping_add(frame as u64);
        self.render(frame, &self.cameras[frame].clone(), res, settings, seed)
    }
}

fn gauss(d2: f64, r: f64) -> f64 {
    (-d2 / (2.0 * r * r)).exp()
}

fn blob_triplane(res: usize, blobs: &[Blob], base: Vec3) -> TriPlane {
    let mut tp = TriPlane::zeros(res, SCENE_CHANNELS);
    for axis in PlaneAxis::ALL {
        for row in 0..res {
            for col in 0..res {
                let uv = [texel_center(col, res), texel_center(row, res)];
                let texel = tp.texel_mut(axis, row, col);
                for k in 0..3 {
                    texel[1 + k] = base[k] / 3.0;
                }
                // soft union keeps each plane's density contribution below 0.55
                let mut empty = 1.0;
                for b in blobs {
                    let c = axis.project(b.center);
                    let d2 = (uv[0] - c[0]).powi(2) + (uv[1] - c[1]).powi(2);
                    empty *= 1.0 - gauss(d2, b.radius);
                    let spread = gauss(d2, 1.6 * b.radius);
                    for k in 0..3 {
                        texel[1 + k] += 0.5 * b.color[k] * spread;
                    }
                }
                texel[0] = 0.55 * (1.0 - empty);
            }
        }
    }
    tp
}

/// The final RGB raster of a render.
pub fn render_rgb(out: &RenderOutput) -> Result<Image> {
    Image::new(out.final_res, out.rgb.clone())
}
