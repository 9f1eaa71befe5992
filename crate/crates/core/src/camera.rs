//! Pinhole cameras on an orbit around a look-at point.
//!
//! World up is `+y` and coordinates are right-handed. A camera's rotation is
//! stored camera-to-world with columns `(right, up, back)`; the camera looks
//! down its local `-z`. Pixel `(col, row)` covers `[col, col+1) × [row, row+1)`
//! with row 0 at the top, so pixel centers sit at half-integers.
//!
//! Pose sampling orbits the look-at point: yaw spins about world up, pitch
//! lifts the camera above the horizontal plane, then roll turns the image
//! about the optical axis.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Error, Result};
use crate::io::format_err;
use crate::math::{self, Mat3, Vec3};

pub const WORLD_UP: Vec3 = [0.0, 1.0, 0.0];

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Interval { lo: v[0], hi: v[1] }
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Uniform draw; a collapsed interval always returns `lo`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.lo + (self.hi - self.lo) * u
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !self.lo.is_finite() || !self.hi.is_finite() || self.lo > self.hi {
            return Err(invalid(format!(
                "{name} interval [{}, {}] is empty or non-finite",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// Extrinsics plus pinhole intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    /// Camera-to-world rotation, columns `(right, up, back)`.
    pub rotation: Mat3,
    /// Camera center in world coordinates.
    pub translation: Vec3,
    pub fov_deg: f64,
    pub image_size: usize,
}

/// One camera ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        math::add(self.origin, math::scale(self.direction, t))
    }
}

/// Pixel coordinates plus depth along the optical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub px: f64,
    pub py: f64,
    pub depth: f64,
}

impl CameraPose {
    pub fn new(rotation: Mat3, translation: Vec3, fov_deg: f64, image_size: usize) -> Result<Self> {
        let cam = Self {
            rotation,
            translation,
            fov_deg,
            image_size,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(invalid(format!("field of view {} outside (0, 180)", self.fov_deg)));
        }
        if self.image_size == 0 {
            return Err(invalid("image size must be positive"));
        }
        if !math::is_finite3(self.translation) {
            return Err(invalid("camera translation must be finite"));
        }
        let err = math::orthonormality_error(&self.rotation);
        if !(err < 1e-6) || math::determinant(&self.rotation) <= 0.0 {
            return Err(invalid(format!(
                "camera rotation is not a proper rotation (orthonormality error {err:e})"
            )));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with the image turned by `roll`
    /// radians about the optical axis.
    pub fn look_at(eye: Vec3, target: Vec3, roll: f64, fov_deg: f64, image_size: usize) -> Result<Self> {
        let to_target = math::sub(target, eye);
        if !(math::norm(to_target) > 0.0) {
            return Err(invalid("camera eye coincides with its target"));
        }
        let forward = math::normalize(to_target);
        let side = math::cross(forward, WORLD_UP);
        if math::norm(side) < 1e-9 {
            return Err(invalid("camera looks straight along the up axis"));
        }
        let right0 = math::normalize(side);
        let up0 = math::cross(right0, forward);
        let (s, c) = roll.sin_cos();
        let right = math::add(math::scale(right0, c), math::scale(up0, s));
        let up = math::sub(math::scale(up0, c), math::scale(right0, s));
        let back = math::scale(forward, -1.0);
        let rotation = [
            [right[0], up[0], back[0]],
            [right[1], up[1], back[1]],
            [right[2], up[2], back[2]],
        ];
        Self::new(rotation, eye, fov_deg, image_size)
    }

    /// Orbit position for the given angles, looking at `target`.
    pub fn orbit(
        target: Vec3,
        pitch: f64,
        yaw: f64,
        roll: f64,
        radius: f64,
        fov_deg: f64,
        image_size: usize,
    ) -> Result<Self> {
        let (sp, cp) = pitch.sin_cos();
        let (sy, cy) = yaw.sin_cos();
        let offset = [radius * cp * sy, radius * sp, radius * cp * cy];
        Self::look_at(math::add(target, offset), target, roll, fov_deg, image_size)
    }

    pub fn right(&self) -> Vec3 {
        [self.rotation[0][0], self.rotation[1][0], self.rotation[2][0]]
    }

    pub fn up(&self) -> Vec3 {
        [self.rotation[0][1], self.rotation[1][1], self.rotation[2][1]]
    }

    /// Unit viewing direction (the optical axis).
    pub fn forward(&self) -> Vec3 {
        [-self.rotation[0][2], -self.rotation[1][2], -self.rotation[2][2]]
    }

    pub fn tan_half_fov(&self) -> f64 {
        (0.5 * self.fov_deg.to_radians()).tan()
    }

    /// Ray through the continuous pixel position `(px, py)` of an image with
    /// `res` pixels per side.
    pub fn ray_through(&self, px: f64, py: f64, res: usize) -> Ray {
        let t = self.tan_half_fov();
        let x = (2.0 * px / res as f64 - 1.0) * t;
        let y = (1.0 - 2.0 * py / res as f64) * t;
        let local = math::normalize([x, y, -1.0]);
        Ray {
            origin: self.translation,
            direction: math::normalize(math::mat_vec(&self.rotation, local)),
        }
    }

    /// Pinhole projection against `image_size`.
    pub fn project(&self, x: Vec3) -> Result<Projection> {
        let local = math::mat_t_vec(&self.rotation, math::sub(x, self.translation));
        let depth = -local[2];
        if !(depth > 0.0) {
            return Err(Error::BehindCamera { depth });
        }
        let t = self.tan_half_fov();
        let res = self.image_size as f64;
        let nx = local[0] / depth / t;
        let ny = local[1] / depth / t;
        Ok(Projection {
            px: 0.5 * (nx + 1.0) * res,
            py: 0.5 * (1.0 - ny) * res,
            depth,
        })
    }

    /// Inverse of [`CameraPose::project`].
    pub fn unproject(&self, p: Projection) -> Vec3 {
        let t = self.tan_half_fov();
        let res = self.image_size as f64;
        let nx = 2.0 * p.px / res - 1.0;
        let ny = 1.0 - 2.0 * p.py / res;
        let local = [nx * t * p.depth, ny * t * p.depth, -p.depth];
        math::add(self.translation, math::mat_vec(&self.rotation, local))
    }

    pub fn to_manifest(&self) -> CameraManifest {
        let r = &self.rotation;
        CameraManifest {
            rotation: [
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ],
            translation: self.translation,
            fov_deg: self.fov_deg,
            image_size: self.image_size,
        }
    }

    pub fn from_manifest(m: &CameraManifest) -> Result<Self> {
        let r = m.rotation;
        Self::new(
            [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            m.translation,
            m.fov_deg,
            m.image_size,
        )
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_manifest()).expect("camera manifest serializes")
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let m: CameraManifest =
            toml::from_str(text).map_err(|e| format_err(path, e.message().to_string()))?;
        Self::from_manifest(&m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}

/// One ray per pixel center, row-major from the top-left pixel.
pub fn generate_rays(cam: &CameraPose, res: usize) -> Result<Vec<Ray>> {
    if res == 0 {
        return Err(invalid("ray grid resolution must be at least 1"));
    }
    let mut rays = Vec::with_capacity(res * res);
    for row in 0..res {
        for col in 0..res {
            rays.push(cam.ray_through(col as f64 + 0.5, row as f64 + 0.5, res));
        }
    }
    Ok(rays)
}

/// Text form of a camera: row-major rotation, translation and intrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraManifest {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub fov_deg: f64,
    pub image_size: usize,
}

/// Independent uniform ranges for orbit parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraDistribution {
    pub pitch: Interval,
    pub yaw: Interval,
    pub roll: Interval,
    pub radius: Interval,
    pub look_at_x: Interval,
    pub look_at_y: Interval,
    pub look_at_z: Interval,
    pub fov_deg: f64,
    pub image_size: usize,
}

impl Default for CameraDistribution {
    fn default() -> Self {
        Self {
            pitch: Interval::new(-0.25, 0.65),
            yaw: Interval::new(-0.78, 0.78),
            roll: Interval::new(-0.25, 0.25),
            radius: Interval::new(3.65, 4.45),
            look_at_x: Interval::new(-0.01, 0.01),
            look_at_y: Interval::new(-0.01, 0.01),
            look_at_z: Interval::new(0.02, 0.04),
            fov_deg: 12.0,
            image_size: 512,
        }
    }
}

/// The raw orbit parameters behind one sampled pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbitParams {
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    pub radius: f64,
    pub look_at: Vec3,
}

impl CameraDistribution {
    /// Every range collapsed onto one pose.
    pub fn fixed(params: OrbitParams, fov_deg: f64, image_size: usize) -> Self {
        Self {
            pitch: Interval::point(params.pitch),
            yaw: Interval::point(params.yaw),
            roll: Interval::point(params.roll),
            radius: Interval::point(params.radius),
            look_at_x: Interval::point(params.look_at[0]),
            look_at_y: Interval::point(params.look_at[1]),
            look_at_z: Interval::point(params.look_at[2]),
            fov_deg,
            image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("pitch", &self.pitch),
            ("yaw", &self.yaw),
            ("roll", &self.roll),
            ("radius", &self.radius),
            ("look_at_x", &self.look_at_x),
            ("look_at_y", &self.look_at_y),
            ("look_at_z", &self.look_at_z),
        ];
        for (name, iv) in named {
            iv.validate(name)?;
        }
        let half_pi = std::f64::consts::FRAC_PI_2;
        if self.pitch.lo <= -half_pi || self.pitch.hi >= half_pi {
            return Err(invalid("pitch range must stay inside (-pi/2, pi/2)"));
        }
        if self.radius.lo <= 0.0 {
            return Err(invalid("camera radius must be positive"));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) || self.image_size == 0 {
            return Err(invalid("invalid camera intrinsics"));
        }
        Ok(())
    }

    /// Draws pitch, yaw, roll, radius and the look-at point, in that order.
    pub fn sample_params<R: Rng + ?Sized>(&self, rng: &mut R) -> OrbitParams {
        let pitch = self.pitch.sample(rng);
        let yaw = self.yaw.sample(rng);
        let roll = self.roll.sample(rng);
        let radius = self.radius.sample(rng);
        let look_at = [
            self.look_at_x.sample(rng),
            self.look_at_y.sample(rng),
            self.look_at_z.sample(rng),
        ];
        OrbitParams {
            pitch,
            yaw,
            roll,
            radius,
            look_at,
        }
    }

    pub fn pose(&self, p: &OrbitParams) -> Result<CameraPose> {
        CameraPose::orbit(
            p.look_at,
            p.pitch,
            p.yaw,
            p.roll,
            p.radius,
            self.fov_deg,
            self.image_size,
        )
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("distribution serializes")
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let d: CameraDistribution =
            toml::from_str(text).map_err(|e| format_err(path, e.message().to_string()))?;
        d.validate()?;
        Ok(d)
    }
}

/// Samples one pose from `dist`.
pub fn sample_camera<R: Rng + ?Sized>(dist: &CameraDistribution, rng: &mut R) -> Result<CameraPose> {
    dist.validate()?;
    let p = dist.sample_params(rng);
    dist.pose(&p)
}

/// Frontal camera at the middle of the distribution, looking straight at the
/// center of the look-at box.
pub fn frontal_camera(dist: &CameraDistribution) -> Result<CameraPose> {
    let p = OrbitParams {
        pitch: 0.0,
        yaw: 0.0,
        roll: 0.0,
        radius: dist.radius.midpoint(),
        look_at: [
            dist.look_at_x.midpoint(),
            dist.look_at_y.midpoint(),
            dist.look_at_z.midpoint(),
        ],
    };
    if !dist.pitch.contains(0.0) || !dist.yaw.contains(0.0) {
        return Err(config("frontal camera lies outside the distribution"));
    }
    dist.pose(&p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_distribution_matches_reference_ranges() {
        let d = CameraDistribution::default();
        assert_eq!((d.pitch.lo, d.pitch.hi), (-0.25, 0.65));
        assert_eq!((d.yaw.lo, d.yaw.hi), (-0.78, 0.78));
        assert_eq!((d.roll.lo, d.roll.hi), (-0.25, 0.25));
        assert_eq!((d.radius.lo, d.radius.hi), (3.65, 4.45));
        assert_eq!((d.look_at_x.lo, d.look_at_x.hi), (-0.01, 0.01));
        assert_eq!((d.look_at_y.lo, d.look_at_y.hi), (-0.01, 0.01));
        assert_eq!((d.look_at_z.lo, d.look_at_z.hi), (0.02, 0.04));
        assert_eq!(d.fov_deg, 12.0);
    }

    #[test]
    fn degenerate_distribution_repeats_pose() {
        let p = OrbitParams {
            pitch: 0.1,
            yaw: -0.3,
            roll: 0.05,
            radius: 4.0,
            look_at: [0.0, 0.0, 0.03],
        };
        let d = CameraDistribution::fixed(p, 12.0, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let first = sample_camera(&d, &mut rng).unwrap();
        for _ in 0..10 {
            assert_eq!(sample_camera(&d, &mut rng).unwrap(), first);
        }
    }

    #[test]
    fn orbit_distance_and_orthonormality() {
        let d = CameraDistribution::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p = d.sample_params(&mut rng);
            let cam = d.pose(&p).unwrap();
            let dist = math::norm(math::sub(cam.translation, p.look_at));
            assert!((dist - p.radius).abs() < 1e-9);
            assert!(math::orthonormality_error(&cam.rotation) < 1e-6);
            assert!((math::determinant(&cam.rotation) - 1.0).abs() < 1e-9);
            // optical axis passes through the look-at point
            let proj = cam.project(p.look_at).unwrap();
            assert!((proj.px - 256.0).abs() < 1e-9 && (proj.py - 256.0).abs() < 1e-9);
            assert!((proj.depth - p.radius).abs() < 1e-9);
        }
    }

    #[test]
    fn single_ray_is_optical_axis() {
        let cam = CameraPose::orbit([0.0, 0.0, 0.03], 0.2, 0.4, 0.1, 4.0, 12.0, 64).unwrap();
        let rays = generate_rays(&cam, 1).unwrap();
        assert_eq!(rays.len(), 1);
        let f = cam.forward();
        for (d, f) in rays[0].direction.iter().zip(f) {
            assert!((d - f).abs() < 1e-12);
        }
    }

    #[test]
    fn rays_are_unit_and_center_hits_target() {
        let target = [0.005, -0.002, 0.03];
        let cam = CameraPose::orbit(target, 0.3, -0.5, 0.2, 4.1, 12.0, 64).unwrap();
        let rays = generate_rays(&cam, 33).unwrap();
        for r in &rays {
            assert!((math::norm(r.direction) - 1.0).abs() < 1e-6);
        }
        let center = rays[16 * 33 + 16];
        let t = math::dot(math::sub(target, center.origin), center.direction);
        let closest = center.at(t);
        assert!(math::norm(math::sub(closest, target)) < 1e-9);
    }

    #[test]
    fn projection_round_trip() {
        let cam = CameraPose::orbit([0.0, 0.0, 0.03], -0.1, 0.6, -0.2, 3.9, 12.0, 128).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let px = rng.random_range(0.0..128.0);
            let py = rng.random_range(0.0..128.0);
            let depth = rng.random_range(2.0..6.0);
            let x = cam.unproject(Projection { px, py, depth });
            let p = cam.project(x).unwrap();
            let back = cam.unproject(p);
            assert!(math::norm(math::sub(back, x)) < 1e-5);
            assert!((p.px - px).abs() < 1e-6 && (p.py - py).abs() < 1e-6);
        }
    }

    #[test]
    fn behind_camera_is_an_error() {
        let cam = CameraPose::orbit([0.0; 3], 0.0, 0.0, 0.0, 4.0, 12.0, 64).unwrap();
        let behind = math::add(cam.translation, math::scale(cam.forward(), -1.0));
        assert!(matches!(cam.project(behind), Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let cam = CameraPose::orbit([0.001, 0.0, 0.03], 0.33, -0.21, 0.12, 4.2, 12.0, 64).unwrap();
        let text = cam.to_toml();
        let back = CameraPose::from_toml(&text, Path::new("cam.toml")).unwrap();
        assert_eq!(back, cam);
        assert_eq!(back.to_toml(), text);
        let d = CameraDistribution::default();
        let dt = d.to_toml();
        assert_eq!(CameraDistribution::from_toml(&dt, Path::new("d")).unwrap(), d);
    }

    #[test]
    fn invalid_distribution_rejected() {
        let d = CameraDistribution {
            yaw: Interval::new(0.5, -0.5),
            ..CameraDistribution::default()
        };
        assert!(d.validate().is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_camera(&d, &mut rng).is_err());
    }
}
