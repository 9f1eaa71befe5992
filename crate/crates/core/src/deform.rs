//! Voxel rotation field for neck pose.
//!
//! The field stores one unit quaternion per grid point of a `side³` lattice
//! spanning an axis-aligned box. A query blends the eight surrounding
//! quaternions trilinearly after flipping each onto the hemisphere of the
//! first corner, renormalises, and rotates about the pivot.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{invalid, Result};
use crate::io::{expect_magic, format_err, read_f32, read_f32_vec, read_u32, write_f32, write_f32_slice, write_u32};
use crate::math::{self, Quat, Vec3, QUAT_IDENTITY};

const FIELD_MAGIC: &[u8; 4] = b"ROT1";

pub const DEFAULT_GRID_SIDE: usize = 24;

/// Grid of rotations about a common pivot.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationField {
    side: usize,
    bounds_min: Vec3,
    bounds_max: Vec3,
    pivot: Vec3,
    /// `x` fastest, then `y`, then `z`.
    rotations: Vec<Quat>,
}

/// Blend weight as a function of height above the pivot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Falloff {
    Constant(f64),
    /// 0 below `at`, 1 at or above.
    Step { at: f64 },
    /// Smoothstep from 0 at `low` to 1 at `high`.
    Smoothstep { low: f64, high: f64 },
}

impl Falloff {
    pub fn weight(&self, height: f64) -> f64 {
        match *self {
            Falloff::Constant(w) => w,
            Falloff::Step { at } => {
                if height >= at {
                    1.0
                } else {
                    0.0
                }
            }
            Falloff::Smoothstep { low, high } => {
                let t = ((height - low) / (high - low)).clamp(0.0, 1.0);
                t * t * (3.0 - 2.0 * t)
            }
        }
    }
}

impl RotationField {
    pub fn new(side: usize, bounds_min: Vec3, bounds_max: Vec3, pivot: Vec3, rotations: Vec<Quat>) -> Result<Self> {
        if side < 2 {
            return Err(invalid("rotation grid side must be at least 2"));
        }
        if rotations.len() != side * side * side {
            return Err(invalid(format!(
                "rotation field holds {} quaternions, expected {}",
                rotations.len(),
                side * side * side
            )));
        }
        for k in 0..3 {
            if !(bounds_min[k] < bounds_max[k]) {
                return Err(invalid("rotation field bounds are empty"));
            }
        }
        if !math::is_finite3(pivot) {
            return Err(invalid("pivot must be finite"));
        }
        for q in &rotations {
            if !((math::quat_norm(*q) - 1.0).abs() < 1e-6) {
                return Err(invalid(format!("quaternion {q:?} is not unit-norm")));
            }
        }
        Ok(Self {
            side,
            bounds_min,
            bounds_max,
            pivot,
            rotations,
        })
    }

    pub fn identity(side: usize, pivot: Vec3) -> Result<Self> {
        Self::new(
            side,
            [-1.0; 3],
            [1.0; 3],
            pivot,
            vec![QUAT_IDENTITY; side * side * side],
        )
    }

    /// Constant rotation everywhere.
    pub fn constant(side: usize, pivot: Vec3, q: Quat) -> Result<Self> {
        Self::new(
            side,
            [-1.0; 3],
            [1.0; 3],
            pivot,
            vec![math::quat_normalize(q); side * side * side],
        )
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pivot(&self) -> Vec3 {
        self.pivot
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        (self.bounds_min, self.bounds_max)
    }

    pub fn rotations(&self) -> &[Quat] {
        &self.rotations
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.side + j) * self.side + i
    }

    pub fn grid_point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let s = (self.side - 1) as f64;
        let at = |a: usize, d: usize| {
            self.bounds_min[d] + (self.bounds_max[d] - self.bounds_min[d]) * a as f64 / s
        };
        [at(i, 0), at(j, 1), at(k, 2)]
    }

    pub fn rotation_at(&self, i: usize, j: usize, k: usize) -> Quat {
        self.rotations[self.index(i, j, k)]
    }

    /// Interpolated unit quaternion at `x` (clamped to the grid bounds).
    pub fn quaternion_at(&self, x: Vec3) -> Quat {
        let s = self.side;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for d in 0..3 {
            let g = (x[d] - self.bounds_min[d]) / (self.bounds_max[d] - self.bounds_min[d]) * (s - 1) as f64;
            let g = if g.is_nan() { 0.0 } else { g.clamp(0.0, (s - 1) as f64) };
            let i0 = (g.floor() as usize).min(s - 2);
            base[d] = i0;
            frac[d] = g - i0 as f64;
        }
        let first = self.rotation_at(base[0], base[1], base[2]);
        let mut acc = [0.0f64; 4];
        for corner in 0..8 {
            let (di, dj, dk) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            let w = (if di == 1 { frac[0] } else { 1.0 - frac[0] })
                * (if dj == 1 { frac[1] } else { 1.0 - frac[1] })
                * (if dk == 1 { frac[2] } else { 1.0 - frac[2] });
            let mut q = self.rotation_at(base[0] + di, base[1] + dj, base[2] + dk);
            if math::quat_dot(q, first) < 0.0 {
                q = [-q[0], -q[1], -q[2], -q[3]];
            }
            for c in 0..4 {
                acc[c] += w * q[c];
            }
        }
        math::quat_normalize(acc)
    }

    /// `pivot + q (x − pivot) q⁻¹` with the interpolated rotation at `x`.
    pub fn rotate_point(&self, x: Vec3) -> Vec3 {
        rotate_about(self.quaternion_at(x), self.pivot, x)
    }

    /// Maps an observed (posed) point back into canonical space by applying
    /// the inverse of the rotation found at that point.
    pub fn to_canonical(&self, x: Vec3) -> Vec3 {
        rotate_about(math::quat_conj(self.quaternion_at(x)), self.pivot, x)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 + 36 + self.rotations.len() * 16);
        out.extend_from_slice(FIELD_MAGIC);
        write_u32(&mut out, self.side as u32).expect("vec write");
        for v in self.bounds_min.iter().chain(&self.bounds_max).chain(&self.pivot) {
            write_f32(&mut out, *v).expect("vec write");
        }
        let flat: Vec<f64> = self.rotations.iter().flatten().copied().collect();
        write_f32_slice(&mut out, &flat).expect("vec write");
        out
    }

    pub fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        expect_magic(r, FIELD_MAGIC, path)?;
        let side = read_u32(r).map_err(|_| format_err(path, "truncated header"))? as usize;
        if !(2..=512).contains(&side) {
            return Err(format_err(path, format!("implausible grid side {side}")));
        }
        let mut header = [0.0f64; 9];
        for h in &mut header {
            *h = read_f32(r).map_err(|_| format_err(path, "truncated header"))?;
        }
        let flat = read_f32_vec(r, side * side * side * 4)
            .map_err(|_| format_err(path, "truncated rotation data"))?;
        // Stored as f32, so renormalise on load.
        let rotations = flat
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        Self::new(
            side,
            [header[0], header[1], header[2]],
            [header[3], header[4], header[5]],
            [header[6], header[7], header[8]],
            rotations,
        )
        .map_err(|e| format_err(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f, path)
    }
}

/// Builds a field whose grid rotations interpolate between identity and the
/// full `neck_rotation` (axis-angle) by `falloff(height above pivot)`.
pub fn build_neck_field<F>(side: usize, neck_rotation: Vec3, pivot: Vec3, falloff: F) -> Result<RotationField>
where
    F: Fn(f64) -> f64,
{
    let angle = math::norm(neck_rotation);
    if !angle.is_finite() || angle >= std::f64::consts::PI {
        return Err(invalid(format!("neck rotation magnitude {angle} must be below pi")));
    }
    if side < 2 {
        return Err(invalid("rotation grid side must be at least 2"));
    }
    let template = RotationField::identity(side, pivot)?;
    let mut rotations = Vec::with_capacity(side * side * side);
    for k in 0..side {
        for j in 0..side {
            for i in 0..side {
                let p = template.grid_point(i, j, k);
                let w = falloff(p[1] - pivot[1]);
                if !(0.0..=1.0).contains(&w) {
                    return Err(invalid(format!("falloff produced {w}, outside [0, 1]")));
                }
                // slerp(identity, q, w) is the rotation about the same axis by w·angle
                let q = math::quat_from_axis_angle(math::scale(neck_rotation, w));
                rotations.push(math::quat_normalize(q));
            }
        }
    }
    RotationField::new(side, [-1.0; 3], [1.0; 3], pivot, rotations)
}

fn rotate_about(q: Quat, pivot: Vec3, x: Vec3) -> Vec3 {
    if q == QUAT_IDENTITY {
        return x;
    }
    math::add(pivot, math::quat_rotate(q, math::sub(x, pivot)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_rotation_is_identity_everywhere() {
        let f = build_neck_field(6, [0.0; 3], [0.0, -0.2, 0.0], |h| Falloff::Smoothstep { low: -0.1, high: 0.1 }.weight(h)).unwrap();
        assert!(f.rotations().iter().all(|q| *q == QUAT_IDENTITY));
        let x = [0.3, 0.1, -0.4];
        assert_eq!(f.rotate_point(x), x);
    }

    #[test]
    fn unit_falloff_gives_constant_field() {
        let aa = [0.1, 0.4, -0.2];
        let f = build_neck_field(5, aa, [0.0; 3], |_| 1.0).unwrap();
        let q = math::quat_from_axis_angle(aa);
        for r in f.rotations() {
            for c in 0..4 {
                assert!((r[c] - q[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn step_falloff_matches_per_voxel_construction() {
        let aa = [0.0, 0.5, 0.1];
        let pivot = [0.0, 0.05, 0.0];
        let side = 8;
        let f = build_neck_field(side, aa, pivot, |h| Falloff::Step { at: 0.0 }.weight(h)).unwrap();
        let full = math::quat_from_axis_angle(aa);
        for k in 0..side {
            for j in 0..side {
                for i in 0..side {
                    let y = -1.0 + 2.0 * j as f64 / (side - 1) as f64;
                    let want = if y - pivot[1] >= 0.0 { full } else { QUAT_IDENTITY };
                    assert_eq!(f.rotation_at(i, j, k), want, "voxel {i},{j},{k}");
                }
            }
        }
    }

    #[test]
    fn oversized_rotation_rejected() {
        let r = build_neck_field(4, [0.0, 3.2, 0.0], [0.0; 3], |_| 1.0);
        assert!(matches!(r, Err(crate::Error::InvalidInput(_))));
    }

    #[test]
    fn constant_field_matches_matrix_oracle() {
        let aa = [0.2, -0.3, 0.25];
        let pivot = [0.05, -0.3, 0.1];
        let f = RotationField::constant(DEFAULT_GRID_SIDE, pivot, math::quat_from_axis_angle(aa)).unwrap();
        let m = math::axis_angle_matrix(math::normalize(aa), math::norm(aa));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x = [rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2)];
            let got = f.rotate_point(x);
            let want = math::add(pivot, math::mat_vec(&m, math::sub(x, pivot)));
            assert!(math::norm(math::sub(got, want)) < 1e-6);
        }
    }

    #[test]
    fn grid_point_query_recovers_voxel_quaternion() {
        let f = build_neck_field(6, [0.3, 0.2, 0.0], [0.0; 3], |h| Falloff::Smoothstep { low: -0.5, high: 0.5 }.weight(h)).unwrap();
        let (i, j, k) = (2, 3, 4);
        let q = f.quaternion_at(f.grid_point(i, j, k));
        let want = f.rotation_at(i, j, k);
        for c in 0..4 {
            assert!((q[c] - want[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn canonical_mapping_inverts_rotation() {
        let f = RotationField::constant(4, [0.1, 0.0, 0.0], math::quat_from_axis_angle([0.0, 0.4, 0.0])).unwrap();
        let x = [0.3, 0.2, -0.1];
        let back = f.to_canonical(f.rotate_point(x));
        assert!(math::norm(math::sub(back, x)) < 1e-12);
    }

    #[test]
    fn file_round_trip() {
        let f = build_neck_field(4, [0.1, 0.2, 0.3], [0.0, -0.25, 0.0], |h| Falloff::Smoothstep { low: -0.1, high: 0.2 }.weight(h)).unwrap();
        let bytes = f.to_bytes();
        assert_eq!(&bytes[..4], b"ROT1");
        assert_eq!(bytes.len(), 4 + 4 + 9 * 4 + 64 * 16);
        let back = RotationField::read_from(&mut bytes.as_slice(), Path::new("f")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
    }
}
