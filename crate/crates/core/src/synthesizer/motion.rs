use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{config, Result};
use crate::image::Image;

/// Compact motion descriptor `v` of dimension `d_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionEmbedding(Vec<f64>);

impl MotionEmbedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(config("motion embedding must be non-empty and finite"));
        }
        Ok(Self(v))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Fixed random linear projection of a box-downsampled image.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionStub {
    grid: usize,
    dim: usize,
    /// `(grid² · 3) × dim`, row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl MotionStub {
    /// `grid` is the side of the downsampled image fed to the projection.
    pub fn new(grid: usize, dim: usize, seed: u64) -> Result<Self> {
        if grid == 0 || dim == 0 {
            return Err(config("motion stub needs a positive grid and dimension"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = grid * grid * 3;
        let std = (1.0 / inputs as f64).sqrt();
        let weight = (0..inputs * dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let bias = (0..dim)
            .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self {
            grid,
            dim,
            weight,
            bias,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Row of the projection for downsampled input index `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weight[i * self.dim..(i + 1) * self.dim]
    }

    pub fn embed(&self, image: &Image) -> Result<MotionEmbedding> {
        if !image.side().is_multiple_of(self.grid) {
            return Err(config(format!(
                "image side {} is not a multiple of the motion grid {}",
                image.side(),
                self.grid
            )));
        }
        let small = image.downsample(image.side() / self.grid)?;
        let mut out = vec![0.0; self.dim];
        for (i, &x) in small.data().iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += x * w;
            }
        }
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        Ok(MotionEmbedding(out))
    }
}
