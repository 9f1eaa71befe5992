use crate::error::{config, Result};

/// Square RGB image, row-major from the top-left pixel, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if side == 0 || data.len() != side * side * 3 {
            return Err(config(format!(
                "image of side {side} needs {} values, got {}",
                side * side * 3,
                data.len()
            )));
        }
        Ok(Self { side, data })
    }

    pub fn zeros(side: usize) -> Self {
        Self {
            side,
            data: vec![0.0; side * side * 3],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.side + col) * 3;
        &self.data[i..i + 3]
    }

    /// Box average over `factor × factor` blocks.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || !self.side.is_multiple_of(factor) {
            return Err(config(format!(
                "cannot downsample side {} by {factor}",
                self.side
            )));
        }
        let out = self.side / factor;
        let norm = 1.0 / (factor * factor) as f64;
        let mut data = vec![0.0; out * out * 3];
        for r in 0..self.side {
            for c in 0..self.side {
                let o = ((r / factor) * out + c / factor) * 3;
                let i = (r * self.side + c) * 3;
                for k in 0..3 {
                    data[o + k] += self.data[i + k];
                }
            }
        }
        for v in &mut data {
            *v *= norm;
        }
        Ok(Image { side: out, data })
    }

    /// Mean absolute difference over all values.
    pub fn l1(&self, other: &Image) -> Result<f64> {
        if self.side != other.side {
            return Err(config(format!(
                "image sides differ: {} vs {}",
                self.side, other.side
            )));
        }
        let total: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        Ok(total / self.data.len() as f64)
    }

    /// 8-bit quantisation, `round(255 · clamp(v, 0, 1))`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(side: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(side, bytes.iter().map(|b| *b as f64 / 255.0).collect())
    }
}
