use std::io::{ErrorKind, Read, Write};
use std::path::Path;

use crate::error::Result;
use crate::io::{expect_magic, format_err, read_f32_vec, read_u32, write_f32_slice, write_u32};

use super::model::{Mode, ToyConfig, ToyReconstructor};
use super::params::ParameterSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const META: &str = "meta.config";

/// Serialises `tensors` as `CKPT`, version, then name/rank/dims/f32 records.
pub fn write_tensors<W: Write>(w: &mut W, tensors: &ParameterSet) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(w, CHECKPOINT_VERSION)?;
    for t in tensors.iter() {
        write_u32(w, t.name.len() as u32)?;
        w.write_all(t.name.as_bytes())?;
        write_u32(w, t.shape.len() as u32)?;
        for d in &t.shape {
            write_u32(w, *d as u32)?;
        }
        write_f32_slice(w, &t.data)?;
    }
    Ok(())
}

/// Reads records until end of input.
pub fn read_tensors<R: Read>(r: &mut R, path: &Path) -> Result<ParameterSet> {
    expect_magic(r, CHECKPOINT_MAGIC, path)?;
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(path, format!("unsupported checkpoint version {version}")));
    }
    let mut set = ParameterSet::new();
    loop {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(len) as usize;
        if len > 4096 {
            return Err(format_err(path, format!("tensor name length {len} is implausible")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| format_err(path, "tensor name is not UTF-8"))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(format_err(path, format!("tensor `{name}` has rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let data = read_f32_vec(r, numel).map_err(|_| format_err(path, format!("tensor `{name}` is truncated")))?;
        set.insert(name, shape, data)
            .map_err(|e| format_err(path, e.to_string()))?;
    }
    Ok(set)
}

fn meta_values(config: &ToyConfig, mode: Mode) -> Vec<f64> {
    vec![
        config.image_side as f64,
        config.patch as f64,
        config.dim as f64,
        config.blocks as f64,
        config.split as f64,
        config.motion_dim as f64,
        config.ff_dim as f64,
        config.triplane_res as f64,
        config.triplane_channels as f64,
        config.head_init,
        match mode {
            Mode::ThreeD => 0.0,
            Mode::FourD => 1.0,
        },
    ]
}

impl ToyReconstructor {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut set = ParameterSet::new();
        let meta = meta_values(self.config(), self.mode());
        set.insert(META, vec![meta.len()], meta).expect("meta shape");
        for t in self.params().iter() {
            set.insert(t.name.clone(), t.shape.clone(), t.data.clone()).expect("tensor shape");
        }
        let mut out = Vec::new();
        write_tensors(&mut out, &set).expect("writing to memory");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut set = read_tensors(&mut &bytes[..], path)?;
        let meta = set
            .get(META)
            .ok_or_else(|| format_err(path, "checkpoint lacks its configuration record"))?
            .data
            .clone();
        if meta.len() != 11 {
            return Err(format_err(path, "configuration record has the wrong length"));
        }
        let u = |v: f64| v as usize;
        let config = ToyConfig {
            image_side: u(meta[0]),
            patch: u(meta[1]),
            dim: u(meta[2]),
            blocks: u(meta[3]),
            split: u(meta[4]),
            motion_dim: u(meta[5]),
            ff_dim: u(meta[6]),
            triplane_res: u(meta[7]),
            triplane_channels: u(meta[8]),
            head_init: meta[9],
        };
        let mode = if meta[10] == 0.0 { Mode::ThreeD } else { Mode::FourD };
        let mut params = ParameterSet::new();
        for t in set.iter_mut().filter(|t| t.name != META) {
            params.insert(t.name.clone(), t.shape.clone(), std::mem::take(&mut t.data))?;
        }
        Self::from_parts(config, mode, params).map_err(|e| format_err(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint_bytes(&bytes, path)
    }
}
