//! Versioned binary checkpoints of masked MLPs.
//!
//! All integers and floats are little-endian.
//!
//! | offset | size        | field                                    |
//! |--------|-------------|------------------------------------------|
//! | 0      | 8           | magic `b"SDDCKPT\0"`                     |
//! | 8      | 4           | format version, `u32` = 1                |
//! | 12     | 32          | SHA-256 of the run config (zeros if none)|
//! | 44     | 4           | layer count `L`, `u32`                   |
//!
//! followed by `L` layer records:
//!
//! | size          | field                              |
//! |---------------|------------------------------------|
//! | 4             | `out`, `u32`                       |
//! | 4             | `in`, `u32`                        |
//! | 1             | activation: 0 = none, 1 = relu     |
//! | 8 · out · in  | weights, `f64`, row-major          |
//! | 8 · out       | biases, `f64`                      |
//! | out · in      | mask bytes, 0 or 1                 |
//!
//! Floats are stored bit for bit, so a save/load round trip is exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Activation, DenseLayer, MlpModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SDDCKPT\0";
pub const VERSION: u32 = 1;

pub type ConfigHash = [u8; 32];

pub fn to_bytes(model: &MlpModel, config_hash: &ConfigHash) -> Vec<u8> {
    let mut buf = Vec::with_capacity(48 + model.parameter_count() * 9);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(config_hash);
    buf.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        buf.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
        buf.push(match layer.activation() {
            Activation::None => 0,
            Activation::Relu => 1,
        });
        for w in layer.weight().data() {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        for b in layer.bias().data() {
            buf.extend_from_slice(&b.to_le_bytes());
        }
        buf.extend(layer.mask().iter().map(|&m| m as u8));
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!(
                "truncated at byte {}, needed {n} more of {}",
                self.pos,
                self.bytes.len()
            )),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        Ok(self
            .take(n.checked_mul(8).ok_or("size overflow")?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<(MlpModel, ConfigHash), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let hash: ConfigHash = r.take(32)?.try_into().expect("32 bytes");
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let out = r.u32()? as usize;
        let inp = r.u32()? as usize;
        let activation = match r.take(1)?[0] {
            0 => Activation::None,
            1 => Activation::Relu,
            a => return Err(format!("unknown activation tag {a}")),
        };
        let n = out.checked_mul(inp).ok_or("size overflow")?;
        let weight = Tensor::new(vec![out, inp], r.f64s(n)?).map_err(|e| e.to_string())?;
        let bias = Tensor::new(vec![out], r.f64s(out)?).map_err(|e| e.to_string())?;
        let mask = r
            .take(n)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(format!("mask byte {b} is not 0 or 1")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        layers.push(DenseLayer::new(weight, bias, mask, activation).map_err(|e| e.to_string())?);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let model = MlpModel::from_layers(layers).map_err(|e| e.to_string())?;
    Ok((model, hash))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(MlpModel, ConfigHash)> {
    parse(bytes).map_err(|reason| Error::Checkpoint {
        path: "<memory>".into(),
        reason,
    })
}

pub fn save(path: &Path, model: &MlpModel, config_hash: &ConfigHash) -> Result<()> {
    fs::write(path, to_bytes(model, config_hash)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(MlpModel, ConfigHash)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}
