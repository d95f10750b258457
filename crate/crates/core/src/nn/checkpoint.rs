//! Checkpoint file for [`MlpTransform`] (little-endian):
//!
//! ```text
//! magic "BMCK" | version u16 = 1 | blocks u32 | bn_momentum f64 | bn_eps f64
//! blocks × ( d_in u32 | d_out u32 | has_norm u8 )
//! per block: weight (d_out·d_in f64, row-major) | bias (d_out f64)
//!            [ gamma | beta | running_mean | running_var ] (d_out f64 each)
//! ```

use std::fs;
use std::path::Path;

use super::matrix::Matrix;
use super::mlp::{BatchNorm, BatchNormConfig, Block, MlpTransform, Mode};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

impl MlpTransform {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blocks().len() as u32).to_le_bytes());
        out.extend_from_slice(&self.norm_config().momentum.to_le_bytes());
        out.extend_from_slice(&self.norm_config().eps.to_le_bytes());
        for b in self.blocks() {
            out.extend_from_slice(&(b.d_in() as u32).to_le_bytes());
            out.extend_from_slice(&(b.d_out() as u32).to_le_bytes());
            out.push(b.norm.is_some() as u8);
        }
        let mut put = |vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for b in self.blocks() {
            put(b.weight.as_slice());
            put(&b.bias);
            if let Some(n) = &b.norm {
                put(&n.gamma);
                put(&n.beta);
                put(&n.running_mean);
                put(&n.running_var);
            }
        }
        out
    }

    /// Loads a checkpoint; the network comes back in eval mode.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        if count == 0 || count > super::mlp::MAX_BLOCKS {
            return Err(Error::invalid(format!("checkpoint declares {count} blocks")));
        }
        let norm = BatchNormConfig {
            momentum: r.f64()?,
            eps: r.f64()?,
        };
        let mut dims = Vec::with_capacity(count);
        for _ in 0..count {
            let d_in = r.u32()? as usize;
            let d_out = r.u32()? as usize;
            let has_norm = r.take(1)?[0] != 0;
            dims.push((d_in, d_out, has_norm));
        }
        let mut blocks = Vec::with_capacity(count);
        for (d_in, d_out, has_norm) in dims {
            let weight = Matrix::from_vec(d_out, d_in, r.f64s(d_out * d_in)?)?;
            let bias = r.f64s(d_out)?;
            let norm = if has_norm {
                Some(BatchNorm {
                    gamma: r.f64s(d_out)?,
                    beta: r.f64s(d_out)?,
                    running_mean: r.f64s(d_out)?,
                    running_var: r.f64s(d_out)?,
                })
            } else {
                None
            };
            blocks.push(Block { weight, bias, norm });
        }
        if r.pos != bytes.len() {
            return Err(Error::PayloadSize {
                expected: r.pos as u64,
                actual: bytes.len() as u64,
            });
        }
        let mut net = MlpTransform::from_blocks(blocks, norm)?;
        net.set_mode(Mode::Eval);
        Ok(net)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::PayloadSize {
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::invalid("size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
