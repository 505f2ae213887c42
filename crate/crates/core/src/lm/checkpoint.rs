//! Binary checkpoint format.
//!
//! ```text
//! "JPU1" | version: u8 | header_len: u32 | header: key=value text
//!        | tensor_count: u32
//!        | per tensor: name_len: u16, name, rank: u8, dims: u32 * rank, count: u64
//!        | per tensor, in manifest order: count little-endian f32 values
//! ```
//!
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::net::ModelState;
use super::params::Params;
use crate::error::{JpuError, Result};

pub const MAGIC: &[u8; 4] = b"JPU1";
pub const FORMAT_VERSION: u8 = 1;

fn bad(msg: impl Into<String>) -> JpuError {
    JpuError::Parse { line: 0, msg: msg.into() }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad(format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl ModelState {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        let header = format!("{}step_counter={}\n", self.config.to_kv(), self.step_counter);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let tensors = self.params.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &dim in &t.shape {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            out.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
        }
        for t in &tensors {
            for &x in t.data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(buf: &[u8]) -> Result<ModelState> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("missing JPU1 magic"));
        }
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?).map_err(|_| bad("header is not UTF-8"))?;
        let mut step_counter = 0;
        let mut cfg_text = String::new();
        for line in header.lines() {
            match line.strip_prefix("step_counter=") {
                Some(v) => step_counter = v.parse().map_err(|_| bad("bad step_counter"))?,
                None => {
                    cfg_text.push_str(line);
                    cfg_text.push('\n');
                }
            }
        }
        let config = ModelConfig::from_kv(&cfg_text)?;
        let mut params = Params::zeros(&config);
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| bad("tensor name is not UTF-8"))?.to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let elems = r.u64()? as usize;
            if shape.iter().product::<usize>() != elems {
                return Err(bad(format!("{name}: shape {shape:?} does not hold {elems} elements")));
            }
            manifest.push((name, shape, elems));
        }
        let mut slots = params.tensors_mut();
        if slots.len() != manifest.len() {
            return Err(bad(format!("expected {} tensors, found {}", slots.len(), manifest.len())));
        }
        for (slot, (name, shape, elems)) in slots.iter_mut().zip(&manifest) {
            if &slot.name != name || &slot.shape != shape {
                return Err(bad(format!("tensor {name} {shape:?} does not match expected {} {:?}", slot.name, slot.shape)));
            }
            let raw = r.take(elems * 4)?;
            for (dst, chunk) in slot.data.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
        }
        if r.pos != buf.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(ModelState { config, params, step_counter })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
        ModelState::from_checkpoint_bytes(&fs::read(path)?)
    }
}
