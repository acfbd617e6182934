//! Binary parameter container.
//!
//! Layout (little-endian): `b"ADE1"`, `u32` record count, then per record
//! `u32` name length, name bytes (UTF-8), `u32` rank, `rank × u64` dims,
//! `u64` value count, `count × f64`.

use std::path::Path;

use super::{ModelConfig, NeuralError, ParamSet, Tensor};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"ADE1";
pub const PARAMS_FILE: &str = "params.bin";
pub const CONFIG_FILE: &str = "config.json";

pub fn encode_params(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NeuralError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| NeuralError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NeuralError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NeuralError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamSet, NeuralError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NeuralError::Checkpoint("bad magic".into()));
    }
    let n = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| NeuralError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let count = r.u64()? as usize;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| NeuralError::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| NeuralError::Checkpoint(format!("{name}: {e}")))?;
        params
            .insert(name, t)
            .map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(NeuralError::Checkpoint("trailing bytes".into()));
    }
    Ok(params)
}

fn io_err(path: &Path, source: std::io::Error) -> NeuralError {
    NeuralError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `params.bin` and `config.json` into `dir`.
pub fn save_checkpoint(dir: &Path, params: &ParamSet, config: &ModelConfig) -> Result<(), NeuralError> {
    let p = dir.join(PARAMS_FILE);
    write_atomic(&p, &encode_params(params)).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    let c = dir.join(CONFIG_FILE);
    let json = serde_json::to_vec_pretty(config).expect("config serializes");
    write_atomic(&c, &json).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamSet, ModelConfig), NeuralError> {
    let p = dir.join(PARAMS_FILE);
    let bytes = std::fs::read(&p).map_err(|e| io_err(&p, e))?;
    let params = decode_params(&bytes)?;
    let c = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&c).map_err(|e| io_err(&c, e))?;
    let config = serde_json::from_str(&text).map_err(|e| NeuralError::Checkpoint(format!("{}: {e}", c.display())))?;
    Ok((params, config))
}
