//! Bit-exact checkpoint format.
//!
//! Layout: magic "MXAC", version u32 LE, tensor count u32 LE, then per
//! tensor (registration order): name length u16 LE + UTF-8 name, rank u8,
//! dims as u64 LE, dtype code u8 (0 = f64), raw little-endian IEEE-754
//! payload. After the tensors, the model config as a u32-length-prefixed
//! UTF-8 JSON blob.

use std::io::Read;
use std::path::Path;

use super::{ModelConfig, MultiExitModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MXAC";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn write_checkpoint_bytes(model: &MultiExitModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("parameter name too long: {}", p.name)));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(DTYPE_F64);
        for &v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let cfg_json =
        serde_json::to_vec(&model.cfg).map_err(|e| Error::Format(format!("config encode: {e}")))?;
    out.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg_json);
    Ok(out)
}

pub fn save_checkpoint(model: &MultiExitModel, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint_bytes(model)?)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<MultiExitModel> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    load_checkpoint_bytes(&buf)
}

pub(crate) fn load_checkpoint_bytes(buf: &[u8]) -> Result<MultiExitModel> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("non-UTF-8 tensor name".into()))?;
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let dtype = cur.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    let cfg_len = cur.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(cur.take(cfg_len)?)
        .map_err(|e| Error::Format(format!("config decode: {e}")))?;
    if cur.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }

    let mut model = MultiExitModel::new(cfg, 0)?;
    if model.params.len() != tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            model.params.len()
        )));
    }
    for (i, (name, shape, data)) in tensors.into_iter().enumerate() {
        let p = model.params.get_mut(super::PId(i));
        if p.name != name || p.shape != shape {
            return Err(Error::Format(format!(
                "tensor {i} mismatch: checkpoint {name} {shape:?}, model {} {:?}",
                p.name, p.shape
            )));
        }
        p.data = data;
    }
    Ok(model)
}
