//! Binary model files.
//!
//! Layout, all integers little-endian `u32`, all reals little-endian `f64`:
//!
//! ```text
//! "CMSC" | version | S | M | channels | k1 | k2 | slope:f64 | flags:u8
//! tensor_count
//! repeated: name_len | name bytes (UTF-8) | rank | dims[rank] | values[Π dims]
//! ```
//!
//! Flags: bit 0 residual-features learning, bit 1 cascaded supervision,
//! bit 2 shared reconstruction. The directory holds every tensor of
//! [`CmscModel::params`], including batch-norm running statistics.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{CmscModel, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CMSC";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_RFL: u8 = 1;
const FLAG_CASCADED: u8 = 1 << 1;
const FLAG_SHARED_RECON: u8 = 1 << 2;

pub fn model_to_bytes(model: &CmscModel) -> Vec<u8> {
    let mut out = Vec::new();
    let c = &model.config;
    out.extend_from_slice(MAGIC);
    for v in [
        FORMAT_VERSION,
        c.stages as u32,
        c.modules_per_stage as u32,
        c.channels as u32,
        c.k1 as u32,
        c.k2 as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&c.leaky_slope.to_le_bytes());
    let mut flags = 0u8;
    if c.use_rfl {
        flags |= FLAG_RFL;
    }
    if c.use_cascaded_supervision {
        flags |= FLAG_CASCADED;
    }
    if c.share_reconstruction {
        flags |= FLAG_SHARED_RECON;
    }
    out.push(flags);

    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.dims.len() as u32).to_le_bytes());
        for d in &p.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in p.values {
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
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::ModelFormat(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<CmscModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::ModelFormat("bad magic, not a CMSC model file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let stages = r.u32("stage count")? as usize;
    let modules_per_stage = r.u32("module count")? as usize;
    let channels = r.u32("channel count")? as usize;
    let k1 = r.u32("k1")? as usize;
    let k2 = r.u32("k2")? as usize;
    let leaky_slope = r.f64("slope")?;
    let flags = r.u8("flags")?;
    if flags & !(FLAG_RFL | FLAG_CASCADED | FLAG_SHARED_RECON) != 0 {
        return Err(Error::ModelFormat(format!("unknown flag bits {flags:#04x}")));
    }
    let config = ModelConfig {
        stages,
        modules_per_stage,
        channels,
        k1,
        k2,
        leaky_slope,
        use_rfl: flags & FLAG_RFL != 0,
        use_cascaded_supervision: flags & FLAG_CASCADED != 0,
        share_reconstruction: flags & FLAG_SHARED_RECON != 0,
    };
    config
        .validate()
        .map_err(|e| Error::ModelFormat(format!("invalid config block: {e}")))?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::ModelFormat("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::ModelFormat(format!("tensor {name} is too large")))?;
        let raw = r.take(n.saturating_mul(8), &format!("values of {name}"))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), (dims, values)).is_some() {
            return Err(Error::ModelFormat(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::ModelFormat(format!(
            "{} trailing bytes after tensor directory",
            bytes.len() - r.pos
        )));
    }

    let stored: u128 = tensors.values().map(|(_, v)| v.len() as u128).sum();
    let needed = scalar_total(&config);
    if needed != stored {
        return Err(Error::ModelFormat(format!(
            "config block implies {needed} stored values, file has {stored}"
        )));
    }
    let mut model = CmscModel::new(config)?;
    let expected = model.params().len();
    if expected != tensors.len() {
        return Err(Error::ModelFormat(format!(
            "expected {expected} tensors, file has {}",
            tensors.len()
        )));
    }
    for p in model.params_mut() {
        let (dims, values) = tensors
            .remove(&p.name)
            .ok_or_else(|| Error::ModelFormat(format!("missing tensor {}", p.name)))?;
        if dims != p.dims {
            return Err(Error::ModelFormat(format!(
                "tensor {} has dims {:?}, expected {:?}",
                p.name, dims, p.dims
            )));
        }
        p.values.copy_from_slice(&values);
    }
    Ok(model)
}

/// Scalars stored for `config`, including running statistics. Checked before
/// allocating so a forged header cannot request an enormous model.
fn scalar_total(c: &ModelConfig) -> u128 {
    let ch = c.channels as u128;
    let (s, m) = (c.stages as u128, c.modules_per_stage as u128);
    let unit = |cin: u128, k: u128| {
        cin.saturating_mul(ch)
            .saturating_mul(k.saturating_mul(k))
            .saturating_add(5 * ch)
    };
    let module = unit(ch, c.k1 as u128)
        .saturating_add(unit(ch, c.k2 as u128))
        .saturating_mul(2);
    let stage = unit(ch, 3).saturating_add(m.saturating_mul(module));
    let recon = if c.share_reconstruction { 1 } else { s };
    unit(1, 3)
        .saturating_add(s.saturating_mul(stage))
        .saturating_add(recon.saturating_mul(ch * 9 + 1))
        .saturating_add(s)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_model(model: &CmscModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &model_to_bytes(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CmscModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

/// Writes `bytes` to a hidden sibling file, syncs it, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
