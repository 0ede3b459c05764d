//! `MVC1` checkpoint files.
//!
//! ```text
//! "MVC1"  u16 version
//! u32 n   n × tensor            parameters
//! u32 n   n × tensor            optimizer state
//! u32 len len bytes UTF-8 JSON  config, epoch, rng state, best-so-far
//! tensor := u16 name_len, name, u8 rank, rank × u32 dims, f64 LE data
//! ```
//!
//! All integers are little-endian. Loading validates everything before
//! building the result, so a bad file never yields partial state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, ParamSet};
use crate::numerics::{Rng, RngState};
use crate::optim::{Optimizer, StateTensor};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"MVC1";
pub const VERSION: u16 = 1;

/// Best validation result seen so far.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestSoFar {
    pub epoch: usize,
    pub mean_r1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub optimizer: Optimizer,
    pub config: TrainConfig,
    pub arch: Architecture,
    /// Completed epochs.
    pub epoch: usize,
    /// Batch-sampler generator state after `epoch` epochs.
    pub rng: RngState,
    pub best: Option<BestSoFar>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Trailer {
    config: TrainConfig,
    arch: Architecture,
    epoch: usize,
    rng: RngState,
    best: Option<BestSoFar>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    let name_len = u16::try_from(name.len()).expect("tensor name fits u16");
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(u8::try_from(dims.len()).expect("rank fits u8"));
    for &d in dims {
        out.extend_from_slice(&u32::try_from(d).expect("dim fits u32").to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let tensors = self.params.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            put_tensor(&mut out, &t.name, &t.dims, t.data);
        }
        let state = self.optimizer.state_tensors(&self.params);
        out.extend_from_slice(&(state.len() as u32).to_le_bytes());
        for (name, dims, data) in &state {
            put_tensor(&mut out, name, dims, data);
        }
        let trailer = serde_json::to_vec(&Trailer {
            config: self.config.clone(),
            arch: self.arch.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            best: self.best,
        })?;
        out.extend_from_slice(&(trailer.len() as u32).to_le_bytes());
        out.extend_from_slice(&trailer);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.fail_at(0, "bad magic, expected MVC1"));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(r.fail_at(4, format!("unsupported version {version}")));
        }
        let params = r.tensor_list("parameter")?;
        let state = r.tensor_list("optimizer")?;
        let trailer_at = r.pos;
        let len = r.u32("trailer length")? as usize;
        let json = r.take(len, "trailer")?;
        if r.pos != bytes.len() {
            return Err(r.fail_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let trailer: Trailer = serde_json::from_slice(json)
            .map_err(|e| r.fail_at(trailer_at + 4, format!("trailer: {e}")))?;
        trailer.config.validate().map_err(|e| r.fail_at(trailer_at + 4, e.to_string()))?;

        // Shapes come from the architecture; the values are overwritten.
        let mut p = ParamSet::init(&trailer.arch, &mut Rng::new(0))
            .map_err(|e| r.fail_at(trailer_at + 4, e.to_string()))?;
        p.load_tensors(&params.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>())
            .map_err(|e| r.fail_at(params.first().map_or(10, |(at, _)| *at), e.to_string()))?;
        let state_tensors: Vec<StateTensor> = state.iter().map(|(_, t)| t.clone()).collect();
        let optimizer = Optimizer::from_state(trailer.config.optimizer, &p, &state_tensors)
            .map_err(|e| r.fail_at(state.first().map_or(trailer_at, |(at, _)| *at), e.to_string()))?;
        Rng::from_state(&trailer.rng).map_err(|e| r.fail_at(trailer_at + 4, e.to_string()))?;
        Ok(Checkpoint {
            params: p,
            optimizer,
            config: trailer.config,
            arch: trailer.arch,
            epoch: trailer.epoch,
            rng: trailer.rng,
            best: trailer.best,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail_at(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail_at(
                self.bytes.len(),
                format!("truncated while reading {what} ({n} bytes needed at {})", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    /// Tensors with their start offsets.
    fn tensor_list(&mut self, what: &str) -> Result<Vec<(usize, StateTensor)>> {
        let count = self.u32(&format!("{what} tensor count"))? as usize;
        let mut out = Vec::new();
        for i in 0..count {
            let at = self.pos;
            let name_len = self.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(self.take(name_len, "tensor name")?)
                .map_err(|_| self.fail_at(at + 2, format!("{what} tensor {i}: name is not UTF-8")))?
                .to_string();
            let rank = self.take(1, "tensor rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(self.u32("tensor dim")? as usize);
            }
            let n: usize = dims.iter().product();
            let data_at = self.pos;
            let raw = self.take(n.checked_mul(8).ok_or_else(|| self.fail_at(at, "tensor too large"))?, "tensor data")?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if let Some(k) = data.iter().position(|v| !v.is_finite()) {
                return Err(self.fail_at(data_at + 8 * k, format!("non-finite value in {name}")));
            }
            out.push((at, (name, dims, data)));
        }
        Ok(out)
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = c.to_bytes()?;
    // Write-then-rename so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Largest absolute per-tensor difference between two parameter sets with
/// the same layout, as `(name, max |a − b|)`.
pub fn param_diff(a: &ParamSet, b: &ParamSet) -> Result<Vec<(String, f64)>> {
    let (ta, tb) = (a.tensors(), b.tensors());
    if ta.len() != tb.len() {
        return Err(Error::Invalid(format!("{} vs {} tensors", ta.len(), tb.len())));
    }
    ta.iter()
        .zip(&tb)
        .map(|(x, y)| {
            if x.name != y.name || x.dims != y.dims {
                return Err(Error::Invalid(format!(
                    "tensor {} {:?} vs {} {:?}",
                    x.name, x.dims, y.name, y.dims
                )));
            }
            let d = x.data.iter().zip(y.data).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            Ok((x.name.clone(), d))
        })
        .collect()
}
