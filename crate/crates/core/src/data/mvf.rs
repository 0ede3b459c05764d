//! `MVF1` token-feature files and their JSON manifests.
//!
//! ```text
//! "MVF1"  u32 version (=1)  u32 count
//! count × { u32 L  u32 D  L·D × f32 }      all little-endian, row-major
//! ```
//!
//! Values are stored as `f32` and widened to `f64` on load. The manifest maps
//! dataset records onto feature indices:
//!
//! ```json
//! {"images":[{"id":0,"feature_index":0}],
//!  "captions":[{"id":0,"image_id":0,"feature_index":1,"text":"..."}]}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CaptionRecord, Dataset, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::head::TokenFeatures;
use crate::numerics::Matrix;

pub const MVF_MAGIC: &[u8; 4] = b"MVF1";
pub const MVF_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub images: Vec<ManifestImage>,
    pub captions: Vec<ManifestCaption>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub id: u64,
    pub feature_index: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCaption {
    pub id: u64,
    pub image_id: u64,
    pub feature_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

pub fn encode_mvf(instances: &[&Matrix]) -> Vec<u8> {
    let payload: usize = instances.iter().map(|m| 8 + 4 * m.data().len()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MVF_MAGIC);
    out.extend_from_slice(&MVF_VERSION.to_le_bytes());
    out.extend_from_slice(&(instances.len() as u32).to_le_bytes());
    for m in instances {
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for &v in m.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, at: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: at as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(
                self.bytes.len(),
                format!("truncated while reading {what} ({n} bytes needed at {})", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_mvf(bytes: &[u8], path: &Path) -> Result<Vec<Matrix>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let magic = cur.take(4, "magic")?;
    if magic != MVF_MAGIC {
        return Err(cur.err(0, format!("bad magic {magic:?}, expected \"MVF1\"")));
    }
    let version = cur.u32("version")?;
    if version != MVF_VERSION {
        return Err(cur.err(4, format!("unsupported version {version}")));
    }
    let count = cur.u32("instance count")?;
    let mut out = Vec::with_capacity(count.min(1 << 20) as usize);
    for i in 0..count {
        let at = cur.pos;
        let rows = cur.u32("row count")? as usize;
        let cols = cur.u32("column count")? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| cur.err(at, format!("instance {i}: {rows}x{cols} overflows")))?;
        let raw = cur.take(n, &format!("instance {i} data"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for (k, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(cur.err(at + 8 + 4 * k, format!("instance {i}: non-finite value {v}")));
            }
            data.push(f64::from(v));
        }
        out.push(Matrix::from_vec(rows, cols, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(cur.err(cur.pos, format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(out)
}

pub fn write_mvf(path: &Path, instances: &[&Matrix]) -> Result<()> {
    fs::write(path, encode_mvf(instances)).map_err(|e| Error::io(path, e))
}

pub fn read_mvf(path: &Path) -> Result<Vec<Matrix>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mvf(&bytes, path)
}

pub fn features_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.mvf", split.name()))
}

pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.json", split.name()))
}

/// Writes `<split>.mvf` (images first, then captions) and `<split>.json`.
pub fn save_split(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut matrices: Vec<&Matrix> = Vec::with_capacity(ds.images().len() + ds.captions().len());
    let mut manifest = Manifest {
        images: Vec::with_capacity(ds.images().len()),
        captions: Vec::with_capacity(ds.captions().len()),
    };
    for img in ds.images() {
        manifest.images.push(ManifestImage {
            id: img.id,
            feature_index: matrices.len() as u32,
        });
        matrices.push(&img.features.tokens);
    }
    for cap in ds.captions() {
        manifest.captions.push(ManifestCaption {
            id: cap.id,
            image_id: cap.image_id,
            feature_index: matrices.len() as u32,
            text: cap.text.clone(),
        });
        matrices.push(&cap.features.tokens);
    }
    write_mvf(&features_path(dir, ds.split), &matrices)?;
    let mpath = manifest_path(dir, ds.split);
    let mut json = serde_json::to_vec(&manifest)?;
    json.push(b'\n');
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))
}

/// Reads a feature file and manifest into a dataset. Features are used
/// exactly as stored.
pub fn load_features(feature_path: &Path, manifest_path: &Path, split: Split) -> Result<Dataset> {
    let features = read_mvf(feature_path)?;
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.to_path_buf(),
        entry: format!("line {} column {}", e.line(), e.column()),
        detail: e.to_string(),
    })?;
    let manifest_err = |entry: String, detail: String| Error::Manifest {
        path: manifest_path.to_path_buf(),
        entry,
        detail,
    };
    let fetch = |entry: String, index: u32, expected_dim: &mut Option<usize>, id: u64| {
        let m = features.get(index as usize).ok_or_else(|| {
            manifest_err(
                entry.clone(),
                format!("feature_index {index} out of range ({} instances in file)", features.len()),
            )
        })?;
        if m.rows() == 0 {
            return Err(manifest_err(entry, format!("feature {index} has no tokens")));
        }
        match *expected_dim {
            None => *expected_dim = Some(m.cols()),
            Some(d) if d != m.cols() => {
                return Err(manifest_err(
                    entry,
                    format!("feature {index} has width {}, other entries have {d}", m.cols()),
                ))
            }
            _ => {}
        }
        TokenFeatures::new(id, m.clone())
    };

    let mut image_dim = None;
    let mut images = Vec::with_capacity(manifest.images.len());
    for (i, e) in manifest.images.iter().enumerate() {
        let features = fetch(format!("images[{i}]"), e.feature_index, &mut image_dim, e.id)?;
        images.push(ImageRecord { id: e.id, features });
    }
    let mut caption_dim = None;
    let mut captions = Vec::with_capacity(manifest.captions.len());
    for (i, e) in manifest.captions.iter().enumerate() {
        let features = fetch(format!("captions[{i}]"), e.feature_index, &mut caption_dim, e.id)?;
        captions.push(CaptionRecord {
            id: e.id,
            image_id: e.image_id,
            features,
            text: e.text.clone(),
        });
    }
    Dataset::new(split, images, captions).map_err(|e| manifest_err("dataset".into(), e.to_string()))
}

pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    load_features(&features_path(dir, split), &manifest_path(dir, split), split)
}
