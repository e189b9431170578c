//! `.kwsm` model files.
//!
//! ```text
//! offset 0   "KWSM"
//! offset 4   u32 LE  format version (1)
//! offset 8   u32 LE  metadata length M
//! offset 12  M bytes UTF-8 JSON metadata
//! offset 12+M  tensor payload: f32 LE, row-major, in metadata `tensors` order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, KwsError, Result};
use crate::features::MfccConfig;
use crate::nn::{Model, ModelSpec};

pub const MAGIC: [u8; 4] = *b"KWSM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDecl {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub arch: String,
    pub base_channels: usize,
    pub inner_widths: Vec<usize>,
    pub slim_ready: bool,
    pub n_labels: usize,
    pub labels: Vec<String>,
    pub mfcc: MfccConfig,
    pub tensors: Vec<TensorDecl>,
}

impl ModelMetadata {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            arch: self.arch.clone(),
            base_channels: self.base_channels,
            inner_widths: self.inner_widths.clone(),
            n_labels: self.n_labels,
            slim_ready: self.slim_ready,
        }
    }

    pub fn payload_len(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| 4 * t.shape.iter().product::<usize>())
            .sum()
    }
}

pub fn metadata(model: &Model) -> ModelMetadata {
    ModelMetadata {
        arch: model.spec.arch.clone(),
        base_channels: model.spec.base_channels,
        inner_widths: model.spec.inner_widths.clone(),
        slim_ready: model.spec.slim_ready,
        n_labels: model.spec.n_labels,
        labels: model.labels.clone(),
        mfcc: model.mfcc.clone(),
        tensors: model
            .named_tensors()
            .into_iter()
            .map(|(name, t)| TensorDecl {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    }
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let meta = serde_json::to_vec(&metadata(model))?;
    let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + 4 * model.count_params());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for (_, t) in model.named_tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Reads only the header and metadata.
pub fn read_metadata(bytes: &[u8]) -> Result<(ModelMetadata, usize)> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(KwsError::NotModel(found));
    }
    if bytes.len() < HEADER_LEN {
        return Err(KwsError::Payload {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(KwsError::Version {
            found: version,
            supported: VERSION,
        });
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < HEADER_LEN + meta_len {
        return Err(KwsError::Payload {
            expected: HEADER_LEN + meta_len,
            actual: bytes.len(),
        });
    }
    let meta: ModelMetadata = serde_json::from_slice(&bytes[HEADER_LEN..HEADER_LEN + meta_len])?;
    Ok((meta, HEADER_LEN + meta_len))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (meta, start) = read_metadata(bytes)?;
    let payload = &bytes[start..];
    if payload.len() != meta.payload_len() {
        return Err(KwsError::Payload {
            expected: meta.payload_len(),
            actual: payload.len(),
        });
    }
    let mut model = Model::<f32>::init(meta.spec(), 0)?;
    ensure!(
        meta.labels.len() == meta.n_labels,
        Contract,
        "metadata lists {} labels for {} outputs",
        meta.labels.len(),
        meta.n_labels
    );
    model.labels = meta.labels.clone();
    model.mfcc = meta.mfcc.clone();
    let mut slots = model.named_tensors_mut();
    ensure!(
        slots.len() == meta.tensors.len(),
        Contract,
        "metadata declares {} tensors, architecture needs {}",
        meta.tensors.len(),
        slots.len()
    );
    let mut at = 0;
    for ((name, slot), decl) in slots.iter_mut().zip(&meta.tensors) {
        ensure!(
            *name == decl.name && slot.shape() == decl.shape.as_slice(),
            Contract,
            "tensor {} {:?} does not match expected {} {:?}",
            decl.name,
            decl.shape,
            name,
            slot.shape()
        );
        for v in slot.data_mut() {
            *v = f32::from_le_bytes(payload[at..at + 4].try_into().unwrap());
            at += 4;
        }
    }
    drop(slots);
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &to_bytes(model)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes =
        fs::read(path).map_err(|e| KwsError::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes)
}

/// Writes via a sibling temp file and rename so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let ctx = || format!("writing {}", path.display());
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| KwsError::io(ctx(), e))?;
    tmp.write_all(bytes).map_err(|e| KwsError::io(ctx(), e))?;
    tmp.persist(path)
        .map_err(|e| KwsError::io(ctx(), e.error))?;
    Ok(())
}
