//! Dataset directory layout:
//!
//! ```text
//! <dir>/manifest.csv          scan_id,label,gender,n_slices,feature_file
//! <dir>/features/<id>.fmil    "FMIL" | u32 version | u32 N | u32 dim | N*dim f32
//! ```
//!
//! All integers and floats are little-endian; features are row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, FormatError, Result};
use crate::labels::{Gender, Label};
use crate::tensor::Tensor;

pub const FMIL_MAGIC: [u8; 4] = *b"FMIL";
pub const FMIL_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.csv";
const HEADER_LEN: usize = 16;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    scan_id: String,
    label: String,
    gender: String,
    n_slices: usize,
    feature_file: String,
}

/// Encodes a feature matrix as an FMIL file body.
pub fn write_features(features: &Tensor) -> Vec<u8> {
    let (n, d) = features.dims2();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * n * d);
    buf.extend_from_slice(&FMIL_MAGIC);
    buf.extend_from_slice(&FMIL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for &x in features.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    buf
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Decodes an FMIL file body; `path` is only used in error messages.
pub fn read_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let truncated = |needed: usize| FormatError::Truncated {
        path: path.to_path_buf(),
        needed,
        available: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(HEADER_LEN).into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != FMIL_MAGIC {
        return Err(FormatError::BadMagic {
            path: path.to_path_buf(),
            expected: FMIL_MAGIC,
            found: magic,
        }
        .into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN).into());
    }
    let version = u32_at(bytes, 4);
    if version != FMIL_VERSION {
        return Err(FormatError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        }
        .into());
    }
    let n = u32_at(bytes, 8) as usize;
    let d = u32_at(bytes, 12) as usize;
    let needed = HEADER_LEN + 4 * n * d;
    if bytes.len() < needed {
        return Err(truncated(needed).into());
    }
    let data = bytes[HEADER_LEN..needed]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::matrix(n, d, data)
}

fn feature_path(scan_id: &str) -> String {
    format!("features/{scan_id}.fmil")
}

pub fn write_dataset(volumes: &[Volume], dir: &Path) -> Result<()> {
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let manifest = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
    for v in volumes {
        let rel = feature_path(&v.scan_id);
        let path = dir.join(&rel);
        std::fs::write(&path, write_features(&v.features)).map_err(|e| Error::io(&path, e))?;
        w.serialize(ManifestRow {
            scan_id: v.scan_id.clone(),
            label: v.label.name().to_string(),
            gender: v.gender.name().to_string(),
            n_slices: v.n_slices(),
            feature_file: rel,
        })
        .map_err(|e| csv_err(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Volume>> {
    let manifest = dir.join(MANIFEST);
    let mut r = csv::Reader::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| csv_err(&manifest, e))?;
        let parse_err = |msg: String| FormatError::Parse {
            path: manifest.clone(),
            line: i + 2,
            msg,
        };
        let label: Label = row.label.parse().map_err(|e: Error| parse_err(e.to_string()))?;
        let gender: Gender = row.gender.parse().map_err(|e: Error| parse_err(e.to_string()))?;
        let path = dir.join(&row.feature_file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let features = read_features(&bytes, &path)?;
        let file_n = features.dims2().0;
        if file_n != row.n_slices {
            return Err(FormatError::SliceCountMismatch {
                scan_id: row.scan_id,
                manifest: row.n_slices,
                file: file_n,
            }
            .into());
        }
        out.push(Volume {
            scan_id: row.scan_id,
            features,
            label,
            gender,
        });
    }
    Ok(out)
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => FormatError::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        }
        .into(),
    }
}
