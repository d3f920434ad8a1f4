//! FMCK checkpoint files. Layout, all little-endian:
//!
//! ```text
//! "FMCK" | u32 version | u32 fold | u32 epoch | f64 score
//! u32 config_len | config_len bytes of `key = value` model config
//! u32 n_tensors
//! n_tensors x { u32 name_len | name (UTF-8) | u32 rank | rank x u32 dim | f64 values, row-major }
//! ```

use std::path::{Path, PathBuf};

use crate::diff::ParamStore;
use crate::error::{Error, FormatError, Result};
use crate::kv::KvDoc;
use crate::model::{MilConfig, MilModel};
use crate::tensor::Tensor;

pub const FMCK_MAGIC: [u8; 4] = *b"FMCK";
pub const FMCK_VERSION: u32 = 1;

/// Best-epoch snapshot of one fold.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub fold: usize,
    /// 1-based epoch the snapshot was taken after.
    pub epoch: usize,
    /// Validation selection score at that epoch.
    pub score: f64,
    pub model: MilModel,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&FMCK_MAGIC);
        put_u32(&mut out, FMCK_VERSION);
        put_u32(&mut out, self.fold as u32);
        put_u32(&mut out, self.epoch as u32);
        out.extend_from_slice(&self.score.to_le_bytes());
        let mut doc = KvDoc::new();
        self.model.config.write_kv(&mut doc);
        let cfg = doc.to_text();
        put_u32(&mut out, cfg.len() as u32);
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, self.model.params.len() as u32);
        for (name, p) in self.model.params.iter() {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, p.value.rank() as u32);
            for &d in p.value.shape() {
                put_u32(&mut out, d as u32);
            }
            for &x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != FMCK_MAGIC {
            return Err(FormatError::BadMagic {
                path: path.to_path_buf(),
                expected: FMCK_MAGIC,
                found: magic,
            }
            .into());
        }
        let version = r.u32()?;
        if version != FMCK_VERSION {
            return Err(FormatError::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            }
            .into());
        }
        let fold = r.u32()? as usize;
        let epoch = r.u32()? as usize;
        let score = r.f64()?;
        let cfg_len = r.u32()? as usize;
        let cfg_text = r.utf8(cfg_len)?;
        let mut doc = KvDoc::parse(&cfg_text, path)?;
        let mut config = MilConfig::default();
        config.take_kv(&mut doc)?;
        doc.expect_consumed()?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = r.utf8(len)?;
            let rank = r.u32()? as usize;
            if rank > 2 {
                return Err(r.parse_err(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r
                .take(8 * numel)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name, Tensor::new(&shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(r.parse_err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            fold,
            epoch,
            score,
            model: MilModel::from_params(config, params)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Conventional file name of a fold checkpoint.
    pub fn file_name(fold: usize) -> PathBuf {
        PathBuf::from(format!("fold{fold}.fmck"))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(FormatError::Truncated {
                path: self.path.to_path_buf(),
                needed: self.pos.saturating_add(n),
                available: self.bytes.len(),
            }
            .into());
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|e| self.parse_err(format!("invalid UTF-8 at byte {at}: {e}")))
    }

    fn parse_err(&self, msg: String) -> Error {
        FormatError::Parse {
            path: self.path.to_path_buf(),
            line: 0,
            msg,
        }
        .into()
    }
}
