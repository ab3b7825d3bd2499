//! Checkpoint file: one JSON header line, then little-endian f64 blobs for every
//! parameter followed by the Adam moments when present.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, Detector, DetectorConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "weakdet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    step: u64,
    detector: DetectorConfig,
    meta: serde_json::Value,
    tensors: Vec<(String, usize)>,
    adam: Option<(AdamConfig, u64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub detector: DetectorConfig,
    /// Free-form run metadata (the training config echo).
    pub meta: serde_json::Value,
    pub params: Vec<(String, Vec<f64>)>,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn capture(det: &Detector, step: u64, meta: serde_json::Value, adam: Option<&Adam>) -> Self {
        Checkpoint {
            step,
            detector: det.config().clone(),
            meta,
            params: det.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            adam: adam.cloned(),
        }
    }

    /// Rebuilds the detector; parameter names and sizes must match the architecture.
    pub fn restore(&self) -> Result<Detector> {
        let mut det = Detector::new(self.detector.clone(), 0)?;
        let params = det.params_mut();
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, checkpoint has {}",
                params.len(),
                self.params.len()
            )));
        }
        for (p, (name, values)) in params.into_iter().zip(&self.params) {
            if &p.name != name || p.len() != values.len() {
                return Err(Error::Checkpoint(format!("tensor mismatch at {name}")));
            }
            p.value.copy_from_slice(values);
        }
        Ok(det)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            step: self.step,
            detector: self.detector.clone(),
            meta: self.meta.clone(),
            tensors: self.params.iter().map(|(n, v)| (n.clone(), v.len())).collect(),
            adam: self.adam.as_ref().map(|a| (a.cfg, a.t)),
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        let line = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        write(line.as_bytes())?;
        write(b"\n")?;
        let mut blobs: Vec<&[f64]> = self.params.iter().map(|(_, v)| v.as_slice()).collect();
        if let Some(a) = &self.adam {
            blobs.extend(a.m.iter().map(|v| v.as_slice()));
            blobs.extend(a.v.iter().map(|v| v.as_slice()));
        }
        for blob in blobs {
            for x in blob {
                write(&x.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let header: Header =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        let mut read_blob = |len: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mut params = Vec::with_capacity(header.tensors.len());
        for (name, len) in &header.tensors {
            params.push((name.clone(), read_blob(*len)?));
        }
        let adam = match header.adam {
            Some((cfg, t)) => {
                let mut m = Vec::new();
                let mut v = Vec::new();
                for (_, len) in &header.tensors {
                    m.push(read_blob(*len)?);
                }
                for (_, len) in &header.tensors {
                    v.push(read_blob(*len)?);
                }
                Some(Adam { cfg, t, m, v })
            }
            None => None,
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Checkpoint {
            step: header.step,
            detector: header.detector,
            meta: header.meta,
            params,
            adam,
        })
    }
}
