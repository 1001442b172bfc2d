//! Binary model checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every parameter as little-endian `f64` in store order,
//! followed by the Adam first and second moments when present.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"RKTCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    optimizer: Option<OptimizerHeader>,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

/// Parameters plus optional optimizer state and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
    /// Training context such as epoch, validation AUC and the run config.
    pub meta: serde_json::Value,
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Integrity(format!("checkpoint body truncated: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let store = &self.params.store;
        let header = Header {
            config: self.params.config.clone(),
            names: store.iter().map(|(_, n, _)| n.to_string()).collect(),
            shapes: store.iter().map(|(_, _, t)| t.shape().to_vec()).collect(),
            optimizer: self.optimizer.as_ref().map(|s| OptimizerHeader {
                step: s.step,
                beta1: s.beta1,
                beta2: s.beta2,
                eps: s.eps,
            }),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, _, t) in store.iter() {
            write_f64s(w, t.data())?;
        }
        if let Some(s) = &self.optimizer {
            for buf in s.m.iter().chain(&s.v) {
                write_f64s(w, buf)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Integrity(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.names.len() != header.shapes.len() {
            return Err(Error::Integrity("header names and shapes disagree".into()));
        }
        let sizes: Vec<usize> = header.shapes.iter().map(|s| s.iter().product()).collect();
        let tensors = header
            .shapes
            .iter()
            .zip(&sizes)
            .map(|(shape, &n)| Tensor::new(shape, read_f64s(r, n)?))
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams::from_tensors(&header.config, &header.names, tensors)?;
        let optimizer = match header.optimizer {
            None => None,
            Some(h) => {
                let m = sizes.iter().map(|&n| read_f64s(r, n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| read_f64s(r, n)).collect::<Result<Vec<_>>>()?;
                Some(AdamState {
                    step: h.step,
                    beta1: h.beta1,
                    beta2: h.beta2,
                    eps: h.eps,
                    m,
                    v,
                })
            }
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Integrity("trailing bytes after checkpoint body".into()));
        }
        Ok(Checkpoint {
            params,
            optimizer,
            meta: header.meta,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
