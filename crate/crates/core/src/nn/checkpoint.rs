//! Checkpoint files.
//!
//! Layout: 8-byte magic `PDCNCKP1`, `u64` little-endian header length, a JSON
//! header, then every tensor listed in the header, in header order, as
//! little-endian IEEE-754 values of the header's `dtype` (`f64le` or
//! `f32le`). Tensors are the trainable parameters, then batch-norm running
//! means and variances, then (when present) Adam first and second moments.

use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PDCNCKP1";
const FORMAT: &str = "phasedcn-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64le,
    F32le,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64le => 8,
            Dtype::F32le => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    BnMean,
    BnVar,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHeader {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub dtype: Dtype,
    pub step: u64,
    pub meta: serde_json::Value,
    pub adam: Option<AdamHeader>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub header: CheckpointHeader,
    pub data: Vec<ArrayD<f64>>,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    store: &ParamStore,
    adam: Option<&AdamState>,
    step: u64,
    meta: &serde_json::Value,
    dtype: Dtype,
) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::new();
    let mut arrays: Vec<&ArrayD<f64>> = Vec::new();
    for p in store.params() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            kind: TensorKind::Param,
            shape: p.value.shape().to_vec(),
        });
        arrays.push(&p.value);
    }
    let bn_mean: Vec<ArrayD<f64>> = store
        .all_buffers()
        .iter()
        .map(|b| b.running_mean.clone().into_dyn())
        .collect();
    let bn_var: Vec<ArrayD<f64>> = store
        .all_buffers()
        .iter()
        .map(|b| b.running_var.clone().into_dyn())
        .collect();
    for (b, (m, v)) in store.all_buffers().iter().zip(bn_mean.iter().zip(&bn_var)) {
        tensors.push(TensorEntry {
            name: b.name.clone(),
            kind: TensorKind::BnMean,
            shape: m.shape().to_vec(),
        });
        arrays.push(m);
        tensors.push(TensorEntry {
            name: b.name.clone(),
            kind: TensorKind::BnVar,
            shape: v.shape().to_vec(),
        });
        arrays.push(v);
    }
    if let Some(a) = adam {
        for (kind, moments) in [(TensorKind::AdamM, &a.m), (TensorKind::AdamV, &a.v)] {
            for (p, m) in store.params().iter().zip(moments) {
                tensors.push(TensorEntry {
                    name: p.name.clone(),
                    kind,
                    shape: m.shape().to_vec(),
                });
                arrays.push(m);
            }
        }
    }
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        dtype,
        step,
        meta: meta.clone(),
        adam: adam.map(|a| AdamHeader {
            config: a.config,
            step: a.step,
        }),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let scalars: usize = arrays.iter().map(|a| a.len()).sum();
    let mut bytes = Vec::with_capacity(16 + json.len() + scalars * dtype.width());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for a in arrays {
        for v in a.iter() {
            match dtype {
                Dtype::F64le => bytes.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32le => bytes.extend_from_slice(&(*v as f32).to_le_bytes()),
            }
        }
    }
    // Write-then-rename so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize
        .checked_add(hlen)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..end])?;
    if header.format != FORMAT {
        return Err(bad(&format!("unknown format {}", header.format)));
    }
    let w = header.dtype.width();
    let total: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != end + total * w {
        return Err(bad("payload size does not match the tensor table"));
    }
    let mut offset = end;
    let mut data = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let chunk = &bytes[offset..offset + n * w];
        offset += n * w;
        let values: Vec<f64> = match header.dtype {
            Dtype::F64le => chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32le => chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        data.push(ArrayD::from_shape_vec(IxDyn(&t.shape), values).expect("shape product"));
    }
    Ok(LoadedCheckpoint { header, data })
}

impl LoadedCheckpoint {
    /// Copies parameters and batch-norm buffers into `store` (and moments
    /// into `adam` when given), checking names and shapes one by one.
    pub fn restore(&self, store: &mut ParamStore, adam: Option<&mut AdamState>) -> Result<()> {
        let mismatch = |what: String| Error::Format(format!("checkpoint mismatch: {what}"));
        let pick = |kind: TensorKind| {
            self.header
                .tensors
                .iter()
                .zip(&self.data)
                .filter(move |(t, _)| t.kind == kind)
        };
        let params: Vec<_> = pick(TensorKind::Param).collect();
        if params.len() != store.len() {
            return Err(mismatch(format!(
                "{} parameters in file, model has {}",
                params.len(),
                store.len()
            )));
        }
        for ((entry, value), p) in params.iter().zip(store.params()) {
            if entry.name != p.name || value.shape() != p.value.shape() {
                return Err(mismatch(format!(
                    "{} {:?} vs {} {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.value.shape()
                )));
            }
        }
        let means: Vec<_> = pick(TensorKind::BnMean).collect();
        let vars: Vec<_> = pick(TensorKind::BnVar).collect();
        if means.len() != store.all_buffers().len() || vars.len() != means.len() {
            return Err(mismatch("batch-norm buffer count".into()));
        }
        for ((m, v), b) in means.iter().zip(&vars).zip(store.all_buffers()) {
            if m.0.name != b.name || m.1.len() != b.running_mean.len() || v.1.len() != m.1.len() {
                return Err(mismatch(format!("buffer {} vs {}", m.0.name, b.name)));
            }
        }
        let moments = match (&adam, &self.header.adam) {
            (Some(_), None) => {
                return Err(mismatch("optimizer state requested but not stored".into()))
            }
            (Some(_), Some(_)) => {
                let m: Vec<_> = pick(TensorKind::AdamM).map(|(_, d)| d.clone()).collect();
                let v: Vec<_> = pick(TensorKind::AdamV).map(|(_, d)| d.clone()).collect();
                if m.len() != store.len() || v.len() != store.len() {
                    return Err(mismatch("optimizer moment count".into()));
                }
                Some((m, v))
            }
            _ => None,
        };

        for ((_, value), p) in params.iter().zip(store.params_mut()) {
            p.value.assign(*value);
        }
        for ((m, v), b) in means.iter().zip(&vars).zip(store.all_buffers_mut()) {
            b.running_mean = m.1.iter().copied().collect();
            b.running_var = v.1.iter().copied().collect();
        }
        if let (Some(state), Some((m, v)), Some(h)) = (adam, moments, &self.header.adam) {
            state.config = h.config;
            state.step = h.step;
            state.m = m;
            state.v = v;
        }
        Ok(())
    }
}
