//! Checkpoint file layout (little-endian):
//!
//! ```text
//! "CPRC" | u32 version=1 | str model kind
//! | u32 n | n x (str name | u32 rank | rank x u32 | f64 payload)
//! | u64 t | f64 beta1 | f64 beta2 | f64 eps
//! | u32 k | k x (u32 len | len x f64 m | len x f64 v)
//! | str config JSON | str metadata JSON
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8. Tensor records hold the
//! learnable tensors in their canonical order, then the frozen embedding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, EpochRecord, TrainConfig};
use crate::autodiff::Tensor;
use crate::binary::{dim_u32, read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{LinearBaseline, Model, ModelParams, SemanticEmbedding};

const MAGIC: &[u8; 4] = b"CPRC";
const VERSION: u32 = 1;
const EMBEDDING: &str = "embedding";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    epoch: usize,
    class_names: Vec<String>,
    history: Vec<EpochRecord>,
}

fn write_tensor(w: &mut Writer, name: &str, t: &Tensor) -> Result<()> {
    w.prefixed(name.as_bytes());
    w.u32(dim_u32(t.shape().len(), "tensor rank")?);
    for &s in t.shape() {
        w.u32(dim_u32(s, "tensor dimension")?);
    }
    for &x in t.data() {
        w.f64(x);
    }
    Ok(())
}

fn read_f64s(r: &mut Reader, n: usize) -> Result<Vec<f64>> {
    if n.checked_mul(8).map_or(true, |b| b > r.remaining()) {
        return Err(r.format(format!("payload of {n} values exceeds file size")));
    }
    (0..n).map(|_| r.f64()).collect()
}

fn read_tensor(r: &mut Reader) -> Result<(String, Tensor)> {
    let name = r.prefixed_str()?;
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(r.format(format!("tensor `{name}` has implausible rank {rank}")));
    }
    let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| r.format(format!("tensor `{name}` shape overflows")))?;
    let data = read_f64s(r, n)?;
    Ok((name, Tensor::new(shape, data)?))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.prefixed(self.model.kind().as_bytes());
        let learnable = self.model.learnable();
        let embedding = self.model.embedding();
        w.u32(dim_u32(learnable.len() + embedding.is_some() as usize, "tensor count")?);
        for (name, t) in &learnable {
            write_tensor(&mut w, name, t)?;
        }
        if let Some(e) = embedding {
            write_tensor(&mut w, EMBEDDING, &e.weights)?;
        }
        let a = &self.adam;
        w.u64(a.t);
        w.f64(a.beta1);
        w.f64(a.beta2);
        w.f64(a.eps);
        w.u32(dim_u32(a.m.len(), "moment count")?);
        for (m, v) in a.m.iter().zip(&a.v) {
            w.u32(dim_u32(m.len(), "moment length")?);
            m.iter().chain(v.iter()).for_each(|&x| w.f64(x));
        }
        w.prefixed(serde_json::to_string(&self.config)?.as_bytes());
        let meta = Meta {
            epoch: self.epoch,
            class_names: self.class_names.clone(),
            history: self.history.clone(),
        };
        w.prefixed(serde_json::to_string(&meta)?.as_bytes());
        Ok(w.finish())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }

    /// `path` is only used in error messages.
    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::open(buf, path, MAGIC, "CPRC", VERSION)?;
        let kind = r.prefixed_str()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..n {
            tensors.push(read_tensor(&mut r)?);
        }
        let t = r.u64()?;
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let k = r.u32()? as usize;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..k {
            let len = r.u32()? as usize;
            m.push(read_f64s(&mut r, len)?);
            v.push(read_f64s(&mut r, len)?);
        }
        let config: TrainConfig = serde_json::from_slice(r.prefixed()?)
            .map_err(|e| r.format(format!("config record: {e}")))?;
        let meta: Meta = serde_json::from_slice(r.prefixed()?)
            .map_err(|e| r.format(format!("metadata record: {e}")))?;
        r.expect_end()?;

        let dims = &config.dims;
        let mut model = match kind.as_str() {
            "cprfl" => {
                let pos = tensors
                    .iter()
                    .position(|(name, _)| name == EMBEDDING)
                    .ok_or_else(|| r.format("missing embedding record"))?;
                let (_, w) = tensors.remove(pos);
                let emb = SemanticEmbedding::new(w, meta.class_names.clone())
                    .map_err(|e| r.format(format!("embedding record: {e}")))?;
                Model::Cprfl(
                    ModelParams::init(dims.clone(), emb, config.literal_equations, 0)
                        .map_err(|e| r.format(format!("config dims: {e}")))?,
                )
            }
            "baseline" => Model::Baseline(LinearBaseline::init(dims.d0, dims.c, 0)?),
            other => return Err(r.format(format!("unknown model kind `{other}`"))),
        };
        let slots = model.learnable_mut();
        if slots.len() != tensors.len() {
            return Err(r.format(format!(
                "expected {} tensor records, found {}",
                slots.len(),
                tensors.len()
            )));
        }
        for ((name, slot), (found, t)) in slots.into_iter().zip(tensors) {
            if name != found || slot.shape() != t.shape() {
                return Err(r.format(format!(
                    "record `{found}` {:?} does not fit `{name}` {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        let sizes: Vec<usize> = model.learnable().iter().map(|(_, t)| t.numel()).collect();
        if m.iter().map(Vec::len).ne(sizes.iter().copied()) {
            return Err(r.format("optimizer moments do not match parameter shapes"));
        }
        Ok(Checkpoint {
            model,
            adam: AdamState {
                m,
                v,
                t,
                beta1,
                beta2,
                eps,
            },
            config,
            class_names: meta.class_names,
            epoch: meta.epoch,
            history: meta.history,
        })
    }
}
