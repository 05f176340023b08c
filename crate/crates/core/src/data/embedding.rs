//! Semantic embedding sources.
//!
//! Embedding file layout (little-endian):
//!
//! ```text
//! "CPRE" | u32 version=1 | u32 c | u32 m | c NUL-terminated names | c*m f32
//! ```
//!
//! File embeddings are produced outside this crate, e.g. by a text encoder
//! fed "a photo of a [CLASS]" for every class name.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::LongTailDataset;
use crate::autodiff::Tensor;
use crate::binary::{dim_u32, read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::model::SemanticEmbedding;

const MAGIC: &[u8; 4] = b"CPRE";
const VERSION: u32 = 1;

/// `embedding` block of the training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    /// `random` or `file`.
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Embedding width; for files, 0 accepts whatever the file holds.
    pub m: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EmbeddingSpec {
    fn default() -> Self {
        EmbeddingSpec {
            mode: "random".into(),
            path: None,
            m: 32,
            seed: 0,
        }
    }
}

fn random_embedding(class_names: &[String], m: usize, seed: u64) -> Result<SemanticEmbedding> {
    if m == 0 {
        return Err(Error::invalid("random embedding width m must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = class_names.len();
    let data = (0..c * m).map(|_| rng.sample(StandardNormal)).collect();
    SemanticEmbedding::new(Tensor::matrix(c, m, data)?, class_names.to_vec())
}

/// Builds the frozen embedding for `class_names` from `spec`.
pub fn embedding_provider(spec: &EmbeddingSpec, class_names: &[String]) -> Result<SemanticEmbedding> {
    match spec.mode.as_str() {
        "random" => random_embedding(class_names, spec.m, spec.seed),
        "file" => {
            let path = spec
                .path
                .as_deref()
                .ok_or_else(|| Error::invalid("file embedding mode requires a path"))?;
            let emb = load_embedding(path)?;
            if emb.num_classes() != class_names.len() {
                return Err(Error::Mismatch(format!(
                    "{}: embedding has {} classes, dataset has {}",
                    path.display(),
                    emb.num_classes(),
                    class_names.len()
                )));
            }
            if let Some(i) = (0..class_names.len()).find(|&i| emb.class_names[i] != class_names[i]) {
                return Err(Error::Mismatch(format!(
                    "{}: class {i} is {:?} in the embedding but {:?} in the dataset",
                    path.display(),
                    emb.class_names[i],
                    class_names[i]
                )));
            }
            if spec.m != 0 && spec.m != emb.dim() {
                return Err(Error::Mismatch(format!(
                    "{}: embedding width {} but config asks for {}",
                    path.display(),
                    emb.dim(),
                    spec.m
                )));
            }
            Ok(emb)
        }
        other => Err(Error::invalid(format!(
            "unknown embedding mode `{other}` (expected random or file)"
        ))),
    }
}

pub fn save_embedding(emb: &SemanticEmbedding, path: &Path) -> Result<()> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u32(dim_u32(emb.num_classes(), "c")?);
    w.u32(dim_u32(emb.dim(), "m")?);
    for name in &emb.class_names {
        if name.as_bytes().contains(&0) {
            return Err(Error::invalid(format!("class name {name:?} contains NUL")));
        }
        w.cstr(name);
    }
    for &x in emb.weights.data() {
        w.f32(x as f32);
    }
    w.write_to(path)
}

pub fn load_embedding(path: &Path) -> Result<SemanticEmbedding> {
    let buf = read_file(path)?;
    let mut r = Reader::open(&buf, path, MAGIC, "CPRE", VERSION)?;
    let c = r.u32()? as usize;
    let m = r.u32()? as usize;
    if c == 0 || m == 0 {
        return Err(r.format(format!("zero dimension in header (c={c}, m={m})")));
    }
    let names = (0..c).map(|_| r.cstr()).collect::<Result<Vec<_>>>()?;
    if c.checked_mul(m).and_then(|x| x.checked_mul(4)).map_or(true, |x| x > r.remaining()) {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
        });
    }
    let data = (0..c * m)
        .map(|_| r.f32().map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    r.expect_end()?;
    let weights = Tensor::matrix(c, m, data)?;
    weights.check_finite("embedding")?;
    SemanticEmbedding::new(weights, names)
}

/// Informative stand-in embedding: for each class, the mean over its
/// positive training samples of the token-averaged feature map.
pub fn prototype_embedding(train: &LongTailDataset) -> Result<SemanticEmbedding> {
    let (_, d0) = train
        .feature_dims()
        .ok_or_else(|| Error::invalid("prototype embedding needs training samples"))?;
    let c = train.num_classes();
    let mut sums = vec![0.0; c * d0];
    let mut counts = vec![0usize; c];
    for s in &train.samples {
        let v = s.features.rows();
        let mut pooled = vec![0.0; d0];
        for r in 0..v {
            for (p, x) in pooled.iter_mut().zip(s.features.row(r)) {
                *p += x / v as f64;
            }
        }
        for (j, &l) in s.labels.iter().enumerate() {
            if l == 1 {
                counts[j] += 1;
                for (acc, p) in sums[j * d0..(j + 1) * d0].iter_mut().zip(&pooled) {
                    *acc += p;
                }
            }
        }
    }
    if let Some(j) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("class {j} has no training positives")));
    }
    let data = sums
        .iter()
        .enumerate()
        .map(|(i, s)| (s / counts[i / d0] as f64) as f32 as f64)
        .collect();
    SemanticEmbedding::new(Tensor::matrix(c, d0, data)?, train.class_names.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn random_mode_is_seeded() {
        let spec = EmbeddingSpec { m: 6, seed: 3, ..Default::default() };
        let a = embedding_provider(&spec, &names(4)).unwrap();
        let b = embedding_provider(&spec, &names(4)).unwrap();
        assert_eq!(a, b);
        assert!(!a.weights.requires_grad());
        let c = embedding_provider(&EmbeddingSpec { seed: 4, ..spec }, &names(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn random_mode_moments() {
        let spec = EmbeddingSpec { m: 1000, seed: 11, ..Default::default() };
        let emb = embedding_provider(&spec, &names(100)).unwrap();
        let x = emb.weights.data();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn file_mode_round_trip_and_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.cpre");
        let emb = embedding_provider(&EmbeddingSpec { m: 5, ..Default::default() }, &names(3)).unwrap();
        // f32 storage
        let rounded = SemanticEmbedding::new(
            Tensor::matrix(3, 5, emb.weights.data().iter().map(|&x| x as f32 as f64).collect()).unwrap(),
            names(3),
        )
        .unwrap();
        save_embedding(&emb, &path).unwrap();
        let spec = EmbeddingSpec { mode: "file".into(), path: Some(path.clone()), m: 5, seed: 0 };
        assert_eq!(embedding_provider(&spec, &names(3)).unwrap(), rounded);

        assert!(matches!(embedding_provider(&spec, &names(4)), Err(Error::Mismatch(_))));
        let mut renamed = names(3);
        renamed[1] = "other".into();
        assert!(matches!(embedding_provider(&spec, &renamed), Err(Error::Mismatch(_))));
        let wrong_m = EmbeddingSpec { m: 7, ..spec.clone() };
        assert!(matches!(embedding_provider(&wrong_m, &names(3)), Err(Error::Mismatch(_))));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_embedding(&path), Err(Error::Truncated { .. })));
        assert!(embedding_provider(&EmbeddingSpec { mode: "glove".into(), ..spec }, &names(3)).is_err());
    }

    #[test]
    fn file_with_fewer_rows_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.cpre");
        let emb = embedding_provider(&EmbeddingSpec { m: 4, ..Default::default() }, &names(2)).unwrap();
        save_embedding(&emb, &path).unwrap();
        let spec = EmbeddingSpec { mode: "file".into(), path: Some(path), m: 4, seed: 0 };
        assert!(matches!(embedding_provider(&spec, &names(3)), Err(Error::Mismatch(_))));
    }
}
