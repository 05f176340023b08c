//! Long-tailed multi-label datasets: frequency groups, synthetic
//! generation, feature files and semantic embedding sources.

mod embedding;
mod generate;
mod io;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use embedding::{
    embedding_provider, load_embedding, prototype_embedding, save_embedding, EmbeddingSpec,
};
pub use generate::{generate_synthetic_lt, target_counts, GeneratorConfig};
pub use io::{load_features, save_features};

/// Default frequency thresholds: more than 100 samples is head, fewer than
/// 20 is tail.
pub const HEAD_MIN: usize = 100;
pub const TAIL_MAX: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Medium,
    Tail,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Head, Group::Medium, Group::Tail];

    pub fn index(self) -> usize {
        match self {
            Group::Head => 0,
            Group::Medium => 1,
            Group::Tail => 2,
        }
    }
}

/// `count > head_min` is head, `count < tail_max` is tail, everything in
/// `[tail_max, head_min]` is medium.
pub fn split_groups(class_counts: &[usize], head_min: usize, tail_max: usize) -> Result<Vec<Group>> {
    if tail_max < 1 || head_min <= tail_max {
        return Err(Error::invalid(format!(
            "group thresholds need head_min > tail_max >= 1, got ({head_min}, {tail_max})"
        )));
    }
    Ok(class_counts
        .iter()
        .map(|&n| {
            if n > head_min {
                Group::Head
            } else if n < tail_max {
                Group::Tail
            } else {
                Group::Medium
            }
        })
        .collect())
}

/// One image stand-in: a v×d0 feature map and its multi-hot labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Tensor,
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn new(features: Tensor, labels: Vec<u8>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::invalid("sample features must be a v×d0 matrix"));
        }
        features.check_finite("sample.features")?;
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        if !labels.contains(&1) {
            return Err(Error::invalid("sample has no positive label"));
        }
        Ok(Sample { features, labels })
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| l as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongTailDataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub class_counts: Vec<usize>,
    pub groups: Vec<Group>,
}

impl LongTailDataset {
    /// Derives class counts and groups (default thresholds) from the samples.
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>) -> Result<Self> {
        let c = class_names.len();
        if c == 0 {
            return Err(Error::invalid("dataset needs at least one class"));
        }
        let mut class_counts = vec![0usize; c];
        let mut shape: Option<Vec<usize>> = None;
        for s in &samples {
            if s.labels.len() != c {
                return Err(Error::Mismatch(format!(
                    "sample has {} labels, dataset has {c} classes",
                    s.labels.len()
                )));
            }
            match &shape {
                Some(sh) if sh.as_slice() != s.features.shape() => {
                    return Err(Error::Mismatch(format!(
                        "feature maps disagree in shape: {sh:?} vs {:?}",
                        s.features.shape()
                    )))
                }
                Some(_) => {}
                None => shape = Some(s.features.shape().to_vec()),
            }
            for (count, &l) in class_counts.iter_mut().zip(&s.labels) {
                *count += l as usize;
            }
        }
        let groups = split_groups(&class_counts, HEAD_MIN, TAIL_MAX)?;
        Ok(LongTailDataset {
            samples,
            class_names,
            class_counts,
            groups,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// (v, d0) of the feature maps, if any sample exists.
    pub fn feature_dims(&self) -> Option<(usize, usize)> {
        self.samples
            .first()
            .map(|s| (s.features.rows(), s.features.cols()))
    }

    /// Replaces the group tags, e.g. with those of the training split.
    pub fn with_groups(mut self, groups: Vec<Group>) -> Result<Self> {
        if groups.len() != self.num_classes() {
            return Err(Error::Mismatch(format!(
                "{} groups for {} classes",
                groups.len(),
                self.num_classes()
            )));
        }
        self.groups = groups;
        Ok(self)
    }

    pub fn group_sizes(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for g in &self.groups {
            out[g.index()] += 1;
        }
        out
    }

    /// Row-major n×c label matrix.
    pub fn label_matrix(&self) -> Vec<u8> {
        self.samples.iter().flat_map(|s| s.labels.iter().copied()).collect()
    }

    /// Reorders classes so that new class `k` is old class `perm[k]`.
    pub fn permute_classes(&self, perm: &[usize]) -> Result<Self> {
        let c = self.num_classes();
        let mut seen = vec![false; c];
        if perm.len() != c || perm.iter().any(|&p| p >= c || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute_classes needs a permutation of 0..c"));
        }
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                features: s.features.clone(),
                labels: perm.iter().map(|&p| s.labels[p]).collect(),
            })
            .collect();
        Ok(LongTailDataset {
            samples,
            class_names: perm.iter().map(|&p| self.class_names[p].clone()).collect(),
            class_counts: perm.iter().map(|&p| self.class_counts[p]).collect(),
            groups: perm.iter().map(|&p| self.groups[p]).collect(),
        })
    }
}
