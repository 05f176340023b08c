use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Linear, Model};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::Sample;
use crate::error::{Error, Result};

/// Token-averaged features followed by one linear layer and a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearBaseline {
    pub head: Linear,
}

impl LinearBaseline {
    pub fn init(feat_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        if feat_dim == 0 || classes == 0 {
            return Err(Error::invalid("baseline dimensions must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(LinearBaseline {
            head: Linear::init(&mut rng, feat_dim, classes),
        })
    }

    pub fn feat_dim(&self) -> usize {
        self.head.weight.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.head.weight.cols()
    }

    pub fn learnable(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("head.weight", &self.head.weight), ("head.bias", &self.head.bias)]
    }

    pub fn learnable_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("head.weight", &mut self.head.weight),
            ("head.bias", &mut self.head.bias),
        ]
    }

    pub(super) fn record_batch(&self, g: &mut Graph, samples: &[&Sample]) -> Result<(Var, Vec<Var>)> {
        let w = g.leaf(&self.head.weight);
        let b = g.leaf(&self.head.bias);
        let mut rows = Vec::with_capacity(samples.len());
        for s in samples {
            let x = g.constant(&s.features);
            rows.push(g.mean_rows(x));
        }
        let pooled = g.concat_rows_many(&rows)?;
        let logits = g.matmul(pooled, w)?;
        let logits = g.add_row_bias(logits, b)?;
        Ok((g.sigmoid(logits), vec![w, b]))
    }
}

impl From<LinearBaseline> for Model {
    fn from(b: LinearBaseline) -> Self {
        Model::Baseline(b)
    }
}
