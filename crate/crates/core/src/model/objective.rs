use super::Model;
use crate::autodiff::{Objective, Tensor};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::Loss;

/// Batch loss of a model as a function of its learnable tensors.
pub struct BatchObjective<'a> {
    pub model: &'a Model,
    pub samples: Vec<&'a Sample>,
    pub loss: Loss,
}

impl BatchObjective<'_> {
    pub fn names(&self) -> Vec<String> {
        self.model.learnable().iter().map(|(n, _)| n.to_string()).collect()
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.model.learnable().iter().map(|(_, t)| (*t).clone()).collect()
    }

    fn with_params(&self, params: &[Tensor]) -> Result<Model> {
        let mut model = self.model.clone();
        let slots = model.learnable_mut();
        if slots.len() != params.len() {
            return Err(Error::invalid("parameter count mismatch"));
        }
        for ((name, slot), p) in slots.into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::Dimension {
                    op: name,
                    lhs: slot.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            slot.data_mut().copy_from_slice(p.data());
        }
        Ok(model)
    }
}

impl Objective for BatchObjective<'_> {
    fn value(&self, params: &[Tensor]) -> Result<f64> {
        let model = self.with_params(params)?;
        let scores = model.predict(&self.samples)?;
        let labels: Vec<f64> = self.samples.iter().flat_map(|s| s.labels_f64()).collect();
        Ok(self.loss.batch_value_and_grad(&scores, &labels, model.num_classes())?.0)
    }

    fn value_and_grad(&self, params: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.with_params(params)?.loss_and_grads(&self.samples, &self.loss)
    }
}
