//! The category-prompt network and a pooled linear baseline.
//!
//! Visual tokens are projected into the joint space, class prompts are
//! produced from a frozen semantic embedding by a two-layer GELU network,
//! a single encoder layer lets prompts attend over `[tokens; prompts]`, and
//! each class is scored by the sigmoid of the dot product between its
//! refined prompt and its initial prompt.

mod baseline;
mod cprfl;
mod objective;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::Loss;

pub use baseline::LinearBaseline;
pub use cprfl::{
    classify, dual_path_grads, forward, init_prompts, project_features, vsi_forward, DualPathGrads,
    PiVars, PromptPaths, PromptSet, VsiVars,
};
pub use objective::BatchObjective;

/// Frozen class embedding, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbedding {
    pub weights: Tensor,
    pub class_names: Vec<String>,
}

impl SemanticEmbedding {
    pub fn new(weights: Tensor, class_names: Vec<String>) -> Result<Self> {
        if weights.shape().len() != 2 || weights.rows() != class_names.len() {
            return Err(Error::Mismatch(format!(
                "embedding of shape {:?} for {} class names",
                weights.shape(),
                class_names.len()
            )));
        }
        Ok(SemanticEmbedding {
            weights: weights.with_requires_grad(false),
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Reorders rows so that new class `k` is old class `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| self.weights.row(p).to_vec()).collect();
        let names = perm.iter().map(|&p| self.class_names[p].clone()).collect();
        Self::new(Tensor::from_rows(&rows)?, names)
    }
}

/// Model dimensions (`dims` block of the training config).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d0: usize,
    pub d: usize,
    pub v: usize,
    pub c: usize,
    pub heads: usize,
    pub ffn: usize,
    pub tau: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d0: 2048,
            d: 512,
            v: 196,
            c: 20,
            heads: 8,
            ffn: 2048,
            tau: 0.5,
        }
    }
}

impl ModelDims {
    /// Hidden width of the prompt-initialization network, `round(tau * d)`.
    pub fn hidden(&self) -> usize {
        (self.tau * self.d as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d0, self.d, self.v, self.c, self.heads, self.ffn].contains(&0) {
            return Err(Error::invalid(format!("all model dimensions must be >= 1: {self:?}")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if !(self.tau > 0.0) || self.hidden() == 0 {
            return Err(Error::invalid(format!(
                "tau = {} gives an empty hidden layer for d = {}",
                self.tau, self.d
            )));
        }
        Ok(())
    }
}

/// Linear map `x·weight + bias` applied row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights uniform in ±1/√fan_in, zero bias.
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: uniform(rng, fan_in, fan_out),
            bias: Tensor::zeros(&[fan_out]).with_requires_grad(true),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(fan_in, fan_out, data)
        .expect("positive dims")
        .with_requires_grad(true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    fn init(width: usize) -> Self {
        LayerNormParams {
            gain: Tensor::filled(&[width], 1.0).with_requires_grad(true),
            bias: Tensor::zeros(&[width]).with_requires_grad(true),
        }
    }
}

/// Prompt-initialization network: `GELU(W·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct PiNetworkParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub tau: f64,
}

/// One encoder layer. The attention weights are d×d, split into `heads`
/// column blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct VsiEncoderParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// Attention output projection (unused by the literal path).
    pub wa: Tensor,
    pub norm1: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNormParams,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub phi: Linear,
    pub pi: PiNetworkParams,
    pub vsi: VsiEncoderParams,
    pub embedding: SemanticEmbedding,
    pub dims: ModelDims,
    /// Strip residuals and layer norms and use single-head attention scaled
    /// by 1/√d.
    pub literal_equations: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl ModelParams {
    pub fn init(dims: ModelDims, embedding: SemanticEmbedding, literal_equations: bool, seed: u64) -> Result<Self> {
        dims.validate()?;
        if embedding.num_classes() != dims.c {
            return Err(Error::Mismatch(format!(
                "embedding has {} classes but dims.c = {}",
                embedding.num_classes(),
                dims.c
            )));
        }
        let (d, t, m) = (dims.d, dims.hidden(), embedding.dim());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = Linear::init(&mut rng, dims.d0, d);
        let pi = PiNetworkParams {
            w1: uniform(&mut rng, m, t),
            b1: Tensor::zeros(&[t]).with_requires_grad(true),
            w2: uniform(&mut rng, t, d),
            b2: Tensor::zeros(&[d]).with_requires_grad(true),
            tau: dims.tau,
        };
        let vsi = VsiEncoderParams {
            wq: uniform(&mut rng, d, d),
            wk: uniform(&mut rng, d, d),
            wv: uniform(&mut rng, d, d),
            wa: uniform(&mut rng, d, d),
            norm1: LayerNormParams::init(d),
            ffn_in: Linear::init(&mut rng, d, dims.ffn),
            ffn_out: Linear::init(&mut rng, dims.ffn, d),
            norm2: LayerNormParams::init(d),
            heads: dims.heads,
        };
        Ok(ModelParams {
            phi,
            pi,
            vsi,
            embedding,
            dims,
            literal_equations,
        })
    }

    /// Learnable tensors with their stable names, in a fixed order.
    pub fn learnable(&self) -> Vec<(&'static str, &Tensor)> {
        let v = &self.vsi;
        vec![
            ("phi.weight", &self.phi.weight),
            ("phi.bias", &self.phi.bias),
            ("pi.w1", &self.pi.w1),
            ("pi.b1", &self.pi.b1),
            ("pi.w2", &self.pi.w2),
            ("pi.b2", &self.pi.b2),
            ("vsi.wq", &v.wq),
            ("vsi.wk", &v.wk),
            ("vsi.wv", &v.wv),
            ("vsi.wa", &v.wa),
            ("vsi.norm1.gain", &v.norm1.gain),
            ("vsi.norm1.bias", &v.norm1.bias),
            ("vsi.wr", &v.ffn_in.weight),
            ("vsi.b3", &v.ffn_in.bias),
            ("vsi.wo", &v.ffn_out.weight),
            ("vsi.b4", &v.ffn_out.bias),
            ("vsi.norm2.gain", &v.norm2.gain),
            ("vsi.norm2.bias", &v.norm2.bias),
        ]
    }

    pub fn learnable_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let v = &mut self.vsi;
        vec![
            ("phi.weight", &mut self.phi.weight),
            ("phi.bias", &mut self.phi.bias),
            ("pi.w1", &mut self.pi.w1),
            ("pi.b1", &mut self.pi.b1),
            ("pi.w2", &mut self.pi.w2),
            ("pi.b2", &mut self.pi.b2),
            ("vsi.wq", &mut v.wq),
            ("vsi.wk", &mut v.wk),
            ("vsi.wv", &mut v.wv),
            ("vsi.wa", &mut v.wa),
            ("vsi.norm1.gain", &mut v.norm1.gain),
            ("vsi.norm1.bias", &mut v.norm1.bias),
            ("vsi.wr", &mut v.ffn_in.weight),
            ("vsi.b3", &mut v.ffn_in.bias),
            ("vsi.wo", &mut v.ffn_out.weight),
            ("vsi.b4", &mut v.ffn_out.bias),
            ("vsi.norm2.gain", &mut v.norm2.gain),
            ("vsi.norm2.bias", &mut v.norm2.bias),
        ]
    }
}

/// Either trainable classifier; both score n samples into an n×c matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Cprfl(ModelParams),
    Baseline(LinearBaseline),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Cprfl(_) => "cprfl",
            Model::Baseline(_) => "baseline",
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::Cprfl(p) => p.dims.c,
            Model::Baseline(b) => b.num_classes(),
        }
    }

    /// (v, d0) expected of every sample; v is unconstrained for the baseline.
    pub fn input_dims(&self) -> (Option<usize>, usize) {
        match self {
            Model::Cprfl(p) => (Some(p.dims.v), p.dims.d0),
            Model::Baseline(b) => (None, b.feat_dim()),
        }
    }

    pub fn learnable(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Model::Cprfl(p) => p.learnable(),
            Model::Baseline(b) => b.learnable(),
        }
    }

    pub fn learnable_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Model::Cprfl(p) => p.learnable_mut(),
            Model::Baseline(b) => b.learnable_mut(),
        }
    }

    pub fn embedding(&self) -> Option<&SemanticEmbedding> {
        match self {
            Model::Cprfl(p) => Some(&p.embedding),
            Model::Baseline(_) => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.learnable().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers the learnable tensors as graph leaves and records the
    /// forward pass; returns the n×c score node and the leaves in
    /// [`Model::learnable`] order.
    pub fn record(&self, g: &mut Graph, samples: &[&Sample]) -> Result<(Var, Vec<Var>)> {
        if samples.is_empty() {
            return Err(Error::invalid("forward needs at least one sample"));
        }
        let (v, d0) = self.input_dims();
        for s in samples {
            let shape = s.features.shape();
            if shape[1] != d0 || v.is_some_and(|v| v != shape[0]) {
                return Err(Error::Dimension {
                    op: "forward",
                    lhs: shape.to_vec(),
                    rhs: vec![v.unwrap_or(shape[0]), d0],
                });
            }
            if s.labels.len() != self.num_classes() {
                return Err(Error::Mismatch(format!(
                    "sample has {} labels, model has {} classes",
                    s.labels.len(),
                    self.num_classes()
                )));
            }
        }
        match self {
            Model::Cprfl(p) => cprfl::record_batch(p, g, samples, PromptPaths::BOTH),
            Model::Baseline(b) => b.record_batch(g, samples),
        }
    }

    /// Scores as a row-major n×c matrix.
    pub fn predict(&self, samples: &[&Sample]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (scores, _) = self.record(&mut g, samples)?;
        Ok(g.value(scores).data().to_vec())
    }

    /// Batch loss and its gradient for every learnable tensor.
    pub fn loss_and_grads(&self, samples: &[&Sample], loss: &Loss) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let (scores, leaves) = self.record(&mut g, samples)?;
        let labels: Vec<f64> = samples.iter().flat_map(|s| s.labels_f64()).collect();
        let l = loss.record(&mut g, scores, &labels)?;
        g.backward(l)?;
        let grads = leaves
            .iter()
            .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
            .collect();
        Ok((g.value(l).data()[0], grads))
    }
}
