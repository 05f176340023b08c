use super::{ModelParams, LAYER_NORM_EPS};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::Loss;

/// Graph handles of the prompt-initialization weights.
#[derive(Clone, Copy, Debug)]
pub struct PiVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Graph handles of the encoder weights plus its static configuration.
#[derive(Clone, Copy, Debug)]
pub struct VsiVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wa: Var,
    pub norm1: (Var, Var),
    pub wr: Var,
    pub b3: Var,
    pub wo: Var,
    pub b4: Var,
    pub norm2: (Var, Var),
    pub heads: usize,
    pub literal: bool,
}

pub(super) struct ModelVars {
    pub phi_w: Var,
    pub phi_b: Var,
    pub pi: PiVars,
    pub vsi: VsiVars,
    pub embedding: Var,
    /// In `ModelParams::learnable` order.
    pub leaves: Vec<Var>,
}

impl ModelVars {
    pub fn register(p: &ModelParams, g: &mut Graph) -> Self {
        let leaves: Vec<Var> = p.learnable().iter().map(|(_, t)| g.leaf(t)).collect();
        let embedding = g.constant(&p.embedding.weights);
        let l = &leaves;
        ModelVars {
            phi_w: l[0],
            phi_b: l[1],
            pi: PiVars {
                w1: l[2],
                b1: l[3],
                w2: l[4],
                b2: l[5],
            },
            vsi: VsiVars {
                wq: l[6],
                wk: l[7],
                wv: l[8],
                wa: l[9],
                norm1: (l[10], l[11]),
                wr: l[12],
                b3: l[13],
                wo: l[14],
                b4: l[15],
                norm2: (l[16], l[17]),
                heads: p.dims.heads,
                literal: p.literal_equations,
            },
            embedding,
            leaves,
        }
    }
}

/// Maps a v×d0 feature map into the d-dimensional joint space.
pub fn project_features(g: &mut Graph, f_loc: Var, weight: Var, bias: Var) -> Result<Var> {
    let projected = g.matmul(f_loc, weight)?;
    g.add_row_bias(projected, bias)
}

/// `P = GELU(W·W1 + b1)·W2 + b2`. Labels play no part.
pub fn init_prompts(g: &mut Graph, embedding: Var, pi: &PiVars) -> Result<Var> {
    let h = g.matmul(embedding, pi.w1)?;
    let h = g.add_row_bias(h, pi.b1)?;
    let h = g.gelu(h);
    let p = g.matmul(h, pi.w2)?;
    g.add_row_bias(p, pi.b2)
}

fn attention(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, scale);
    let weights = g.softmax_rows(logits);
    g.matmul(weights, v)
}

/// Runs the encoder layer over `[F; P]` and returns the refined prompt rows.
///
/// Only prompt rows are used as queries: every later stage of the layer is
/// row-wise, so the visual-token outputs never influence the prompt slice.
pub fn vsi_forward(g: &mut Graph, features: Var, prompts: Var, vsi: &VsiVars) -> Result<Var> {
    let (fd, pd) = (g.value(features).cols(), g.value(prompts).cols());
    if fd != pd {
        return Err(Error::Dimension {
            op: "vsi_forward",
            lhs: g.shape(features).to_vec(),
            rhs: g.shape(prompts).to_vec(),
        });
    }
    let d = pd;
    if vsi.heads == 0 || d % vsi.heads != 0 {
        return Err(Error::invalid(format!("width {d} not divisible by {} heads", vsi.heads)));
    }
    let v = g.value(features).rows();
    let c = g.value(prompts).rows();
    let z = g.concat_rows(features, prompts)?;
    let zp = g.slice_rows(z, v, v + c)?;
    let q = g.matmul(zp, vsi.wq)?;
    let k = g.matmul(z, vsi.wk)?;
    let val = g.matmul(z, vsi.wv)?;

    if vsi.literal {
        let mixed = attention(g, q, k, val, 1.0 / (d as f64).sqrt())?;
        let h = g.matmul(mixed, vsi.wr)?;
        let h = g.add_row_bias(h, vsi.b3)?;
        let h = g.gelu(h);
        let out = g.matmul(h, vsi.wo)?;
        return g.add_row_bias(out, vsi.b4);
    }

    let dh = d / vsi.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(vsi.heads);
    for h in 0..vsi.heads {
        let (from, to) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, from, to)?;
        let kh = g.slice_cols(k, from, to)?;
        let vh = g.slice_cols(val, from, to)?;
        heads.push(attention(g, qh, kh, vh, scale)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let attn = g.matmul(merged, vsi.wa)?;
    let x1 = g.add(zp, attn)?;
    let x1 = g.layer_norm_rows(x1, vsi.norm1.0, vsi.norm1.1, LAYER_NORM_EPS)?;
    let h = g.matmul(x1, vsi.wr)?;
    let h = g.add_row_bias(h, vsi.b3)?;
    let h = g.gelu(h);
    let f = g.matmul(h, vsi.wo)?;
    let f = g.add_row_bias(f, vsi.b4)?;
    let x2 = g.add(x1, f)?;
    g.layer_norm_rows(x2, vsi.norm2.0, vsi.norm2.1, LAYER_NORM_EPS)
}

/// `s_i = sigmoid(p'_i · p_i)`, one score per class.
pub fn classify(g: &mut Graph, refined: Var, prompts: Var) -> Result<Var> {
    let dots = g.row_dot(refined, prompts)?;
    Ok(g.sigmoid(dots))
}

/// Which of the two uses of the prompt tensor pass gradient back to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptPaths {
    pub through_encoder: bool,
    pub through_classifier: bool,
}

impl PromptPaths {
    pub const BOTH: PromptPaths = PromptPaths {
        through_encoder: true,
        through_classifier: true,
    };
}

pub(super) struct Recorded {
    pub scores: Var,
    pub leaves: Vec<Var>,
    pub prompts: Var,
    pub refined: Vec<Var>,
}

pub(super) fn record_full(
    p: &ModelParams,
    g: &mut Graph,
    samples: &[&Sample],
    paths: PromptPaths,
) -> Result<Recorded> {
    let vars = ModelVars::register(p, g);
    let prompts = init_prompts(g, vars.embedding, &vars.pi)?;
    let encoder_in = if paths.through_encoder { prompts } else { g.detach(prompts) };
    let classifier_in = if paths.through_classifier { prompts } else { g.detach(prompts) };
    let mut rows = Vec::with_capacity(samples.len());
    let mut refined = Vec::with_capacity(samples.len());
    for s in samples {
        let x = g.constant(&s.features);
        let f = project_features(g, x, vars.phi_w, vars.phi_b)?;
        let p_ref = vsi_forward(g, f, encoder_in, &vars.vsi)?;
        let scores = classify(g, p_ref, classifier_in)?;
        rows.push(scores);
        refined.push(p_ref);
    }
    let scores = g.concat_rows_many(&rows)?;
    Ok(Recorded {
        scores,
        leaves: vars.leaves,
        prompts,
        refined,
    })
}

pub(super) fn record_batch(
    p: &ModelParams,
    g: &mut Graph,
    samples: &[&Sample],
    paths: PromptPaths,
) -> Result<(Var, Vec<Var>)> {
    let r = record_full(p, g, samples, paths)?;
    Ok((r.scores, r.leaves))
}

fn check_sample(p: &ModelParams, sample: &Sample) -> Result<()> {
    let shape = sample.features.shape();
    if shape != [p.dims.v, p.dims.d0] {
        return Err(Error::Dimension {
            op: "forward",
            lhs: shape.to_vec(),
            rhs: vec![p.dims.v, p.dims.d0],
        });
    }
    Ok(())
}

/// Initial and refined prompts for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub initial: Tensor,
    pub refined: Tensor,
}

impl PromptSet {
    pub fn compute(sample: &Sample, params: &ModelParams) -> Result<Self> {
        check_sample(params, sample)?;
        let mut g = Graph::new();
        let r = record_full(params, &mut g, &[sample], PromptPaths::BOTH)?;
        Ok(PromptSet {
            initial: g.value(r.prompts).clone(),
            refined: g.value(r.refined[0]).clone(),
        })
    }
}

/// Per-class probabilities for one sample.
pub fn forward(sample: &Sample, params: &ModelParams) -> Result<Tensor> {
    check_sample(params, sample)?;
    let mut g = Graph::new();
    let (scores, _) = record_batch(params, &mut g, &[sample], PromptPaths::BOTH)?;
    Tensor::vector(g.value(scores).data().to_vec())
}

/// Gradients of the loss with respect to the prompt tensor P.
#[derive(Clone, Debug, PartialEq)]
pub struct DualPathGrads {
    /// Both paths live.
    pub total: Tensor,
    /// Encoder input detached: only the classifier path.
    pub direct: Tensor,
    /// Classifier input detached: only the encoder path.
    pub via_vsi: Tensor,
}

pub fn dual_path_grads(samples: &[&Sample], params: &ModelParams, loss: &Loss) -> Result<DualPathGrads> {
    let run = |paths: PromptPaths| -> Result<Tensor> {
        for s in samples {
            check_sample(params, s)?;
        }
        let mut g = Graph::new();
        let r = record_full(params, &mut g, samples, paths)?;
        let labels: Vec<f64> = samples.iter().flat_map(|s| s.labels_f64()).collect();
        let l = loss.record(&mut g, r.scores, &labels)?;
        g.backward(l)?;
        let grad = g.grad(r.prompts).expect("prompts are tracked").to_vec();
        Tensor::new(g.shape(r.prompts).to_vec(), grad)
    };
    Ok(DualPathGrads {
        total: run(PromptPaths::BOTH)?,
        direct: run(PromptPaths {
            through_encoder: false,
            through_classifier: true,
        })?,
        via_vsi: run(PromptPaths {
            through_encoder: true,
            through_classifier: false,
        })?,
    })
}
