use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Moment estimates and step counter of the Adam optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zeroed moments for parameters of the given element counts.
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_params(params: &[&Tensor]) -> Self {
        Self::new(&params.iter().map(|p| p.numel()).collect::<Vec<_>>())
    }
}

/// One Adam update with bias correction. Weight decay enters as an L2 term
/// on the gradient (`g + wd * theta`). Tensors that do not require grad are
/// left alone.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Mismatch(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        let n = p.numel();
        if grads[i].len() != n || state.m[i].len() != n || state.v[i].len() != n {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: vec![grads[i].len()],
            });
        }
    }
    let t = state
        .t
        .checked_add(1)
        .filter(|&t| t <= i32::MAX as u64)
        .ok_or_else(|| Error::invalid("adam step counter overflow"))?;
    state.t = t;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.requires_grad() {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j] + weight_decay * *theta;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
