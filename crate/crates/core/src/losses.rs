//! Multi-label objectives over per-class probabilities.
//!
//! Each loss is a sum over classes for one sample; batches reduce with the
//! mean of per-sample sums. Log arguments are floored at [`LOG_EPS`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

pub const LOG_EPS: f64 = 1e-8;

/// Asymmetric loss settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AslConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    /// Probability margin; negatives with `s <= mu` are dropped.
    pub mu: f64,
}

impl Default for AslConfig {
    fn default() -> Self {
        AslConfig {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            mu: 0.05,
        }
    }
}

impl AslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0) || !(self.gamma_neg >= 0.0) {
            return Err(Error::invalid("ASL focusing exponents must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.mu) {
            return Err(Error::invalid(format!("ASL margin must lie in [0, 1), got {}", self.mu)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Loss {
    Asl(AslConfig),
    Bce,
    Focal { gamma: f64 },
}

/// `loss` block of the training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_pos: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_neg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            name: "asl".into(),
            gamma_pos: None,
            gamma_neg: None,
            mu: None,
        }
    }
}

impl LossSpec {
    /// Resolves the named loss. `focal` takes its exponent from `gamma_pos`
    /// (default 2).
    pub fn resolve(&self) -> Result<Loss> {
        match self.name.as_str() {
            "asl" => {
                let d = AslConfig::default();
                let cfg = AslConfig {
                    gamma_pos: self.gamma_pos.unwrap_or(d.gamma_pos),
                    gamma_neg: self.gamma_neg.unwrap_or(d.gamma_neg),
                    mu: self.mu.unwrap_or(d.mu),
                };
                cfg.validate()?;
                Ok(Loss::Asl(cfg))
            }
            "bce" => Ok(Loss::Bce),
            "focal" => {
                let gamma = self.gamma_pos.unwrap_or(2.0);
                if !(gamma >= 0.0) {
                    return Err(Error::invalid("focal gamma must be >= 0"));
                }
                Ok(Loss::Focal { gamma })
            }
            other => Err(Error::invalid(format!(
                "unknown loss `{other}` (expected asl, bce or focal)"
            ))),
        }
    }
}

fn check_inputs(s: &[f64], y: &[f64]) -> Result<()> {
    if s.len() != y.len() {
        return Err(Error::Dimension {
            op: "loss",
            lhs: vec![s.len()],
            rhs: vec![y.len()],
        });
    }
    if let Some(j) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!("label {j} is {} (must be 0 or 1)", y[j])));
    }
    if let Some(j) = s.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            name: "scores".into(),
            index: j,
        });
    }
    if let Some(j) = s.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid(format!("score {j} is {} (must lie in [0, 1])", s[j])));
    }
    Ok(())
}

fn safe_log(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

/// d/dx ln(max(x, eps)).
fn safe_log_grad(x: f64) -> f64 {
    if x > LOG_EPS {
        1.0 / x
    } else {
        0.0
    }
}

/// Weighted log term `-w^gamma * ln(max(q, eps))` and its derivative with
/// respect to `w`, where `q` moves with `dq_dw`.
fn focal_term(w: f64, q: f64, dq_dw: f64, gamma: f64) -> (f64, f64) {
    let log_q = safe_log(q);
    let weight = if gamma == 0.0 { 1.0 } else { w.powf(gamma) };
    let value = -weight * log_q;
    let dweight = if gamma == 0.0 || log_q == 0.0 || w == 0.0 {
        0.0
    } else {
        gamma * w.powf(gamma - 1.0)
    };
    let grad = -(dweight * log_q + weight * safe_log_grad(q) * dq_dw);
    (value, grad)
}

fn positive_term(s: f64, gamma: f64) -> (f64, f64) {
    // weight (1 - s)^gamma, log argument s
    let (v, d_dw) = focal_term(1.0 - s, s, -1.0, gamma);
    // d/ds = d/dw * dw/ds with dw/ds = -1
    (v, -d_dw)
}

/// Contribution of a negative label under margin `mu`.
fn negative_term(s: f64, gamma: f64, mu: f64) -> (f64, f64) {
    let shifted = s - mu;
    if shifted <= 0.0 {
        return (0.0, 0.0);
    }
    focal_term(shifted, 1.0 - shifted, -1.0, gamma)
}

/// Asymmetric loss of one sample, summed over classes.
pub fn asl(s: &[f64], y: &[f64], cfg: &AslConfig) -> Result<f64> {
    Ok(asl_with_grad(s, y, cfg)?.0)
}

pub fn asl_with_grad(s: &[f64], y: &[f64], cfg: &AslConfig) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    check_inputs(s, y)?;
    let mut total = 0.0;
    let grad = s
        .iter()
        .zip(y)
        .map(|(&sj, &yj)| {
            let (v, g) = if yj == 1.0 {
                positive_term(sj, cfg.gamma_pos)
            } else {
                negative_term(sj, cfg.gamma_neg, cfg.mu)
            };
            total += v;
            g
        })
        .collect();
    Ok((total, grad))
}

/// Binary cross-entropy of one sample, summed over classes.
pub fn bce(s: &[f64], y: &[f64]) -> Result<f64> {
    Ok(bce_with_grad(s, y)?.0)
}

pub fn bce_with_grad(s: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_inputs(s, y)?;
    let mut total = 0.0;
    let grad = s
        .iter()
        .zip(y)
        .map(|(&sj, &yj)| {
            if yj == 1.0 {
                total -= safe_log(sj);
                -safe_log_grad(sj)
            } else {
                total -= safe_log(1.0 - sj);
                safe_log_grad(1.0 - sj)
            }
        })
        .collect();
    Ok((total, grad))
}

/// Symmetric focal loss of one sample, summed over classes.
pub fn focal(s: &[f64], y: &[f64], gamma: f64) -> Result<f64> {
    Ok(focal_with_grad(s, y, gamma)?.0)
}

pub fn focal_with_grad(s: &[f64], y: &[f64], gamma: f64) -> Result<(f64, Vec<f64>)> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid("focal gamma must be >= 0"));
    }
    check_inputs(s, y)?;
    let mut total = 0.0;
    let grad = s
        .iter()
        .zip(y)
        .map(|(&sj, &yj)| {
            let (v, g) = if yj == 1.0 {
                positive_term(sj, gamma)
            } else {
                focal_term(sj, 1.0 - sj, -1.0, gamma)
            };
            total += v;
            g
        })
        .collect();
    Ok((total, grad))
}

impl Loss {
    pub fn name(&self) -> &'static str {
        match self {
            Loss::Asl(_) => "asl",
            Loss::Bce => "bce",
            Loss::Focal { .. } => "focal",
        }
    }

    /// Per-sample loss and its gradient with respect to the scores.
    pub fn value_and_grad(&self, s: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self {
            Loss::Asl(cfg) => asl_with_grad(s, y, cfg),
            Loss::Bce => bce_with_grad(s, y),
            Loss::Focal { gamma } => focal_with_grad(s, y, *gamma),
        }
    }

    pub fn value(&self, s: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.value_and_grad(s, y)?.0)
    }

    /// Mean over rows of per-sample losses for an n×c score matrix.
    pub fn batch_value_and_grad(&self, scores: &[f64], labels: &[f64], c: usize) -> Result<(f64, Vec<f64>)> {
        if c == 0 || scores.len() != labels.len() || scores.len() % c != 0 {
            return Err(Error::Dimension {
                op: "batch_loss",
                lhs: vec![scores.len()],
                rhs: vec![labels.len(), c],
            });
        }
        let n = scores.len() / c;
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(scores.len());
        for (s, y) in scores.chunks(c).zip(labels.chunks(c)) {
            let (v, g) = self.value_and_grad(s, y)?;
            total += v;
            grad.extend(g.into_iter().map(|x| x / n as f64));
        }
        Ok((total / n as f64, grad))
    }

    /// Records the batch loss of `scores` (n×c) against row-major `labels`.
    pub fn record(&self, g: &mut Graph, scores: Var, labels: &[f64]) -> Result<Var> {
        let c = g.value(scores).cols();
        let (value, grad) = self.batch_value_and_grad(g.value(scores).data(), labels, c)?;
        g.fused_scalar(scores, value, grad)
    }
}
