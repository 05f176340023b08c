use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A scalar function of a list of parameter tensors with an analytic gradient.
pub trait Objective {
    fn value(&self, params: &[Tensor]) -> Result<f64>;

    /// Value and one gradient buffer per parameter, in parameter order.
    fn value_and_grad(&self, params: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Relative error used throughout: |a − n| / max(|a|, |n|, 1e-8).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `f` against central differences for
/// every entry of every parameter.
pub fn grad_check<F: Objective + ?Sized>(
    f: &F,
    names: &[String],
    params: &[Tensor],
    eps: f64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!("grad_check eps must be > 0, got {eps}")));
    }
    if names.len() != params.len() {
        return Err(Error::invalid("grad_check: one name per parameter required"));
    }
    for (name, p) in names.iter().zip(params) {
        p.check_finite(name)?;
    }
    let (base, analytic) = f.value_and_grad(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            name: "objective".into(),
            index: 0,
        });
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: names.first().cloned().unwrap_or_default(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut work = params.to_vec();
    for (pi, name) in names.iter().enumerate() {
        for j in 0..params[pi].numel() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = f.value(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = f.value(&work)?;
            work[pi].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    name: name.clone(),
                    index: j,
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][j];
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
