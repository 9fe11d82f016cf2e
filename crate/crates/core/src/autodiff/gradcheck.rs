use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error used throughout: `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks every coordinate of `x`; see [`grad_check_at`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let all: Vec<usize> = (0..x.shape().numel()).collect();
    grad_check_at(f, x, eps, &all)
}

/// Compares the reverse-mode gradient of the scalar `f(x)` with respect to
/// the trainable leaf `x` against central differences at the given flat
/// coordinates. `f` may also ignore its argument and close over a model
/// that owns `x` as one of its parameters.
///
/// Any gradient already accumulated on `x` is preserved.
pub fn grad_check_at<F>(
    f: F,
    x: &Tensor<f64>,
    eps: f64,
    indices: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if !x.requires_grad() {
        return Err(Error::State(
            "grad_check needs a trainable leaf tensor".into(),
        ));
    }
    let saved = x.take_grad();
    let loss = f(x)?;
    loss.backward()?;
    let analytic = x
        .take_grad()
        .map(|g| g.into_vec())
        .unwrap_or_else(|| vec![0.0; x.shape().numel()]);

    let eval = |i: usize, v: f64| -> Result<f64> {
        x.value_mut().data_mut()[i] = v;
        Ok(f(x)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &i in indices {
        let orig = x.value().data()[i];
        let plus = eval(i, orig + eps);
        let minus = eval(i, orig - eps);
        x.value_mut().data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    x.zero_grad();
    if let Some(g) = saved {
        x.accumulate_grad(g);
    }
    Ok(report)
}
