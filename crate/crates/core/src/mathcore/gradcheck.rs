//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `(f(x + h) - f(x - h)) / 2h`
pub fn central_difference<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Names for contiguous segments of a flat parameter vector, so a failing
/// index can be reported as e.g. `hidden.weight[12]`.
#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    segments: Vec<(String, usize)>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, len: usize) {
        self.segments.push((name.into(), len));
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|(_, n)| n).sum()
    }

    pub fn segments(&self) -> &[(String, usize)] {
        &self.segments
    }

    pub fn name_of(&self, mut index: usize) -> String {
        for (name, len) in &self.segments {
            if index < *len {
                return format!("{name}[{index}]");
            }
            index -= len;
        }
        format!("param[{index}]")
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Index with the largest relative error.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    /// Set when `max_rel_err` exceeds the tolerance.
    pub failing_param: Option<String>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing_param.is_none()
    }
}

/// Compares `analytic` against central differences of `loss` around `params`
/// with step [`FD_STEP`].
///
/// The closure is evaluated twice at `params` first; differing results are
/// reported as [`Error::NonDeterministic`].
pub fn grad_check<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    tolerance: f64,
    layout: Option<&ParamLayout>,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::shape("grad_check", params.len(), analytic.len()));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("grad_check params".into()));
    }
    let first = loss(params);
    let second = loss(params);
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: analytic.first().copied().unwrap_or(0.0),
        numeric_at_worst: 0.0,
        failing_param: None,
        checked: params.len(),
    };
    for i in 0..params.len() {
        let x = params[i];
        work[i] = x + FD_STEP;
        let up = loss(&work);
        work[i] = x - FD_STEP;
        let down = loss(&work);
        work[i] = x;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_err || i == 0 {
            report.max_rel_err = err;
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    if !(report.max_rel_err <= tolerance) {
        report.failing_param = Some(match layout {
            Some(l) => l.name_of(report.worst_index),
            None => format!("param[{}]", report.worst_index),
        });
    }
    Ok(report)
}
