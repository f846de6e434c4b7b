use super::{GradSet, ParamSet};
use crate::Result;

/// Magnitude below which gradient entries are compared absolutely rather
/// than relatively (central differences carry ~1e-10 absolute noise at
/// `eps = 1e-5`).
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Worst-case disagreement between analytic and numerical gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares the analytic gradient returned by `loss_fn` against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε` on every parameter entry.
pub fn grad_check<F>(mut loss_fn: F, params: &ParamSet, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<(f64, GradSet)>,
{
    let (_, analytic) = loss_fn(params)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    for id in params.ids() {
        let n = params.value(id).as_slice().len();
        for i in 0..n {
            let original = params.value(id).as_slice()[i];
            probe.value_mut(id).as_mut_slice()[i] = original + eps;
            let (plus, _) = loss_fn(&probe)?;
            probe.value_mut(id).as_mut_slice()[i] = original - eps;
            let (minus, _) = loss_fn(&probe)?;
            probe.value_mut(id).as_mut_slice()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).as_slice()[i];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_param = params.get(id).name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Group, Matrix};

    #[test]
    fn quadratic_loss_is_exact() {
        let mut params = ParamSet::new();
        params.add(
            "theta",
            Group::Extractor,
            Matrix::from_rows(&[[0.3, -0.8, 0.5], [1.0, -0.2, 0.05]]).unwrap(),
        );
        let loss = |p: &ParamSet| {
            let mut grads = GradSet::zeros_like(p);
            let mut value = 0.0;
            for (id, param) in p.iter() {
                value += 0.5 * param.value.as_slice().iter().map(|v| v * v).sum::<f64>();
                *grads.get_mut(id) = param.value.clone();
            }
            Ok((value, grads))
        };
        let report = grad_check(loss, &params, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-8, "{report:?}");
        assert_eq!(report.entries_checked, 6);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut params = ParamSet::new();
        params.add("theta", Group::Extractor, Matrix::filled(1, 1, 2.0));
        let loss = |p: &ParamSet| {
            let v = p.value(crate::numcore::ParamId(0))[(0, 0)];
            let mut grads = GradSet::zeros_like(p);
            grads.get_mut(crate::numcore::ParamId(0))[(0, 0)] = v; // true gradient is 3v²
            Ok((v * v * v, grads))
        };
        let report = grad_check(loss, &params, 1e-5).unwrap();
        assert!(report.max_rel_error > 0.5);
        assert_eq!(report.worst_param, "theta");
    }
}
