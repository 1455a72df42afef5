//! Central-difference verification of analytic gradients.

use crate::error::{Result, TadaError};
use crate::model::{Prepared, TadaModel};
use crate::params::{Gradients, ParamId, ParamStore};

/// Worst-case agreement for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    /// Maximum error over parameters whose name starts with `prefix`.
    pub fn max_for_prefix(&self, prefix: &str) -> Option<f64> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.max_rel_error)
            .reduce(f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the gradients returned by `f` against `(f(p+eps) - f(p-eps)) / (2 eps)`
/// for every scalar of every parameter selected by `filter`.
///
/// `f` must be deterministic; two baseline evaluations that disagree bitwise are
/// reported as a verification error.
pub fn grad_check<F>(
    params: &ParamStore,
    eps: f64,
    filter: impl Fn(&str) -> bool,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    let (base, analytic) = f(params)?;
    let (again, _) = f(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(TadaError::Verification(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }
    let mut work = params.clone();
    let mut checks = Vec::new();
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        if !filter(&name) {
            continue;
        }
        let mut worst = ParamCheck {
            name,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let (plus, _) = f(&work)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let (minus, _) = f(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).data()[k];
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error || k == 0 {
                worst.max_rel_error = err;
                worst.worst_index = k;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        checks.push(worst);
    }
    Ok(GradCheckReport { params: checks })
}

/// Module a parameter belongs to: its name up to the first dot.
pub fn module_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Worst relative error per module, in parameter declaration order.
pub fn module_errors(report: &GradCheckReport) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for p in &report.params {
        let m = module_of(&p.name);
        match out.iter_mut().find(|(n, _)| n == m) {
            Some((_, e)) => *e = e.max(p.max_rel_error),
            None => out.push((m.to_string(), p.max_rel_error)),
        }
    }
    out
}

/// Checks the gradient of the mean batch loss with respect to every parameter.
pub fn check_model(model: &TadaModel, batch: &[Prepared], eps: f64) -> Result<GradCheckReport> {
    let refs: Vec<&Prepared> = batch.iter().collect();
    grad_check(
        &model.params,
        eps,
        |_| true,
        |p| model.arch.batch_loss(p, &refs),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::tensor::Tensor;

    fn store(vals: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = vals.len();
        s.add("p", Tensor::new(vec![n], vals).unwrap());
        s
    }

    #[test]
    fn quadratic_matches() {
        let params = store(vec![1.0, 2.0]);
        let f = |p: &ParamStore| {
            let mut g = Graph::new(p);
            let x = g.param(p.id_of("p").unwrap());
            let sq = g.mul(x, x)?;
            let loss = g.sum(sq);
            let grads = g.backward(loss)?;
            Ok((g.value(loss).item(), grads))
        };
        let (_, grads) = f(&params).unwrap();
        assert_eq!(grads.get(params.id_of("p").unwrap()).data(), &[2.0, 4.0]);
        let report = grad_check(&params, 1e-5, |_| true, f).unwrap();
        assert!(report.max_rel_error() < 1e-9, "{report:?}");
    }

    #[test]
    fn dead_relu_region_is_flat() {
        let params = store(vec![-1.0, -2.5]);
        let report = grad_check(
            &params,
            1e-4,
            |_| true,
            |p| {
                let mut g = Graph::new(p);
                let x = g.param(p.id_of("p").unwrap());
                let r = g.relu(x);
                let loss = g.sum(r);
                let grads = g.backward(loss)?;
                Ok((g.value(loss).item(), grads))
            },
        )
        .unwrap();
        assert_eq!(report.params[0].analytic, 0.0);
        assert_eq!(report.params[0].numeric, 0.0);
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let counter = Cell::new(0.0);
        let params = store(vec![1.0]);
        let res = grad_check(
            &params,
            1e-5,
            |_| true,
            |p| {
                counter.set(counter.get() + 1.0);
                Ok((counter.get(), Gradients::zeros_like(p)))
            },
        );
        assert!(matches!(res, Err(TadaError::Verification(_))));
    }
}
