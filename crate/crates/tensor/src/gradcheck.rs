//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Largest relative error observed for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// Relative error `|a-b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of a scalar loss against central
/// differences `(f(θ+h) - f(θ-h)) / 2h`, element by element.
///
/// `loss` builds the loss on a fresh graph from the given parameters.
pub fn grad_check<F>(store: &ParamStore, h: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_ladder(store, &[h], loss)
}

/// Like [`grad_check`], but each element is scored against the central
/// difference from whichever step in `steps` agrees best.
///
/// A single step cannot serve every element: truncation error dominates
/// where the gradient is small next to the third derivative, roundoff where
/// the loss is large next to the gradient.
pub fn grad_check_ladder<F>(store: &ParamStore, steps: &[f64], loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if steps.is_empty() {
        return Err(TensorError::Invalid("no step sizes given".into()));
    }
    if let Some(h) = steps.iter().find(|h| h.is_nan() || **h <= 0.0) {
        return Err(TensorError::Invalid(format!("step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let analytic = g.backward(out, store)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, s)?;
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite { op: "grad_check" })
        }
    };

    let mut work = store.clone();
    let mut report = Vec::with_capacity(store.len());
    for (id, p) in store.iter() {
        let mut worst = 0.0f64;
        let mut max_abs = 0.0f64;
        for i in 0..p.value.len() {
            let a = analytic.get(id).map_or(0.0, |t| t.data()[i]);
            let mut best = f64::INFINITY;
            for &h in steps {
                let n = central_difference(&mut work, id, i, h, &eval)?;
                best = best.min(rel_err(a, n));
            }
            worst = worst.max(best);
            max_abs = max_abs.max(a.abs());
        }
        report.push(ParamCheck {
            name: p.name.clone(),
            max_rel_err: worst,
            max_abs_grad: max_abs,
        });
    }
    Ok(GradCheckReport { params: report })
}

fn central_difference(
    work: &mut ParamStore,
    id: ParamId,
    i: usize,
    h: f64,
    eval: &impl Fn(&ParamStore) -> Result<f64>,
) -> Result<f64> {
    let orig = work.value(id).data()[i];
    work.value_mut(id).data_mut()[i] = orig + h;
    let plus = eval(work);
    work.value_mut(id).data_mut()[i] = orig - h;
    let minus = eval(work);
    work.value_mut(id).data_mut()[i] = orig;
    Ok((plus? - minus?) / (2.0 * h))
}
