use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Tape and finite-difference values at the worst entry.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Compares tape gradients of every parameter entry against central finite
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`.
///
/// The error per entry is `|a − n| / max(|a|, |n|, 1e-8)`; the maximum over
/// all entries is reported. `f` must be deterministic.
pub fn grad_check<Fm>(store: &mut ParamStore<f64>, eps: f64, f: Fm) -> Result<GradCheckReport>
where
    Fm: for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        Ok(g.scalar(loss))
    };

    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        let grads = g.backward(loss)?;
        store
            .ids()
            .map(|id| {
                let n = store.value(id).numel();
                let v = grads
                    .param(id)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; n]);
                (id, v)
            })
            .collect()
    };

    let first = eval(store)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for (id, grad) in analytic {
        for (k, &a) in grad.iter().enumerate() {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), k));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
