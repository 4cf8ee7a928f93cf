use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Worst coordinate found by [`check_gradients_detailed`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares the tape gradient of `loss_fn` against central finite differences
/// `(f(t+eps) - f(t-eps)) / 2 eps` for every coordinate of every parameter
/// in `params` and returns the worst relative error, using the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradients<F>(loss_fn: F, store: &mut ParamStore, params: &[ParamId], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    check_gradients_detailed(loss_fn, store, params, eps).map(|r| r.max_rel_error)
}

pub fn check_gradients_detailed<F>(
    mut loss_fn: F,
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let base = tape.scalar(loss);
    if !base.is_finite() {
        return Err(Error::Numerical(format!("loss is non-finite ({base}) at the evaluation point")));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&id| match tape.grad(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; store.get(id).len()],
        })
        .collect();

    let mut eval = |store: &ParamStore, id: ParamId, i: usize, sign: &str| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss_fn(&mut t, store)?;
        let v = t.scalar(l);
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "loss is non-finite ({v}) after perturbing {}[{i}] by {sign}eps",
                store.name(id)
            )));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for (p, &id) in params.iter().enumerate() {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store, id, i, "+");
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store, id, i, "-");
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic[p][i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = Some(store.name(id).to_string());
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
