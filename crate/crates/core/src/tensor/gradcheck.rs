use crate::error::Result;

use super::{ParameterStore, Tape, Var};

/// Gradients smaller than this are compared in absolute rather than relative
/// terms. Central differences of a loss near 20 at eps = 1e-5 carry about
/// 5e-10 of rounding noise, so relative error below this floor measures the
/// noise, not the gradient.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index where the worst error occurred.
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compare reverse-mode gradients of `f` against central differences with
/// step `eps`, for every entry of every parameter.
///
/// Relative error is `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn grad_check<F>(store: &mut ParameterStore<f64>, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    tape.accumulate_param_grads(store);
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grads();

    let eval = |store: &ParameterStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.value(loss)[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    for pi in 0..store.len() {
        for i in 0..store.get(pi).value.len() {
            let orig = store.get(pi).value.data[i];
            store.get_mut(pi).value.data[i] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(pi).value.data[i] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(pi).value.data[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.entries_checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = store.get(pi).name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
