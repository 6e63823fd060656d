use super::graph::Var;
use super::params::{ParamStore, Session};
use super::NumError;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64, NumError>
where
    F: Fn(&mut Session<'_>) -> Result<Var, NumError>,
{
    let mut sess = Session::new(store);
    let out = f(&mut sess)?;
    let v = sess.graph.value(out);
    if v.len() != 1 {
        return Err(NumError::Argument(format!("checked function must be scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares tape gradients against central finite differences.
///
/// Every trainable coordinate is checked when there are at most
/// `max_coords` of them; otherwise an evenly strided subset is. The error
/// of one coordinate is `|analytic − numeric| / max(1, |analytic|)`.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    f: F,
    eps: f64,
    max_coords: usize,
) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Session<'_>) -> Result<Var, NumError>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(NumError::Argument(format!("finite-difference step {eps} outside (0, 1e-3]")));
    }
    let first = eval(store, &f)?;
    let second = eval(store, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(NumError::Oracle(format!("function is not deterministic: {first} vs {second}")));
    }
    let analytic = {
        let mut sess = Session::new(store);
        let out = f(&mut sess)?;
        sess.param_grads(out)?
    };
    let total: usize = analytic.iter().map(|(_, g)| g.len()).sum();
    let stride = if max_coords == 0 || total <= max_coords { 1 } else { total.div_ceil(max_coords) };

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut flat = 0usize;
    for (id, grad) in &analytic {
        for i in 0..grad.len() {
            let take = flat.is_multiple_of(stride);
            flat += 1;
            if !take {
                continue;
            }
            let orig = store.get(*id).data()[i];
            store.get_mut(*id).data_mut()[i] = orig + eps;
            let plus = eval(store, &f);
            store.get_mut(*id).data_mut()[i] = orig - eps;
            let minus = eval(store, &f);
            store.get_mut(*id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_relative_error: worst, coordinates_checked: checked })
}
