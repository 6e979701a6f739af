use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::CounterRng;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Name of the parameter holding the worst coordinate.
    pub worst: Option<String>,
}

/// Compares analytic gradients of `loss_fn` against central differences.
///
/// Samples up to `per_tensor` coordinates from every trainable parameter and
/// reports `max |analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, per_tensor: usize, seed: u64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::Validation(format!("gradient-check step {eps} outside [1e-5, 1e-2]")));
    }
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        check_finite(g.value(loss).item())?;
        let grads = g.backward(loss)?;
        (0..store.len())
            .map(|id| grads.param_grad(id).map(<[f64]>::to_vec))
            .collect()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        check_finite(g.value(loss).item())
    };

    let mut rng = CounterRng::new(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    for id in 0..store.len() {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.value(id).len();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > per_tensor {
            rng.shuffle(&mut coords);
            coords.truncate(per_tensor);
        }
        for &c in &coords {
            let orig = store.value(id).data()[c];
            store.get_mut(id).tensor.data_mut()[c] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).tensor.data_mut()[c] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).tensor.data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic[id].as_ref().map_or(0.0, |g| g[c]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(store.get(id).name.clone());
            }
        }
    }
    Ok(report)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("loss is {v}")))
    }
}
