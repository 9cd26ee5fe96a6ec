use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!("expected a scalar, got {:?}", t.shape())));
    }
    let x = t.item();
    if !x.is_finite() {
        return Err(Error::Evaluation(format!("non-finite function value {x}")));
    }
    Ok(x)
}

/// Compare the reverse-mode gradient of `f` at `theta` against central
/// differences of step `h` over every coordinate; returns the worst relative
/// error.
pub fn finite_difference_check<F>(f: F, theta: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_input(None, f, theta, h)
}

/// Like [`finite_difference_check`], for a function that also reads the
/// (fixed) parameters in `store`.
pub fn check_input<F>(store: Option<&ParamStore>, f: F, theta: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::param("finite-difference step must be > 0"));
    }
    let graph = || match store {
        Some(s) => Graph::with_params(s),
        None => Graph::new(),
    };
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = graph();
        let x = g.constant(t.clone());
        let y = f(&mut g, x)?;
        eval_scalar(&g, y)
    };
    let mut g = graph();
    let x = g.constant(theta.clone());
    let y = f(&mut g, x)?;
    eval_scalar(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .var(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(theta.shape()));
    let mut worst = 0.0f64;
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Parameter-level check: gradient of `build` w.r.t. every tensor in `store`.
///
/// At most `max_coords` coordinates are probed per tensor (chosen with
/// `rng`); `None` probes every coordinate.
pub fn check_params<F>(
    store: &ParamStore,
    build: F,
    h: f64,
    max_coords: Option<usize>,
    rng: &mut RngStream,
) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let run = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let y = build(&mut g)?;
        eval_scalar(&g, y)
    };
    let grads = {
        let mut g = Graph::with_params(store);
        let y = build(&mut g)?;
        eval_scalar(&g, y)?;
        g.backward(y)?.into_params()
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        let n = store.get(id).len();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(m) = max_coords {
            if m < n {
                rng.shuffle(&mut coords);
                coords.truncate(m);
            }
        }
        for i in coords {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = run(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = run(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(grads[id.index()].data()[i], numeric));
        }
    }
    Ok(worst)
}
