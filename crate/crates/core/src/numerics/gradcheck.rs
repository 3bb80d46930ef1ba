//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumericsError, ParamId, ParamStore, ParamVars, Tensor, Var};

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<CoordinateCheck>,
    pub max_rel_err: f64,
}

impl GradcheckReport {
    fn push(&mut self, label: String, analytic: f64, numeric: f64) {
        let rel_err = relative_error(analytic, numeric);
        self.max_rel_err = self.max_rel_err.max(rel_err);
        self.checks.push(CoordinateCheck {
            label,
            analytic,
            numeric,
            rel_err,
        });
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        !self.checks.is_empty() && self.max_rel_err < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn sample_coords(len: usize, max: usize, seed: u64) -> Vec<usize> {
    if max >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, len, max).into_vec();
    picked.sort_unstable();
    picked
}

/// Checks `dloss/dx` for a graph rebuilt by `build` around the input value.
/// `build` returns the graph, the handle of the input leaf, and the loss.
pub fn check_var_gradient<F>(
    x0: &Tensor,
    h: f64,
    max_coords: usize,
    seed: u64,
    build: F,
) -> Result<GradcheckReport, NumericsError>
where
    F: Fn(&Tensor) -> Result<(Graph, Var, Var), NumericsError>,
{
    let (mut g, x, loss) = build(x0)?;
    g.backward(loss)?;
    let analytic = g
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x0.rows(), x0.cols()));
    let eval = |t: &Tensor| -> Result<f64, NumericsError> {
        let (g, _, loss) = build(t)?;
        g.value(loss).item()
    };
    let mut report = GradcheckReport::default();
    for i in sample_coords(x0.len(), max_coords, seed) {
        let mut plus = x0.clone();
        plus.data_mut()[i] += h;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        report.push(format!("x[{i}]"), analytic.data()[i], numeric);
    }
    Ok(report)
}

/// Checks parameter gradients of a loss built by `build` from a store.
/// `coords` lists `(parameter, flat index)` pairs to probe.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
    build: F,
) -> Result<GradcheckReport, NumericsError>
where
    F: Fn(&ParamStore) -> Result<(Graph, ParamVars, Var), NumericsError>,
{
    let (mut g, vars, loss) = build(store)?;
    g.backward(loss)?;
    let eval = |s: &ParamStore| -> Result<f64, NumericsError> {
        let (g, _, loss) = build(s)?;
        g.value(loss).item()
    };
    let mut report = GradcheckReport::default();
    for &(id, i) in coords {
        let analytic = g.grad(vars.var(id)).map_or(0.0, |t| t.data()[i]);
        let mut plus = store.clone();
        plus.value_mut(id).data_mut()[i] += h;
        let mut minus = store.clone();
        minus.value_mut(id).data_mut()[i] -= h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        report.push(format!("{}[{i}]", store.name(id)), analytic, numeric);
    }
    Ok(report)
}

/// `n` coordinates spread over every parameter of `store`, chosen by `seed`.
/// Parameters are visited round-robin, so each one is probed once `n`
/// reaches the parameter count.
pub fn sample_param_coords(store: &ParamStore, n: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().filter(|id| !store.get(*id).is_empty()).collect();
    if ids.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|i| {
            let id = ids[i % ids.len()];
            let idx = sample(&mut rng, store.get(id).len(), 1).index(0);
            (id, idx)
        })
        .collect()
}
