//! Central finite-difference checks of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{ParamStore, Scope};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;

/// Denominator floor so coordinates with vanishing gradients compare absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub points: usize,
    pub max_rel_error: f64,
    /// `(label, analytic, numeric)` of the worst coordinate.
    pub worst: (String, f64, f64),
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Check `d build / d inputs` at `points` random coordinates.
pub fn check_gradient(
    inputs: &[Tensor],
    points: usize,
    seed: u64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let store = ParamStore::new(0);
    check_scope_gradient(&store, inputs, points, seed, |s, v| build(&mut s.graph, v))
}

/// Like [`check_gradient`] but the random coordinates are drawn from both the
/// inputs and every parameter of `store`.
pub fn check_scope_gradient(
    store: &ParamStore,
    inputs: &[Tensor],
    points: usize,
    seed: u64,
    build: impl Fn(&mut Scope, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut s = Scope::inference(store);
        let vars: Vec<Var> = inputs.iter().map(|t| s.constant(t.clone())).collect();
        let out = build(&mut s, &vars)?;
        Ok(s.value(out).data()[0])
    };

    let mut s = Scope::training(store);
    let vars: Vec<Var> = inputs.iter().map(|t| s.leaf(t.clone())).collect();
    let out = build(&mut s, &vars)?;
    s.backward(out)?;
    let input_grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| s.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let param_grads = s.param_grads();
    let param_ids: Vec<_> = store.ids().collect();
    drop(s);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = inputs.len() + param_ids.len();
    let mut report = GradCheckReport {
        points,
        max_rel_error: 0.0,
        worst: (String::new(), 0.0, 0.0),
    };
    for _ in 0..points {
        let which = rng.gen_range(0..total);
        let (label, analytic, numeric) = if which < inputs.len() {
            let k = rng.gen_range(0..inputs[which].len());
            let mut probe = inputs.to_vec();
            probe[which].data_mut()[k] += FD_STEP;
            let plus = eval(store, &probe)?;
            probe[which].data_mut()[k] -= 2.0 * FD_STEP;
            let minus = eval(store, &probe)?;
            (
                format!("input{which}[{k}]"),
                input_grads[which].data()[k],
                (plus - minus) / (2.0 * FD_STEP),
            )
        } else {
            let id = param_ids[which - inputs.len()];
            let k = rng.gen_range(0..store.value(id).len());
            let analytic = param_grads
                .iter()
                .find(|(p, _)| *p == id)
                .map_or(0.0, |(_, g)| g.data()[k]);
            let mut probe = store.clone();
            probe.value_mut(id).data_mut()[k] += FD_STEP;
            let plus = eval(&probe, inputs)?;
            probe.value_mut(id).data_mut()[k] -= 2.0 * FD_STEP;
            let minus = eval(&probe, inputs)?;
            (
                format!("{}[{k}]", store.param(id).name),
                analytic,
                (plus - minus) / (2.0 * FD_STEP),
            )
        };
        let err = relative_error(analytic, numeric);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (label, analytic, numeric);
        }
    }
    Ok(report)
}
