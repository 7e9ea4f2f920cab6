//! Central finite-difference checks of analytic gradients in `f64`.

use crate::{Graph, ParamStore, Tensor, Var};

/// Step of the central difference.
pub const STEP: f64 = 1e-6;
/// Gradients below this magnitude are compared absolutely.
pub const FLOOR: f64 = 1e-7;

/// Outcome over all probed scalars. Relative error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub errors: Vec<f64>,
}

impl GradReport {
    pub fn checked(&self) -> usize {
        self.errors.len()
    }

    pub fn fraction_within(&self, tol: f64) -> f64 {
        if self.errors.is_empty() {
            return 1.0;
        }
        self.errors.iter().filter(|&&e| e <= tol).count() as f64 / self.errors.len() as f64
    }

    pub fn worst(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn merge(&mut self, other: GradReport) {
        self.errors.extend(other.errors);
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Evenly spaced indices, all of them when `limit >= total`.
fn probe_indices(total: usize, limit: usize) -> Vec<usize> {
    if limit >= total {
        return (0..total).collect();
    }
    (0..limit).map(|k| k * total / limit).collect()
}

/// Checks d loss / d inputs, where `f` builds a scalar loss from variables
/// holding `inputs`. At most `limit` scalars per input are probed.
pub fn check_inputs(inputs: &[Tensor<f64>], limit: usize, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> GradReport {
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
        let l = f(&mut g, &vars);
        (g, vars, l)
    };
    let (g, vars, loss) = eval(inputs);
    let grads = g.backward(loss);
    let mut report = GradReport::default();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in probe_indices(input.numel(), limit) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let (gp, _, lp) = eval(&plus);
            let (gm, _, lm) = eval(&minus);
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * STEP);
            report.errors.push(rel_err(analytic.data()[i], numeric));
        }
    }
    report
}

/// Checks d loss / d trainable parameters of the store reached through
/// `params`, where `f` builds a scalar loss from `owner`. At most `limit`
/// scalars per parameter array are probed.
pub fn check_params<M>(
    owner: &mut M,
    params: fn(&mut M) -> &mut ParamStore<f64>,
    limit: usize,
    f: impl Fn(&mut Graph<f64>, &M) -> Var,
) -> GradReport {
    let value = |owner: &M| {
        let mut g = Graph::new();
        let l = f(&mut g, owner);
        g.value(l).item()
    };
    let analytic = {
        let mut g = Graph::new();
        let l = f(&mut g, owner);
        let grads = g.backward(l);
        g.param_grads(&grads, params(owner))
    };
    let mut report = GradReport::default();
    let ids: Vec<_> = params(owner).ids().collect();
    for id in ids {
        if !params(owner).is_trainable(id) {
            continue;
        }
        let n = params(owner).get(id).numel();
        for i in probe_indices(n, limit) {
            let orig = params(owner).get(id).data()[i];
            params(owner).get_mut(id).data_mut()[i] = orig + STEP;
            let lp = value(owner);
            params(owner).get_mut(id).data_mut()[i] = orig - STEP;
            let lm = value(owner);
            params(owner).get_mut(id).data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * STEP);
            let a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[i]);
            report.errors.push(rel_err(a, numeric));
        }
    }
    report
}
