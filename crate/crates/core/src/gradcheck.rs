//! Central finite-difference gradient checking at 64-bit precision.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Label of the worst coordinate, e.g. `input 0 [12]` or `param slice0.w [3]`.
    pub worst: String,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Coordinates probed per tensor; evenly strided when the tensor is larger.
    pub per_tensor: usize,
    /// Floor on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, per_tensor: 24, floor: 1e-3 }
    }
}

/// Fixed projection weights turning any output into a scalar loss.
fn projection(n: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![n], |i| 0.5 + ((i as f64) * 0.7548776662 + 0.25).fract())
}

fn project(g: &mut Graph<'_, f64>, out: Var) -> Result<Var> {
    let n = g.value(out).numel();
    let shape = g.shape(out).to_vec();
    let w = g.input(projection(n).reshape(shape)?);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn probe_indices(n: usize, per_tensor: usize) -> Vec<usize> {
    if n <= per_tensor {
        (0..n).collect()
    } else {
        (0..per_tensor).map(|k| (k * n) / per_tensor + (k * 7) % ((n / per_tensor).max(1))).collect()
    }
}

impl GradCheck {
    /// Compares analytic gradients of `Σ wᵢ·f(inputs, params)ᵢ` with central
    /// differences, for every input and for each listed parameter.
    pub fn run<F>(&self, store: &ParamStore<f64>, inputs: &[Tensor<f64>], params: &[ParamId], f: F) -> Result<GradReport>
    where
        F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
    {
        let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::inference(store);
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            let loss = project(&mut g, out)?;
            Ok(g.value(loss).data()[0])
        };

        let (input_grads, param_grads) = {
            let mut g = Graph::new(store);
            let vars: Vec<Var> = inputs.iter().map(|t| g.input_grad(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            let loss = project(&mut g, out)?;
            let grads = g.backward(loss)?;
            let ig: Vec<Vec<f64>> = vars
                .iter()
                .zip(inputs)
                .map(|(&v, t)| grads.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
                .collect();
            let pg: Vec<Vec<f64>> = params
                .iter()
                .map(|&p| grads.param(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.value(p).numel()]))
                .collect();
            (ig, pg)
        };

        let mut report = GradReport { checked: 0, max_rel_err: 0.0, worst: String::new() };
        let mut record = |analytic: f64, numeric: f64, label: String| {
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = format!("{label}: analytic {analytic:.6e} numeric {numeric:.6e}");
            }
        };

        for (ti, t) in inputs.iter().enumerate() {
            for j in probe_indices(t.numel(), self.per_tensor) {
                let mut plus = inputs.to_vec();
                plus[ti].data_mut()[j] += self.step;
                let mut minus = inputs.to_vec();
                minus[ti].data_mut()[j] -= self.step;
                let numeric = (eval(store, &plus)? - eval(store, &minus)?) / (2.0 * self.step);
                record(input_grads[ti][j], numeric, format!("input {ti} [{j}]"));
            }
        }
        for (pi, &p) in params.iter().enumerate() {
            for j in probe_indices(store.value(p).numel(), self.per_tensor) {
                let mut plus = store.clone();
                plus.value_mut(p).data_mut()[j] += self.step;
                let mut minus = store.clone();
                minus.value_mut(p).data_mut()[j] -= self.step;
                let numeric = (eval(&plus, inputs)? - eval(&minus, inputs)?) / (2.0 * self.step);
                record(param_grads[pi][j], numeric, format!("param {} [{j}]", store.get(p).name));
            }
        }
        Ok(report)
    }
}
