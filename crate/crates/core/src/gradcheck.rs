//! Central finite-difference checks for analytic gradients.
//!
//! Used by unit tests and the acceptance suite. Works in `f64` only.

use crate::nn::Module;
use crate::tensor::{Graph, Tensor, Var};

/// Relative error between two gradient arrays: `‖a − b‖ / max(‖a‖, ‖b‖, tiny)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central-difference gradient of a scalar function of one flat array.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Builds `build` on fresh graphs and compares the tape gradient of every
/// input against central differences. Returns the worst relative error.
pub fn check_gradients(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let numeric = numeric_gradient(input.data(), 1e-6, |flat| {
            let mut vals = inputs.to_vec();
            vals[i] = Tensor::from_vec(input.shape(), flat.to_vec());
            eval(&vals)
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Checks the tape gradient of every parameter array of `module` against
/// central differences of `loss`. At most `max_probes` evenly spaced
/// entries are probed per array. Returns the worst relative error, with
/// norms floored at `1e-8` so arrays whose true gradient vanishes pass.
pub fn check_param_gradients<M: Module<f64>>(
    module: &mut M,
    max_probes: usize,
    loss: impl Fn(&mut Graph<f64>, &M) -> Var,
) -> f64 {
    let eval = |m: &M| -> f64 {
        let mut g = Graph::new();
        let out = loss(&mut g, m);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let out = loss(&mut g, module);
    let grads = g.backward(out);
    let analytic: Vec<(String, Vec<f64>)> = module
        .named_params()
        .into_iter()
        .map(|(name, p)| {
            let grad = grads.param(p).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; p.value.len()]);
            (name, grad)
        })
        .collect();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (name, grad) in &analytic {
        let step = grad.len().div_ceil(max_probes.max(1)).max(1);
        let probes: Vec<usize> = (0..grad.len()).step_by(step).collect();
        let mut numeric = Vec::with_capacity(probes.len());
        for &i in &probes {
            let nudge = |m: &mut M, delta: f64| {
                m.visit_mut("", &mut |n, p| {
                    if &n == name {
                        p.value.data_mut()[i] += delta;
                    }
                })
            };
            nudge(module, h);
            let up = eval(module);
            nudge(module, -2.0 * h);
            let down = eval(module);
            nudge(module, h);
            numeric.push((up - down) / (2.0 * h));
        }
        let picked: Vec<f64> = probes.iter().map(|&i| grad[i]).collect();
        let diff: f64 = picked.iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let na = picked.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nb).max(1e-8));
    }
    worst
}
