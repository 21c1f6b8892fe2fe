//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use anomgan_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod runs;
pub mod suites;
pub mod svd;

/// Central-difference perturbation.
pub const STEP: f64 = 1e-5;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Fixed random projection of `out` to a scalar.
pub fn project<'g>(out: Var<'g>, seed: u64) -> Var<'g> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&out.shape(), -1.0, 1.0, &mut rng);
    out.mul(out.graph().constant(w)).sum()
}

fn eval<F>(build: &F, inputs: &[Tensor]) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    build(&g, &vars).value().item()
}

/// Norm-wise relative error between the analytic gradient of the scalar
/// `build` and central finite differences, for each input tensor.
pub fn gradient_errors<F>(inputs: &[Tensor], build: F) -> Vec<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let steps = vec![STEP; inputs.len()];
    gradient_errors_with(inputs, &steps, build)
}

/// As [`gradient_errors`] with a per-input perturbation size.
pub fn gradient_errors_with<F>(inputs: &[Tensor], steps: &[f64], build: F) -> Vec<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let grads = g.backward(build(&g, &vars));
    let mut work = inputs.to_vec();
    inputs
        .iter()
        .enumerate()
        .map(|(k, input)| {
            let analytic = grads.get_or_zeros(vars[k]);
            let step = steps[k];
            let mut numeric = vec![0.0; input.numel()];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = work[k].data()[i];
                work[k].data_mut()[i] = orig + step;
                let plus = eval(&build, &work);
                work[k].data_mut()[i] = orig - step;
                let minus = eval(&build, &work);
                work[k].data_mut()[i] = orig;
                *slot = (plus - minus) / (2.0 * step);
            }
            let numeric = Tensor::from_vec(input.shape(), numeric);
            let err = analytic.zip_map(&numeric, |a, b| a - b).l2_norm();
            err / analytic.l2_norm().max(numeric.l2_norm()).max(1e-12)
        })
        .collect()
}
