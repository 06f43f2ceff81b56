//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Compares analytic gradients of `f` against central differences with step `eps`.
///
/// Every input is recorded as a trainable leaf. Non-scalar outputs are reduced
/// to a scalar through a fixed pseudo-random projection so that every output
/// coordinate contributes. Returns the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over all input
/// coordinates.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.param(t)).collect();
        let out = f(&g, &vars)?;
        let loss = project(&g, out)?;
        let value = g.scalar(loss);
        let mut grads = Vec::new();
        if want_grads {
            g.backward(loss)?;
            for (v, t) in vars.iter().zip(tensors) {
                grads.push(g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())));
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..work[ti].len() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + eps;
            let (plus, _) = eval(&work, false)?;
            work[ti].data_mut()[i] = orig - eps;
            let (minus, _) = eval(&work, false)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn project(g: &Graph<f64>, out: Var) -> Result<Var> {
    let shape = g.shape(out);
    if shape.iter().product::<usize>() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let weights = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let w = g.input(&weights);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}
