//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Magnitude below which gradient entries are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Worst relative error between autodiff and central differences over every
/// entry of every input.
///
/// `f` must build a scalar from the given leaves; it is re-run on a fresh
/// tape for each perturbation.
pub fn max_relative_error<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t)).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let x0 = input.data()[i];
            work[ti].data_mut()[i] = x0 + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[i] = x0 - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][i];
            let denom = a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
