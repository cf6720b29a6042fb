//! Central finite-difference oracle for reverse-mode gradients.
//!
//! Test support: rebuilds the forward pass with perturbed inputs and never
//! touches the backward machinery it is checking.

use super::{Result, Tape, Tensor, TensorRef};

/// Default perturbation for central differences.
pub const FD_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1)` — relative for large values, absolute near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Evaluate the scalar produced by `build` with all inputs held constant.
fn eval<F>(build: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorRef]) -> Result<TensorRef>,
{
    let mut tape = Tape::new();
    let refs: Vec<TensorRef> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = build(&mut tape, &refs)?;
    Ok(tape.value(out).item())
}

/// Central finite differences of the scalar w.r.t. every entry of every input.
pub fn finite_diff<F>(build: &F, inputs: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[TensorRef]) -> Result<TensorRef>,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            g[j] = (eval(build, &plus)? - eval(build, &minus)?) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Compare reverse-mode gradients of `build` against central differences.
///
/// Returns the worst relative error over all inputs, or an error message
/// naming the offending input/component if it exceeds `tol`.
pub fn check<F>(build: F, inputs: &[Tensor], h: f64, tol: f64) -> std::result::Result<f64, String>
where
    F: Fn(&mut Tape, &[TensorRef]) -> Result<TensorRef>,
{
    let mut tape = Tape::new();
    let refs: Vec<TensorRef> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &refs).map_err(|e| e.to_string())?;
    tape.backward(out).map_err(|e| e.to_string())?;
    let fd = finite_diff(&build, inputs, h).map_err(|e| e.to_string())?;
    let mut worst = 0.0_f64;
    for (i, r) in refs.iter().enumerate() {
        let ad = tape
            .grad(*r)
            .ok_or_else(|| format!("input {i}: no gradient accumulated"))?;
        for (j, (&a, &f)) in ad.iter().zip(&fd[i]).enumerate() {
            let e = rel_err(a, f);
            worst = worst.max(e);
            if e > tol {
                return Err(format!(
                    "input {i} component {j}: reverse-mode {a:.12e} vs finite-diff {f:.12e} (rel err {e:.3e} > {tol:.1e})"
                ));
            }
        }
    }
    Ok(worst)
}

/// Central finite differences of a scalar function of a model's parameters.
/// `sizes[i]` is the element count of parameter `i`; `mutate` adds a delta to
/// one component; `eval` computes the scalar on a (cloned) model.
pub fn fd_param_grads<M: Clone>(
    model: &M,
    sizes: &[usize],
    mutate: impl Fn(&mut M, usize, usize, f64),
    eval: impl Fn(&M) -> f64,
    h: f64,
) -> Vec<Vec<f64>> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            (0..n)
                .map(|j| {
                    let mut plus = model.clone();
                    mutate(&mut plus, i, j, h);
                    let mut minus = model.clone();
                    mutate(&mut minus, i, j, -h);
                    (eval(&plus) - eval(&minus)) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}
