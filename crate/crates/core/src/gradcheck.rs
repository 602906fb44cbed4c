//! Central finite-difference verification of backward rules.
//!
//! The checker never touches the reverse pass it is validating: it re-runs
//! the forward closure on perturbed copies of the inputs, so agreement
//! between the two routes certifies the gradient, not the forward value.

use crate::error::{CoreError, Result};
use crate::rng::SeedRng;
use crate::tape::{Tape, Tensor};
use crate::{sc, Scalar};

/// Builder signature: assemble a scalar loss from leaf tensors.
pub trait LossFn<S: Scalar>: Fn(&Tape<S>, &[Tensor<S>]) -> Result<Tensor<S>> {}
impl<S: Scalar, F: Fn(&Tape<S>, &[Tensor<S>]) -> Result<Tensor<S>>> LossFn<S> for F {}

#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

fn eval_loss<S: Scalar>(f: &impl LossFn<S>, inputs: &[(Vec<S>, Vec<usize>)]) -> Result<f64> {
    let tape = Tape::new();
    let leaves: Vec<Tensor<S>> = inputs
        .iter()
        .map(|(data, shape)| tape.leaf(data.clone(), shape, false))
        .collect::<Result<_>>()?;
    let loss = f(&tape, &leaves)?;
    if loss.numel() != 1 {
        return Err(CoreError::contract("gradcheck: loss must be scalar"));
    }
    Ok(loss.value()[0].to_f64().unwrap())
}

/// Analytic gradients for every input, via one reverse sweep.
pub fn analytic_gradients<S: Scalar>(
    f: &impl LossFn<S>,
    inputs: &[(Vec<S>, Vec<usize>)],
) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::new();
    let leaves: Vec<Tensor<S>> = inputs
        .iter()
        .map(|(data, shape)| tape.leaf(data.clone(), shape, true))
        .collect::<Result<_>>()?;
    let loss = f(&tape, &leaves)?;
    tape.backward(&loss)?;
    Ok(leaves
        .iter()
        .map(|t| {
            t.grad()
                .map(|g| g.iter().map(|v| v.to_f64().unwrap()).collect())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect())
}

/// Central difference (f(x+h) − f(x−h)) / 2h for one coordinate.
fn central_diff<S: Scalar>(
    f: &impl LossFn<S>,
    inputs: &[(Vec<S>, Vec<usize>)],
    input_idx: usize,
    coord: usize,
    h: f64,
) -> Result<f64> {
    let mut plus = inputs.to_vec();
    plus[input_idx].0[coord] = plus[input_idx].0[coord] + sc(h);
    let mut minus = inputs.to_vec();
    minus[input_idx].0[coord] = minus[input_idx].0[coord] - sc(h);
    Ok((eval_loss(f, &plus)? - eval_loss(f, &minus)?) / (2.0 * h))
}

fn rel_err(a: f64, n: f64, clamp: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(clamp)
}

/// Checks every coordinate of every input. `tol` bounds the relative error
/// with the denominator clamped at 1e-6 so near-zero gradients compare
/// absolutely.
pub fn check_gradients<S: Scalar>(
    f: impl LossFn<S>,
    inputs: &[(Vec<S>, Vec<usize>)],
    h: f64,
    tol: f64,
) -> Result<CheckReport> {
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, (data, _))| (0..data.len()).map(move |c| (i, c)))
        .collect();
    check_coords(f, inputs, h, tol, &coords)
}

/// Like [`check_gradients`] but verifying at most `max_per_input` randomly
/// chosen coordinates per input, for losses with many parameters.
pub fn check_gradients_sampled<S: Scalar>(
    f: impl LossFn<S>,
    inputs: &[(Vec<S>, Vec<usize>)],
    h: f64,
    tol: f64,
    max_per_input: usize,
    rng: &mut SeedRng,
) -> Result<CheckReport> {
    use rand::Rng as _;
    let mut coords = Vec::new();
    for (i, (data, _)) in inputs.iter().enumerate() {
        if data.len() <= max_per_input {
            coords.extend((0..data.len()).map(|c| (i, c)));
        } else {
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < max_per_input {
                seen.insert(rng.random_range(0..data.len()));
            }
            coords.extend(seen.into_iter().map(|c| (i, c)));
        }
    }
    check_coords(f, inputs, h, tol, &coords)
}

fn check_coords<S: Scalar>(
    f: impl LossFn<S>,
    inputs: &[(Vec<S>, Vec<usize>)],
    h: f64,
    tol: f64,
    coords: &[(usize, usize)],
) -> Result<CheckReport> {
    let analytic = analytic_gradients(&f, inputs)?;
    let mut max_err = 0.0f64;
    for &(i, c) in coords {
        let numeric = central_diff(&f, inputs, i, c, h)?;
        let err = rel_err(analytic[i][c], numeric, 1e-6);
        if err > max_err {
            max_err = err;
        }
        if err > tol {
            return Err(CoreError::contract(format!(
                "gradient mismatch at input {i} coord {c}: analytic {} vs numeric {} (rel err {err:.3e} > {tol:.1e})",
                analytic[i][c], numeric
            )));
        }
    }
    Ok(CheckReport {
        max_rel_err: max_err,
        coords_checked: coords.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_on_correct_gradient() {
        let report = check_gradients(
            |_t: &Tape<f64>, xs: &[Tensor<f64>]| Ok(xs[0].mul(&xs[0])?.sum()),
            &[(vec![1.5, -2.0, 0.3], vec![3])],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert_eq!(report.coords_checked, 3);
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn errors_when_tolerance_is_exceeded() {
        // a coarse step h makes the O(h²) truncation error measurable, which
        // must trip an unreachably small tolerance
        let err = check_gradients(
            |_t: &Tape<f64>, xs: &[Tensor<f64>]| Ok(xs[0].exp().sum()),
            &[(vec![0.5, 1.1], vec![2])],
            1e-2,
            1e-14,
        );
        assert!(err.is_err());
    }
}
