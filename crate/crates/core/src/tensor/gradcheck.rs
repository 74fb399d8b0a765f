//! Finite-difference gradient verification oracle.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-8;

/// Checks the analytic gradient of a deterministic scalar function against
/// central finite differences (`h = 1e-5`).
///
/// `f` must rebuild the computation from the given parameter tensors each
/// call; the slice is re-ordered copies of `params` with one entry perturbed
/// at a time. Returns the maximum over all parameter entries of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(params: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    for p in params {
        if !p.requires_grad() {
            return Err(Error::invalid(
                "finite_diff_check: all params must require grad",
            ));
        }
        p.zero_grad();
    }

    // analytic pass
    let tape = Tape::new();
    let loss = f(&tape, params)?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    if !loss.item().is_finite() {
        return Err(Error::NonFinite("finite_diff_check loss".into()));
    }
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad_or_zeros()).collect();

    // numeric pass, one entry at a time
    let eval = |working: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let value = f(&tape, working)?.item();
        if !value.is_finite() {
            return Err(Error::NonFinite("finite_diff_check loss".into()));
        }
        Ok(value)
    };

    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let perturbed = |delta: f64| -> Result<f64> {
                let mut data = p.data().to_vec();
                data[j] += delta;
                let replaced = Tensor::from_vec(p.shape().to_vec(), data)?.with_grad();
                let working: Vec<Tensor> = params
                    .iter()
                    .enumerate()
                    .map(|(i, q)| if i == pi { replaced.clone() } else { q.clone() })
                    .collect();
                eval(&working)
            };
            let numeric = (perturbed(STEP)? - perturbed(-STEP)?) / (2.0 * STEP);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
