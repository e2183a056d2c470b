//! Central finite-difference verification of tape gradients.

use crate::error::{MgdnError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Settings for [`finite_diff_check`].
#[derive(Debug, Clone, Copy)]
pub struct FiniteDiff {
    /// Absolute perturbation step.
    pub epsilon: f64,
    /// Coordinates sampled per tensor (strided, deterministic).
    pub max_coords_per_tensor: usize,
}

impl Default for FiniteDiff {
    fn default() -> Self {
        FiniteDiff {
            epsilon: 1e-5,
            max_coords_per_tensor: 24,
        }
    }
}

/// Compares tape gradients of a scalar function against central finite
/// differences and returns the worst relative error over the sampled
/// coordinates: `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `build` must construct the same computation each call from the leased
/// parameter variables.
pub fn finite_diff_check<F>(build: &F, params: &[Tensor], opts: &FiniteDiff) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.epsilon) {
        return Err(MgdnError::Contract(format!(
            "finite-difference epsilon {} outside [1e-7, 1e-3]",
            opts.epsilon
        )));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.data().to_vec(), p.shape().to_vec(), true))
        .collect();
    let loss = build(&mut tape, &vars)?;
    if tape.numel(loss) != 1 {
        return Err(MgdnError::Contract(format!(
            "finite_diff_check needs a scalar function, got shape {:?}",
            tape.shape(loss)
        )));
    }
    let base = tape.value(loss)[0];
    if !base.is_finite() {
        return Err(MgdnError::NonFinite(
            "forward value at the unperturbed point".into(),
        ));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    drop(tape);

    // Forward-only evaluation with one coordinate displaced.
    let eval = |pi: usize, coord: usize, delta: f64| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut data = p.data().to_vec();
                if i == pi {
                    data[coord] += delta;
                }
                tape.leaf(data, p.shape().to_vec(), false)
            })
            .collect();
        let loss = build(&mut tape, &vars)?;
        let v = tape.value(loss)[0];
        if !v.is_finite() {
            return Err(MgdnError::NonFinite(format!(
                "forward value while perturbing param {pi} coordinate {coord} by {delta:+e}"
            )));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        if n == 0 {
            continue;
        }
        let samples = opts.max_coords_per_tensor.min(n);
        for s in 0..samples {
            let coord = s * n / samples;
            let plus = eval(pi, coord, opts.epsilon)?;
            let minus = eval(pi, coord, -opts.epsilon)?;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic[pi][coord];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
