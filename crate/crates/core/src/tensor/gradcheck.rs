//! Central finite-difference gradient checking in `f64`.
//!
//! The harness rebuilds the forward graph from scratch for every probe, so
//! the analytic path (one tape, one backward) and the numeric path (two
//! perturbed forwards per scalar) stay independent.

use rand::seq::SliceRandom;

use super::{NdTensor, Tape, Var};
use crate::Result;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// max over probed scalars of |analytic - numeric| / max(|a|, |n|, 0.01)
    pub max_rel_err: f64,
    pub probes: usize,
}

/// Check d(root)/d(inputs[i][j]) for every scalar of every input (or a seeded
/// random subset of `sample_per_tensor` scalars when given).
///
/// `build` must deterministically construct the graph from the given leaves
/// and return the scalar root.
pub fn finite_diff<F>(
    inputs: &[NdTensor<f64>],
    h: f64,
    sample_per_tensor: Option<(usize, u64)>,
    build: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let eval = |perturbed: &[NdTensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let root = build(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut max_rel_err = 0.0f64;
    let mut probes = 0usize;
    let mut work: Vec<NdTensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let mut picks: Vec<usize> = (0..input.numel()).collect();
        if let Some((k, seed)) = sample_per_tensor {
            let mut rng = crate::rng::rng_from(crate::rng::derive(seed, ti as u64));
            picks.shuffle(&mut rng);
            picks.truncate(k.min(input.numel()));
        }
        for j in picks {
            let orig = input.data()[j];
            work[ti].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[j] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].get(j).copied().unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(1e-2);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            probes += 1;
        }
    }
    Ok(GradCheck { max_rel_err, probes })
}

/// Random standard-normal f64 tensor for gradient-check inputs.
pub fn randn64(shape: &[usize], seed: u64) -> NdTensor<f64> {
    let mut rng = crate::rng::rng_from(seed);
    NdTensor::randn(shape, 1.0, &mut rng)
}
