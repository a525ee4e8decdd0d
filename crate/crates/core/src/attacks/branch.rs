//! Secret extraction from a balanced branch: one latency per run at a fixed
//! step, thresholded at the mixture's equal-density point.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AttackError, BranchObservation, Direction};
use crate::listing::Program;
use crate::stats::{fit_gmm2, normalized_step, GMM_MAX_ITER, GMM_TOLERANCE};
use crate::timing::{path_profile, rng_from_seed, simulate_runs, Run, TimingParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchExtraction {
    pub bits: Vec<bool>,
    pub observations: Vec<BranchObservation>,
    pub threshold: f64,
    /// Which side of the threshold stands for bit 1.
    pub slow_is_one: bool,
    /// Against the runs' ground truth, when present.
    pub accuracy: Option<f64>,
}

/// Classifies each run's branch from the latency at `discriminator_step`.
///
/// The attacker knows the code layout, so the orientation comes from which
/// path places a likely-slow unit at that step. The threshold is learnt from
/// the unlabelled latencies.
pub fn extract_branch_secret(
    program: &Program,
    params: &TimingParams,
    runs: &[Run],
    discriminator_step: usize,
) -> Result<BranchExtraction, AttackError> {
    if runs.is_empty() {
        return Err(AttackError::NoRuns);
    }
    let paths = [path_profile(program, &[false], params)?, path_profile(program, &[true], params)?];
    let len = paths[0].len().min(paths[1].len());
    if discriminator_step >= len {
        return Err(AttackError::StepOutOfRange { step: discriminator_step, len });
    }
    let slow_is_one = {
        let weight = |bit: usize| {
            let u = &paths[bit][discriminator_step];
            u.p_slow * u.delta
        };
        weight(1) >= weight(0)
    };
    let writes: Vec<bool> = paths[0].iter().map(|u| u.writes_memory).collect();
    let mut values = Vec::with_capacity(runs.len());
    for run in runs {
        if run.samples.len() <= discriminator_step {
            return Err(AttackError::StepOutOfRange { step: discriminator_step, len: run.samples.len() });
        }
        values.push(normalized_step(&run.latencies(), &writes[..run.samples.len().min(writes.len())], discriminator_step));
    }
    let fit = fit_gmm2(&values, GMM_TOLERANCE, GMM_MAX_ITER)?;
    let threshold = fit.equal_density_threshold();
    let bits: Vec<bool> = values.iter().map(|&v| (v >= threshold) == slow_is_one).collect();
    let observations = values
        .iter()
        .zip(&bits)
        .enumerate()
        .map(|(i, (&v, &b))| BranchObservation {
            execution_index: i,
            predicted: if b { Direction::NotTaken } else { Direction::Taken },
            confidence: (v - threshold).abs(),
        })
        .collect();
    let accuracy = runs.iter().all(|r| r.secret.len() == 1).then(|| {
        let hits = runs.iter().zip(&bits).filter(|(r, &b)| r.secret[0] == b).count();
        hits as f64 / runs.len() as f64
    });
    Ok(BranchExtraction { bits, observations, threshold, slow_is_one, accuracy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchAttackReport {
    pub runs: usize,
    pub discriminator_step: usize,
    pub threshold: f64,
    pub accuracy: f64,
}

/// Simulates `runs` executions with uniformly random secret bits, then
/// extracts them.
pub fn branch_attack(
    program: &Program,
    params: &TimingParams,
    runs: usize,
    discriminator_step: usize,
    seed: u64,
) -> Result<(BranchAttackReport, Vec<Run>), AttackError> {
    let mut rng = rng_from_seed(seed);
    let secrets: Vec<Vec<bool>> = (0..runs).map(|_| vec![rng.random::<bool>()]).collect();
    let traces = simulate_runs(program, &secrets, params, seed)?;
    let ex = extract_branch_secret(program, params, &traces, discriminator_step)?;
    Ok((
        BranchAttackReport {
            runs,
            discriminator_step,
            threshold: ex.threshold,
            accuracy: ex.accuracy.unwrap_or(f64::NAN),
        },
        traces,
    ))
}

/// Executed unit index of the first store on the if path after the branch.
pub fn default_discriminator(program: &Program) -> Option<usize> {
    let fused = crate::frontend::fused(program);
    let path = fused.execution_path(&vec![true; fused.branch_pairs.len()]).ok()?;
    let branch = fused.branch_pairs.first()?.branch;
    let start = path.iter().position(|i| i.address == branch)?;
    path[start..].iter().position(|i| i.writes_memory).map(|p| start + p)
}
