//! Per-step interrupt latency model.
//!
//! Each single-stepped unit costs a constant resume overhead with Gaussian
//! jitter. Memory writes, and to a lesser degree instructions sharing a fetch
//! batch with writes, add a second mode `delta` cycles slower whose
//! probability depends on where the instruction sits inside its 16-byte
//! window. Every run also carries a uniform mean shift.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::{feature_at, fused, AlignmentFeature, FETCH_WINDOW};
use crate::listing::{ListingError, Program};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimingError {
    #[error("invalid timing parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },
    #[error(transparent)]
    Path(#[from] ListingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingParams {
    pub base_mu: f64,
    pub base_sigma: f64,
    /// Separation between the fast and slow mode.
    pub delta: f64,
    /// Slow-mode probability indexed by address mod 16.
    pub p_slow_table: [f64; 16],
    /// Pushes mode probabilities toward 0 or 1 as more writes share the batch.
    pub contrast_gain: f64,
    pub run_shift_max: f64,
    /// Fraction of `delta` seen by non-writes that share a batch with writes.
    pub nonwrite_attenuation: f64,
    /// Per-instruction cost when the program runs without interrupts.
    pub cost_mu: f64,
    pub cost_sigma: f64,
    /// Patched-microcode behaviour: most sessions lose the slow mode.
    pub degraded: bool,
    pub degraded_probability: f64,
    /// Rare large latency spikes, as caused by page-boundary effects.
    pub outlier_probability: f64,
    pub outlier_cycles: f64,
}

impl Default for TimingParams {
    fn default() -> Self {
        let mut table = [0.1; 16];
        for p in &mut table[1..=8] {
            *p = 0.9;
        }
        Self {
            base_mu: 9400.0,
            base_sigma: 30.0,
            delta: 100.0,
            p_slow_table: table,
            contrast_gain: 1.0,
            run_shift_max: 200.0,
            nonwrite_attenuation: 0.3,
            cost_mu: 4.0,
            cost_sigma: 1.0,
            degraded: false,
            degraded_probability: 0.8,
            outlier_probability: 0.0,
            outlier_cycles: 3000.0,
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> TimingError {
    TimingError::InvalidParam {
        field,
        reason: reason.into(),
    }
}

fn check_prob(field: &'static str, p: f64) -> Result<(), TimingError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(invalid(field, format!("{p} is not a probability")))
    }
}

fn check_nonneg(field: &'static str, v: f64) -> Result<(), TimingError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("{v} must be finite and non-negative")))
    }
}

impl TimingParams {
    pub fn validate(&self) -> Result<(), TimingError> {
        if !self.base_mu.is_finite() || self.base_mu <= 0.0 {
            return Err(invalid("base_mu", "must be positive"));
        }
        check_nonneg("base_sigma", self.base_sigma)?;
        check_nonneg("delta", self.delta)?;
        check_nonneg("contrast_gain", self.contrast_gain)?;
        check_nonneg("run_shift_max", self.run_shift_max)?;
        check_nonneg("cost_mu", self.cost_mu)?;
        check_nonneg("cost_sigma", self.cost_sigma)?;
        check_nonneg("outlier_cycles", self.outlier_cycles)?;
        for &p in &self.p_slow_table {
            check_prob("p_slow_table", p)?;
        }
        check_prob("nonwrite_attenuation", self.nonwrite_attenuation)?;
        check_prob("degraded_probability", self.degraded_probability)?;
        check_prob("outlier_probability", self.outlier_probability)?;
        if self.run_shift_max >= self.base_mu {
            return Err(invalid("run_shift_max", "must stay below base_mu"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fast,
    Slow,
    /// Isolated non-write: the latency law has a single mode.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub step_index: usize,
    pub instr_address: u64,
    pub latency: f64,
    /// Ground truth; `None` once stripped for attacker-facing export.
    pub mode: Option<Mode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub run_id: u64,
    pub secret: Vec<bool>,
    pub run_shift: f64,
    pub degraded: bool,
    pub samples: Vec<LatencySample>,
}

impl Run {
    pub fn latencies(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.latency).collect()
    }

    pub fn strip_ground_truth(&mut self) {
        for s in &mut self.samples {
            s.mode = None;
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Slow-mode probability. Isolated non-writes have no slow mode at all.
pub fn mode_probability(params: &TimingParams, feature: &AlignmentFeature, writes_memory: bool) -> f64 {
    let t = feature.trailing_writes_in_window;
    if !writes_memory && t == 0 {
        return 0.0;
    }
    let base = params.p_slow_table[usize::from(feature.address_mod_16) % FETCH_WINDOW as usize];
    if base <= 0.0 || base >= 1.0 || t == 0 {
        return base;
    }
    sigmoid(logit(base) * (1.0 + params.contrast_gain * f64::from(t)))
}

/// Mode separation actually applied to the unit.
pub fn effective_delta(params: &TimingParams, feature: &AlignmentFeature, writes_memory: bool) -> f64 {
    if writes_memory {
        params.delta
    } else if feature.trailing_writes_in_window > 0 {
        params.delta * params.nonwrite_attenuation
    } else {
        0.0
    }
}

/// Per-run state shared by every step of one execution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub run_shift: f64,
    pub degraded: bool,
}

impl Session {
    /// Always consumes two uniform draws so runs stay aligned under common
    /// random numbers.
    pub fn draw<R: Rng + ?Sized>(params: &TimingParams, rng: &mut R) -> Self {
        let u: f64 = rng.random();
        let d: f64 = rng.random();
        Self {
            run_shift: (2.0 * u - 1.0) * params.run_shift_max,
            degraded: params.degraded && d < params.degraded_probability,
        }
    }

    pub fn neutral() -> Self {
        Self {
            run_shift: 0.0,
            degraded: false,
        }
    }
}

/// One steppable unit prepared for sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitProfile {
    pub address: u64,
    pub writes_memory: bool,
    pub p_slow: f64,
    pub delta: f64,
}

impl UnitProfile {
    pub fn new(params: &TimingParams, address: u64, feature: &AlignmentFeature, writes_memory: bool) -> Self {
        Self {
            address,
            writes_memory,
            p_slow: mode_probability(params, feature, writes_memory),
            delta: effective_delta(params, feature, writes_memory),
        }
    }
}

/// Units executed for `secret`, in step order, on the fused program.
pub fn path_profile(program: &Program, secret: &[bool], params: &TimingParams) -> Result<Vec<UnitProfile>, TimingError> {
    let program = fused(program);
    let path = program.execution_path(secret)?;
    Ok(path
        .iter()
        .map(|insn| {
            let idx = program.index_of(insn.address).expect("path comes from program");
            UnitProfile::new(params, insn.address, &feature_at(&program, idx), insn.writes_memory)
        })
        .collect())
}

/// Draws one latency. Consumes one normal and one or two uniforms, the same
/// count for every unit under a given parameter set.
pub fn sample_latency<R: Rng + ?Sized>(
    params: &TimingParams,
    session: &Session,
    unit: &UnitProfile,
    rng: &mut R,
) -> (f64, Mode) {
    let z: f64 = StandardNormal.sample(rng);
    let u: f64 = rng.random();
    let slow = u < unit.p_slow;
    let delta = if session.degraded { 0.0 } else { unit.delta };
    let mode = if unit.delta == 0.0 {
        Mode::None
    } else if slow {
        Mode::Slow
    } else {
        Mode::Fast
    };
    let mut latency = session.run_shift + params.base_mu + params.base_sigma * z;
    if slow {
        latency += delta;
    }
    if params.outlier_probability > 0.0 {
        let o: f64 = rng.random();
        if o < params.outlier_probability {
            latency += params.outlier_cycles;
        }
    }
    (latency.max(1.0), mode)
}

pub fn sample_units<R: Rng + ?Sized>(
    params: &TimingParams,
    session: &Session,
    units: &[UnitProfile],
    rng: &mut R,
) -> Vec<LatencySample> {
    units
        .iter()
        .enumerate()
        .map(|(step_index, unit)| {
            let (latency, mode) = sample_latency(params, session, unit, rng);
            LatencySample {
                step_index,
                instr_address: unit.address,
                latency,
                mode: Some(mode),
            }
        })
        .collect()
}

/// Single-steps one execution within an existing session.
pub fn simulate_execution<R: Rng + ?Sized>(
    program: &Program,
    secret: &[bool],
    params: &TimingParams,
    session: &Session,
    run_id: u64,
    rng: &mut R,
) -> Result<Run, TimingError> {
    let units = path_profile(program, secret, params)?;
    Ok(Run {
        run_id,
        secret: secret.to_vec(),
        run_shift: session.run_shift,
        degraded: session.degraded,
        samples: sample_units(params, session, &units, rng),
    })
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A fresh session followed by one single-stepped execution.
pub fn simulate_run(program: &Program, secret: &[bool], params: &TimingParams, seed: u64) -> Result<Run, TimingError> {
    params.validate()?;
    let mut rng = rng_from_seed(seed);
    let session = Session::draw(params, &mut rng);
    simulate_execution(program, secret, params, &session, seed, &mut rng)
}

/// Runs `count` executions with seeds derived from `base_seed` and the run id.
pub fn simulate_runs(
    program: &Program,
    secrets: &[Vec<bool>],
    params: &TimingParams,
    base_seed: u64,
) -> Result<Vec<Run>, TimingError> {
    params.validate()?;
    let units = [false, true]
        .into_iter()
        .map(|b| {
            if program.branch_pairs.len() == 1 {
                path_profile(program, &[b], params).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    secrets
        .iter()
        .enumerate()
        .map(|(i, secret)| {
            let run_id = i as u64;
            let mut rng = rng_from_seed(derive_seed(base_seed, run_id));
            let session = Session::draw(params, &mut rng);
            let cached = if secret.len() == 1 { units[usize::from(secret[0])].as_ref() } else { None };
            let samples = match cached {
                Some(u) => sample_units(params, &session, u, &mut rng),
                None => sample_units(params, &session, &path_profile(program, secret, params)?, &mut rng),
            };
            Ok(Run {
                run_id,
                secret: secret.clone(),
                run_shift: session.run_shift,
                degraded: session.degraded,
                samples,
            })
        })
        .collect()
}

/// Uninterrupted execution time: per-instruction costs only, no alignment term.
pub fn total_time_no_interrupts(
    program: &Program,
    secret: &[bool],
    params: &TimingParams,
    seed: u64,
) -> Result<f64, TimingError> {
    let program = fused(program);
    let n = program.execution_path(secret)?.len();
    let mut rng = rng_from_seed(seed);
    Ok((0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            params.cost_mu + params.cost_sigma * z
        })
        .sum())
}

/// splitmix64 finalizer over the pair, used to derive independent run seeds.
pub fn derive_seed(base: u64, id: u64) -> u64 {
    let mut z = base
        .wrapping_add(id.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trace export. With `attack_mode`, addresses on secret-dependent steps are
/// blanked since the attacker cannot observe them.
pub fn runs_to_csv(program: &Program, runs: &[Run], attack_mode: bool) -> String {
    let mut out = String::from("run_id,step_index,instr_address,latency_cycles\n");
    for run in runs {
        for s in &run.samples {
            let hidden = attack_mode
                && program.branch_pairs.iter().any(|p| {
                    p.taken.contains(s.instr_address) || p.fallthrough.contains(s.instr_address)
                });
            let addr = if hidden { String::new() } else { format!("{:#x}", s.instr_address) };
            let _ = writeln!(out, "{},{},{},{:.3}", run.run_id, s.step_index, addr, s.latency);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::alignment_features;
    use crate::listing::{parse_listing, secret_branch_program, template_branch_program, BodySpec};

    fn feature(offset: u8, trailing: u32) -> AlignmentFeature {
        AlignmentFeature {
            address_mod_16: offset,
            end_mod_16: (offset + 5) % 16,
            crosses_window: offset > 11,
            trailing_writes_in_window: trailing,
        }
    }

    #[test]
    fn default_table_values() {
        let p = TimingParams::default();
        assert_eq!(mode_probability(&p, &feature(6, 0), true), 0.9);
        assert_eq!(mode_probability(&p, &feature(14, 0), true), 0.1);
        assert_eq!(mode_probability(&p, &feature(0, 0), true), 0.1);
        assert_eq!(mode_probability(&p, &feature(8, 0), true), 0.9);
        assert_eq!(mode_probability(&p, &feature(6, 0), false), 0.0);
        assert_eq!(effective_delta(&p, &feature(6, 0), false), 0.0);
        assert_eq!(effective_delta(&p, &feature(6, 2), false), 30.0);
    }

    #[test]
    fn contrast_pushes_outward() {
        let p = TimingParams::default();
        let mut last_hi = 0.9;
        let mut last_lo = 0.1;
        for t in 1..6 {
            let hi = mode_probability(&p, &feature(3, t), true);
            let lo = mode_probability(&p, &feature(12, t), true);
            assert!(hi > last_hi && lo < last_lo);
            last_hi = hi;
            last_lo = lo;
        }
    }

    #[test]
    fn zero_noise_support() {
        let params = TimingParams {
            base_sigma: 0.0,
            run_shift_max: 0.0,
            ..TimingParams::default()
        };
        let unit = UnitProfile::new(&params, 0x16, &feature(6, 0), true);
        let mut rng = rng_from_seed(1);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..1000 {
            let (l, _) = sample_latency(&params, &Session::neutral(), &unit, &mut rng);
            seen.insert(l as i64);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![9400, 9500]);
    }

    #[test]
    fn slow_fraction_and_separation() {
        let params = TimingParams::default();
        let unit = UnitProfile::new(&params, 0x16, &feature(6, 0), true);
        let mut rng = rng_from_seed(7);
        let (mut slow, mut fast) = (Vec::new(), Vec::new());
        for _ in 0..100_000 {
            let (l, m) = sample_latency(&params, &Session::neutral(), &unit, &mut rng);
            match m {
                Mode::Slow => slow.push(l),
                _ => fast.push(l),
            }
        }
        let frac = slow.len() as f64 / 1e5;
        assert!((frac - 0.9).abs() <= 0.02, "{frac}");
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&slow) - mean(&fast) - 100.0).abs() <= 5.0);
    }

    #[test]
    fn isolated_nonwrite_is_unimodal() {
        let params = TimingParams::default();
        for off in 0..16 {
            let unit = UnitProfile::new(&params, off, &feature(off as u8, 0), false);
            assert_eq!(unit.delta, 0.0);
            let (_, m) = sample_latency(&params, &Session::neutral(), &unit, &mut rng_from_seed(off));
            assert_eq!(m, Mode::None);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let p = template_branch_program(3, 11, 25, &BodySpec::default()).unwrap();
        let params = TimingParams::default();
        let a = simulate_run(&p, &[true], &params, 42).unwrap();
        let b = simulate_run(&p, &[true], &params, 42).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = simulate_run(&p, &[true], &params, 43).unwrap();
        assert_ne!(a.samples[5].latency, c.samples[5].latency);
    }

    #[test]
    fn template_yields_51_samples() {
        let p = template_branch_program(0, 8, 25, &BodySpec::default()).unwrap();
        let params = TimingParams::default();
        for bit in [false, true] {
            let run = simulate_run(&p, &[bit], &params, 5).unwrap();
            assert_eq!(run.samples.len(), 51);
            assert!(run.run_shift.abs() <= params.run_shift_max);
            assert!(run.samples.windows(2).all(|w| w[0].step_index + 1 == w[1].step_index));
        }
    }

    #[test]
    fn secret_length_mismatch() {
        let p = secret_branch_program();
        let params = TimingParams::default();
        assert!(matches!(simulate_run(&p, &[], &params, 0), Err(TimingError::Path(_))));
        assert!(simulate_run(&p, &[true, false], &params, 0).is_err());
    }

    #[test]
    fn identical_alignment_identical_samples() {
        let p = template_branch_program(5, 5, 25, &BodySpec::default()).unwrap();
        let params = TimingParams::default();
        let a = simulate_run(&p, &[true], &params, 9).unwrap();
        let b = simulate_run(&p, &[false], &params, 9).unwrap();
        assert_eq!(a.latencies(), b.latencies());
    }

    #[test]
    fn translation_by_16_is_invisible() {
        let base = secret_branch_program();
        let shifted = parse_listing(&format!(".space 16\n{}", base.emit())).unwrap();
        let params = TimingParams::default();
        let fa = alignment_features(&base);
        let fb = alignment_features(&shifted);
        assert_eq!(fa.values().collect::<Vec<_>>(), fb.values().collect::<Vec<_>>());
        for seed in 0..20 {
            for bit in [false, true] {
                let a = simulate_run(&base, &[bit], &params, seed).unwrap();
                let b = simulate_run(&shifted, &[bit], &params, seed).unwrap();
                assert_eq!(a.latencies(), b.latencies());
            }
        }
    }

    #[test]
    fn degraded_sessions_lose_delta() {
        let params = TimingParams {
            degraded: true,
            ..TimingParams::default()
        };
        let mut rng = rng_from_seed(3);
        let n = 20_000;
        let hits = (0..n).filter(|_| Session::draw(&params, &mut rng).degraded).count();
        assert!((hits as f64 / n as f64 - 0.8).abs() < 0.02);
        let unit = UnitProfile::new(&params, 6, &feature(6, 0), true);
        let session = Session { run_shift: 0.0, degraded: true };
        let zero = TimingParams { base_sigma: 0.0, ..params.clone() };
        for s in 0..100 {
            let (l, _) = sample_latency(&zero, &session, &unit, &mut rng_from_seed(s));
            assert_eq!(l, 9400.0);
        }
    }

    #[test]
    fn validation() {
        assert!(TimingParams::default().validate().is_ok());
        let mut p = TimingParams::default();
        p.p_slow_table[3] = 1.5;
        assert!(p.validate().is_err());
        let p = TimingParams { delta: -1.0, ..TimingParams::default() };
        assert!(p.validate().is_err());
        let p = TimingParams { run_shift_max: -1.0, ..TimingParams::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn params_json_round_trip() {
        let p = TimingParams::default();
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<TimingParams>(&text).unwrap(), p);
        let partial: TimingParams = serde_json::from_str(r#"{"delta": 80}"#).unwrap();
        assert_eq!(partial.delta, 80.0);
        assert!(serde_json::from_str::<TimingParams>(r#"{"dleta": 80}"#).is_err());
    }

    #[test]
    fn no_interrupt_time_ignores_alignment() {
        let p = template_branch_program(0, 8, 25, &BodySpec::default()).unwrap();
        let params = TimingParams::default();
        let a = total_time_no_interrupts(&p, &[true], &params, 11).unwrap();
        let b = total_time_no_interrupts(&p, &[false], &params, 11).unwrap();
        assert_eq!(a, b);
        assert!((a - 51.0 * 4.0).abs() < 40.0);
    }

    #[test]
    fn attack_csv_hides_branch_addresses() {
        let p = secret_branch_program();
        let run = simulate_run(&p, &[true], &TimingParams::default(), 1).unwrap();
        let csv = runs_to_csv(&p, std::slice::from_ref(&run), true);
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert!(rows[0].contains(",0x3,"));
        assert!(rows[4].split(',').nth(2).unwrap().is_empty());
        let full = runs_to_csv(&p, &[run], false);
        assert!(full.lines().nth(5).unwrap().contains(",0x14,"));
    }

    #[test]
    fn seeds_differ() {
        let s: std::collections::BTreeSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(s.len(), 1000);
        assert_ne!(derive_seed(1, 0), derive_seed(0, 1));
    }
}
