//! Estimators used by the attack pipelines: two-component mixture fits,
//! Welch's t-test, Pearson correlation, threshold classification and the
//! alignment heatmap sweep.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::listing::{template_branch_program, BodySpec, ListingError};
use crate::timing::{derive_seed, path_profile, rng_from_seed, sample_units, Session, TimingError, TimingParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero variance")]
    ZeroVariance,
    #[error("non-finite sample")]
    NonFinite,
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error(transparent)]
    Listing(#[from] ListingError),
}

pub const GMM_TOLERANCE: f64 = 1e-8;
pub const GMM_MAX_ITER: usize = 500;
/// Significance level used throughout the attack pipelines.
pub const ALPHA: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm2Fit {
    pub mu_fast: f64,
    pub mu_slow: f64,
    pub sigma_fast: f64,
    pub sigma_slow: f64,
    pub weight_slow: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Every sample had the same value; both components collapse onto it.
    pub degenerate: bool,
    /// Log-likelihood after each EM step.
    #[serde(skip)]
    pub ll_history: Vec<f64>,
}

fn ln_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance.
fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// EM fit of a two-component 1-D Gaussian mixture, initialised by splitting
/// the sorted samples at the median.
pub fn fit_gmm2(samples: &[f64], tolerance: f64, max_iter: usize) -> Result<Gmm2Fit, StatsError> {
    if samples.len() < 10 {
        return Err(StatsError::TooFewSamples {
            needed: 10,
            got: samples.len(),
        });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let spread = xs[n - 1] - xs[0];
    if spread == 0.0 {
        return Ok(Gmm2Fit {
            mu_fast: xs[0],
            mu_slow: xs[0],
            sigma_fast: f64::MIN_POSITIVE,
            sigma_slow: f64::MIN_POSITIVE,
            weight_slow: 0.5,
            log_likelihood: f64::INFINITY,
            iterations: 0,
            converged: true,
            degenerate: true,
            ll_history: Vec::new(),
        });
    }
    let floor = 1e-6 * spread.max(1e-9);
    let (lo, hi) = xs.split_at(n / 2);
    let sd = |v: &[f64]| if v.len() > 1 { variance(v).sqrt().max(floor) } else { floor.max(spread / 4.0) };
    let (mut m0, mut m1) = (mean(lo), mean(hi));
    let (mut s0, mut s1) = (sd(lo), sd(hi));
    let mut w1: f64 = 0.5;
    let mut history = Vec::new();
    let mut resp = vec![0.0; n];
    let mut converged = false;
    let mut prev = f64::NEG_INFINITY;
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        // E step
        let mut ll = 0.0;
        for (r, &x) in resp.iter_mut().zip(&xs) {
            let a = (1.0 - w1).ln() + ln_normal(x, m0, s0);
            let b = w1.ln() + ln_normal(x, m1, s1);
            let tot = log_add(a, b);
            ll += tot;
            *r = (b - tot).exp();
        }
        history.push(ll);
        if (ll - prev).abs() < tolerance {
            converged = true;
            break;
        }
        prev = ll;
        // M step
        let n1: f64 = resp.iter().sum();
        let n0 = n as f64 - n1;
        if n1 < 1e-9 || n0 < 1e-9 {
            converged = true;
            break;
        }
        m1 = resp.iter().zip(&xs).map(|(r, x)| r * x).sum::<f64>() / n1;
        m0 = resp.iter().zip(&xs).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / n0;
        s1 = (resp.iter().zip(&xs).map(|(r, x)| r * (x - m1) * (x - m1)).sum::<f64>() / n1)
            .sqrt()
            .max(floor);
        s0 = (resp.iter().zip(&xs).map(|(r, x)| (1.0 - r) * (x - m0) * (x - m0)).sum::<f64>() / n0)
            .sqrt()
            .max(floor);
        w1 = n1 / n as f64;
    }
    if m0 > m1 {
        std::mem::swap(&mut m0, &mut m1);
        std::mem::swap(&mut s0, &mut s1);
        w1 = 1.0 - w1;
    }
    Ok(Gmm2Fit {
        mu_fast: m0,
        mu_slow: m1,
        sigma_fast: s0,
        sigma_slow: s1,
        weight_slow: w1,
        log_likelihood: *history.last().unwrap_or(&f64::NEG_INFINITY),
        iterations,
        converged,
        degenerate: false,
        ll_history: history,
    })
}

impl Gmm2Fit {
    pub fn separation(&self) -> f64 {
        self.mu_slow - self.mu_fast
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.mu_fast + self.mu_slow)
    }

    fn log_density_gap(&self, x: f64) -> f64 {
        (self.weight_slow.ln() + ln_normal(x, self.mu_slow, self.sigma_slow))
            - ((1.0 - self.weight_slow).ln() + ln_normal(x, self.mu_fast, self.sigma_fast))
    }

    /// Point between the means where both weighted component densities agree.
    /// Falls back to the midpoint when they never cross there.
    pub fn equal_density_threshold(&self) -> f64 {
        if self.degenerate || self.separation() <= 0.0 {
            return self.midpoint();
        }
        let (mut lo, mut hi) = (self.mu_fast, self.mu_slow);
        let (flo, fhi) = (self.log_density_gap(lo), self.log_density_gap(hi));
        if !(flo < 0.0 && fhi > 0.0) {
            return self.midpoint();
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.log_density_gap(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn density(&self, x: f64) -> f64 {
        (1.0 - self.weight_slow) * ln_normal(x, self.mu_fast, self.sigma_fast).exp()
            + self.weight_slow * ln_normal(x, self.mu_slow, self.sigma_slow).exp()
    }

    /// True when the fitted mixture density has a single peak, so the two
    /// components describe one mode between them.
    pub fn is_unimodal(&self) -> bool {
        if self.degenerate {
            return true;
        }
        let (a, b) = (self.mu_fast, self.mu_slow);
        let steps = 2000;
        let mut rising = true;
        let mut prev = self.density(a);
        for i in 1..=steps {
            let d = self.density(a + (b - a) * i as f64 / steps as f64);
            if rising && d < prev {
                rising = false;
            } else if !rising && d > prev * (1.0 + 1e-12) {
                return false;
            }
            prev = d;
        }
        true
    }

    /// Intervals mean ± k·sigma of both components.
    pub fn mode_intervals(&self, k: f64) -> [(f64, f64); 2] {
        [
            (self.mu_fast - k * self.sigma_fast, self.mu_fast + k * self.sigma_fast),
            (self.mu_slow - k * self.sigma_slow, self.mu_slow + k * self.sigma_slow),
        ]
    }

    pub fn covers(&self, x: f64, k: f64) -> bool {
        self.mode_intervals(k).iter().any(|&(a, b)| x >= a && x <= b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
}

/// Two-sided Welch t-test with Welch–Satterthwaite degrees of freedom.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchResult, StatsError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(StatsError::TooFewSamples { needed: 2, got: s.len() });
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a) / na, variance(b) / nb);
    let diff = mean(a) - mean(b);
    let se2 = va + vb;
    if se2 == 0.0 {
        let t = if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY };
        return Ok(WelchResult {
            t_statistic: t,
            degrees_of_freedom: na + nb - 2.0,
            p_value: if diff == 0.0 { 1.0 } else { 0.0 },
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    Ok(WelchResult {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: student_t_two_sided(t, df),
    })
}

/// P(|T| ≥ |t|) for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return if t.is_nan() { f64::NAN } else { 0.0 };
    }
    let x = df / (df + t * t);
    reg_incomplete_beta(0.5 * df, 0.5, x).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, nine terms).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularised incomplete beta I_x(a, b) via the continued fraction,
/// evaluated with the modified Lentz method.
pub fn reg_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp() * beta_cf(a, b, x) / a).min(1.0)
    } else {
        1.0 - (ln_front.exp() * beta_cf(b, a, 1.0 - x) / b).min(1.0)
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let clamp = |v: f64| if v.abs() < TINY { TINY } else { v };
    let mut c = 1.0;
    let mut d = 1.0 / clamp(1.0 - (a + b) * x / (a + 1.0));
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 / clamp(1.0 + num * d);
        c = clamp(1.0 + num / c);
        h *= d * c;
        let num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 / clamp(1.0 + num * d);
        c = clamp(1.0 + num / c);
        let step = d * c;
        h *= step;
        if (step - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(StatsError::TooFewSamples { needed: 2, got: xs.len() });
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Bit is 1 iff latency ≥ threshold.
pub fn classify_threshold(latencies: &[f64], threshold: f64) -> Vec<bool> {
    latencies.iter().map(|&l| l >= threshold).collect()
}

pub fn accuracy(predicted: &[bool], truth: &[bool]) -> f64 {
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Exhaustive scan over all cut points; returns the best threshold and its
/// accuracy, either orientation allowed.
pub fn best_threshold_scan(values: &[f64], labels: &[bool]) -> (f64, f64) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let ones = labels.iter().filter(|&&l| l).count();
    let n = values.len();
    // Threshold below everything: all predicted 1.
    let mut correct_hi = ones; // predict 1 above threshold
    let mut best = (values.iter().copied().fold(f64::INFINITY, f64::min), correct_hi.max(n - correct_hi));
    for k in 0..n {
        let i = idx[k];
        if labels[i] {
            correct_hi -= 1;
        } else {
            correct_hi += 1;
        }
        if k + 1 < n && values[idx[k + 1]] == values[i] {
            continue;
        }
        let thr = if k + 1 < n { 0.5 * (values[i] + values[idx[k + 1]]) } else { values[i] + 1.0 };
        let score = correct_hi.max(n - correct_hi);
        if score > best.1 {
            best = (thr, score);
        }
    }
    (best.0, best.1 as f64 / n.max(1) as f64)
}

/// Threshold attack on labelled observations: the threshold comes from an
/// unlabelled mixture fit, the orientation from the class means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdClassifier {
    pub threshold: f64,
    /// Slow side predicts bit 1.
    pub slow_is_one: bool,
}

impl ThresholdClassifier {
    pub fn fit(values: &[f64], labels: &[bool]) -> Result<Self, StatsError> {
        let fit = fit_gmm2(values, GMM_TOLERANCE, GMM_MAX_ITER)?;
        let class_mean = |bit: bool| {
            let v: Vec<f64> = values.iter().zip(labels).filter(|(_, &l)| l == bit).map(|(v, _)| *v).collect();
            if v.is_empty() { f64::NAN } else { mean(&v) }
        };
        Ok(Self {
            threshold: fit.equal_density_threshold(),
            slow_is_one: !(class_mean(true) < class_mean(false)),
        })
    }

    pub fn predict(&self, value: f64) -> bool {
        (value >= self.threshold) == self.slow_is_one
    }

    pub fn accuracy(&self, values: &[f64], labels: &[bool]) -> f64 {
        let pred: Vec<bool> = values.iter().map(|&v| self.predict(v)).collect();
        accuracy(&pred, labels)
    }
}

/// Outcome of the three-valued branch classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    First,
    Second,
    Unclassified,
}

/// Profiled latency references for the two possible outcomes of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePair {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub first_fit: Gmm2Fit,
    pub second_fit: Gmm2Fit,
}

impl ReferencePair {
    pub fn new(first: Vec<f64>, second: Vec<f64>) -> Result<Self, StatsError> {
        let first_fit = fit_gmm2(&first, GMM_TOLERANCE, GMM_MAX_ITER)?;
        let second_fit = fit_gmm2(&second, GMM_TOLERANCE, GMM_MAX_ITER)?;
        Ok(Self { first, second, first_fit, second_fit })
    }

    /// Exclusive-region vote first; Welch tests against both references as
    /// fallback. Unclassified when neither criterion settles it.
    pub fn classify(&self, observations: &[f64]) -> Verdict {
        let k = 2.0;
        let mut votes_first = 0;
        let mut votes_second = 0;
        for &x in observations {
            let in_first = self.first_fit.covers(x, k);
            let in_second = self.second_fit.covers(x, k);
            match (in_first, in_second) {
                (true, false) => votes_first += 1,
                (false, true) => votes_second += 1,
                _ => {}
            }
        }
        match (votes_first > 0, votes_second > 0) {
            (true, false) => return Verdict::First,
            (false, true) => return Verdict::Second,
            _ => {}
        }
        if observations.len() < 2 {
            return Verdict::Unclassified;
        }
        let p = |r: &[f64]| welch_t(observations, r).map(|w| w.p_value).unwrap_or(1.0);
        let (pf, ps) = (p(&self.first), p(&self.second));
        match (pf < ALPHA, ps < ALPHA) {
            (true, false) => Verdict::Second,
            (false, true) => Verdict::First,
            _ => Verdict::Unclassified,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub x_offset: u64,
    pub y_offset: u64,
    pub success_rate: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    pub x_offsets: Vec<u64>,
    pub y_offsets: Vec<u64>,
    /// Body repetitions per path.
    pub reps: usize,
    pub body: BodySpec,
    /// 0-based steppable unit whose latency is thresholded.
    pub discriminator_step: usize,
    pub runs_per_cell: usize,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            x_offsets: (0..32).collect(),
            y_offsets: (0..32).collect(),
            reps: 25,
            body: BodySpec::default(),
            discriminator_step: 10,
            runs_per_cell: 1000,
        }
    }
}

/// Discriminator latency minus the median latency of the run's non-write
/// units, which removes the per-run shift.
pub fn normalized_step(latencies: &[f64], writes: &[bool], step: usize) -> f64 {
    let reference: Vec<f64> = latencies.iter().zip(writes).filter(|(_, &w)| !w).map(|(l, _)| *l).collect();
    let base = if reference.is_empty() { median(latencies) } else { median(&reference) };
    latencies[step] - base
}

/// Attack success per (x, y) cell of the branch template.
///
/// Runs come in pairs that share every random draw and differ only in the
/// secret, so the two secrets are balanced and the estimate is paired. The
/// pair seeds do not depend on the cell, which makes cells that are
/// equivalent under the model produce identical estimates.
pub fn heatmap_sweep(config: &HeatmapConfig, params: &TimingParams, seed: u64) -> Result<Vec<HeatmapCell>, StatsError> {
    params.validate()?;
    if config.runs_per_cell < 100 {
        return Err(StatsError::TooFewSamples {
            needed: 100,
            got: config.runs_per_cell,
        });
    }
    let cells: Vec<(u64, u64)> = config
        .x_offsets
        .iter()
        .flat_map(|&x| config.y_offsets.iter().map(move |&y| (x, y)))
        .collect();
    cells
        .par_iter()
        .map(|&(x, y)| heatmap_cell(config, params, seed, x, y))
        .collect()
}

pub fn heatmap_cell(config: &HeatmapConfig, params: &TimingParams, seed: u64, x: u64, y: u64) -> Result<HeatmapCell, StatsError> {
    let program = template_branch_program(x, y, config.reps, &config.body)?;
    let pairs = config.runs_per_cell.div_ceil(2);
    let profiles = [
        path_profile(&program, &[false], params)?,
        path_profile(&program, &[true], params)?,
    ];
    let writes: Vec<Vec<bool>> = profiles.iter().map(|p| p.iter().map(|u| u.writes_memory).collect()).collect();
    let step = config.discriminator_step.min(profiles[0].len().min(profiles[1].len()) - 1);
    let mut values = Vec::with_capacity(2 * pairs);
    let mut labels = Vec::with_capacity(2 * pairs);
    for j in 0..pairs {
        let mut rng = rng_from_seed(derive_seed(seed, j as u64));
        let session = Session::draw(params, &mut rng);
        for bit in [true, false] {
            let mut r = rng.clone();
            let samples = sample_units(params, &session, &profiles[usize::from(bit)], &mut r);
            let lat: Vec<f64> = samples.iter().map(|s| s.latency).collect();
            values.push(normalized_step(&lat, &writes[usize::from(bit)], step));
            labels.push(bit);
        }
    }
    let clf = ThresholdClassifier::fit(&values, &labels)?;
    Ok(HeatmapCell {
        x_offset: x,
        y_offset: y,
        success_rate: clf.accuracy(&values, &labels),
        runs: values.len(),
    })
}

pub fn heatmap_csv(cells: &[HeatmapCell]) -> String {
    let mut out = String::from("x_offset,y_offset,success_rate,runs\n");
    for c in cells {
        let _ = writeln!(out, "{},{},{:.6},{}", c.x_offset, c.y_offset, c.success_rate, c.runs);
    }
    out
}

/// Gnuplot `matrix` layout: one row per y, one column per x, percentages.
pub fn heatmap_matrix(cells: &[HeatmapCell]) -> String {
    let mut xs: Vec<u64> = cells.iter().map(|c| c.x_offset).collect();
    let mut ys: Vec<u64> = cells.iter().map(|c| c.y_offset).collect();
    xs.sort_unstable();
    xs.dedup();
    ys.sort_unstable();
    ys.dedup();
    let mut out = String::new();
    for &y in &ys {
        let row: Vec<String> = xs
            .iter()
            .map(|&x| {
                cells
                    .iter()
                    .find(|c| c.x_offset == x && c.y_offset == y)
                    .map_or("nan".to_string(), |c| format!("{:.2}", 100.0 * c.success_rate))
            })
            .collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

/// Largest average over the `w`×`h` rectangles (w along x, h along y) that
/// contain the best cell.
pub fn best_rectangle_average(cells: &[HeatmapCell], w: u64, h: u64) -> Option<f64> {
    let best = cells.iter().max_by(|a, b| a.success_rate.total_cmp(&b.success_rate))?;
    let lookup = |x: u64, y: u64| cells.iter().find(|c| c.x_offset == x && c.y_offset == y).map(|c| c.success_rate);
    let mut top: Option<f64> = None;
    for x0 in best.x_offset.saturating_sub(w - 1)..=best.x_offset {
        for y0 in best.y_offset.saturating_sub(h - 1)..=best.y_offset {
            let vals: Option<Vec<f64>> = (x0..x0 + w).flat_map(|x| (y0..y0 + h).map(move |y| (x, y))).map(|(x, y)| lookup(x, y)).collect();
            if let Some(v) = vals {
                let avg = mean(&v);
                top = Some(top.map_or(avg, |t: f64| t.max(avg)));
            }
        }
    }
    top
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    use statrs::distribution::{ContinuousCDF, StudentsT};

    fn planted(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        let fast = Normal::new(9400.0, 30.0).unwrap();
        let slow = Normal::new(9500.0, 30.0).unwrap();
        (0..n)
            .map(|_| if rng.random::<f64>() < 0.9 { slow.sample(&mut rng) } else { fast.sample(&mut rng) })
            .collect()
    }

    #[test]
    fn gmm_recovers_plant() {
        let xs = planted(10_000, 1);
        let fit = fit_gmm2(&xs, GMM_TOLERANCE, GMM_MAX_ITER).unwrap();
        assert!((fit.mu_fast - 9400.0).abs() <= 5.0, "{fit:?}");
        assert!((fit.mu_slow - 9500.0).abs() <= 5.0, "{fit:?}");
        assert!((fit.weight_slow - 0.9).abs() <= 0.02);
        assert!((fit.separation() - 100.0).abs() <= 10.0);
        assert!(fit.converged);
        for w in fit.ll_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "log-likelihood decreased");
        }
    }

    #[test]
    fn gmm_degenerate_and_short() {
        let fit = fit_gmm2(&[5.0; 20], GMM_TOLERANCE, GMM_MAX_ITER).unwrap();
        assert!(fit.degenerate);
        assert!(matches!(fit_gmm2(&[1.0; 9], 1e-8, 10), Err(StatsError::TooFewSamples { .. })));
    }

    #[test]
    fn gmm_unimodal_components_close() {
        let mut rng = rng_from_seed(4);
        let d = Normal::new(9400.0, 30.0).unwrap();
        let xs: Vec<f64> = (0..5000).map(|_| d.sample(&mut rng)).collect();
        let fit = fit_gmm2(&xs, GMM_TOLERANCE, GMM_MAX_ITER).unwrap();
        assert!((fit.mu_fast - 9400.0).abs() < 30.0 && (fit.mu_slow - 9400.0).abs() < 30.0, "{fit:?}");
        assert!(fit.is_unimodal());
        assert!(!fit_gmm2(&planted(5000, 3), GMM_TOLERANCE, GMM_MAX_ITER).unwrap().is_unimodal());
    }

    #[test]
    fn gmm_order_independent() {
        let xs = planted(500, 2);
        let mut ys = xs.clone();
        ys.reverse();
        assert_eq!(fit_gmm2(&xs, 1e-8, 500).unwrap(), fit_gmm2(&ys, 1e-8, 500).unwrap());
    }

    /// Reference Welch computation written out term by term.
    fn welch_oracle(a: &[f64], b: &[f64]) -> (f64, f64) {
        let ma = a.iter().sum::<f64>() / a.len() as f64;
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        let mut ssa = 0.0;
        for x in a {
            ssa += (x - ma).powi(2);
        }
        let mut ssb = 0.0;
        for x in b {
            ssb += (x - mb).powi(2);
        }
        let va = ssa / (a.len() - 1) as f64 / a.len() as f64;
        let vb = ssb / (b.len() - 1) as f64 / b.len() as f64;
        let t = (ma - mb) / (va + vb).sqrt();
        let df = (va + vb).powi(2) / (va.powi(2) / (a.len() - 1) as f64 + vb.powi(2) / (b.len() - 1) as f64);
        (t, df)
    }

    #[test]
    fn welch_matches_oracle() {
        let cases: [(&[f64], &[f64]); 3] = [
            (&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 4.0, 6.0, 8.0, 11.0]),
            (&[9400.0, 9410.0, 9395.0, 9402.0, 9420.0], &[9500.0, 9480.0, 9515.0, 9490.0, 9505.0]),
            (&[0.1, -0.3, 0.7, 0.2, 0.0], &[1.5, 0.3, -2.0, 4.0, 0.9]),
        ];
        for (a, b) in cases {
            let w = welch_t(a, b).unwrap();
            let (t, df) = welch_oracle(a, b);
            assert!(((w.t_statistic - t) / t).abs() < 1e-9);
            assert!(((w.degrees_of_freedom - df) / df).abs() < 1e-9);
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            let p = 2.0 * (1.0 - dist.cdf(t.abs()));
            assert!((w.p_value - p).abs() < 1e-10, "{} vs {p}", w.p_value);
        }
    }

    #[test]
    fn t_tail_against_statrs() {
        for &df in &[1.0, 2.5, 7.0, 30.0, 120.0, 5000.0] {
            for &t in &[0.0, 0.3, 1.0, 2.0, 3.5, 6.0] {
                let dist = StudentsT::new(0.0, 1.0, df).unwrap();
                let p = 2.0 * dist.cdf(-t);
                assert!((student_t_two_sided(t, df) - p).abs() < 1e-10, "df {df} t {t}");
            }
        }
    }

    #[test]
    fn welch_identities() {
        let a = [1.0, 2.0, 3.5, 4.0];
        let w = welch_t(&a, &a).unwrap();
        assert_eq!(w.t_statistic, 0.0);
        assert!((w.p_value - 1.0).abs() < 1e-12);
        let b = [0.5, 2.5, 3.0, 7.0, 1.0];
        let (ab, ba) = (welch_t(&a, &b).unwrap(), welch_t(&b, &a).unwrap());
        assert_eq!(ab.t_statistic, -ba.t_statistic);
        assert!((ab.p_value - ba.p_value).abs() < 1e-15);
        let z = welch_t(&[3.0; 4], &[3.0; 5]).unwrap();
        assert_eq!(z.t_statistic, 0.0);
        assert!(welch_t(&[1.0], &b).is_err());
    }

    #[test]
    fn welch_sixteen_samples_detect_modes() {
        let mut rng = rng_from_seed(9);
        let fast = Normal::new(9400.0, 30.0).unwrap();
        let slow = Normal::new(9500.0, 30.0).unwrap();
        let a: Vec<f64> = (0..16).map(|_| fast.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..16).map(|_| slow.sample(&mut rng)).collect();
        assert!(welch_t(&a, &b).unwrap().p_value < 0.001);
    }

    #[test]
    fn pearson_identities() {
        let xs: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        let ys: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).cos()).collect();
        let affine: Vec<f64> = ys.iter().map(|y| 3.0 * y + 100.0).collect();
        assert!((pearson(&xs, &ys).unwrap() - pearson(&xs, &affine).unwrap()).abs() < 1e-12);
        assert_eq!(pearson(&xs, &[1.0; 50]), Err(StatsError::ZeroVariance));
        assert!(pearson(&xs, &ys[..10]).is_err());
    }

    #[test]
    fn pearson_independent_streams() {
        let mut rng = rng_from_seed(12);
        let xs: Vec<f64> = (0..1_000_000).map(|_| rng.random()).collect();
        let ys: Vec<f64> = (0..1_000_000).map(|_| rng.random()).collect();
        assert!(pearson(&xs, &ys).unwrap().abs() < 0.01);
    }

    #[test]
    fn threshold_classification() {
        assert!(classify_threshold(&[1.0, 2.0, 3.0], 0.0).iter().all(|&b| b));
        assert_eq!(classify_threshold(&[1.0, 2.0, 3.0], 2.0), vec![false, true, true]);
        // Well-separated modes.
        let mut rng = rng_from_seed(5);
        let noise = Normal::new(0.0, 30.0).unwrap();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..5000 {
            let bit: bool = rng.random();
            let p = if bit { 0.99 } else { 0.01 };
            let slow = rng.random::<f64>() < p;
            values.push(9400.0 + if slow { 100.0 } else { 0.0 } + noise.sample(&mut rng));
            labels.push(bit);
        }
        let fit = fit_gmm2(&values, GMM_TOLERANCE, GMM_MAX_ITER).unwrap();
        let acc_mid = accuracy(&classify_threshold(&values, fit.midpoint()), &labels);
        let (_, acc_best) = best_threshold_scan(&values, &labels);
        assert!(acc_mid >= 0.9);
        assert!(acc_best - acc_mid <= 0.01);
        let clf = ThresholdClassifier::fit(&values, &labels).unwrap();
        assert!(acc_best - clf.accuracy(&values, &labels) <= 0.01);
        let sep: Vec<f64> = labels.iter().map(|&b| if b { 9500.0 } else { 9400.0 } + noise.sample(&mut rng) / 30.0).collect();
        assert!(accuracy(&classify_threshold(&sep, 9450.0), &labels) >= 0.99);
    }

    #[test]
    fn scan_finds_perfect_split() {
        let values = [1.0, 2.0, 3.0, 10.0, 11.0];
        let labels = [true, true, true, false, false];
        let (thr, acc) = best_threshold_scan(&values, &labels);
        assert_eq!(acc, 1.0);
        assert!(thr > 3.0 && thr < 10.0);
    }

    #[test]
    fn three_value_rule() {
        let mut rng = rng_from_seed(6);
        let d = Normal::new(0.0, 10.0).unwrap();
        let first: Vec<f64> = (0..500).map(|_| 9400.0 + d.sample(&mut rng)).collect();
        let second: Vec<f64> = (0..500).map(|_| 9500.0 + d.sample(&mut rng)).collect();
        let refs = ReferencePair::new(first, second).unwrap();
        assert_eq!(refs.classify(&[9401.0]), Verdict::First);
        assert_eq!(refs.classify(&[9498.0, 9503.0]), Verdict::Second);
        assert_eq!(refs.classify(&[9450.0]), Verdict::Unclassified);
        assert_eq!(refs.classify(&[9395.0, 9505.0]), Verdict::Unclassified);
    }

    #[test]
    fn heatmap_small_sweep_properties() {
        let config = HeatmapConfig {
            x_offsets: vec![0, 2, 10, 16, 18],
            y_offsets: vec![0, 2, 10, 18],
            runs_per_cell: 200,
            ..HeatmapConfig::default()
        };
        let cells = heatmap_sweep(&config, &TimingParams::default(), 77).unwrap();
        let get = |x, y| cells.iter().find(|c| c.x_offset == x && c.y_offset == y).unwrap().success_rate;
        assert_eq!(get(2, 2), 0.5);
        assert_eq!(get(2, 18), 0.5);
        assert_eq!(get(2, 10), get(10, 2));
        assert_eq!(get(2, 10), get(18, 10));
        assert!(get(2, 10) > 0.75, "{}", get(2, 10));
        assert!(cells.iter().all(|c| c.runs == 200));
        let csv = heatmap_csv(&cells);
        assert!(csv.starts_with("x_offset,y_offset,success_rate,runs\n"));
        assert_eq!(heatmap_matrix(&cells).lines().count(), 4);
        assert!(heatmap_sweep(&HeatmapConfig { runs_per_cell: 50, ..config }, &TimingParams::default(), 1).is_err());
    }
}
