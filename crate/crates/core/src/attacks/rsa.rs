//! RSA private-key recovery from a leaked binary-GCD trace of gcd(e, φ).

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gcd::{binary_gcd_reference, reconstruct_phi, GcdTrace};
use super::{AttackError, Direction};
use crate::listing::{template_branch_program, BodySpec};
use crate::stats::{normalized_step, ReferencePair, Verdict};
use crate::timing::{derive_seed, path_profile, rng_from_seed, sample_units, Session, TimingParams, UnitProfile};

/// Big integers as decimal strings in JSON.
mod decimal {
    use num_bigint::BigUint;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BigUint, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_str_radix(10))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
        let text = String::deserialize(d)?;
        BigUint::parse_bytes(text.as_bytes(), 10).ok_or_else(|| D::Error::custom("not a decimal integer"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RsaKey {
    #[serde(with = "decimal")]
    pub n: BigUint,
    #[serde(with = "decimal")]
    pub e: BigUint,
    #[serde(with = "decimal")]
    pub p: BigUint,
    #[serde(with = "decimal")]
    pub q: BigUint,
    #[serde(with = "decimal")]
    pub d: BigUint,
    #[serde(with = "decimal")]
    pub phi: BigUint,
}

fn carmichael(p: &BigUint, q: &BigUint) -> BigUint {
    let one = BigUint::one();
    (p - &one).lcm(&(q - &one))
}

impl RsaKey {
    /// Checks n = p·q, φ = (p−1)(q−1), gcd(e, φ) = 1 and e·d ≡ 1 mod λ(n).
    /// Primality is the caller's concern.
    pub fn is_consistent(&self) -> bool {
        let one = BigUint::one();
        if self.p <= one || self.q <= one {
            return false;
        }
        let lambda = carmichael(&self.p, &self.q);
        &self.p * &self.q == self.n
            && (&self.p - &one) * (&self.q - &one) == self.phi
            && self.e.gcd(&self.phi).is_one()
            && (&self.e * &self.d) % &lambda == one
    }

    pub fn is_valid<R: Rng + ?Sized>(&self, rng: &mut R) -> bool {
        self.is_consistent() && is_probable_prime(&self.p, 64, rng) && is_probable_prime(&self.q, 64, rng)
    }
}

fn random_below<R: Rng + ?Sized>(bound: &BigUint, rng: &mut R) -> BigUint {
    let bytes = bound.bits().div_ceil(8) as usize + 8;
    let mut buf = vec![0u8; bytes];
    rng.fill_bytes(&mut buf);
    BigUint::from_bytes_le(&buf) % bound
}

/// Miller–Rabin with random bases.
pub fn is_probable_prime<R: Rng + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for small in [2u32, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let s = BigUint::from(small);
        if n == &s {
            return true;
        }
        if (n % &s).is_zero() {
            return false;
        }
    }
    let one = BigUint::one();
    let n1 = n - &one;
    let r = n1.trailing_zeros().unwrap_or(0);
    let d = &n1 >> r;
    let span = n - BigUint::from(3u32);
    'witness: for _ in 0..rounds {
        let a = random_below(&span, rng) + &two;
        let mut x = a.modpow(&d, n);
        if x == one || x == n1 {
            continue;
        }
        for _ in 1..r {
            x = x.modpow(&two, n);
            if x == n1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

pub fn random_prime<R: Rng + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    assert!(bits >= 8, "prime size too small");
    let bytes = bits.div_ceil(8) as usize;
    loop {
        let mut buf = vec![0u8; bytes];
        rng.fill_bytes(&mut buf);
        let mut c = BigUint::from_bytes_be(&buf);
        c &= (BigUint::one() << bits) - 1u32;
        // Top two bits set keeps n at full size, low bit makes it odd.
        c |= BigUint::from(3u32) << (bits - 2);
        c |= BigUint::one();
        if is_probable_prime(&c, 64, rng) {
            return c;
        }
    }
}

pub fn generate_key<R: Rng + ?Sized>(prime_bits: u64, e: &BigUint, rng: &mut R) -> RsaKey {
    loop {
        let p = random_prime(prime_bits, rng);
        let q = random_prime(prime_bits, rng);
        if p == q {
            continue;
        }
        let one = BigUint::one();
        let phi = (&p - &one) * (&q - &one);
        if !e.gcd(&phi).is_one() {
            continue;
        }
        let d = e.modinv(&carmichael(&p, &q)).expect("e is coprime to phi");
        let (p, q) = if p > q { (p, q) } else { (q, p) };
        return RsaKey { n: &p * &q, e: e.clone(), p, q, d, phi };
    }
}

/// Factors n from φ: p and q are the roots of x² − (n − φ + 1)x + n.
pub fn recover_rsa_key(n: &BigUint, e: &BigUint, phi: &BigUint) -> Result<RsaKey, AttackError> {
    let invalid = |m: &str| AttackError::InvalidPhi(m.to_string());
    if phi >= n || phi.is_zero() {
        return Err(invalid("phi must lie in (0, n)"));
    }
    let s = n - phi + 1u32;
    let s2 = &s * &s;
    let four_n = n << 2u32;
    if s2 < four_n {
        return Err(invalid("negative discriminant"));
    }
    let disc = s2 - four_n;
    let root = disc.sqrt();
    if &root * &root != disc {
        return Err(invalid("discriminant is not a perfect square"));
    }
    if (&s + &root).is_odd() {
        return Err(invalid("roots are not integers"));
    }
    let p = (&s + &root) >> 1u32;
    let q = (&s - &root) >> 1u32;
    if q <= BigUint::one() || &p * &q != *n {
        return Err(invalid("roots do not factor n"));
    }
    let lambda = carmichael(&p, &q);
    let d = e.modinv(&lambda).ok_or_else(|| invalid("e is not invertible modulo lambda(n)"))?;
    Ok(RsaKey { n: n.clone(), e: e.clone(), p, q, d, phi: phi.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyOutcome {
    pub key: Option<RsaKey>,
    /// Unclassified iterations that had to be set to taken.
    pub flips: usize,
    pub attempts: usize,
}

/// Resolves unclassified iterations: all start as not-taken, then the last
/// k of them are set to taken for k = 1, 2, … until a consistent key appears.
pub fn greedy_key_search(trace: &GcdTrace, e: &BigUint, n: &BigUint) -> GreedyOutcome {
    let open = trace.unclassified();
    let mut work = trace.clone();
    for &i in &open {
        work.iterations[i].direction = Direction::NotTaken;
    }
    let one = BigUint::one();
    let mut attempts = 0;
    for flips in 0..=open.len() {
        if flips > 0 {
            work.iterations[open[open.len() - flips]].direction = Direction::Taken;
        }
        attempts += 1;
        let Ok(phi) = reconstruct_phi(&work, e, &one) else { continue };
        if let Ok(key) = recover_rsa_key(n, e, &phi) {
            if key.is_consistent() {
                return GreedyOutcome { key: Some(key), flips, attempts };
            }
        }
    }
    GreedyOutcome { key: None, flips: open.len(), attempts }
}

/// How branch directions are observed in the end-to-end attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UnclassificationModel {
    /// Every direction observed correctly.
    Reliable,
    /// Each iteration is unclassified with probability rising linearly
    /// towards the end of the loop; the average rate is `mean_fraction`.
    SuffixRamp { mean_fraction: f64 },
    /// Directions classified from simulated latencies of a branch template
    /// using the three-valued rule; `repetitions` measurements per iteration.
    Simulated {
        params: TimingParams,
        x_offset: u64,
        y_offset: u64,
        repetitions: usize,
        reference_runs: usize,
    },
}

impl Default for UnclassificationModel {
    fn default() -> Self {
        UnclassificationModel::SuffixRamp { mean_fraction: 0.087 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RsaAttackConfig {
    pub keys: usize,
    pub prime_bits: u64,
    pub e: u64,
    pub model: UnclassificationModel,
}

impl Default for RsaAttackConfig {
    fn default() -> Self {
        Self {
            keys: 100,
            prime_bits: 256,
            e: 65537,
            model: UnclassificationModel::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsaRunReport {
    pub run: usize,
    pub success: bool,
    pub iterations: usize,
    pub unclassified: usize,
    pub misclassified: usize,
    pub flips: usize,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsaAttackReport {
    pub keys: usize,
    pub prime_bits: u64,
    pub success_fraction: f64,
    pub mean_iterations: f64,
    pub mean_unclassified: f64,
    pub median_unclassified: f64,
    pub std_unclassified: f64,
    /// Any returned key that failed validation. Must stay zero.
    pub invalid_keys: usize,
    pub runs: Vec<RsaRunReport>,
}

/// Observation machinery for the simulated model, built once per attack.
struct SimulatedObserver {
    params: TimingParams,
    profiles: [Vec<UnitProfile>; 2],
    writes: Vec<bool>,
    step: usize,
    repetitions: usize,
    refs: ReferencePair,
}

impl SimulatedObserver {
    const STEP: usize = 10;

    fn new(params: &TimingParams, x: u64, y: u64, repetitions: usize, reference_runs: usize, seed: u64) -> Result<Self, AttackError> {
        let program = template_branch_program(x, y, 25, &BodySpec::default())?;
        let profiles = [path_profile(&program, &[false], params)?, path_profile(&program, &[true], params)?];
        let writes = profiles[0].iter().map(|u| u.writes_memory).collect();
        let mut obs = Self {
            params: params.clone(),
            profiles,
            writes,
            step: Self::STEP,
            repetitions,
            refs: ReferencePair::new(vec![0.0; 10], vec![1.0; 10])?,
        };
        let mut rng = rng_from_seed(seed);
        let taken = obs.measure(true, reference_runs, &mut rng);
        let not_taken = obs.measure(false, reference_runs, &mut rng);
        obs.refs = ReferencePair::new(taken, not_taken)?;
        Ok(obs)
    }

    /// Normalised discriminator latencies; the if path stands for `taken`.
    fn measure<R: Rng>(&self, taken: bool, count: usize, rng: &mut R) -> Vec<f64> {
        (0..count)
            .map(|_| {
                let session = Session::draw(&self.params, rng);
                let lat: Vec<f64> = sample_units(&self.params, &session, &self.profiles[usize::from(taken)], rng)
                    .iter()
                    .map(|s| s.latency)
                    .collect();
                normalized_step(&lat, &self.writes, self.step)
            })
            .collect()
    }

    fn observe<R: Rng>(&self, truth: Direction, rng: &mut R) -> Direction {
        let obs = self.measure(truth == Direction::Taken, self.repetitions, rng);
        match self.refs.classify(&obs) {
            Verdict::First => Direction::Taken,
            Verdict::Second => Direction::NotTaken,
            Verdict::Unclassified => Direction::Unclassified,
        }
    }
}

/// Replaces true directions with what the attacker observes. Returns the
/// observed trace and the number of wrong (not unclassified) directions.
fn observe_trace<R: Rng>(
    truth: &GcdTrace,
    model: &UnclassificationModel,
    observer: Option<&SimulatedObserver>,
    rng: &mut R,
) -> (GcdTrace, usize) {
    let mut seen = truth.clone();
    let n = truth.iterations.len().max(1) as f64;
    let mut wrong = 0;
    for (i, step) in seen.iterations.iter_mut().enumerate() {
        match model {
            UnclassificationModel::Reliable => {}
            UnclassificationModel::SuffixRamp { mean_fraction } => {
                let q = (2.0 * mean_fraction * (i as f64 + 0.5) / n).min(1.0);
                if rng.random::<f64>() < q {
                    step.direction = Direction::Unclassified;
                }
            }
            UnclassificationModel::Simulated { .. } => {
                let observed = observer.expect("observer built for simulated model").observe(step.direction, rng);
                if observed != Direction::Unclassified && observed != step.direction {
                    wrong += 1;
                }
                step.direction = observed;
            }
        }
    }
    (seen, wrong)
}

/// Fresh key per run, trace of gcd(e, φ), observation, greedy repair.
pub fn rsa_attack_end_to_end(config: &RsaAttackConfig, seed: u64) -> Result<RsaAttackReport, AttackError> {
    let e = BigUint::from(config.e);
    let observer = match &config.model {
        UnclassificationModel::Simulated { params, x_offset, y_offset, repetitions, reference_runs } => {
            params.validate()?;
            Some(SimulatedObserver::new(params, *x_offset, *y_offset, *repetitions, *reference_runs, derive_seed(seed, u64::MAX))?)
        }
        _ => None,
    };
    let runs: Vec<(RsaRunReport, bool)> = (0..config.keys)
        .into_par_iter()
        .map(|run| {
            let mut rng = rng_from_seed(derive_seed(seed, run as u64));
            let key = generate_key(config.prime_bits, &e, &mut rng);
            let (_, trace) = binary_gcd_reference(&key.e, &key.phi).expect("non-zero operands");
            let (seen, misclassified) = observe_trace(&trace, &config.model, observer.as_ref(), &mut rng);
            let outcome = greedy_key_search(&seen, &key.e, &key.n);
            let invalid = outcome.key.as_ref().is_some_and(|k| !k.is_valid(&mut rng));
            let success = outcome.key.as_ref().is_some_and(|k| k.p == key.p && k.q == key.q && k.d == key.d);
            (
                RsaRunReport {
                    run,
                    success,
                    iterations: trace.iterations.len(),
                    unclassified: seen.unclassified().len(),
                    misclassified,
                    flips: outcome.flips,
                    attempts: outcome.attempts,
                },
                invalid,
            )
        })
        .collect();
    let invalid_keys = runs.iter().filter(|(_, bad)| *bad).count();
    let runs: Vec<RsaRunReport> = runs.into_iter().map(|(r, _)| r).collect();
    let count = runs.len().max(1) as f64;
    let unclassified: Vec<f64> = runs.iter().map(|r| r.unclassified as f64).collect();
    let mean_u = unclassified.iter().sum::<f64>() / count;
    let var_u = unclassified.iter().map(|u| (u - mean_u).powi(2)).sum::<f64>() / (count - 1.0).max(1.0);
    Ok(RsaAttackReport {
        keys: config.keys,
        prime_bits: config.prime_bits,
        success_fraction: runs.iter().filter(|r| r.success).count() as f64 / count,
        mean_iterations: runs.iter().map(|r| r.iterations as f64).sum::<f64>() / count,
        mean_unclassified: mean_u,
        median_unclassified: if unclassified.is_empty() { 0.0 } else { crate::stats::median(&unclassified) },
        std_unclassified: var_u.sqrt(),
        invalid_keys,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    #[test]
    fn textbook_key() {
        let key = recover_rsa_key(&big(3233), &big(17), &big(3120)).unwrap();
        assert_eq!((key.p.clone(), key.q.clone(), key.d.clone()), (big(61), big(53), big(413)));
        // Direct check against λ(n) = lcm(60, 52) = 780.
        assert_eq!((17 * 413) % 780, 1);
        assert!(key.is_consistent());
    }

    #[test]
    fn bad_phi() {
        assert!(matches!(recover_rsa_key(&big(3233), &big(17), &big(3233)), Err(AttackError::InvalidPhi(_))));
        assert!(matches!(recover_rsa_key(&big(3233), &big(17), &big(3000)), Err(AttackError::InvalidPhi(_))));
    }

    #[test]
    fn miller_rabin_small() {
        let mut rng = rng_from_seed(1);
        let primes: Vec<u64> = (2..2000u64).filter(|&n| (2..n).take_while(|d| d * d <= n).all(|d| n % d != 0)).collect();
        for n in 0..2000u64 {
            assert_eq!(is_probable_prime(&big(n), 16, &mut rng), primes.contains(&n), "{n}");
        }
        // Carmichael number.
        assert!(!is_probable_prime(&big(561), 16, &mut rng));
    }

    #[test]
    fn generated_keys_round_trip() {
        let mut rng = rng_from_seed(2);
        for _ in 0..10 {
            let key = generate_key(128, &big(65537), &mut rng);
            assert!(key.is_valid(&mut rng));
            assert_eq!(key.n.bits(), 256);
            let back = recover_rsa_key(&key.n, &key.e, &key.phi).unwrap();
            assert_eq!(back, key);
        }
    }

    #[test]
    fn greedy_without_unclassified() {
        let mut rng = rng_from_seed(3);
        let key = generate_key(64, &big(65537), &mut rng);
        let (_, trace) = binary_gcd_reference(&key.e, &key.phi).unwrap();
        let out = greedy_key_search(&trace, &key.e, &key.n);
        assert_eq!(out.key.unwrap(), key);
        assert_eq!((out.flips, out.attempts), (0, 1));
    }

    #[test]
    fn early_iterations_are_not_taken() {
        let mut rng = rng_from_seed(4);
        let key = generate_key(128, &big(65537), &mut rng);
        let (_, trace) = binary_gcd_reference(&key.e, &key.phi).unwrap();
        let prefix = trace.iterations.len() / 2;
        assert!(trace.iterations[..prefix].iter().all(|s| s.direction == Direction::NotTaken));
        let mut seen = trace.clone();
        for s in seen.iterations[..prefix].iter_mut().step_by(3) {
            s.direction = Direction::Unclassified;
        }
        let out = greedy_key_search(&seen, &key.e, &key.n);
        assert_eq!(out.key.unwrap(), key);
        assert_eq!(out.flips, 0);
    }

    #[test]
    fn greedy_flips_suffix() {
        let mut rng = rng_from_seed(5);
        let key = generate_key(64, &big(65537), &mut rng);
        let (_, trace) = binary_gcd_reference(&key.e, &key.phi).unwrap();
        let last_taken = trace.iterations.iter().rposition(|s| s.direction == Direction::Taken).unwrap();
        let mut seen = trace.clone();
        seen.iterations[last_taken].direction = Direction::Unclassified;
        seen.iterations[0].direction = Direction::Unclassified;
        let out = greedy_key_search(&seen, &key.e, &key.n);
        assert_eq!(out.key.unwrap(), key);
        assert_eq!(out.flips, 1);
    }

    #[test]
    fn reliable_pipeline_recovers_everything() {
        let config = RsaAttackConfig { keys: 8, prime_bits: 128, model: UnclassificationModel::Reliable, ..Default::default() };
        let report = rsa_attack_end_to_end(&config, 9).unwrap();
        assert_eq!(report.success_fraction, 1.0);
        assert_eq!(report.invalid_keys, 0);
        assert_eq!(report.mean_unclassified, 0.0);
    }

    #[test]
    fn iteration_count_near_half_bit_length() {
        let config = RsaAttackConfig { keys: 20, prime_bits: 128, model: UnclassificationModel::Reliable, ..Default::default() };
        let report = rsa_attack_end_to_end(&config, 10).unwrap();
        let half = 256.0 / 2.0;
        assert!((report.mean_iterations - half).abs() <= 0.15 * half, "{}", report.mean_iterations);
    }

    #[test]
    fn simulated_model_runs() {
        let config = RsaAttackConfig {
            keys: 4,
            prime_bits: 64,
            model: UnclassificationModel::Simulated {
                params: TimingParams::default(),
                x_offset: 6,
                y_offset: 2,
                repetitions: 16,
                reference_runs: 2000,
            },
            ..Default::default()
        };
        let report = rsa_attack_end_to_end(&config, 11).unwrap();
        assert_eq!(report.invalid_keys, 0);
        assert!(report.mean_unclassified < 0.5 * report.mean_iterations);
    }
}
