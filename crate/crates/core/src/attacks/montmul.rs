//! Conditional subtraction in Montgomery multiplication.
//!
//! Each multiplication ends by running a word-wise subtraction loop either on
//! the real result or on a dummy buffer. The two loops are identical code at
//! different alignments, so a register-only subtraction that shares a fetch
//! batch with a store picks up a different slow-mode rate in each copy. The
//! attacker repeats the exponentiation, collects that instruction's latency
//! for every call and Welch-tests it against profiled references.

use num_bigint::BigUint;
use num_traits::One;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AttackError;
use crate::listing::{parse_listing, Program};
use crate::stats::{median, welch_t, ALPHA};
use crate::timing::{derive_seed, path_profile, rng_from_seed, sample_units, Session, TimingParams, UnitProfile};

/// Position of the measured subtraction among the loop's steppable units.
pub const SUB_UNIT: usize = 10;

/// One iteration of the subtraction loop. The measured `sub` sits 35 bytes
/// into the loop and is followed by a store.
pub fn montmul_loop_listing(base_offset: u64) -> String {
    format!(
        ".alignmod 16 {}\n\
         loop:\n\
         mov (%rsi), %rax; len=3\n\
         mul %rcx; len=3\n\
         add %rax, %r8; len=3\n\
         adc $0, %rdx; len=4\n\
         mov %r8, (%rdi); len=4 write\n\
         add $8, %rsi; len=4\n\
         mov %rdx, %r9; len=3\n\
         lea (%r9,%r10), %r11; len=4\n\
         xor %r12, %r12; len=3\n\
         or %r11, %r13; len=4\n\
         sub %rbx, %rax; len=3\n\
         mov %rax, 8(%rdi); len=4 write\n\
         add $16, %rdi; len=4\n\
         dec %ecx; len=2\n\
         cmp $0, %ecx; len=3\n\
         jne loop; len=2 cbr\n\
         ret; len=1\n",
        base_offset % 16
    )
}

pub fn montmul_loop_program(base_offset: u64) -> Result<Program, AttackError> {
    Ok(parse_listing(&montmul_loop_listing(base_offset))?)
}

/// Montgomery arithmetic modulo an odd n with R = 2^(64·limbs).
#[derive(Debug, Clone)]
pub struct Montgomery {
    pub n: BigUint,
    r_bits: u64,
    n_prime: BigUint,
    r2: BigUint,
}

impl Montgomery {
    pub fn new(n: &BigUint) -> Self {
        assert!(n.bit(0), "modulus must be odd");
        let r_bits = n.bits().div_ceil(64) * 64;
        let r = BigUint::one() << r_bits;
        // n' = −n⁻¹ mod R
        let inv = n.modinv(&r).expect("odd modulus is invertible mod 2^k");
        let n_prime = &r - inv;
        let r2 = (&r * &r) % n;
        Self { n: n.clone(), r_bits, n_prime, r2 }
    }

    /// REDC(a·b); also reports whether the final subtraction ran.
    pub fn mul(&self, a: &BigUint, b: &BigUint) -> (BigUint, bool) {
        let mask = (BigUint::one() << self.r_bits) - 1u32;
        let t = a * b;
        let m = ((&t & &mask) * &self.n_prime) & &mask;
        let u = (t + m * &self.n) >> self.r_bits;
        if u >= self.n {
            (u - &self.n, true)
        } else {
            (u, false)
        }
    }

    pub fn to_mont(&self, a: &BigUint) -> BigUint {
        self.mul(&(a % &self.n), &self.r2).0
    }

    pub fn from_mont(&self, a: &BigUint) -> BigUint {
        self.mul(a, &BigUint::one()).0
    }

    /// Left-to-right square-and-multiply. Returns the result and the
    /// subtraction bit of every multiplication, in call order.
    pub fn pow(&self, base: &BigUint, exp: &BigUint) -> (BigUint, Vec<bool>) {
        let mut bits = Vec::new();
        let b = self.to_mont(base);
        let mut acc = self.to_mont(&BigUint::one());
        for i in (0..exp.bits()).rev() {
            let (sq, s) = self.mul(&acc, &acc);
            bits.push(s);
            acc = sq;
            if exp.bit(i) {
                let (pr, s) = self.mul(&acc, &b);
                bits.push(s);
                acc = pr;
            }
        }
        (self.from_mont(&acc), bits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MontmulConfig {
    pub exponentiations: usize,
    pub repetitions: usize,
    /// Loop iterations per subtraction call.
    pub loop_len: usize,
    pub modulus_bits: u64,
    pub exponent_bits: u64,
    pub reference_samples: usize,
    /// Base offsets (mod 16) of the real and the dummy subtraction loop.
    pub real_offset: u64,
    pub dummy_offset: u64,
}

impl Default for MontmulConfig {
    fn default() -> Self {
        Self {
            exponentiations: 4,
            repetitions: 16,
            loop_len: 6,
            modulus_bits: 256,
            exponent_bits: 64,
            reference_samples: 6000,
            real_offset: 2,
            dummy_offset: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallVerdict {
    pub subtracted: bool,
    pub predicted: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MontmulReport {
    pub calls: usize,
    pub repetitions: usize,
    pub decided: usize,
    pub correct: usize,
    /// decided / calls
    pub decided_fraction: f64,
    /// wrong / decided
    pub decision_error: f64,
    pub verdicts: Vec<CallVerdict>,
}

struct Victim {
    params: TimingParams,
    loops: [Vec<UnitProfile>; 2],
    loop_len: usize,
}

impl Victim {
    /// Latency of the measured subtraction for each loop iteration of one
    /// call, relative to the median of the call's non-store units.
    fn call<R: Rng + ?Sized>(&self, subtracted: bool, session: &Session, rng: &mut R, out: &mut Vec<f64>) {
        let units = &self.loops[usize::from(!subtracted)];
        let mut subs = Vec::with_capacity(self.loop_len);
        let mut others = Vec::with_capacity(self.loop_len * units.len());
        for _ in 0..self.loop_len {
            for (k, s) in sample_units(&self.params, session, units, rng).into_iter().enumerate() {
                if k == SUB_UNIT {
                    subs.push(s.latency);
                } else if !units[k].writes_memory {
                    others.push(s.latency);
                }
            }
        }
        let reference = median(&others);
        out.extend(subs.into_iter().map(|l| l - reference));
    }
}

fn random_odd<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    let mut buf = vec![0u8; bits.div_ceil(8) as usize];
    rng.fill_bytes(&mut buf);
    let mut v = BigUint::from_bytes_be(&buf) & ((BigUint::one() << bits) - 1u32);
    v.set_bit(bits - 1, true);
    v.set_bit(0, true);
    v
}

pub fn montmul_pipeline(config: &MontmulConfig, params: &TimingParams, seed: u64) -> Result<MontmulReport, AttackError> {
    if config.repetitions < 2 {
        return Err(AttackError::TooFewRepetitions(config.repetitions));
    }
    params.validate()?;
    let real = montmul_loop_program(config.real_offset)?;
    let dummy = montmul_loop_program(config.dummy_offset)?;
    let victim = Victim {
        params: params.clone(),
        loops: [path_profile(&real, &[], params)?, path_profile(&dummy, &[], params)?],
        loop_len: config.loop_len.max(1),
    };

    // Ground truth: subtraction bits of real Montgomery exponentiations.
    let mut keys = rng_from_seed(derive_seed(seed, 0));
    let mut truth = Vec::new();
    for _ in 0..config.exponentiations {
        let n = random_odd(config.modulus_bits, &mut keys);
        let base = random_odd(config.modulus_bits - 1, &mut keys);
        let exp = random_odd(config.exponent_bits, &mut keys);
        let (_, bits) = Montgomery::new(&n).pow(&base, &exp);
        truth.extend(bits);
    }

    // Profiling on the attacker's own runs.
    let mut prof = rng_from_seed(derive_seed(seed, 1));
    let mut references = [Vec::new(), Vec::new()];
    for (i, r) in references.iter_mut().enumerate() {
        while r.len() < config.reference_samples {
            let session = Session::draw(params, &mut prof);
            victim.call(i == 0, &session, &mut prof, r);
        }
    }

    let sessions: Vec<Session> = {
        let mut rng = rng_from_seed(derive_seed(seed, 2));
        (0..config.repetitions).map(|_| Session::draw(params, &mut rng)).collect()
    };
    let verdicts: Vec<CallVerdict> = truth
        .par_iter()
        .enumerate()
        .map(|(c, &subtracted)| {
            let mut samples = Vec::with_capacity(config.repetitions * victim.loop_len);
            for (r, session) in sessions.iter().enumerate() {
                let mut rng = rng_from_seed(derive_seed(derive_seed(seed, 3 + r as u64), c as u64));
                victim.call(subtracted, session, &mut rng, &mut samples);
            }
            let p = |refs: &[f64]| welch_t(&samples, refs).map_or(1.0, |w| w.p_value);
            let (p_real, p_dummy) = (p(&references[0]), p(&references[1]));
            let predicted = match (p_real < ALPHA, p_dummy < ALPHA) {
                (true, false) => Some(false),
                (false, true) => Some(true),
                _ => None,
            };
            CallVerdict { subtracted, predicted }
        })
        .collect();
    let decided = verdicts.iter().filter(|v| v.predicted.is_some()).count();
    let correct = verdicts.iter().filter(|v| v.predicted == Some(v.subtracted)).count();
    Ok(MontmulReport {
        calls: verdicts.len(),
        repetitions: config.repetitions,
        decided,
        correct,
        decided_fraction: decided as f64 / verdicts.len().max(1) as f64,
        decision_error: if decided == 0 { 0.0 } else { (decided - correct) as f64 / decided as f64 },
        verdicts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{alignment_features, fuse};

    #[test]
    fn loop_shape() {
        for base in [2, 6] {
            let p = montmul_loop_program(base).unwrap();
            let units = fuse(&p).execution_path(&[]).unwrap().len();
            assert_eq!(units, 15);
            let sub = p.instructions.iter().find(|i| i.mnemonic == "sub").unwrap();
            let start = p.labels["loop"];
            assert_eq!(sub.address - start, 35);
            let f = alignment_features(&p)[&sub.address];
            assert_eq!(f.trailing_writes_in_window, 1);
            assert_eq!(u64::from(f.address_mod_16), (base + 35) % 16);
        }
    }

    #[test]
    fn montgomery_matches_modpow() {
        let mut rng = rng_from_seed(1);
        for _ in 0..20 {
            let n = random_odd(128, &mut rng);
            let b = random_odd(100, &mut rng);
            let e = random_odd(40, &mut rng);
            let (r, bits) = Montgomery::new(&n).pow(&b, &e);
            assert_eq!(r, b.modpow(&e, &n));
            assert!(bits.iter().any(|&s| s) && bits.iter().any(|&s| !s));
        }
    }

    #[test]
    fn sixteen_repetitions() {
        let r = montmul_pipeline(&MontmulConfig::default(), &TimingParams::default(), 1).unwrap();
        assert!(r.decided_fraction >= 0.80, "{}", r.decided_fraction);
        assert!(r.decision_error <= 0.01, "{}", r.decision_error);
    }

    #[test]
    fn many_repetitions() {
        let config = MontmulConfig { exponentiations: 1, exponent_bits: 16, repetitions: 1000, ..MontmulConfig::default() };
        let r = montmul_pipeline(&config, &TimingParams::default(), 2).unwrap();
        assert!(r.decided_fraction >= 0.99, "{}", r.decided_fraction);
    }

    #[test]
    fn identical_alignment_rarely_decides() {
        let config = MontmulConfig { dummy_offset: 2, ..MontmulConfig::default() };
        let r = montmul_pipeline(&config, &TimingParams::default(), 3).unwrap();
        assert!(r.decided_fraction <= 0.05, "{}", r.decided_fraction);
    }

    #[test]
    fn repetitions_validated() {
        let config = MontmulConfig { repetitions: 1, ..MontmulConfig::default() };
        assert_eq!(montmul_pipeline(&config, &TimingParams::default(), 0), Err(AttackError::TooFewRepetitions(1)));
    }
}
