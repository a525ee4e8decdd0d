//! Binary GCD with a per-iteration trace, and the backward replay that turns
//! a leaked trace back into the unknown operand.

use std::fmt::Write as _;

use num_bigint::BigUint;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use super::{AttackError, Direction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcdStep {
    pub tz_a: u64,
    pub tz_b: u64,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GcdTrace {
    pub initial_common_shift: u64,
    pub iterations: Vec<GcdStep>,
}

impl GcdTrace {
    pub fn unclassified(&self) -> Vec<usize> {
        self.iterations
            .iter()
            .enumerate()
            .filter(|(_, s)| s.direction == Direction::Unclassified)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,tz_a,tz_b,direction\n");
        for (i, s) in self.iterations.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{}", s.tz_a, s.tz_b, s.direction.as_str());
        }
        out
    }
}

fn trailing_zeros(x: &BigUint) -> u64 {
    x.trailing_zeros().unwrap_or(0)
}

/// Binary GCD: strip the common power of two, then repeatedly strip each
/// operand's own trailing zeros and halve the difference into the larger one.
pub fn binary_gcd_reference(a: &BigUint, b: &BigUint) -> Result<(BigUint, GcdTrace), AttackError> {
    if a.is_zero() || b.is_zero() {
        return Err(AttackError::ZeroOperand);
    }
    let lz = trailing_zeros(a).min(trailing_zeros(b));
    let mut ta = a >> lz;
    let mut tb = b >> lz;
    let mut trace = GcdTrace {
        initial_common_shift: lz,
        iterations: Vec::new(),
    };
    while !ta.is_zero() {
        let tz_a = trailing_zeros(&ta);
        let tz_b = trailing_zeros(&tb);
        ta >>= tz_a;
        tb >>= tz_b;
        let direction = if ta >= tb {
            ta = (&ta - &tb) >> 1u32;
            Direction::Taken
        } else {
            tb = (&tb - &ta) >> 1u32;
            Direction::NotTaken
        };
        trace.iterations.push(GcdStep { tz_a, tz_b, direction });
    }
    Ok((tb << lz, trace))
}

/// Replays the trace backwards from the terminal state and returns the
/// operand paired with `known`. The known operand may have been either input.
pub fn reconstruct_phi(trace: &GcdTrace, known: &BigUint, expected_gcd: &BigUint) -> Result<BigUint, AttackError> {
    let (a, b) = reconstruct_operands(trace, expected_gcd)?;
    if &b == known {
        Ok(a)
    } else if &a == known {
        Ok(b)
    } else {
        Err(AttackError::ReconstructionMismatch)
    }
}

/// Both inputs of the traced GCD call.
pub fn reconstruct_operands(trace: &GcdTrace, expected_gcd: &BigUint) -> Result<(BigUint, BigUint), AttackError> {
    let lz = trace.initial_common_shift;
    if expected_gcd.is_zero() || trailing_zeros(expected_gcd) != lz {
        return Err(AttackError::ReconstructionMismatch);
    }
    let mut ta = BigUint::zero();
    let mut tb = expected_gcd >> lz;
    for step in trace.iterations.iter().rev() {
        match step.direction {
            Direction::Taken => ta = (ta << 1u32) + &tb,
            Direction::NotTaken => tb = (tb << 1u32) + &ta,
            Direction::Unclassified => return Err(AttackError::UnclassifiedTrace),
        }
        ta <<= step.tz_a;
        tb <<= step.tz_b;
    }
    Ok((ta << lz, tb << lz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_integer::Integer;

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    #[test]
    fn unit_inputs() {
        let (g, t) = binary_gcd_reference(&big(1), &big(1)).unwrap();
        assert_eq!(g, big(1));
        // TA = TB = 1: one subtraction empties TA.
        assert_eq!(t.iterations.len(), 1);
        assert_eq!(reconstruct_phi(&t, &big(1), &big(1)).unwrap(), big(1));
    }

    #[test]
    fn small_textbook_pair() {
        let (g, t) = binary_gcd_reference(&big(17), &big(3120)).unwrap();
        assert_eq!(g, big(1));
        assert_eq!(g, big(17).gcd(&big(3120)));
        assert_eq!(reconstruct_phi(&t, &big(17), &big(1)).unwrap(), big(3120));
        assert_eq!(t.initial_common_shift, 0);
        assert_eq!(t.iterations[0].tz_b, 4);
    }

    #[test]
    fn zero_rejected() {
        assert_eq!(binary_gcd_reference(&big(0), &big(3)), Err(AttackError::ZeroOperand));
    }

    #[test]
    fn exhaustive_small_domain() {
        for a in 1..300u64 {
            for b in 1..300u64 {
                let (g, t) = binary_gcd_reference(&big(a), &big(b)).unwrap();
                assert_eq!(g, big(a.gcd(&b)));
                assert_eq!(reconstruct_operands(&t, &g).unwrap(), (big(a), big(b)));
            }
        }
    }

    #[test]
    fn flipped_direction_detected() {
        let phi = big(3120);
        let (_, mut t) = binary_gcd_reference(&big(17), &phi).unwrap();
        for i in 0..t.iterations.len() {
            let d = t.iterations[i].direction;
            t.iterations[i].direction = if d == Direction::Taken { Direction::NotTaken } else { Direction::Taken };
            assert!(reconstruct_phi(&t, &big(17), &big(1)).map_or(true, |p| p != phi), "flip at {i}");
            t.iterations[i].direction = d;
        }
        t.iterations[0].direction = Direction::Unclassified;
        assert_eq!(reconstruct_phi(&t, &big(17), &big(1)), Err(AttackError::UnclassifiedTrace));
    }

    #[test]
    fn common_shift_recorded() {
        let (g, t) = binary_gcd_reference(&big(48), &big(40)).unwrap();
        assert_eq!(g, big(8));
        assert_eq!(t.initial_common_shift, 3);
        assert_eq!(reconstruct_operands(&t, &g).unwrap(), (big(48), big(40)));
    }

    #[test]
    fn csv_export() {
        let (_, t) = binary_gcd_reference(&big(17), &big(3120)).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("iteration,tz_a,tz_b,direction\n0,0,4,"));
        assert_eq!(csv.lines().count(), t.iterations.len() + 1);
    }
}
