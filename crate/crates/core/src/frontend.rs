//! Fetch-window batching after an interrupt-resume.
//!
//! The frontend fetches from 16-byte aligned windows. After a resume at some
//! instruction, the batch handed to the decoder is that instruction plus every
//! following instruction that lies fully inside the window holding the
//! resumed instruction's last byte. An instruction that crosses a window
//! boundary belongs to the following window.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::listing::{Instruction, Program};

pub const FETCH_WINDOW: u64 = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrontendError {
    #[error("{0:#x} is not the start of an instruction")]
    NotAnInstruction(u64),
    #[error("path diverges from control flow at step {step}: {from:#x} -> {to:#x}")]
    PathDiverges { step: usize, from: u64, to: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchBatch {
    pub interrupt_index: usize,
    pub resumed_at: u64,
    pub fetched: Vec<u64>,
    pub window_start: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentFeature {
    pub address_mod_16: u8,
    pub end_mod_16: u8,
    pub crosses_window: bool,
    pub trailing_writes_in_window: u32,
}

pub fn window_of(addr: u64) -> u64 {
    addr - addr % FETCH_WINDOW
}

/// Collapses every compare + conditional-branch pair into a single steppable
/// unit spanning both instructions.
pub fn fuse(program: &Program) -> Program {
    let mut out = Program {
        instructions: Vec::with_capacity(program.instructions.len()),
        labels: program.labels.clone(),
        branch_pairs: program.branch_pairs.clone(),
    };
    let mut iter = program.instructions.iter().peekable();
    while let Some(insn) = iter.next() {
        if insn.fuses_with_next {
            if let Some(next) = iter.next_if(|n| n.is_cond_branch && n.address == insn.end()) {
                let mut unit = next.clone();
                unit.address = insn.address;
                unit.length = insn.length + next.length;
                unit.mnemonic = format!("{}+{}", insn.mnemonic, next.mnemonic);
                unit.writes_memory = insn.writes_memory || next.writes_memory;
                unit.fuses_with_next = false;
                for addr in out.labels.values_mut() {
                    if *addr == next.address {
                        *addr = insn.address;
                    }
                }
                for pair in &mut out.branch_pairs {
                    if pair.branch == next.address {
                        pair.branch = insn.address;
                    }
                }
                out.instructions.push(unit);
                continue;
            }
        }
        out.instructions.push(insn.clone());
    }
    out
}

fn is_fused(program: &Program) -> bool {
    program.instructions.iter().all(|i| !i.fuses_with_next)
}

/// Batch fetched when execution resumes at `resume_addr`.
pub fn fetch_batch(program: &Program, resume_addr: u64) -> Result<FetchBatch, FrontendError> {
    let idx = program
        .index_of(resume_addr)
        .ok_or(FrontendError::NotAnInstruction(resume_addr))?;
    Ok(batch_at(&program.instructions, idx, 0))
}

fn batch_at(instructions: &[Instruction], idx: usize, interrupt_index: usize) -> FetchBatch {
    let first = &instructions[idx];
    let window_start = window_of(first.last_byte());
    let window_end = window_start + FETCH_WINDOW;
    let mut fetched = vec![first.address];
    let mut prev = first;
    if !first.is_terminator() {
        for insn in &instructions[idx + 1..] {
            if insn.address != prev.end() || insn.address < window_start || insn.end() > window_end
            {
                break;
            }
            fetched.push(insn.address);
            if insn.is_terminator() {
                break;
            }
            prev = insn;
        }
    }
    FetchBatch {
        interrupt_index,
        resumed_at: first.address,
        fetched,
        window_start,
    }
}

/// One batch per single-step interrupt along an executed path.
pub fn step_batches(program: &Program, path: &[u64]) -> Result<Vec<FetchBatch>, FrontendError> {
    let mut out = Vec::with_capacity(path.len());
    let mut prev: Option<usize> = None;
    for (step, &addr) in path.iter().enumerate() {
        let idx = program
            .index_of(addr)
            .ok_or(FrontendError::NotAnInstruction(addr))?;
        if let Some(p) = prev {
            if !is_successor(program, p, idx) {
                return Err(FrontendError::PathDiverges {
                    step,
                    from: program.instructions[p].address,
                    to: addr,
                });
            }
        }
        out.push(batch_at(&program.instructions, idx, step + 1));
        prev = Some(idx);
    }
    Ok(out)
}

fn is_successor(program: &Program, from: usize, to: usize) -> bool {
    let insn = &program.instructions[from];
    let target = insn
        .target_label()
        .and_then(|l| program.labels.get(l))
        .copied();
    if insn.is_jump() {
        return target == Some(program.instructions[to].address);
    }
    if insn.is_return() {
        return false;
    }
    let next = program.instructions[from + 1..]
        .iter()
        .position(|i| !i.is_filler)
        .map(|p| from + 1 + p);
    // A compare fused with its branch may be stepped over as one unit.
    let after_fused = if insn.fuses_with_next {
        next.and_then(|n| {
            let branch = &program.instructions[n];
            let t = branch.target_label().and_then(|l| program.labels.get(l)).copied();
            let fall = program.instructions[n + 1..]
                .iter()
                .position(|i| !i.is_filler)
                .map(|p| n + 1 + p);
            Some((fall, t))
        })
    } else {
        None
    };
    next == Some(to)
        || (insn.is_cond_branch && target == Some(program.instructions[to].address))
        || after_fused.is_some_and(|(fall, t)| {
            fall == Some(to) || t == Some(program.instructions[to].address)
        })
}

/// Per-instruction alignment features. `trailing_writes_in_window` counts the
/// stores fetched in the same batch after the instruction.
pub fn alignment_features(program: &Program) -> BTreeMap<u64, AlignmentFeature> {
    program
        .instructions
        .iter()
        .enumerate()
        .map(|(idx, insn)| (insn.address, feature_at(program, idx)))
        .collect()
}

pub(crate) fn feature_at(program: &Program, idx: usize) -> AlignmentFeature {
    let insn = &program.instructions[idx];
    let batch = batch_at(&program.instructions, idx, 0);
    let trailing = program.instructions[idx + 1..idx + batch.fetched.len()]
        .iter()
        .filter(|i| i.writes_memory)
        .count() as u32;
    AlignmentFeature {
        address_mod_16: (insn.address % FETCH_WINDOW) as u8,
        end_mod_16: (insn.end() % FETCH_WINDOW) as u8,
        crosses_window: window_of(insn.address) != window_of(insn.last_byte()),
        trailing_writes_in_window: trailing,
    }
}

/// Ensures the program is fused before window math is applied.
pub fn fused(program: &Program) -> std::borrow::Cow<'_, Program> {
    if is_fused(program) {
        std::borrow::Cow::Borrowed(program)
    } else {
        std::borrow::Cow::Owned(fuse(program))
    }
}

pub fn batches_to_csv(batches: &[FetchBatch]) -> String {
    let mut out = String::from("interrupt_index,resumed_at,window_start,fetched\n");
    for b in batches {
        let fetched: Vec<String> = b.fetched.iter().map(|a| format!("{a:#x}")).collect();
        let _ = writeln!(
            out,
            "{},{:#x},{:#x},{}",
            b.interrupt_index,
            b.resumed_at,
            b.window_start,
            fetched.join(";")
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::listing::{parse_listing, secret_branch_program, template_branch_program, BodySpec};

    fn mnemonics(p: &Program, b: &FetchBatch) -> Vec<String> {
        b.fetched.iter().map(|a| p.get(*a).unwrap().mnemonic.clone()).collect()
    }

    #[test]
    fn resume_inside_if_path() {
        let p = secret_branch_program();
        let b = fetch_batch(&p, 0x14).unwrap();
        assert_eq!(b.fetched, vec![0x14, 0x19]);
        assert_eq!(b.window_start, 0x10);
        assert_eq!(mnemonics(&p, &b), ["mov", "add"]);
    }

    #[test]
    fn resume_inside_else_path() {
        let p = secret_branch_program();
        let b = fetch_batch(&p, 0x2f).unwrap();
        assert_eq!(b.fetched, vec![0x2f, 0x34, 0x38, 0x3d]);
        assert_eq!(b.window_start, 0x30);
    }

    #[test]
    fn single_instruction() {
        let p = parse_listing("nop; len=1\n").unwrap();
        assert_eq!(fetch_batch(&p, 0).unwrap().fetched, vec![0]);
        assert_eq!(fetch_batch(&p, 1), Err(FrontendError::NotAnInstruction(1)));
    }

    #[test]
    fn crossing_instruction_uses_next_window() {
        let p = secret_branch_program();
        let b = fetch_batch(&p, 0x1d).unwrap();
        assert_eq!(b.window_start, 0x20);
        assert_eq!(b.fetched, vec![0x1d, 0x22]);
    }

    /// Enumerates every placement of a 4-byte instruction followed by 1-byte
    /// instructions and compares against the rule written out longhand.
    #[test]
    fn boundary_enumeration() {
        for off in 0..16u64 {
            let text = format!(".space {off}\nmov %eax, (%rdi); len=4 write\n{}", "nop; len=1\n".repeat(20));
            let p = parse_listing(&text).unwrap();
            let b = fetch_batch(&p, off).unwrap();
            let last = off + 3;
            let w = (last / 16) * 16;
            let mut expected = vec![off];
            let mut a = off + 4;
            while a >= w && a < w + 16 {
                expected.push(a);
                a += 1;
            }
            assert_eq!(b.fetched, expected, "offset {off}");
            if off == 12 {
                // Ends exactly on byte 15: the window holds nothing else.
                assert_eq!(b.fetched, vec![12]);
            }
        }
    }

    #[test]
    fn step_batches_reject_divergence() {
        let p = secret_branch_program();
        assert!(step_batches(&p, &[0x10, 0x19]).is_err());
        assert!(step_batches(&p, &[0x22, 0x2b]).is_err());
        // The conditional branch may go either way.
        assert!(step_batches(&p, &[0xe, 0x2b]).is_ok());
        assert!(step_batches(&p, &[0xe, 0x10]).is_ok());
        // Fused compare steps straight into either path.
        assert!(step_batches(&p, &[0xc, 0x2b]).is_ok());
        let f = fuse(&p);
        assert!(step_batches(&f, &[0x3, 0x8, 0xc, 0x2b, 0x2f]).is_ok());
    }

    #[test]
    fn fuse_template() {
        let p = template_branch_program(0, 8, 25, &BodySpec::default()).unwrap();
        let f = fuse(&p);
        assert_eq!(f.instructions.len(), p.instructions.len() - 1);
        assert_eq!(f.execution_path(&[true]).unwrap().len(), 51);
        let unit = &f.instructions[0];
        assert_eq!(unit.length, 4);
        assert!(unit.is_cond_branch);
        assert_eq!(f.branch_pairs[0].branch, unit.address);
    }

    #[test]
    fn fuse_without_pairs_is_identity() {
        let p = parse_listing("add $1, %eax; len=3\nmov %eax, (%rdi); len=5 write\nret; len=1\n").unwrap();
        assert_eq!(fuse(&p), p);
    }

    #[test]
    fn fuse_across_window_boundary() {
        // cmp at 0xe..0x11 crosses 0x10; jnz at 0x11..0x13.
        let p = parse_listing(".space 14\ncmp %eax, %ebx; len=3\njnz t; len=2 cbr\nt:\nret; len=1\n").unwrap();
        let f = fuse(&p);
        assert_eq!(f.instructions[0].address, 0xe);
        assert_eq!(f.instructions[0].length, 5);
        assert_eq!(f.instructions[1].address, 0x13);
        let feat = alignment_features(&f)[&0xe];
        assert!(feat.crosses_window);
        assert_eq!(fetch_batch(&f, 0xe).unwrap().window_start, 0x10);
    }

    #[test]
    fn features() {
        let p = secret_branch_program();
        let f = alignment_features(&p);
        assert_eq!(f[&0x14].address_mod_16, 4);
        assert!(!f[&0x14].crosses_window);
        assert!(f[&0x1d].crosses_window);
        assert_eq!(f[&0x14].trailing_writes_in_window, 0);
        assert_eq!(f[&0x2f].trailing_writes_in_window, 1);
    }

    #[test]
    fn template_movs_take_two_offsets() {
        let p = template_branch_program(5, 11, 25, &BodySpec::default()).unwrap();
        let f = alignment_features(&p);
        let pair = &p.branch_pairs[0];
        for range in [pair.fallthrough, pair.taken] {
            let offs: std::collections::BTreeSet<u8> = p
                .instructions
                .iter()
                .filter(|i| range.contains(i.address) && i.writes_memory)
                .map(|i| f[&i.address].address_mod_16)
                .collect();
            assert_eq!(offs.len(), 2);
        }
    }

    #[test]
    fn csv_layout() {
        let p = secret_branch_program();
        let b = step_batches(&p, &[0x10, 0x14]).unwrap();
        assert_eq!(
            batches_to_csv(&b),
            "interrupt_index,resumed_at,window_start,fetched\n1,0x10,0x10,0x10;0x14;0x19\n2,0x14,0x10,0x14;0x19\n"
        );
    }
}
