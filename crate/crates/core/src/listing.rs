//! Instruction listings with explicit virtual addresses.
//!
//! A listing is line oriented:
//!
//! ```text
//! # comment
//! .alignmod 16 3
//! mov (var1), %eax; len=5
//! cmp (secret), $0x61; len=2
//! jnz .else; len=2 cbr
//! .else:
//! mov %eax, (var1); len=5 write
//! ```
//!
//! Lengths are declared, not decoded. `.alignmod M X` advances the cursor to
//! the smallest address `a >= cursor` with `a % M == X`; `.space N` advances it
//! by `N` bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest legal x86 instruction.
pub const MAX_INSTRUCTION_LEN: u8 = 15;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ListingError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}, column {column}: instruction length {length} outside [1, 15]")]
    BadLength {
        line: usize,
        column: usize,
        length: u64,
    },
    #[error("line {line}: address overflow")]
    AddressOverflow { line: usize },
    #[error("line {line}: label `{label}` defined twice")]
    DuplicateLabel { line: usize, label: String },
    #[error("label `{0}` does not precede any instruction")]
    DanglingLabel(String),
    #[error("invalid alignment directive: offset {target_offset} not below modulus {modulus}")]
    BadAlignment { modulus: u64, target_offset: u64 },
    #[error("invalid program: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub address: u64,
    pub length: u8,
    pub mnemonic: String,
    #[serde(default)]
    pub operands: String,
    #[serde(default)]
    pub writes_memory: bool,
    #[serde(default)]
    pub is_cond_branch: bool,
    #[serde(default)]
    pub fuses_with_next: bool,
    /// Padding inserted by the alignment defense. Never executed.
    #[serde(default)]
    pub is_filler: bool,
}

impl Instruction {
    pub fn new(address: u64, length: u8, mnemonic: &str, operands: &str) -> Self {
        Self {
            address,
            length,
            mnemonic: mnemonic.to_string(),
            operands: operands.to_string(),
            writes_memory: false,
            is_cond_branch: false,
            fuses_with_next: false,
            is_filler: false,
        }
    }

    /// One past the last byte.
    pub fn end(&self) -> u64 {
        self.address + u64::from(self.length)
    }

    pub fn last_byte(&self) -> u64 {
        self.end() - 1
    }

    pub fn is_compare(&self) -> bool {
        self.mnemonic.starts_with("cmp")
    }

    pub fn is_return(&self) -> bool {
        self.mnemonic == "ret"
    }

    pub fn is_jump(&self) -> bool {
        self.mnemonic == "jmp"
    }

    /// Ends a straight-line path: nothing after it in address order runs next.
    pub fn is_terminator(&self) -> bool {
        self.is_return() || self.is_jump()
    }

    /// Label named by a branch or jump, i.e. the first operand token.
    pub fn target_label(&self) -> Option<&str> {
        if !(self.is_cond_branch || self.is_jump()) {
            return None;
        }
        self.operands.split(|c: char| c == ',' || c.is_whitespace()).find(|t| !t.is_empty())
    }
}

/// Half-open address interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddrRange {
    pub start: u64,
    pub end: u64,
}

impl AddrRange {
    pub fn contains(&self, addr: u64) -> bool {
        self.start <= addr && addr < self.end
    }

    pub fn overlaps(&self, other: &AddrRange) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// A secret-dependent conditional branch and its two paths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchPair {
    /// Address of the conditional branch instruction.
    pub branch: u64,
    pub taken: AddrRange,
    pub fallthrough: AddrRange,
    /// Secret bit value that makes the branch jump.
    pub taken_when: bool,
}

impl BranchPair {
    pub fn path_for(&self, bit: bool) -> AddrRange {
        if bit == self.taken_when {
            self.taken
        } else {
            self.fallthrough
        }
    }

    pub fn skipped_for(&self, bit: bool) -> AddrRange {
        self.path_for(!bit)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub instructions: Vec<Instruction>,
    pub labels: BTreeMap<String, u64>,
    #[serde(default)]
    pub branch_pairs: Vec<BranchPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignDirective {
    pub modulus: u64,
    pub target_offset: u64,
}

impl AlignDirective {
    pub fn new(modulus: u64, target_offset: u64) -> Result<Self, ListingError> {
        if modulus == 0 || target_offset >= modulus {
            return Err(ListingError::BadAlignment {
                modulus,
                target_offset,
            });
        }
        Ok(Self {
            modulus,
            target_offset,
        })
    }

    /// Smallest address `>= cursor` congruent to the target offset.
    pub fn apply(&self, cursor: u64) -> Option<u64> {
        let rem = cursor % self.modulus;
        let step = (self.target_offset + self.modulus - rem) % self.modulus;
        cursor.checked_add(step)
    }
}

impl Default for AlignDirective {
    fn default() -> Self {
        Self {
            modulus: 16,
            target_offset: 0,
        }
    }
}

impl Program {
    pub fn index_of(&self, addr: u64) -> Option<usize> {
        self.instructions.binary_search_by_key(&addr, |i| i.address).ok()
    }

    pub fn get(&self, addr: u64) -> Option<&Instruction> {
        self.index_of(addr).map(|i| &self.instructions[i])
    }

    /// Bytes spanned from the first instruction to the end of the last one.
    pub fn size(&self) -> u64 {
        match (self.instructions.first(), self.instructions.last()) {
            (Some(first), Some(last)) => last.end() - first.address,
            _ => 0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ListingError> {
        let program: Program =
            serde_json::from_str(text).map_err(|e| ListingError::Invalid(e.to_string()))?;
        program.validate()?;
        Ok(program)
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), ListingError> {
        for w in self.instructions.windows(2) {
            if w[1].address < w[0].end() {
                return Err(ListingError::Invalid(format!(
                    "instruction at {:#x} overlaps the one at {:#x}",
                    w[1].address, w[0].address
                )));
            }
        }
        for insn in &self.instructions {
            if insn.length == 0 || insn.length > MAX_INSTRUCTION_LEN {
                return Err(ListingError::Invalid(format!(
                    "instruction at {:#x} has length {}",
                    insn.address, insn.length
                )));
            }
        }
        for (name, addr) in &self.labels {
            if self.index_of(*addr).is_none() {
                return Err(ListingError::DanglingLabel(name.clone()));
            }
        }
        for (i, pair) in self.branch_pairs.iter().enumerate() {
            if pair.taken.overlaps(&pair.fallthrough) {
                return Err(ListingError::Invalid(format!("branch pair {i} has overlapping paths")));
            }
        }
        Ok(())
    }

    /// Recomputes fusion flags: a compare immediately followed by a
    /// conditional branch.
    pub fn mark_fusion(&mut self) {
        let n = self.instructions.len();
        for i in 0..n {
            let fuse = i + 1 < n
                && self.instructions[i].is_compare()
                && self.instructions[i + 1].is_cond_branch
                && self.instructions[i + 1].address == self.instructions[i].end();
            self.instructions[i].fuses_with_next = fuse;
        }
    }

    /// Derives branch pairs from forward conditional branches: the
    /// fall-through path runs from the next instruction, the taken path from
    /// the target label, each up to and including its first `ret`/`jmp`.
    pub fn infer_branch_pairs(&mut self) {
        let mut pairs = Vec::new();
        for (i, insn) in self.instructions.iter().enumerate() {
            if !insn.is_cond_branch {
                continue;
            }
            let Some(target) = insn.target_label().and_then(|l| self.labels.get(l)).copied()
            else {
                continue;
            };
            let Some(next) = self.instructions.get(i + 1) else {
                continue;
            };
            if target <= next.address {
                continue;
            }
            let ft_end = self.path_end(next.address).min(target);
            let taken_end = self.path_end(target);
            pairs.push(BranchPair {
                branch: insn.address,
                taken: AddrRange {
                    start: target,
                    end: taken_end,
                },
                fallthrough: AddrRange {
                    start: next.address,
                    end: ft_end,
                },
                taken_when: false,
            });
        }
        self.branch_pairs = pairs;
    }

    fn path_end(&self, start: u64) -> u64 {
        let from = self.index_of(start).unwrap_or(0);
        self.instructions[from..]
            .iter()
            .find(|i| i.is_terminator())
            .or(self.instructions.last())
            .map_or(start, |i| i.end())
    }

    /// Instructions executed for the given secret bits, in order, excluding
    /// filler and excluding a terminating `ret`.
    pub fn execution_path(&self, secret: &[bool]) -> Result<Vec<&Instruction>, ListingError> {
        if secret.len() != self.branch_pairs.len() {
            return Err(ListingError::Invalid(format!(
                "program has {} secret branches, got {} bits",
                self.branch_pairs.len(),
                secret.len()
            )));
        }
        let skipped: Vec<AddrRange> = self
            .branch_pairs
            .iter()
            .zip(secret)
            .map(|(p, &b)| p.skipped_for(b))
            .collect();
        let mut path = Vec::new();
        for insn in &self.instructions {
            if insn.is_filler || skipped.iter().any(|r| r.contains(insn.address)) {
                continue;
            }
            if insn.is_return() {
                break;
            }
            path.push(insn);
        }
        Ok(path)
    }

    /// Renders the program back into listing text. Addresses and lengths are
    /// reproduced exactly via `.space`.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        let mut by_addr: BTreeMap<u64, Vec<&str>> = BTreeMap::new();
        for (name, addr) in &self.labels {
            by_addr.entry(*addr).or_default().push(name);
        }
        let mut cursor = 0u64;
        for insn in &self.instructions {
            if insn.address > cursor {
                let _ = writeln!(out, ".space {}", insn.address - cursor);
            }
            if let Some(names) = by_addr.get(&insn.address) {
                for name in names {
                    let _ = writeln!(out, "{name}:");
                }
            }
            let _ = write!(out, "{}", insn.mnemonic);
            if !insn.operands.is_empty() {
                let _ = write!(out, " {}", insn.operands);
            }
            let _ = write!(out, "; len={}", insn.length);
            if insn.writes_memory {
                out.push_str(" write");
            }
            if insn.is_cond_branch {
                out.push_str(" cbr");
            }
            if insn.is_filler {
                out.push_str(" fill");
            }
            out.push('\n');
            cursor = insn.end();
        }
        out
    }
}

fn parse_number(tok: &str) -> Option<u64> {
    if let Some(hex) = tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()
    } else {
        tok.parse().ok()
    }
}

fn is_label_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$')
}

/// Parses listing text into a [`Program`] with computed addresses, fusion
/// flags and inferred branch pairs.
pub fn parse_listing(text: &str) -> Result<Program, ListingError> {
    let mut program = Program::default();
    let mut cursor = 0u64;
    let mut pending: Vec<(usize, String)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("");
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let indent = line.len() - line.trim_start().len();
        let col = |offset: usize| indent + offset + 1;

        if let Some(name) = trimmed.strip_suffix(':') {
            if !is_label_name(name) {
                return Err(ListingError::Syntax {
                    line: line_no,
                    column: col(0),
                    message: format!("invalid label `{name}`"),
                });
            }
            if program.labels.contains_key(name) || pending.iter().any(|(_, n)| n == name) {
                return Err(ListingError::DuplicateLabel {
                    line: line_no,
                    label: name.to_string(),
                });
            }
            pending.push((line_no, name.to_string()));
            continue;
        }

        if trimmed.starts_with('.') {
            let mut parts = trimmed.split_whitespace();
            let directive = parts.next().unwrap_or_default();
            let args: Vec<&str> = parts.collect();
            let number = |i: usize| -> Result<u64, ListingError> {
                let tok = args.get(i).ok_or_else(|| ListingError::Syntax {
                    line: line_no,
                    column: col(trimmed.len()),
                    message: format!("`{directive}` expects more arguments"),
                })?;
                parse_number(tok).ok_or_else(|| ListingError::Syntax {
                    line: line_no,
                    column: col(trimmed.find(tok).unwrap_or(0)),
                    message: format!("expected a number, found `{tok}`"),
                })
            };
            match directive {
                ".alignmod" => {
                    if args.len() != 2 {
                        return Err(ListingError::Syntax {
                            line: line_no,
                            column: col(0),
                            message: "`.alignmod` takes a modulus and an offset".into(),
                        });
                    }
                    let dir = AlignDirective::new(number(0)?, number(1)?)?;
                    cursor = dir
                        .apply(cursor)
                        .ok_or(ListingError::AddressOverflow { line: line_no })?;
                }
                ".space" => {
                    if args.len() != 1 {
                        return Err(ListingError::Syntax {
                            line: line_no,
                            column: col(0),
                            message: "`.space` takes a byte count".into(),
                        });
                    }
                    cursor = cursor
                        .checked_add(number(0)?)
                        .ok_or(ListingError::AddressOverflow { line: line_no })?;
                }
                other => {
                    return Err(ListingError::Syntax {
                        line: line_no,
                        column: col(0),
                        message: format!("unknown directive `{other}`"),
                    })
                }
            }
            continue;
        }

        let Some(semi) = trimmed.find(';') else {
            return Err(ListingError::Syntax {
                line: line_no,
                column: col(trimmed.len()),
                message: "expected `; len=<n>` after instruction".into(),
            });
        };
        let (body, attrs) = (trimmed[..semi].trim(), &trimmed[semi + 1..]);
        let (mnemonic, operands) = match body.split_once(char::is_whitespace) {
            Some((m, ops)) => (m, ops.trim()),
            None => (body, ""),
        };
        if mnemonic.is_empty() {
            return Err(ListingError::Syntax {
                line: line_no,
                column: col(0),
                message: "missing mnemonic".into(),
            });
        }

        let mut insn = Instruction::new(cursor, 1, mnemonic, operands);
        let mut length = None;
        let mut search_from = semi + 1;
        for tok in attrs.split_whitespace() {
            let at = trimmed[search_from..].find(tok).map_or(search_from, |p| p + search_from);
            search_from = at + tok.len();
            if let Some(v) = tok.strip_prefix("len=") {
                let n = parse_number(v).ok_or_else(|| ListingError::Syntax {
                    line: line_no,
                    column: col(at + 4),
                    message: format!("invalid length `{v}`"),
                })?;
                if n == 0 || n > u64::from(MAX_INSTRUCTION_LEN) {
                    return Err(ListingError::BadLength {
                        line: line_no,
                        column: col(at + 4),
                        length: n,
                    });
                }
                length = Some(n as u8);
            } else {
                match tok {
                    "write" => insn.writes_memory = true,
                    "cbr" => insn.is_cond_branch = true,
                    "fill" => insn.is_filler = true,
                    other => {
                        return Err(ListingError::Syntax {
                            line: line_no,
                            column: col(at),
                            message: format!("unknown attribute `{other}`"),
                        })
                    }
                }
            }
        }
        insn.length = length.ok_or_else(|| ListingError::Syntax {
            line: line_no,
            column: col(semi + 1),
            message: "missing `len=<n>`".into(),
        })?;
        cursor = cursor
            .checked_add(u64::from(insn.length))
            .ok_or(ListingError::AddressOverflow { line: line_no })?;
        for (_, name) in pending.drain(..) {
            program.labels.insert(name, insn.address);
        }
        program.instructions.push(insn);
    }

    if let Some((_, name)) = pending.into_iter().next() {
        return Err(ListingError::DanglingLabel(name));
    }
    program.mark_fusion();
    program.infer_branch_pairs();
    Ok(program)
}

/// One instruction of a repeated branch body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsnSpec {
    pub mnemonic: String,
    pub operands: String,
    pub length: u8,
    pub writes_memory: bool,
}

impl InsnSpec {
    pub fn new(mnemonic: &str, operands: &str, length: u8, writes_memory: bool) -> Self {
        Self {
            mnemonic: mnemonic.into(),
            operands: operands.into(),
            length,
            writes_memory,
        }
    }

    fn line(&self) -> String {
        let mut s = format!("{} {}; len={}", self.mnemonic, self.operands, self.length);
        if self.writes_memory {
            s.push_str(" write");
        }
        s
    }
}

/// The repeated pair inside each path of the alignment template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodySpec {
    pub first: InsnSpec,
    pub second: InsnSpec,
}

impl Default for BodySpec {
    /// `add` (3 bytes) then a 5-byte store.
    fn default() -> Self {
        Self {
            first: InsnSpec::new("add", "$1, %eax", 3, false),
            second: InsnSpec::new("mov", "%eax, (%rdi)", 5, true),
        }
    }
}

/// Two instruction-wise identical paths behind `cmp; jnz`. The `if` path
/// starts at offset `x` and the `else` path at offset `y`; offsets in
/// `[16, 32)` shift the path one extra window relative to `x - 16`.
pub fn template_branch_program(
    x: u64,
    y: u64,
    reps: usize,
    body: &BodySpec,
) -> Result<Program, ListingError> {
    if x > 31 || y > 31 {
        return Err(ListingError::Invalid(format!("offsets ({x}, {y}) outside [0, 31]")));
    }
    if reps == 0 {
        return Err(ListingError::Invalid("reps must be at least 1".into()));
    }
    parse_listing(&template_listing(x, y, reps, body))
}

pub fn template_listing(x: u64, y: u64, reps: usize, body: &BodySpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# two balanced paths, if at offset {x}, else at offset {y}");
    if x >= 16 {
        s.push_str(".space 16\n");
    }
    let _ = writeln!(s, ".alignmod 16 {}", (x + 12) % 16);
    s.push_str("cmp $1, (%rsi); len=2\n");
    s.push_str("jnz .else; len=2 cbr\n");
    s.push_str(".if:\n");
    for _ in 0..reps {
        let _ = writeln!(s, "{}", body.first.line());
        let _ = writeln!(s, "{}", body.second.line());
    }
    s.push_str("ret; len=1\n");
    let _ = writeln!(s, ".alignmod 16 {}", y % 16);
    if y >= 16 {
        s.push_str(".space 16\n");
    }
    s.push_str(".else:\n");
    for _ in 0..reps {
        let _ = writeln!(s, "{}", body.first.line());
        let _ = writeln!(s, "{}", body.second.line());
    }
    s.push_str("ret; len=1\n");
    s
}

/// The small balanced-branch victim: two loads, `cmp; jnz`, and two
/// identical `add`/store paths at 0x10 and 0x2b.
pub const SECRET_BRANCH_LISTING: &str = "\
.alignmod 16 3
mov (var1), %eax; len=5
mov (var2), %ebx; len=4
cmp (secret), $0x61; len=2
jnz .else; len=2 cbr
.if:
add $1, %eax; len=4
mov %eax, (var1); len=5 write
add $1, %ebx; len=4
mov %ebx, (var2); len=5 write
ret; len=1
.alignmod 16 11
.else:
add $2, %eax; len=4
mov %eax, (var1); len=5 write
add $2, %ebx; len=4
mov %ebx, (var2); len=5 write
ret; len=1
";

pub fn secret_branch_program() -> Program {
    parse_listing(SECRET_BRANCH_LISTING).expect("built-in listing parses")
}

/// The small victim with `extra` additional 2-byte stores emitted directly
/// after the first store of each path. Path offsets match the base victim.
pub fn secret_branch_dense_program(extra: usize) -> Program {
    let mut s = String::from(
        ".alignmod 16 3\n\
         mov (var1), %eax; len=5\n\
         mov (var2), %ebx; len=4\n\
         cmp (secret), $0x61; len=2\n\
         jnz .else; len=2 cbr\n\
         .if:\n",
    );
    let path = |s: &mut String, k: u8| {
        let _ = writeln!(s, "add ${k}, %eax; len=4");
        s.push_str("mov %eax, (var1); len=5 write\n");
        for _ in 0..extra {
            s.push_str("mov %eax, (%rdx); len=2 write\n");
        }
        let _ = writeln!(s, "add ${k}, %ebx; len=4");
        s.push_str("mov %ebx, (var2); len=5 write\n");
        s.push_str("ret; len=1\n");
    };
    path(&mut s, 1);
    s.push_str(".alignmod 16 11\n.else:\n");
    path(&mut s, 2);
    parse_listing(&s).expect("built-in listing parses")
}
