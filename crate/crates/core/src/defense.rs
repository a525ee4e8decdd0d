//! Branch-alignment countermeasure: pad the start of both paths of every
//! secret-dependent branch to the same offset modulo 16, then check through
//! the full simulate-and-classify loop that the attacker is left guessing.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::frontend::FETCH_WINDOW;
use crate::listing::{AddrRange, BranchPair, Instruction, Program};
use crate::stats::{median, welch_t, ALPHA};
use crate::timing::{derive_seed, path_profile, rng_from_seed, sample_units, Session, TimingError, TimingParams, UnitProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionPoint {
    /// Address of the padded path start in the original program.
    pub address: u64,
    pub pad_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPatch {
    pub insertion_points: Vec<InsertionPoint>,
    pub target_offset: u64,
    pub original_size: u64,
    pub padded_size: u64,
}

impl AlignmentPatch {
    pub fn is_empty(&self) -> bool {
        self.insertion_points.is_empty()
    }

    pub fn overhead_percent(&self) -> f64 {
        if self.original_size == 0 {
            0.0
        } else {
            100.0 * (self.padded_size - self.original_size) as f64 / self.original_size as f64
        }
    }

    pub fn report_json(&self) -> serde_json::Value {
        serde_json::json!({
            "target_offset": self.target_offset,
            "insertion_points": self.insertion_points,
            "original_size": self.original_size,
            "padded_size": self.padded_size,
            "overhead_percent": self.overhead_percent(),
        })
    }
}

/// Inserts one filler instruction of the exact needed length before each
/// path start that is off the target offset. Fillers are modelled as jumped
/// over, so they never appear on an execution path.
pub fn align_branch_targets(program: &Program, target_offset: u64) -> (Program, AlignmentPatch) {
    let target_offset = target_offset % FETCH_WINDOW;
    let starts: BTreeSet<u64> = program
        .branch_pairs
        .iter()
        .flat_map(|p| [p.taken.start, p.fallthrough.start])
        .collect();
    let mut shift = 0u64;
    let mut moved: BTreeMap<u64, u64> = BTreeMap::new();
    let mut instructions = Vec::with_capacity(program.instructions.len() + starts.len());
    let mut insertion_points = Vec::new();
    for insn in &program.instructions {
        let mut addr = insn.address + shift;
        if starts.contains(&insn.address) {
            let pad = (target_offset + FETCH_WINDOW - addr % FETCH_WINDOW) % FETCH_WINDOW;
            if pad > 0 {
                let mut filler = Instruction::new(addr, pad as u8, "nop", "");
                filler.is_filler = true;
                instructions.push(filler);
                insertion_points.push(InsertionPoint { address: insn.address, pad_bytes: pad });
                shift += pad;
                addr += pad;
            }
        }
        moved.insert(insn.address, addr);
        let mut copy = insn.clone();
        copy.address = addr;
        instructions.push(copy);
    }
    if insertion_points.is_empty() {
        return (
            program.clone(),
            AlignmentPatch {
                insertion_points,
                target_offset,
                original_size: program.size(),
                padded_size: program.size(),
            },
        );
    }
    let ends: BTreeMap<u64, u64> = program
        .instructions
        .iter()
        .map(|i| (i.end(), moved[&i.address] + u64::from(i.length)))
        .collect();
    let map_end = |old: u64| ends.get(&old).or_else(|| moved.get(&old)).copied().unwrap_or(old + shift);
    let map_range = |r: &AddrRange| AddrRange { start: moved[&r.start], end: map_end(r.end) };
    let patched = Program {
        instructions,
        labels: program.labels.iter().map(|(k, v)| (k.clone(), moved[v])).collect(),
        branch_pairs: program
            .branch_pairs
            .iter()
            .map(|p| BranchPair {
                branch: moved[&p.branch],
                taken: map_range(&p.taken),
                fallthrough: map_range(&p.fallthrough),
                taken_when: p.taken_when,
            })
            .collect(),
    };
    let patch = AlignmentPatch {
        insertion_points,
        target_offset,
        original_size: program.size(),
        padded_size: patched.size(),
    };
    (patched, patch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub runs: usize,
    pub success_rate: f64,
    /// Steps the profiling phase found to differ between the two secrets.
    pub informative_steps: Vec<usize>,
}

/// Per-step linear classifier learnt from labelled profiling runs. Only
/// steps whose latencies differ between secrets at the 0.001 level vote.
#[derive(Debug, Clone, PartialEq)]
struct StepClassifier {
    /// (step, centre, scale, sign)
    weights: Vec<(usize, f64, f64, f64)>,
}

fn normalize(latencies: &[f64], writes: &[bool]) -> Vec<f64> {
    let reference: Vec<f64> = latencies.iter().zip(writes).filter(|(_, &w)| !w).map(|(l, _)| *l).collect();
    let base = if reference.is_empty() { median(latencies) } else { median(&reference) };
    latencies.iter().map(|l| l - base).collect()
}

impl StepClassifier {
    fn train(ones: &[Vec<f64>], zeros: &[Vec<f64>]) -> Self {
        let steps = ones.iter().chain(zeros).map(Vec::len).min().unwrap_or(0);
        let mut weights = Vec::new();
        for k in 0..steps {
            let a: Vec<f64> = ones.iter().map(|r| r[k]).collect();
            let b: Vec<f64> = zeros.iter().map(|r| r[k]).collect();
            let Ok(w) = welch_t(&a, &b) else { continue };
            if w.p_value >= ALPHA {
                continue;
            }
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0);
            let scale = (0.5 * (var(&a, ma) + var(&b, mb))).sqrt().max(1e-9);
            weights.push((k, 0.5 * (ma + mb), scale, (ma - mb).signum()));
        }
        Self { weights }
    }

    fn predict(&self, run: &[f64]) -> bool {
        if self.weights.is_empty() {
            return true;
        }
        let score: f64 = self.weights.iter().filter(|w| w.0 < run.len()).map(|&(k, c, s, sign)| sign * (run[k] - c) / s).sum();
        score > 0.0
    }
}

struct Loop {
    params: TimingParams,
    profiles: [Vec<UnitProfile>; 2],
    writes: [Vec<bool>; 2],
}

impl Loop {
    fn new(program: &Program, params: &TimingParams) -> Result<Self, TimingError> {
        params.validate()?;
        let profiles = [path_profile(program, &[false], params)?, path_profile(program, &[true], params)?];
        let writes = [
            profiles[0].iter().map(|u| u.writes_memory).collect(),
            profiles[1].iter().map(|u| u.writes_memory).collect(),
        ];
        Ok(Self { params: params.clone(), profiles, writes })
    }

    fn run<R: Rng>(&self, bit: bool, session: &Session, rng: &mut R) -> Vec<f64> {
        let i = usize::from(bit);
        let lat: Vec<f64> = sample_units(&self.params, session, &self.profiles[i], rng).iter().map(|s| s.latency).collect();
        normalize(&lat, &self.writes[i])
    }

    /// Balanced labelled runs, each in a fresh session.
    fn profile(&self, runs: usize, seed: u64) -> StepClassifier {
        let mut ones = Vec::with_capacity(runs / 2 + 1);
        let mut zeros = Vec::with_capacity(runs / 2 + 1);
        for j in 0..runs.max(4) {
            let mut rng = rng_from_seed(derive_seed(seed, j as u64));
            let session = Session::draw(&self.params, &mut rng);
            let bit = j % 2 == 0;
            let r = self.run(bit, &session, &mut rng);
            if bit { ones.push(r) } else { zeros.push(r) }
        }
        StepClassifier::train(&ones, &zeros)
    }
}

/// Attacker success on a single-branch program: profile on labelled runs,
/// then classify `runs` fresh executions with random secrets.
pub fn verify_defense(program: &Program, params: &TimingParams, runs: usize, seed: u64) -> Result<DefenseReport, TimingError> {
    let lp = Loop::new(program, params)?;
    let clf = lp.profile(runs, derive_seed(seed, 1));
    let mut hits = 0;
    for j in 0..runs {
        let mut rng = rng_from_seed(derive_seed(derive_seed(seed, 2), j as u64));
        let session = Session::draw(params, &mut rng);
        let bit: bool = rng.random();
        if clf.predict(&lp.run(bit, &session, &mut rng)) == bit {
            hits += 1;
        }
    }
    Ok(DefenseReport {
        runs,
        success_rate: hits as f64 / runs.max(1) as f64,
        informative_steps: clf.weights.iter().map(|w| w.0).collect(),
    })
}

/// Success rate per attack session when every session shares one
/// microcode state, as seen across repeated attack campaigns.
pub fn session_success_rates(
    program: &Program,
    params: &TimingParams,
    sessions: usize,
    runs_per_session: usize,
    seed: u64,
) -> Result<Vec<f64>, TimingError> {
    let lp = Loop::new(program, params)?;
    // Profiling happens on a machine where the effect is visible.
    let reference = Loop::new(program, &TimingParams { degraded: false, ..params.clone() })?;
    let clf = reference.profile(runs_per_session.max(200), derive_seed(seed, 1));
    let mut out = Vec::with_capacity(sessions);
    for s in 0..sessions {
        let mut rng = rng_from_seed(derive_seed(derive_seed(seed, 3), s as u64));
        let base = Session::draw(params, &mut rng);
        let mut hits = 0;
        for _ in 0..runs_per_session {
            let session = Session { run_shift: Session::draw(params, &mut rng).run_shift, degraded: base.degraded };
            let bit: bool = rng.random();
            if clf.predict(&lp.run(bit, &session, &mut rng)) == bit {
                hits += 1;
            }
        }
        out.push(hits as f64 / runs_per_session.max(1) as f64);
    }
    Ok(out)
}

/// Random straight-line code with `branch_density` of its instructions being
/// balanced conditional branches, each guarding two jump-terminated blocks.
pub fn synthetic_corpus(instructions: usize, branch_density: f64, seed: u64) -> Program {
    use std::fmt::Write as _;
    let mut rng = rng_from_seed(seed);
    let mut text = String::new();
    let mut emitted = 0usize;
    let mut label = 0usize;
    let filler = |rng: &mut rand_chacha::ChaCha8Rng, text: &mut String, n: usize| {
        for _ in 0..n {
            let len: u8 = rng.random_range(1..=8);
            let write = rng.random::<f64>() < 0.2;
            let _ = writeln!(text, "mov %eax, %ebx; len={len}{}", if write { " write" } else { "" });
        }
    };
    let block = ((1.0 / branch_density.max(1e-6)) as usize).max(4);
    while emitted < instructions {
        let pre = block.saturating_sub(6).max(1);
        filler(&mut rng, &mut text, pre);
        let body = 2;
        let _ = writeln!(text, "cmp %eax, %ecx; len=3\njne t{label}; len=2 cbr");
        filler(&mut rng, &mut text, body);
        let _ = writeln!(text, "jmp j{label}; len=2\nt{label}:");
        filler(&mut rng, &mut text, body - 1);
        let _ = writeln!(text, "jmp j{label}; len=2\nj{label}:");
        emitted += pre + 2 * body + 2;
        label += 1;
    }
    text.push_str("ret; len=1\n");
    crate::listing::parse_listing(&text).expect("generated corpus parses")
}
