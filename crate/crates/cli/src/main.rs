//! `fetchlab`: command-line front end for the fetch-window side-channel lab.
//!
//! Exit codes: 0 success, 1 pipeline failure, 2 bad input.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use fetchlab::attacks::branch::{branch_attack, default_discriminator, extract_branch_secret};
use fetchlab::attacks::cmpbn::cmp_bn_pipeline;
use fetchlab::attacks::gcd::binary_gcd_reference;
use fetchlab::attacks::montmul::{montmul_loop_program, montmul_pipeline};
use fetchlab::attacks::rsa::{generate_key, rsa_attack_end_to_end};
use fetchlab::defense::{align_branch_targets, verify_defense};
use fetchlab::frontend::{alignment_features, batches_to_csv, fused, step_batches};
use fetchlab::listing::{
    parse_listing, secret_branch_dense_program, secret_branch_program, template_branch_program, BodySpec, Program,
};
use fetchlab::stats::{heatmap_csv, heatmap_matrix, heatmap_sweep};
use fetchlab::timing::{derive_seed, rng_from_seed, runs_to_csv, simulate_runs, LatencySample, Run};
use num_bigint::BigUint;
use serde_json::json;

use config::Config;

#[derive(Parser)]
#[command(name = "fetchlab", version, about = "Fetch-window timing side channels: simulate, attack, defend")]
struct Cli {
    /// JSON configuration file; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of executions (runs per cell for `heatmap`).
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Dotted config override, e.g. `timing.delta=80`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a listing; write the program and its per-instruction alignment features.
    Decode { listing: String },
    /// Fetch batches seen by single-step interrupts along a path.
    Batches {
        listing: String,
        /// Secret bits (e.g. `1`) or comma-separated resume addresses.
        #[arg(long, default_value = "1")]
        path: String,
    },
    /// Simulate interrupted executions and export latency traces.
    Simulate {
        listing: String,
        /// Fix every run's secret; random per run otherwise.
        #[arg(long)]
        secret: Option<String>,
    },
    /// Recover branch directions from an exported trace.
    Analyze {
        listing: String,
        trace: PathBuf,
        /// `run_id,secret` file for scoring.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        step: Option<usize>,
    },
    /// Attack success over the grid of path offsets.
    Heatmap,
    /// Run an attack pipeline end to end.
    Attack {
        pipeline: Pipeline,
        /// Fail with exit code 1 when the headline metric is below this.
        #[arg(long)]
        require: Option<f64>,
    },
    /// Align both paths of every branch and compare attack success.
    Defend {
        listing: String,
        #[arg(long)]
        target_offset: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Pipeline {
    Branch,
    Cmpbn,
    Montmul,
    Rsa,
}

enum Failure {
    Input(anyhow::Error),
    Pipeline(anyhow::Error),
}

trait Classify<T> {
    fn input(self) -> Result<T, Failure>;
    fn pipeline(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into()))
    }
    fn pipeline(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Pipeline(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("failed: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = Config::load(cli.config.as_deref(), &cli.set).input()?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.out {
        cfg.out_dir = d;
    }
    if let Some(r) = cli.runs {
        cfg.runs = r;
        cfg.heatmap.runs_per_cell = r;
    }
    cfg.validate().input()?;
    let out = Output { dir: cfg.out_dir.clone() };

    match cli.command {
        Command::Decode { listing } => decode(&cfg, &out, &listing),
        Command::Batches { listing, path } => batches(&cfg, &out, &listing, &path),
        Command::Simulate { listing, secret } => simulate(&cfg, &out, &listing, secret.as_deref()),
        Command::Analyze { listing, trace, truth, step } => analyze(&cfg, &out, &listing, &trace, truth.as_deref(), step),
        Command::Heatmap => heatmap(&cfg, &out),
        Command::Attack { pipeline, require } => attack(&cfg, &out, pipeline, require),
        Command::Defend { listing, target_offset } => defend(&cfg, &out, &listing, target_offset),
    }
}

struct Output {
    dir: PathBuf,
}

impl Output {
    /// Write-then-rename, so a failed run never leaves a partial file.
    fn write(&self, name: &str, contents: &[u8]) -> Result<PathBuf, Failure> {
        let path = self.dir.join(name);
        let res = (|| -> anyhow::Result<()> {
            fs::create_dir_all(&self.dir)?;
            let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
            tmp.write_all(contents)?;
            tmp.as_file().sync_all()?;
            tmp.persist(&path)?;
            Ok(())
        })();
        res.with_context(|| format!("writing {}", path.display())).pipeline()?;
        Ok(path)
    }

    fn json(&self, name: &str, value: &impl serde::Serialize) -> Result<PathBuf, Failure> {
        let mut text = serde_json::to_string_pretty(value).pipeline()?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

/// A listing file, a program JSON file, or one of the built-in victims.
fn load_program(cfg: &Config, spec: &str) -> Result<Program, Failure> {
    let program = match spec {
        "builtin:small" => secret_branch_program(),
        "builtin:dense" => secret_branch_dense_program(cfg.branch.extra_writes),
        "builtin:template" => {
            template_branch_program(cfg.branch.x_offset, cfg.branch.y_offset, 25, &BodySpec::default()).input()?
        }
        "builtin:montmul" => montmul_loop_program(cfg.montmul.real_offset).input()?,
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {path}")).input()?;
            if path.ends_with(".json") {
                Program::from_json(&text).with_context(|| path.to_string()).input()?
            } else {
                parse_listing(&text).with_context(|| path.to_string()).input()?
            }
        }
    };
    Ok(program)
}

fn parse_bits(s: &str) -> Result<Vec<bool>, Failure> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(anyhow!("secret `{s}` must be a string of 0 and 1")),
        })
        .collect::<Result<_, _>>()
        .input()
}

fn parse_addr(s: &str) -> anyhow::Result<u64> {
    let s = s.trim();
    let v = match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    };
    v.with_context(|| format!("bad address `{s}`"))
}

fn decode(cfg: &Config, out: &Output, listing: &str) -> Result<(), Failure> {
    let program = load_program(cfg, listing)?;
    let features = alignment_features(&program);
    let mut csv = String::from("address,length,mnemonic,writes_memory,address_mod_16,end_mod_16,crosses_window,trailing_writes_in_window\n");
    for insn in &program.instructions {
        let f = &features[&insn.address];
        let _ = writeln!(
            csv,
            "{:#x},{},{},{},{},{},{},{}",
            insn.address,
            insn.length,
            insn.mnemonic,
            insn.writes_memory,
            f.address_mod_16,
            f.end_mod_16,
            f.crosses_window,
            f.trailing_writes_in_window
        );
    }
    out.write("program.json", program.to_json().as_bytes())?;
    let path = out.write("features.csv", csv.as_bytes())?;
    print!("{csv}");
    println!("wrote {}", path.display());
    Ok(())
}

fn batches(cfg: &Config, out: &Output, listing: &str, spec: &str) -> Result<(), Failure> {
    let program = load_program(cfg, listing)?;
    let program = fused(&program);
    let path: Vec<u64> = if spec.chars().all(|c| c == '0' || c == '1') {
        let bits = parse_bits(spec)?;
        program
            .execution_path(&bits)
            .input()?
            .iter()
            .filter(|i| !i.is_return())
            .map(|i| i.address)
            .collect()
    } else {
        spec.split(',').map(parse_addr).collect::<anyhow::Result<_>>().input()?
    };
    let b = step_batches(&program, &path).input()?;
    let csv = batches_to_csv(&b);
    let written = out.write("batches.csv", csv.as_bytes())?;
    print!("{csv}");
    println!("wrote {}", written.display());
    Ok(())
}

fn simulate(cfg: &Config, out: &Output, listing: &str, secret: Option<&str>) -> Result<(), Failure> {
    let program = load_program(cfg, listing)?;
    let width = program.branch_pairs.len();
    let secrets: Vec<Vec<bool>> = match secret {
        Some(s) => {
            let bits = parse_bits(s)?;
            if bits.len() != width {
                return Err(Failure::Input(anyhow!("secret has {} bits, program has {width} branches", bits.len())));
            }
            vec![bits; cfg.runs]
        }
        None => (0..cfg.runs as u64)
            .map(|r| (0..width as u64).map(|b| derive_seed(derive_seed(cfg.seed, u64::MAX), r * 64 + b) & 1 == 1).collect())
            .collect(),
    };
    let runs = simulate_runs(&program, &secrets, &cfg.timing, cfg.seed).pipeline()?;
    let mut truth = String::from("run_id,secret\n");
    for r in &runs {
        let bits: String = r.secret.iter().map(|&b| if b { '1' } else { '0' }).collect();
        let _ = writeln!(truth, "{},{}", r.run_id, bits);
    }
    out.write("trace.csv", runs_to_csv(&program, &runs, false).as_bytes())?;
    out.write("trace_attack.csv", runs_to_csv(&program, &runs, true).as_bytes())?;
    out.write("secrets.csv", truth.as_bytes())?;
    out.json("params.json", &cfg.timing)?;
    println!("simulated {} runs of {} steps into {}", runs.len(), runs.first().map_or(0, |r| r.samples.len()), out.dir.display());
    Ok(())
}

fn read_trace(path: &Path) -> anyhow::Result<Vec<Run>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut runs: Vec<Run> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let row = || format!("{}: line {}", path.display(), n + 1);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            bail!("{}: expected 4 fields", row());
        }
        let run_id: u64 = f[0].parse().with_context(row)?;
        let step_index: usize = f[1].parse().with_context(row)?;
        let instr_address = if f[2].is_empty() { 0 } else { parse_addr(f[2]).with_context(row)? };
        let latency: f64 = f[3].parse().with_context(row)?;
        if runs.last().map(|r| r.run_id) != Some(run_id) {
            runs.push(Run { run_id, secret: Vec::new(), run_shift: 0.0, degraded: false, samples: Vec::new() });
        }
        let run = runs.last_mut().expect("pushed above");
        run.samples.push(LatencySample { step_index, instr_address, latency, mode: None });
    }
    if runs.is_empty() {
        bail!("{}: no samples", path.display());
    }
    Ok(runs)
}

fn read_truth(path: &Path, runs: &mut [Run]) -> anyhow::Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut map = std::collections::HashMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let (id, bits) = line.split_once(',').with_context(|| format!("{}: line {}", path.display(), n + 1))?;
        let id: u64 = id.parse().with_context(|| format!("{}: line {}", path.display(), n + 1))?;
        map.insert(id, bits.chars().map(|c| c == '1').collect::<Vec<bool>>());
    }
    for r in runs {
        r.secret = map.get(&r.run_id).cloned().with_context(|| format!("no secret for run {}", r.run_id))?;
    }
    Ok(())
}

fn analyze(cfg: &Config, out: &Output, listing: &str, trace: &Path, truth: Option<&Path>, step: Option<usize>) -> Result<(), Failure> {
    let program = load_program(cfg, listing)?;
    let mut runs = read_trace(trace).input()?;
    if let Some(t) = truth {
        read_truth(t, &mut runs).input()?;
    }
    let step = step
        .or(cfg.branch.discriminator_step)
        .or_else(|| default_discriminator(&program))
        .ok_or_else(|| anyhow!("program has no store after its branch; pass --step"))
        .input()?;
    let ex = extract_branch_secret(&program, &cfg.timing, &runs, step).pipeline()?;
    let mut csv = String::from("run_id,predicted_bit,confidence\n");
    for (run, (bit, obs)) in runs.iter().zip(ex.bits.iter().zip(&ex.observations)) {
        let _ = writeln!(csv, "{},{},{:.3}", run.run_id, u8::from(*bit), obs.confidence);
    }
    out.write("predictions.csv", csv.as_bytes())?;
    let report = json!({
        "runs": runs.len(),
        "discriminator_step": step,
        "threshold": ex.threshold,
        "slow_is_one": ex.slow_is_one,
        "accuracy": ex.accuracy,
    });
    out.json("analysis.json", &report)?;
    match ex.accuracy {
        Some(a) => println!("step {step}: threshold {:.1}, accuracy {:.3}", ex.threshold, a),
        None => println!("step {step}: threshold {:.1}", ex.threshold),
    }
    Ok(())
}

fn heatmap(cfg: &Config, out: &Output) -> Result<(), Failure> {
    let cells = heatmap_sweep(&cfg.heatmap, &cfg.timing, cfg.seed).pipeline()?;
    out.write("heatmap.csv", heatmap_csv(&cells).as_bytes())?;
    out.write("heatmap.txt", heatmap_matrix(&cells).as_bytes())?;
    let (lo, hi) = cells.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c.success_rate), hi.max(c.success_rate)));
    println!("{} cells, {} runs each; success in [{lo:.3}, {hi:.3}]", cells.len(), cfg.heatmap.runs_per_cell);
    Ok(())
}

fn check_required(metric: &str, value: f64, require: Option<f64>) -> Result<(), Failure> {
    println!("{metric}: {value:.4}");
    match require {
        Some(min) if !(value >= min) => Err(Failure::Pipeline(anyhow!("{metric} {value:.4} below required {min}"))),
        _ => Ok(()),
    }
}

fn attack(cfg: &Config, out: &Output, pipeline: Pipeline, require: Option<f64>) -> Result<(), Failure> {
    match pipeline {
        Pipeline::Branch => {
            let program = load_program(cfg, &cfg.branch.program)?;
            let step = cfg
                .branch
                .discriminator_step
                .or_else(|| default_discriminator(&program))
                .ok_or_else(|| anyhow!("program has no store after its branch; set branch.discriminator_step"))
                .input()?;
            let (report, runs) = branch_attack(&program, &cfg.timing, cfg.runs, step, cfg.seed).pipeline()?;
            out.write("trace_attack.csv", runs_to_csv(&program, &runs, true).as_bytes())?;
            out.json("attack_branch.json", &report)?;
            check_required("accuracy", report.accuracy, require)
        }
        Pipeline::Cmpbn => {
            let bits: Vec<bool> = (0..cfg.cmpbn.bits as u64).map(|i| derive_seed(derive_seed(cfg.seed, u64::MAX), i) & 1 == 1).collect();
            let report = cmp_bn_pipeline(&bits, cfg.cmpbn.runs_per_bit, &cfg.cmpbn.regime, cfg.seed).pipeline()?;
            out.json("attack_cmpbn.json", &report)?;
            println!("false positive rate: {:.4}", report.false_positive_rate);
            check_required("recovered fraction", report.recovered_fraction, require)
        }
        Pipeline::Montmul => {
            let report = montmul_pipeline(&cfg.montmul, &cfg.timing, cfg.seed).pipeline()?;
            out.json("attack_montmul.json", &report)?;
            println!("decision error: {:.4}", report.decision_error);
            check_required("decided fraction", report.decided_fraction, require)
        }
        Pipeline::Rsa => {
            let report = rsa_attack_end_to_end(&cfg.rsa, cfg.seed).pipeline()?;
            out.json("attack_rsa.json", &report)?;
            // One sample key's gcd trace, as an attacker with perfect observation would see it.
            let key = generate_key(cfg.rsa.prime_bits, &BigUint::from(cfg.rsa.e), &mut rng_from_seed(derive_seed(cfg.seed, u64::MAX)));
            let (_, trace) = binary_gcd_reference(&key.e, &key.phi).pipeline()?;
            out.write("gcd_trace.csv", trace.to_csv().as_bytes())?;
            if report.invalid_keys > 0 {
                return Err(Failure::Pipeline(anyhow!("{} recovered keys failed validation", report.invalid_keys)));
            }
            check_required("success fraction", report.success_fraction, require)
        }
    }
}

fn defend(cfg: &Config, out: &Output, listing: &str, target_offset: Option<u64>) -> Result<(), Failure> {
    let program = load_program(cfg, listing)?;
    let target = target_offset.unwrap_or(cfg.defense.target_offset);
    if target > 15 {
        return Err(Failure::Input(anyhow!("target offset {target} outside [0, 15]")));
    }
    let (patched, patch) = align_branch_targets(&program, target);
    let mut report = patch.report_json();
    if program.branch_pairs.len() == 1 {
        let before = verify_defense(&program, &cfg.timing, cfg.runs, cfg.seed).pipeline()?;
        let after = verify_defense(&patched, &cfg.timing, cfg.runs, cfg.seed).pipeline()?;
        println!("attack success: {:.3} before, {:.3} after", before.success_rate, after.success_rate);
        report["before"] = json!(before);
        report["after"] = json!(after);
    }
    out.write("patched.json", patched.to_json().as_bytes())?;
    out.write("patched.s", patched.emit().as_bytes())?;
    out.json("patch_report.json", &report)?;
    println!(
        "{} insertion points, {} -> {} bytes ({:.2}% overhead)",
        patch.insertion_points.len(),
        patch.original_size,
        patch.padded_size,
        patch.overhead_percent()
    );
    Ok(())
}
