//! Run configuration: one JSON document with defaults for every field, plus
//! dotted `key=value` overrides applied before deserialisation.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fetchlab::attacks::cmpbn::CmpBnRegime;
use fetchlab::attacks::montmul::MontmulConfig;
use fetchlab::attacks::rsa::RsaAttackConfig;
use fetchlab::stats::HeatmapConfig;
use fetchlab::timing::TimingParams;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Executions for simulate, analyze, branch attacks and defense checks.
    pub runs: usize,
    pub out_dir: PathBuf,
    pub timing: TimingParams,
    pub heatmap: HeatmapConfig,
    pub branch: BranchConfig,
    pub cmpbn: CmpBnConfig,
    pub montmul: MontmulConfig,
    pub rsa: RsaAttackConfig,
    pub defense: DefenseConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            runs: 1000,
            out_dir: PathBuf::from("out"),
            timing: TimingParams::default(),
            heatmap: HeatmapConfig { runs_per_cell: 200, ..HeatmapConfig::default() },
            branch: BranchConfig::default(),
            cmpbn: CmpBnConfig::default(),
            montmul: MontmulConfig::default(),
            rsa: RsaAttackConfig::default(),
            defense: DefenseConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchConfig {
    /// Listing file or `builtin:small`, `builtin:dense`, `builtin:template`.
    pub program: String,
    /// Extra stores in `builtin:dense`.
    pub extra_writes: usize,
    pub x_offset: u64,
    pub y_offset: u64,
    /// Defaults to the first store on the fall-through path.
    pub discriminator_step: Option<usize>,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            program: "builtin:small".into(),
            extra_writes: 3,
            x_offset: 6,
            y_offset: 2,
            discriminator_step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmpBnConfig {
    pub bits: usize,
    pub runs_per_bit: usize,
    pub regime: CmpBnRegime,
}

impl Default for CmpBnConfig {
    fn default() -> Self {
        Self { bits: 1000, runs_per_bit: 1, regime: CmpBnRegime::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    pub target_offset: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self { target_offset: 0 }
    }
}

impl Config {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => serde_json::to_value(Config::default())?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Config = serde_json::from_value(value).context("invalid configuration")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.timing.validate()?;
        if self.runs == 0 {
            bail!("runs must be positive");
        }
        if self.heatmap.runs_per_cell < 100 {
            bail!("heatmap.runs_per_cell must be at least 100");
        }
        if self.heatmap.x_offsets.iter().chain(&self.heatmap.y_offsets).any(|&o| o > 31) {
            bail!("heatmap offsets must lie in [0, 31]");
        }
        if self.rsa.prime_bits < 16 {
            bail!("rsa.prime_bits must be at least 16");
        }
        if self.montmul.repetitions < 2 {
            bail!("montmul.repetitions must be at least 2");
        }
        if self.defense.target_offset > 15 {
            bail!("defense.target_offset must lie in [0, 15]");
        }
        Ok(())
    }
}

/// `a.b.c=value`; the value is read as JSON when it parses, else as a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override `{spec}` is not key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = key.parse().with_context(|| format!("`{key}` is not an index"))?;
                let slot = items.get_mut(idx).ok_or_else(|| anyhow!("index {idx} out of range in `{path}`"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => bail!("cannot descend into `{key}` of `{path}`"),
        };
    }
    Ok(())
}
