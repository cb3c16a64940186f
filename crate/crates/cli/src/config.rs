//! Run configuration: a TOML file, then `RFMPOSE_SEED`, then `--set`
//! overrides, then dedicated flags.

use std::path::{Path, PathBuf};

use rfmpose::evalbench::EvalConfig;
use rfmpose::flowmatch::FlowTrainConfig;
use rfmpose::netcore::NetArch;
use rfmpose::rlrefine::PpoConfig;
use rfmpose::synthdata::DatasetConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SEED_ENV: &str = "RFMPOSE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub ks: Vec<usize>,
    pub rhos: Vec<f64>,
    pub speed_horizons: Vec<usize>,
    pub speed_instances: usize,
    pub speed_warmup: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            ks: vec![10, 30, 50],
            rhos: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            speed_horizons: vec![5, 10, 20, 40],
            speed_instances: 60,
            speed_warmup: 3,
        }
    }
}

/// File locations. Not part of the reproducibility hash.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub flow: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    pub critic: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatasetConfig,
    pub arch: NetArch,
    pub flow: FlowTrainConfig,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DatasetConfig::default(),
            arch: NetArch::velocity(),
            flow: FlowTrainConfig::default(),
            ppo: PpoConfig { iterations: 500, ..PpoConfig::default() },
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn check(ok: bool, what: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!("out of range: {what}")))
    }
}

fn unit_open(x: f64) -> bool {
    x > 0.0 && x <= 1.0
}

impl RunConfig {
    /// Parses TOML text; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self, CliError> {
        Self::deserialize(toml::Value::Table(table)).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Loads `path` (or defaults), then applies the seed environment
    /// variable and `key=value` overrides in order.
    pub fn load(path: Option<&Path>, env_seed: Option<&str>, sets: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        if let Some(s) = env_seed {
            let seed: u64 =
                s.trim().parse().map_err(|_| CliError::Config(format!("{SEED_ENV}={s} is not an unsigned integer")))?;
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        for kv in sets {
            apply_override(&mut table, kv)?;
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        check((1..=1_000_000).contains(&d.count), "data.count in 1..=1000000")?;
        check((8..=65_536).contains(&d.n_points), "data.n_points in 8..=65536")?;
        check(!d.categories.is_empty(), "data.categories non-empty")?;
        let mut cats = d.categories.clone();
        cats.sort();
        cats.dedup();
        check(cats.len() == d.categories.len(), "data.categories without repeats")?;
        check((0.0..=0.1).contains(&d.jitter), "data.jitter in [0, 0.1]")?;
        check((1..=256).contains(&d.dense_factor), "data.dense_factor in 1..=256")?;

        let a = &self.arch;
        check(a.feat_dim >= 1 && a.point_hidden >= 1 && a.embed_dim >= 2, "arch widths positive, embed_dim >= 2")?;
        check(a.head_hidden.iter().all(|&w| w >= 1), "arch.head_hidden widths positive")?;
        check(a.out_dim == rfmpose::geometry::POSE_DIM, "arch.out_dim = 9")?;

        let f = &self.flow;
        check((1..=100_000).contains(&f.epochs), "flow.epochs in 1..=100000")?;
        check((1..=65_536).contains(&f.batch_size), "flow.batch_size in 1..=65536")?;
        check(unit_open(f.lr), "flow.lr in (0, 1]")?;
        check((1..=64).contains(&f.draws_per_item), "flow.draws_per_item in 1..=64")?;
        check(f.chunk_items >= 1, "flow.chunk_items >= 1")?;

        let p = &self.ppo;
        p.validate().map_err(|e| CliError::Config(e.to_string()))?;
        check(p.iterations <= 1_000_000, "ppo.iterations <= 1000000")?;
        check((1..=1000).contains(&p.horizon), "ppo.horizon in 1..=1000")?;
        check((0.0..=1.0).contains(&p.sigma), "ppo.sigma in [0, 1]")?;
        check(p.clip < 1.0, "ppo.clip in (0, 1)")?;
        check((1..=64).contains(&p.epochs), "ppo.epochs in 1..=64")?;
        check(p.minibatch >= 1, "ppo.minibatch >= 1")?;
        check(p.policy_lr <= 1.0 && p.critic_lr <= 1.0, "ppo learning rates in [0, 1]")?;
        check(p.reward.bonus >= 0.0 && p.reward.bonus.is_finite(), "ppo.reward.bonus >= 0")?;

        let e = &self.eval;
        check((1..=10_000).contains(&e.k), "eval.k in 1..=10000")?;
        check((1..=1000).contains(&e.horizon), "eval.horizon in 1..=1000")?;
        check(unit_open(e.rho), "eval.rho in (0, 1]")?;
        check(e.score_step.is_none_or(|s| s < e.horizon), "eval.score_step < eval.horizon")?;

        let g = &self.ablate;
        check(!g.ks.is_empty() && g.ks.iter().all(|&k| (1..=10_000).contains(&k)), "ablate.ks in 1..=10000")?;
        check(!g.rhos.is_empty() && g.rhos.iter().all(|&r| unit_open(r)), "ablate.rhos in (0, 1]")?;
        check(
            !g.speed_horizons.is_empty() && g.speed_horizons.iter().all(|&h| (1..=1000).contains(&h)),
            "ablate.speed_horizons in 1..=1000",
        )?;
        check(g.speed_instances >= 1, "ablate.speed_instances >= 1")?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of everything except file locations.
    pub fn content_hash(&self) -> String {
        let bare = Self { paths: Paths::default(), ..self.clone() };
        hex(&Sha256::digest(bare.to_toml().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Applies `a.b.c=value`; the value is read as TOML and falls back to a
/// plain string.
pub fn apply_override(table: &mut toml::Table, kv: &str) -> Result<(), CliError> {
    let (key, raw) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("override `{kv}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override key `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
