//! Run configuration: a flat, typed TOML format with one section per
//! module, unknown keys rejected by name, and a manifest (config hash,
//! seed, versions) written next to every artifact set.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub problem: ProblemSection,
    pub ambiguity: AmbiguitySection,
    pub solver: SolverSection,
    pub lq: LqSection,
    pub experiment: ExperimentSection,
    pub radius: RadiusSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub output: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, output: "out".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSection {
    pub kind: String,
    pub zeta: f64,
    pub alpha: f64,
    pub eta: f64,
    pub x_max: f64,
    pub grid: usize,
    pub action_m: usize,
    pub true_mean: f64,
    pub true_sd: f64,
    pub x0: f64,
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self {
            kind: "invest".into(),
            zeta: 0.25,
            alpha: 0.9,
            eta: 1.02,
            x_max: 1.4,
            grid: 36,
            action_m: 6,
            true_mean: 1.08,
            true_sd: 0.1,
            x0: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmbiguitySection {
    pub theta: f64,
    pub n: usize,
    pub metric_order: f64,
    pub w_extra: usize,
}

impl Default for AmbiguitySection {
    fn default() -> Self {
        Self { theta: 0.02, n: 10, metric_order: 1.0, w_extra: 7 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub name: String,
    pub delta: f64,
    pub max_iter: usize,
    pub lambda_iters: usize,
    pub mpi_order: usize,
    pub log: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { name: "vi".into(), delta: 1e-6, max_iter: 10_000, lambda_iters: 64, mpi_order: 5, log: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqSection {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub xi: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub alpha: f64,
    pub lambda: f64,
    pub samples: Vec<Vec<f64>>,
}

impl Default for LqSection {
    fn default() -> Self {
        Self {
            a: vec![vec![0.9, 0.1], vec![0.0, 0.8]],
            b: vec![vec![0.0], vec![0.1]],
            xi: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            r: vec![vec![0.1]],
            alpha: 0.95,
            lambda: 50.0,
            samples: vec![vec![0.05, -0.02], vec![-0.03, 0.04], vec![0.01, 0.0]],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub trials: usize,
    pub horizon: usize,
    pub rollouts: usize,
    pub theta_list: Vec<f64>,
    pub n_list: Vec<usize>,
    pub training_draws: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            trials: 200,
            horizon: 200,
            rollouts: 1000,
            theta_list: vec![0.0, 0.005, 0.01, 0.02, 0.05, 0.1],
            n_list: vec![5, 10, 20],
            training_draws: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadiusSection {
    pub n: usize,
    pub beta: f64,
    pub p: f64,
    pub l: usize,
    pub q: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for RadiusSection {
    fn default() -> Self {
        Self { n: 100, beta: 0.05, p: 1.0, l: 1, q: 2.0, c1: 2.0, c2: 1.0 }
    }
}

impl RunConfig {
    /// Parse a TOML string; unknown keys are rejected with the key named.
    pub fn from_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    /// Apply `section.key=value` overrides on top of the parsed file, then
    /// re-validate (so typos in override keys are rejected too).
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let text = toml::to_string(&self).map_err(|e| Error::Config(e.to_string()))?;
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{ov}' is not key=value")))?;
            let (section, field) = key
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override key '{key}' is not section.key")))?;
            let value = parse_toml_value(raw)?;
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match entry {
                toml::Value::Table(t) => {
                    t.insert(field.to_string(), value);
                }
                _ => return Err(Error::Config(format!("'{section}' is not a section"))),
            }
        }
        let merged = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_str(&merged)
    }

    /// Canonical serialized form (defaults echoed); hashed into the manifest.
    pub fn canonical(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.canonical()?.as_bytes());
        Ok(format!("{:x}", h.finalize()))
    }
}

fn parse_toml_value(raw: &str) -> Result<toml::Value> {
    // Try native TOML literal first (numbers, booleans, arrays), fall back
    // to a bare string.
    let candidate = format!("v = {raw}");
    if let Ok(t) = toml::from_str::<toml::Table>(&candidate) {
        if let Some(v) = t.get("v") {
            return Ok(v.clone());
        }
    }
    Ok(toml::Value::String(raw.to_string()))
}

/// Reproducibility record written next to every artifact set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub command: String,
    pub versions: std::collections::BTreeMap<String, String>,
    /// Full resolved config with defaults echoed.
    pub config: String,
}

impl Manifest {
    pub fn new(config: &RunConfig, command: &str) -> Result<Self> {
        let mut versions = std::collections::BTreeMap::new();
        versions.insert("wdrc".into(), env!("CARGO_PKG_VERSION").into());
        Ok(Self {
            config_hash: config.hash()?,
            seed: config.run.seed,
            command: command.into(),
            versions,
            config: config.canonical()?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.canonical().unwrap();
        let back = RunConfig::from_str(&text).unwrap();
        assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let err = RunConfig::from_str("[solver]\nfrobnicate = 3\n").unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("frobnicate"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = RunConfig::default()
            .with_overrides(&["ambiguity.theta=0.07".into(), "solver.name=mpi".into()])
            .unwrap();
        assert_eq!(cfg.ambiguity.theta, 0.07);
        assert_eq!(cfg.solver.name, "mpi");
        let err = RunConfig::default()
            .with_overrides(&["solver.bogus=1".into()])
            .unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("bogus"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig::default()
            .with_overrides(&["run.seed=1".into()])
            .unwrap();
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn manifest_echoes_defaults() {
        let cfg = RunConfig::default();
        let m = Manifest::new(&cfg, "solve").unwrap();
        assert!(m.config.contains("delta"));
        assert!(m.versions.contains_key("wdrc"));
    }
}
