//! Run configuration: one TOML file with fixed section names, overridable by
//! `key=value` pairs addressed with dotted paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ModelConfig;
use crate::data::{PrepConfig, SyntheticConfig, WindowConfig};
use crate::decoding::BeamConfig;
use crate::error::{FlrError, Result};
use crate::flr::FlrConfig;
use crate::grpo::GrpoConfig;
use crate::objectives::LossToggles;

/// Identifier written next to every run's outputs.
pub const CODE_VERSION: &str = concat!("flr-core ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    #[default]
    Synthetic,
    Ingest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub mode: DataMode,
    /// Raw interactions JSONL: written by `gen-data`, read by `preprocess`.
    pub raw: PathBuf,
    /// Preprocessed bundle directory.
    pub bundle: PathBuf,
    pub max_history: usize,
    pub max_vocab: Option<usize>,
    pub window: Option<WindowConfig>,
    pub synthetic: SyntheticConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            mode: DataMode::Synthetic,
            raw: PathBuf::from("data/interactions.jsonl"),
            bundle: PathBuf::from("data/bundle"),
            max_history: 10,
            max_vocab: None,
            window: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl DataSection {
    pub fn prep(&self) -> PrepConfig {
        PrepConfig {
            max_history: self.max_history,
            split: [8, 1, 1],
            max_vocab: self.max_vocab,
            window: self.window.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    /// Examples per optimizer step.
    pub batch_size: usize,
    pub max_steps: usize,
    /// Validation every this many steps (early stopping on NDCG@5).
    pub eval_every: usize,
    /// Consecutive non-improving validations before stopping.
    pub patience: usize,
    /// Validation examples used for early stopping (0 = all).
    pub valid_limit: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            batch_size: 8,
            max_steps: 2000,
            eval_every: 200,
            patience: 3,
            valid_limit: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub beam: BeamConfig,
    /// Test examples evaluated (0 = all).
    pub test_limit: usize,
    /// Prompts used for factor analyses.
    pub analysis_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            beam: BeamConfig::default(),
            test_limit: 0,
            analysis_samples: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSection {
    pub n_samples: usize,
    pub beam: usize,
    pub batch: usize,
    pub repeats: usize,
    pub n_iters: Vec<usize>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            n_samples: 100,
            beam: 10,
            batch: 4,
            repeats: 3,
            n_iters: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    /// `vocab_size = 0` and `max_seq_len = 0` are filled in from the dataset.
    pub model: ModelConfig,
    pub flr: FlrConfig,
    pub loss: LossToggles,
    pub train: TrainSection,
    pub grpo: GrpoConfig,
    pub eval: EvalSection,
    pub bench: BenchSection,
    /// Values of K for `sweep-k`.
    pub sweep_k: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            model: ModelConfig {
                vocab_size: 0,
                d_model: 32,
                n_layers: 2,
                n_heads: 2,
                d_ff: 128,
                max_seq_len: 0,
                rope_base: 10_000.0,
            },
            flr: FlrConfig::default(),
            loss: LossToggles::default(),
            train: TrainSection::default(),
            grpo: GrpoConfig::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
            sweep_k: vec![1, 2, 3, 4],
        }
    }
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| FlrError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| FlrError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| FlrError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.flr.validate()?;
        self.grpo.validate()?;
        self.data.synthetic.validate()?;
        let m = &self.model;
        if m.n_heads == 0 || m.d_model % m.n_heads != 0 || (m.d_model / m.n_heads) % 2 != 0 {
            return Err(FlrError::Config(format!(
                "model.d_model {} must split into an even head size over {} heads",
                m.d_model, m.n_heads
            )));
        }
        if self.train.batch_size == 0 || self.train.eval_every == 0 {
            return Err(FlrError::Config("train.batch_size and train.eval_every must be >= 1".into()));
        }
        if self.eval.beam.beam_width < self.eval.beam.top_k {
            return Err(FlrError::Config("eval.beam.beam_width must be >= eval.beam.top_k".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| FlrError::Config(e.to_string()))
    }

    /// First 16 hex digits of SHA-256 over the resolved config, excluding
    /// `out_dir`.
    pub fn hash(&self) -> String {
        let mut cfg = self.clone();
        cfg.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&cfg).expect("config serializes");
        hex::encode(Sha256::digest(bytes))[..16].to_string()
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.out_dir.join("logs")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out_dir.join("reports")
    }

    /// Creates the output layout and writes the resolved config snapshot
    /// plus the code version.
    pub fn prepare_out_dir(&self) -> Result<()> {
        for d in [self.checkpoints_dir(), self.logs_dir(), self.reports_dir()] {
            std::fs::create_dir_all(d)?;
        }
        std::fs::write(self.out_dir.join("config.resolved.toml"), self.to_toml()?)?;
        std::fs::write(self.out_dir.join("VERSION"), format!("{CODE_VERSION}\n"))?;
        Ok(())
    }
}

/// `a.b.c=value`; the value is parsed as TOML, falling back to a string.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| FlrError::Config(format!("override {spec:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| FlrError::Config(format!("override {key}: {part} is not a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(FlrError::Config(format!("empty override key in {spec:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn overrides_take_precedence() {
        let text = "seed = 3\n[flr]\nk = 2\n";
        let cfg = RunConfig::from_toml(
            text,
            &[
                "flr.k=4".into(),
                "loss.use_orth=false".into(),
                "out_dir=runs/x".into(),
                "grpo.noise_sigma=0.1".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.flr.k, 4);
        assert!(!cfg.loss.use_orth);
        assert_eq!(cfg.out_dir, PathBuf::from("runs/x"));
        assert_eq!(cfg.grpo.noise_sigma, 0.1);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for o in ["flr.k=0", "grpo.group_size=1", "model.d_model=30", "seed"] {
            let err = RunConfig::from_toml("", &[o.into()]).unwrap_err();
            assert!(matches!(err, FlrError::Config(_)), "{o}: {err}");
        }
        assert!(RunConfig::from_toml("unknown_section = [", &[]).is_err());
    }
}
