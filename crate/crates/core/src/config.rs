//! Run configuration: a strict JSON schema with defaults and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{MixPlan, SynthSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::Dtype;
use crate::reconstruct::ReconstructionMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lr: f64,
    pub steps: u64,
    /// Frames per batch; whole utterances are packed up to this budget.
    pub batch_frames: usize,
    pub checkpoint_interval: u64,
    pub val_interval: u64,
    /// Continue from `checkpoints/latest.ckpt` when it exists.
    pub resume: bool,
    pub checkpoint_dtype: Dtype,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 10_000,
            batch_frames: 10_000,
            checkpoint_interval: 500,
            val_interval: 500,
            resume: true,
            checkpoint_dtype: Dtype::F64le,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generate a synthetic corpus when `clean/` or `noise/` is missing.
    pub synthesize: bool,
    pub synth: SynthSpec,
    pub mix: MixPlan,
    pub irm_exponent: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthesize: true,
            synth: SynthSpec::default(),
            mix: MixPlan::default(),
            irm_exponent: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Reconstruction modes scored by `evaluate`.
    pub modes: Vec<ReconstructionMode>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            modes: ReconstructionMode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus, manifest and normalizer live here.
    pub data_dir: PathBuf,
    /// Checkpoints, logs and reports; defaults to `<data_dir>/run`.
    #[serde(default)]
    pub run_dir: Option<PathBuf>,
    /// Explicit checkpoint for enhance/evaluate; defaults to the best one.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Ablation preset; sets the four `enable_*` switches of `model`.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub mode: ReconstructionMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub threads: usize,
}

fn one() -> usize {
    1
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<ReconstructionMode>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

impl RunConfig {
    /// Parses and validates a config file. Relative paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                Error::config(inner.to_string())
            } else {
                Error::config(format!("{path}: {inner}"))
            }
        })?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data_dir);
        if let Some(p) = cfg.run_dir.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.checkpoint.as_mut() {
            resolve(p);
        }
        if let Some(name) = &cfg.preset {
            let p = ModelConfig::preset(name).map_err(|e| Error::config(format!("preset: {e}")))?;
            cfg.model.enable_irm_branch = p.enable_irm_branch;
            cfg.model.enable_ri_branch = p.enable_ri_branch;
            cfg.model.enable_multiscale = p.enable_multiscale;
            cfg.model.enable_attention = p.enable_attention;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: Overrides) -> Result<()> {
        if let Some(m) = o.mode {
            self.mode = m;
            self.evaluation.modes = vec![m];
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.threads {
            self.threads = t;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, why: String| Err(Error::config(format!("{key}: {why}")));
        self.model.validate()?;
        self.data.mix.validate()?;
        let t = &self.training;
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return fail("training.lr", format!("{} is not positive", t.lr));
        }
        for (key, v) in [
            ("training.steps", t.steps),
            ("training.batch_frames", t.batch_frames as u64),
            ("training.checkpoint_interval", t.checkpoint_interval),
            ("training.val_interval", t.val_interval),
            ("threads", self.threads as u64),
        ] {
            if v == 0 {
                return fail(key, "must be positive".into());
            }
        }
        let d = &self.data;
        if !(d.irm_exponent.is_finite() && d.irm_exponent > 0.0) {
            return fail("data.irm_exponent", format!("{} is not positive", d.irm_exponent));
        }
        let s = &d.synth;
        if s.n_clean < 3 || s.n_noise < 2 {
            return fail(
                "data.synth",
                format!("need n_clean >= 3 and n_noise >= 2, got {} and {}", s.n_clean, s.n_noise),
            );
        }
        if !(s.clean_secs > 0.0 && s.noise_secs > 0.0) {
            return fail("data.synth", "durations must be positive".into());
        }
        if self.evaluation.modes.is_empty() {
            return fail("evaluation.modes", "at least one mode is required".into());
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run_dir
            .clone()
            .unwrap_or_else(|| self.data_dir.join("run"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir.join("manifest.jsonl")
    }

    pub fn normalizer_path(&self) -> PathBuf {
        self.data_dir.join("normalizer.bin")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.run_dir().join("checkpoints")
    }

    /// Requires `data_dir` to exist (every command but `prepare`).
    pub fn require_data_dir(&self) -> Result<()> {
        if !self.data_dir.is_dir() {
            return Err(Error::config(format!(
                "data_dir: {} does not exist (run `prepare` first)",
                self.data_dir.display()
            )));
        }
        Ok(())
    }
}
