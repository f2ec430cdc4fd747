//! Run configuration and result rows.
//!
//! A [`RunSpec`] is a single flat JSON document. Precedence, lowest first:
//! built-in defaults, the config file, command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::block_index::SparsityConfig;
use crate::decoder::{DecodeMode, ProbeSchedule};
use crate::error::{ResaError, Result};
use crate::model::{Model, ModelConfig, ModelWeights};
use crate::rng::SplitMixStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    /// Weight-generation seed (also keys the seeded prompt).
    pub seed: u64,
    /// Flat weight file; overrides `seed` for the model when set.
    pub weights: Option<PathBuf>,
    pub block_size: usize,
    pub sparsity: f64,
    pub n_min: usize,
    pub n_local: usize,
    pub rectify_freq: usize,
    pub dense_layers: usize,
    /// Prompt as hex-encoded bytes.
    pub prompt_hex: Option<String>,
    /// Prompt read as raw bytes from a file.
    pub prompt_file: Option<PathBuf>,
    /// Length of the seeded random prompt used when no other source is set.
    pub prefix_len: usize,
    pub max_steps: usize,
    pub mode: DecodeMode,
    /// Explicit drift probe steps; `None` uses powers of two plus every
    /// post-rectification step.
    pub probes: Option<Vec<usize>>,
    /// Drift sweep over the rectification-frequency × sparsity grid.
    pub sweep: bool,
    pub bench_prefixes: Vec<usize>,
    pub bench_steps: usize,
    pub out: Option<PathBuf>,
}

impl Default for RunSpec {
    fn default() -> Self {
        let cfg = SparsityConfig::default();
        Self {
            seed: ModelConfig::reference().seed,
            weights: None,
            block_size: cfg.block_size,
            sparsity: cfg.sparsity,
            n_min: cfg.n_min,
            n_local: cfg.n_local,
            rectify_freq: cfg.rectify_freq,
            dense_layers: cfg.dense_layers,
            prompt_hex: None,
            prompt_file: None,
            prefix_len: 512,
            max_steps: 256,
            mode: DecodeMode::Resa,
            probes: None,
            sweep: false,
            bench_prefixes: vec![1024, 4096, 8192],
            bench_steps: 64,
            out: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PromptSource {
    Hex(String),
    File(PathBuf),
    Seeded { seed: u64, len: usize },
}

/// `len` byte tokens drawn from the seeded prompt stream.
pub fn seeded_prompt(seed: u64, len: usize) -> Vec<u32> {
    let stream = SplitMixStream::new(seed, "prompt");
    (0..len as u64).map(|i| (stream.at(i) % 256) as u32).collect()
}

impl RunSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ResaError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn sparsity_config(&self) -> SparsityConfig {
        SparsityConfig {
            block_size: self.block_size,
            sparsity: self.sparsity,
            n_min: self.n_min,
            n_local: self.n_local,
            rectify_freq: self.rectify_freq,
            dense_layers: self.dense_layers,
        }
    }

    pub fn prompt_source(&self) -> Result<PromptSource> {
        match (&self.prompt_hex, &self.prompt_file) {
            (Some(_), Some(_)) => Err(ResaError::InvalidConfig(
                "give at most one of prompt_hex and prompt_file".into(),
            )),
            (Some(hex), None) => Ok(PromptSource::Hex(hex.clone())),
            (None, Some(path)) => Ok(PromptSource::File(path.clone())),
            (None, None) => Ok(PromptSource::Seeded {
                seed: self.seed,
                len: self.prefix_len,
            }),
        }
    }

    pub fn probe_schedule(&self) -> ProbeSchedule {
        match &self.probes {
            Some(steps) => ProbeSchedule::AtSteps(steps.clone()),
            None => ProbeSchedule::Default,
        }
    }

    /// Checks everything that can be checked without running a model.
    pub fn validate(&self) -> Result<()> {
        self.sparsity_config().validate()?;
        self.prompt_source()?;
        if self.max_steps == 0 {
            return Err(ResaError::InvalidConfig("max_steps must be at least 1".into()));
        }
        if let Some(path) = self.weights.as_ref().or(self.prompt_file.as_ref()) {
            if !path.exists() {
                return Err(ResaError::InvalidConfig(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn load_model(&self) -> Result<Model> {
        let weights = match &self.weights {
            Some(path) => ModelWeights::read_from(std::io::BufReader::new(fs::File::open(path)?))?,
            None => crate::model::generate_weights(&ModelConfig {
                seed: self.seed,
                ..ModelConfig::reference()
            })?,
        };
        Model::new(weights)
    }

    pub fn load_prompt(&self) -> Result<Vec<u32>> {
        let tokens = match self.prompt_source()? {
            PromptSource::Hex(text) => hex::decode(text.trim())
                .map_err(|e| ResaError::InvalidConfig(format!("prompt hex: {e}")))?
                .into_iter()
                .map(u32::from)
                .collect(),
            PromptSource::File(path) => fs::read(path)?.into_iter().map(u32::from).collect(),
            PromptSource::Seeded { seed, len } => seeded_prompt(seed, len),
        };
        if tokens.is_empty() {
            return Err(ResaError::EmptyPrompt);
        }
        Ok(tokens)
    }
}

/// One decode run's summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub mode: DecodeMode,
    pub block_size: usize,
    pub sparsity: f64,
    pub rectify_freq: usize,
    pub max_steps: usize,
    pub prefix_len: usize,
    pub tokens_per_sec: f64,
    pub mem_ratio_measured: f64,
    pub mem_ratio_predicted: f64,
    /// Absent when the run was not probed against the dense oracle.
    pub final_drift_max_abs: Option<f64>,
    pub tokens_emitted: usize,
}

pub fn run_id(spec: &RunSpec, mode: DecodeMode, prefix_len: usize) -> String {
    format!(
        "{mode}-b{}-s{}-f{}-p{prefix_len}-t{}-seed{}",
        spec.block_size, spec.sparsity, spec.rectify_freq, spec.max_steps, spec.seed
    )
}
