//! Effective configuration of each subcommand.
//!
//! Precedence is defaults, then the `--config` JSON file, then flags. The
//! effective value is echoed as `config.json` in the run directory and can
//! be passed back with `--config` to repeat the run.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use expnet::csp::CspConfig;
use expnet::data::GenSpec;
use expnet::embed::TsneConfig;
use expnet::model::NetSpec;
use expnet::pipeline::EvalMode;
use expnet::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            let value = serde_json::from_str(&text)
                .map_err(expnet::Error::from)
                .with_context(|| format!("parsing config {}", p.display()))?;
            Ok(value)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub sessions: u32,
    pub gen: GenSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            sessions: 3,
            gen: GenSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub data: PathBuf,
    /// Separate test set; otherwise `test_subjects` are held out.
    pub test_data: Option<PathBuf>,
    pub session: u32,
    pub test_subjects: Vec<u32>,
    pub seed: u64,
    pub net: NetSpec,
    pub train: TrainConfig,
    pub eval_mode: EvalMode,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            data: PathBuf::new(),
            test_data: None,
            session: 1,
            test_subjects: Vec::new(),
            seed: 0,
            net: NetSpec::default(),
            train: TrainConfig::default(),
            eval_mode: EvalMode::Frozen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionsConfig {
    pub data: PathBuf,
    pub sessions: u32,
    pub test_subjects: Vec<u32>,
    pub seed: u64,
    pub net: NetSpec,
    pub train: TrainConfig,
    /// Partial training configs merged over `train`, one per session.
    pub overrides: Vec<serde_json::Value>,
    pub eval_mode: EvalMode,
    pub with_control: bool,
    pub with_csp: bool,
    pub csp: CspConfig,
}

impl Default for SessionsConfig {
    fn default() -> Self {
        SessionsConfig {
            data: PathBuf::new(),
            sessions: 3,
            test_subjects: Vec::new(),
            seed: 0,
            net: NetSpec::default(),
            train: TrainConfig::default(),
            overrides: Vec::new(),
            eval_mode: EvalMode::Frozen,
            with_control: false,
            with_csp: false,
            csp: CspConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// Evaluate only these subjects (all when empty).
    pub subjects: Vec<u32>,
    pub eval_mode: EvalMode,
    /// Learning rate of adaptive updates (the checkpoint's when absent).
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CspRunConfig {
    pub data: PathBuf,
    pub sessions: u32,
    pub test_subjects: Vec<u32>,
    pub csp: CspConfig,
}

impl Default for CspRunConfig {
    fn default() -> Self {
        CspRunConfig {
            data: PathBuf::new(),
            sessions: 3,
            test_subjects: Vec::new(),
            csp: CspConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub subjects: Vec<u32>,
    pub tsne: TsneConfig,
}

/// Architecture flags shared by `train` and `sessions`.
#[derive(Debug, Clone, Default, Args)]
pub struct NetFlags {
    /// Initial widths of the three convolutions, e.g. `56 112 224`
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub kernel_time: Option<usize>,
    #[arg(long)]
    pub linear_width: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

impl NetFlags {
    pub fn apply(&self, net: &mut NetSpec) {
        if let Some(w) = &self.widths {
            net.conv_widths = [w[0], w[1], w[2]];
        }
        set(&mut net.kernel_time, self.kernel_time);
        set(&mut net.linear_width, self.linear_width);
        set(&mut net.dropout_p, self.dropout);
    }
}

/// Training flags shared by `train` and `sessions`.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Epochs of both the sparse and the continual stage
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub sparse_epochs: Option<usize>,
    #[arg(long)]
    pub continual_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// L1 weight of the sparse stage
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Loss threshold that triggers expansion (default 0.6·ln K)
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_expansions: Option<usize>,
    /// Channels added per expansion as a fraction of the current width
    #[arg(long)]
    pub expansion_fraction: Option<f64>,
    #[arg(long)]
    pub prune_epsilon: Option<f64>,
    #[arg(long)]
    pub eval_mode: Option<EvalModeArg>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum EvalModeArg {
    Frozen,
    Adaptive,
}

impl From<EvalModeArg> for EvalMode {
    fn from(m: EvalModeArg) -> Self {
        match m {
            EvalModeArg::Frozen => EvalMode::Frozen,
            EvalModeArg::Adaptive => EvalMode::Adaptive,
        }
    }
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut TrainConfig, eval_mode: &mut EvalMode) {
        set(&mut cfg.sparse_epochs, self.epochs);
        set(&mut cfg.continual_epochs, self.epochs);
        set(&mut cfg.sparse_epochs, self.sparse_epochs);
        set(&mut cfg.continual_epochs, self.continual_epochs);
        set(&mut cfg.lr, self.lr);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.loss.lambda, self.lambda);
        if self.tau.is_some() {
            cfg.trigger.tau = self.tau;
        }
        set(&mut cfg.trigger.patience, self.patience);
        set(&mut cfg.trigger.max_expansions, self.max_expansions);
        set(&mut cfg.expansion.fraction, self.expansion_fraction);
        set(&mut cfg.prune_epsilon, self.prune_epsilon);
        if let Some(m) = self.eval_mode {
            *eval_mode = m.into();
        }
    }
}

pub fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
