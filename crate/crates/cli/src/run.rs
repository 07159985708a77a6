//! Config resolution, run directories and exit codes.

use std::fmt;
use std::path::{Path, PathBuf};

use ffr_core::config::{AblationTag, RunConfig};
use ffr_core::nn::NnError;
use ffr_core::pipeline::{ModelState, PipelineError};
use ffr_core::synth::SynthError;
use ffr_core::tensor::TensorError;

use crate::Common;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_IO: u8 = 5;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    /// A check that ran to completion and failed.
    Failed(String),
    Pipeline(PipelineError),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Failed(m) => write!(f, "{m}"),
            CliError::Pipeline(e) => write!(f, "{e}"),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failed(_) => EXIT_NUMERIC,
            CliError::Pipeline(e) => match e {
                PipelineError::NonFinite { .. } => EXIT_NUMERIC,
                PipelineError::Nn(NnError::Tensor(TensorError::Domain { .. })) => EXIT_NUMERIC,
                PipelineError::Io { .. } | PipelineError::Synth(SynthError::Io { .. }) => EXIT_IO,
                _ => EXIT_VALIDATION,
            },
        }
    }
}

pub fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Pipeline(PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// The config file (or defaults), then `--seed`, then `--set` overrides,
/// then the ablation tag.
pub fn resolve_config(common: &Common, tag: Option<AblationTag>) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg = cfg.with_overrides(&common.set)?;
    if let Some(t) = tag {
        cfg = t.apply(&cfg);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Outputs of one config, under `<out>/<first 16 hex digits of its hash>`.
pub struct RunDir {
    pub path: PathBuf,
    pub config: RunConfig,
    pub hash: String,
}

impl RunDir {
    /// Creates the directory and writes the effective config into it.
    pub fn open(out: &Path, config: RunConfig) -> Result<Self, CliError> {
        let hash = config.hash_hex();
        let path = out.join(&hash[..16]);
        std::fs::create_dir_all(&path).map_err(|e| io_error(&path, e))?;
        config.save(&path.join("config.json"))?;
        Ok(Self { path, config, hash })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.file("model.ffrk")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.file("pretrained.ffrk")
    }

    /// Writes `bytes` through a temporary file so readers never see a
    /// partial artifact.
    pub fn write_atomic(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.file(name);
        let tmp = self.file(&format!(".{name}.tmp"));
        std::fs::write(&tmp, bytes).map_err(|e| io_error(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| io_error(&path, e))?;
        Ok(path)
    }

    pub fn save_state(&self, state: &ModelState, name: &str) -> Result<PathBuf, CliError> {
        let data = ffr_core::pipeline::CheckpointData::from_state(state);
        let bytes = ffr_core::pipeline::encode_checkpoint(&data)?;
        self.write_atomic(name, &bytes)
    }

    pub fn write_json(&self, name: &str, value: &serde_json::Value) -> Result<PathBuf, CliError> {
        let text = serde_json::to_string_pretty(value).expect("json values serialize");
        self.write_atomic(name, format!("{text}\n").as_bytes())
    }

    /// The trained model: `checkpoint` if given, else the run's own.
    pub fn load_trained(&self, checkpoint: Option<&Path>, force: bool) -> Result<ModelState, CliError> {
        let path = checkpoint.map_or_else(|| self.checkpoint(), Path::to_path_buf);
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "no checkpoint at {}; run `ffr train` with the same config first",
                path.display()
            )));
        }
        Ok(ModelState::load(&path, &self.config, force)?)
    }
}
