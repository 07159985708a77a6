//! The run configuration: one JSON document covering every module.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evaluator::EvalConfig;
use crate::pipeline::{io_err, EncoderConfig, PipelineError, Result, TrainConfig};
use crate::rectifier::RectifierConfig;
use crate::synth::DataConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub rectifier: RectifierConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

impl RunConfig {
    /// Parses a config document, rejecting unknown keys.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|e| match e {
            PipelineError::Config(m) => invalid(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(io_err(path))
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> [u8; 32] {
        let text = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&text).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    /// Checks every section, collecting all violations into one message.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if let Err(e) = self.data.validate() {
            errors.push(format!("data: {e}"));
        }
        if let Err(e) = self.rectifier.validate() {
            errors.push(format!("rectifier: {e}"));
        }
        if let Err(e) = self.train.weights.validate() {
            errors.push(format!("train.weights: {e}"));
        }
        if let Err(e) = self.train.head.validate() {
            errors.push(format!("train.head: {e}"));
        }
        if let Err(e) = self.encoder.head.validate() {
            errors.push(format!("encoder.head: {e}"));
        }
        let t = &self.train;
        if t.batch_pairs < 2 {
            errors.push("train.batch_pairs: must be at least 2".into());
        }
        if t.embedding_dim == 0 {
            errors.push("train.embedding_dim: must be positive".into());
        }
        if !(t.adam.lr > 0.0 && t.adam.lr.is_finite()) {
            errors.push("train.adam.lr: must be positive".into());
        }
        if !(t.triplet_margin >= 0.0 && t.triplet_margin.is_finite()) {
            errors.push("train.triplet_margin: must be non-negative".into());
        }
        let e = &self.encoder;
        if e.pretrain_batch < 2 {
            errors.push("encoder.pretrain_batch: must be at least 2".into());
        }
        if !(e.pretrain_lr > 0.0 && e.pretrain_lr.is_finite()) {
            errors.push("encoder.pretrain_lr: must be positive".into());
        }
        if !(0.0..=1.0).contains(&e.min_accuracy) || !(0.0..=1.0).contains(&e.target_accuracy) {
            errors.push("encoder accuracies must lie in [0, 1]".into());
        }
        if self.eval.pairs < 4 {
            errors.push("eval.pairs: need at least 4".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(invalid(errors.join("; ")))
        }
    }

    /// Applies `key.path=value` overrides. Values parse as JSON and fall
    /// back to plain strings; unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| invalid(format!("override {o:?} is not key=value")))?;
            let value: serde_json::Value =
                serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut node = &mut doc;
            for part in key.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| invalid(format!("unknown config key {key}")))?;
            }
            *node = value;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Ablation variants of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationTag {
    /// No self-similarity input.
    A,
    /// No flipped fusion.
    B,
    /// Channel-rectified feature left out of the fusion.
    C1,
    /// Spatially rectified feature left out of the fusion.
    C2,
    /// Original feature left out of the fusion.
    C3,
    /// Neither identity loss.
    D1,
    /// First identity loss only.
    D2,
    /// Second identity loss only.
    D3,
    /// ArcFace head instead of CosFace.
    E,
}

impl AblationTag {
    pub const ALL: [AblationTag; 9] = [
        AblationTag::A,
        AblationTag::B,
        AblationTag::C1,
        AblationTag::C2,
        AblationTag::C3,
        AblationTag::D1,
        AblationTag::D2,
        AblationTag::D3,
        AblationTag::E,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationTag::A => "A",
            AblationTag::B => "B",
            AblationTag::C1 => "C1",
            AblationTag::C2 => "C2",
            AblationTag::C3 => "C3",
            AblationTag::D1 => "D1",
            AblationTag::D2 => "D2",
            AblationTag::D3 => "D3",
            AblationTag::E => "E",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name().eq_ignore_ascii_case(s))
    }

    /// `config` with this variant's component or loss removed.
    pub fn apply(self, config: &RunConfig) -> RunConfig {
        let mut c = config.clone();
        let (r, w) = (&mut c.rectifier, &mut c.train.weights);
        match self {
            AblationTag::A => r.self_similarity = false,
            AblationTag::B => r.flipped_fusion = false,
            AblationTag::C1 => r.fuse_channel = false,
            AblationTag::C2 => r.fuse_spatial = false,
            AblationTag::C3 => r.fuse_original = false,
            AblationTag::D1 => (w.id1, w.id2) = (0.0, 0.0),
            AblationTag::D2 => w.id2 = 0.0,
            AblationTag::D3 => w.id1 = 0.0,
            AblationTag::E => c.train.head = crate::losses::HeadConfig::arcface(),
        }
        c
    }
}

impl RunConfig {
    /// Derives every seed (data, encoder, training, evaluation) from one.
    pub fn with_seed(&self, seed: u64) -> Self {
        use crate::synth::derive_seed;
        let mut c = self.clone();
        c.data.seed = derive_seed(seed, 0);
        c.encoder.seed = derive_seed(seed, 1);
        c.train.seed = derive_seed(seed, 2);
        c.eval.seed = derive_seed(seed, 3);
        c
    }
}
