use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

use super::NnError;

/// How an entry is initialized and whether the optimizer may touch it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamKind {
    /// He-uniform on `±sqrt(6 / fan_in)`.
    Weight {
        fan_in: usize,
    },
    Bias,
    Slope,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
    /// Trainable, starts at zero. Used for the last scale of a residual
    /// branch so every group begins as its skip path.
    Zeroed,
}

impl ParamKind {
    /// Running statistics are buffers: updated by forward passes, never by
    /// the optimizer.
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub kind: ParamKind,
    pub trainable: bool,
    /// Frozen entries never change again, not even running statistics.
    pub frozen: bool,
}

/// Named parameters of a model, keyed by layer path (`spc.g0.b1.conv.w`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamRegistry {
    entries: BTreeMap<String, ParamEntry>,
}

pub const PRELU_INIT: f64 = 0.25;

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<(), NnError> {
        if self.entries.contains_key(name) {
            return Err(NnError::Config(format!("duplicate parameter name {name}")));
        }
        let value = match kind {
            ParamKind::Slope => Tensor::full(shape, PRELU_INIT),
            ParamKind::BnScale | ParamKind::RunningVar => Tensor::full(shape, 1.0),
            _ => Tensor::zeros(shape),
        };
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                kind,
                trainable: !kind.is_buffer(),
                frozen: false,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, NnError> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), NnError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        if e.frozen {
            return Err(NnError::Usage(format!("{name} is frozen")));
        }
        if e.value.shape() != value.shape() {
            return Err(NnError::Config(format!(
                "{name}: shape {:?} does not match {:?}",
                value.shape(),
                e.value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    /// Replaces a value regardless of the frozen flag. Used when restoring
    /// a checkpoint, never by training code.
    pub(crate) fn overwrite(&mut self, name: &str, value: Tensor) -> Result<(), NnError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        if e.value.shape() != value.shape() {
            return Err(NnError::Config(format!(
                "{name}: shape {:?} does not match {:?}",
                value.shape(),
                e.value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    /// Changes how `name` is initialized and resets its value to match.
    pub fn set_kind(&mut self, name: &str, kind: ParamKind) -> Result<(), NnError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        if e.frozen {
            return Err(NnError::Usage(format!("{name} is frozen")));
        }
        let shape = e.value.shape().to_vec();
        e.value = match kind {
            ParamKind::Slope => Tensor::full(&shape, PRELU_INIT),
            ParamKind::BnScale | ParamKind::RunningVar => Tensor::full(&shape, 1.0),
            _ => Tensor::zeros(&shape),
        };
        e.kind = kind;
        e.trainable = !kind.is_buffer();
        Ok(())
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    /// Marks every entry under `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (k, e) in self.entries.iter_mut() {
            if k.starts_with(prefix) {
                e.trainable = false;
                e.frozen = true;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Mutable views of the entries the optimizer is allowed to update.
    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries
            .iter_mut()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.as_str(), &mut e.value))
    }

    pub fn parameter_count(&self, trainable_only: bool) -> usize {
        self.entries
            .values()
            .filter(|e| !e.kind.is_buffer() && (e.trainable || !trainable_only))
            .map(|e| e.value.len())
            .sum()
    }

    /// (Re)initializes unfrozen entries under `prefix` from `seed`. Each entry draws
    /// from its own stream keyed by name, so the result does not depend on
    /// which other entries exist.
    pub fn init_params(&mut self, prefix: &str, seed: u64) {
        for (name, e) in self.entries.iter_mut() {
            if !name.starts_with(prefix) || e.frozen {
                continue;
            }
            let shape = e.value.shape().to_vec();
            e.value = match e.kind {
                ParamKind::Weight { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let mut rng = entry_rng(seed, name);
                    Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
                }
                ParamKind::Slope => Tensor::full(&shape, PRELU_INIT),
                ParamKind::BnScale | ParamKind::RunningVar => Tensor::full(&shape, 1.0),
                ParamKind::Bias | ParamKind::BnShift | ParamKind::RunningMean | ParamKind::Zeroed => {
                    Tensor::zeros(&shape)
                }
            };
        }
    }
}

fn entry_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
