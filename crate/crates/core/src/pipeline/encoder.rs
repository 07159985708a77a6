use serde::{Deserialize, Serialize};

use crate::losses::HeadConfig;
use crate::nn::{BnConfig, ConvBlock, NnError, ParamRegistry, Result, Session};
use crate::tensor::Var;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output channels of each {Conv-PReLU-BN} stage.
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    /// Pretraining stops once train accuracy reaches this.
    pub target_accuracy: f64,
    /// Pretraining fails if train accuracy ends below this.
    pub min_accuracy: f64,
    pub head: HeadConfig,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32, 32],
            strides: vec![2, 2, 2, 1],
            kernel: 3,
            pretrain_epochs: 12,
            pretrain_lr: 0.003,
            pretrain_batch: 32,
            target_accuracy: 0.95,
            min_accuracy: 0.6,
            head: HeadConfig::default(),
            seed: 11,
        }
    }
}

/// Strided {Conv-PReLU-BN} stages mapping `1×S×S` images to `C×H×W` features.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub stages: Vec<ConvBlock>,
    pub image_size: usize,
}

impl Encoder {
    pub fn new(prefix: &str, config: &EncoderConfig, image_size: usize, bn: BnConfig) -> Result<Self> {
        if config.widths.is_empty() || config.widths.len() != config.strides.len() {
            return Err(NnError::Config(format!(
                "encoder needs one stride per stage, got {} widths and {} strides",
                config.widths.len(),
                config.strides.len()
            )));
        }
        if config.kernel.is_multiple_of(2) || config.strides.contains(&0) || config.widths.contains(&0) {
            return Err(NnError::Config(
                "encoder kernel must be odd; strides and widths positive".into(),
            ));
        }
        let mut c_in = 1;
        let stages = config
            .widths
            .iter()
            .zip(&config.strides)
            .enumerate()
            .map(|(i, (&w, &stride))| {
                let b = ConvBlock::new(&format!("{prefix}.s{i}"), c_in, w, config.kernel, stride, bn);
                c_in = w;
                b
            })
            .collect();
        Ok(Self { stages, image_size })
    }

    /// `(C, H, W)` of the features.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        let mut side = self.image_size;
        for s in &self.stages {
            let pad = s.conv.padding;
            side = (side + 2 * pad - s.conv.kernel) / s.conv.stride + 1;
        }
        (self.stages.last().map_or(1, |s| s.c_out()), side, side)
    }

    pub fn register(&self, reg: &mut ParamRegistry) -> Result<()> {
        self.stages.iter().try_for_each(|s| s.register(reg))
    }

    pub fn forward(&self, s: &mut Session, images: Var) -> Result<Var> {
        let shape = s.tape.shape(images);
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.image_size || shape[3] != self.image_size {
            return Err(NnError::Config(format!(
                "encoder expects N×1×{0}×{0} images, got {shape:?}",
                self.image_size
            )));
        }
        let mut x = images;
        for st in &self.stages {
            x = st.forward(s, x)?;
        }
        Ok(x)
    }
}
