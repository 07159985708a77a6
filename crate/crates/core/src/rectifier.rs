//! Channel and spatial feature rectification.
//!
//! Given an encoded feature map `f` (`N×C×H×W`, viewed per sample as a
//! `C×HW` matrix), two residual stacks predict rectification matrices
//! `M_c` (`C×C`) and `M_s` (`HW×HW`) from `f` and its self-similarity.
//! The rectified features are `f̂_c = M_c·f` and `f̂_s = f·M_s`; `f̂_c` is
//! made left-right symmetric by flipped fusion, and the selected features
//! are concatenated and fused by a 1×1 {Conv-PReLU-BN} block.

use serde::{Deserialize, Serialize};

use crate::nn::{BnConfig, ConvBlock, NnError, ParamRegistry, ResidualStack, Result, Session};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Floor applied to vector norms inside cosine similarities.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Encoded,
    Rectified,
}

/// A batch of `N×C×H×W` features outside of any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub provenance: Provenance,
}

impl FeatureMap {
    pub fn new(values: Tensor, provenance: Provenance) -> std::result::Result<Self, TensorError> {
        if values.shape().len() != 4 {
            return Err(TensorError::Usage(format!(
                "feature map must be N×C×H×W, got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(TensorError::Domain {
                op: "feature_map",
                detail: "non-finite feature value".into(),
            });
        }
        Ok(Self { values, provenance })
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    /// One flattened row of `C·H·W` values per sample.
    pub fn flattened(&self) -> Tensor {
        let n = self.batch();
        let d = self.values.len() / n;
        self.values.reshape(&[n, d]).expect("same element count")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RectifierConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Residual groups per stack.
    pub groups: usize,
    /// Units per residual group.
    pub units_per_group: usize,
    pub chn_hidden: usize,
    pub spc_hidden: usize,
    pub spc_kernel: usize,
    /// Feed self-similarity matrices to both stacks.
    pub self_similarity: bool,
    /// Symmetrize the channel-rectified feature.
    pub flipped_fusion: bool,
    pub fuse_original: bool,
    pub fuse_channel: bool,
    pub fuse_spatial: bool,
    pub bn: BnConfig,
}

impl Default for RectifierConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            height: 7,
            width: 7,
            groups: 3,
            units_per_group: 3,
            chn_hidden: 32,
            spc_hidden: 16,
            spc_kernel: 3,
            self_similarity: true,
            flipped_fusion: true,
            fuse_original: true,
            fuse_channel: true,
            fuse_spatial: true,
            bn: BnConfig::default(),
        }
    }
}

impl RectifierConfig {
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn fused_inputs(&self) -> usize {
        [self.fuse_spatial, self.fuse_channel, self.fuse_original]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(NnError::Config("feature dimensions must be positive".into()));
        }
        if self.fused_inputs() == 0 {
            return Err(NnError::Config("fusion needs at least one input feature".into()));
        }
        if self.spc_kernel.is_multiple_of(2) {
            return Err(NnError::Config("spatial kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Spatial (`N×HW×HW`) and channel (`N×C×C`) cosine self-similarities.
#[derive(Debug, Clone, Copy)]
pub struct SelfSimilarity {
    pub spatial: Var,
    pub channel: Var,
}

fn dims(tape: &Tape, f: Var) -> Result<[usize; 4]> {
    match *tape.shape(f) {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref other => Err(NnError::Tensor(TensorError::Usage(format!(
            "feature map must be N×C×H×W, got {other:?}"
        )))),
    }
}

/// `S^s[i,j]` is the cosine between the C-vectors at spatial positions `i`
/// and `j`; `S^c[m,n]` the cosine between the HW-vectors of channels `m`
/// and `n`.
pub fn self_similarity(tape: &mut Tape, f: Var) -> Result<SelfSimilarity> {
    let [n, c, h, w] = dims(tape, f)?;
    let flat = tape.reshape(f, &[n, c, h * w])?;
    let cols = tape.l2_normalize(flat, 1, COSINE_EPS)?;
    let cols_t = tape.transpose_last(cols)?;
    let spatial = tape.matmul(cols_t, cols)?;
    let rows = tape.l2_normalize(flat, 2, COSINE_EPS)?;
    let rows_t = tape.transpose_last(rows)?;
    let channel = tape.matmul(rows, rows_t)?;
    Ok(SelfSimilarity { spatial, channel })
}

/// `f̂_c = M_c ⊗ f` on the `C×HW` layout, returned as `N×C×H×W`.
pub fn apply_channel(tape: &mut Tape, m_c: Var, f: Var) -> Result<Var> {
    let [n, c, h, w] = dims(tape, f)?;
    let flat = tape.reshape(f, &[n, c, h * w])?;
    let out = tape.matmul(m_c, flat)?;
    Ok(tape.reshape(out, &[n, c, h, w])?)
}

/// `f̂_s = f ⊗ M_s` on the `C×HW` layout, returned as `N×C×H×W`.
pub fn apply_spatial(tape: &mut Tape, f: Var, m_s: Var) -> Result<Var> {
    let [n, c, h, w] = dims(tape, f)?;
    let flat = tape.reshape(f, &[n, c, h * w])?;
    let out = tape.matmul(flat, m_s)?;
    Ok(tape.reshape(out, &[n, c, h, w])?)
}

/// `½(x + flip_W(x))`; the result is exactly invariant under a horizontal
/// flip because each output is the same pair of values summed.
pub fn flipped_fusion(tape: &mut Tape, x: Var) -> Result<Var> {
    let axis = tape
        .shape(x)
        .len()
        .checked_sub(1)
        .ok_or_else(|| NnError::Tensor(TensorError::Usage("flipped fusion of a scalar".into())))?;
    let flipped = tape.flip(x, axis)?;
    let sum = tape.add(x, flipped)?;
    Ok(tape.scale(sum, 0.5))
}

/// Everything produced by one rectifier pass.
#[derive(Debug, Clone, Copy)]
pub struct RectifierOutput {
    pub rectified: Var,
    pub m_c: Option<Var>,
    pub m_s: Option<Var>,
    pub f_c: Option<Var>,
    pub f_s: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rectifier {
    pub config: RectifierConfig,
    pub chn: Option<ResidualStack>,
    pub spc: Option<ResidualStack>,
    pub fuse: ConvBlock,
}

impl Rectifier {
    pub fn new(prefix: &str, config: RectifierConfig) -> Result<Self> {
        config.validate()?;
        let (c, hw) = (config.channels, config.spatial());
        let extra_c = if config.self_similarity { c } else { 0 };
        let extra_hw = if config.self_similarity { hw } else { 0 };
        let chn = config
            .fuse_channel
            .then(|| {
                ResidualStack::linear(
                    &format!("{prefix}.chn"),
                    hw + extra_c,
                    config.chn_hidden,
                    c,
                    config.groups,
                    config.units_per_group,
                )
            })
            .transpose()?;
        let spc = config
            .fuse_spatial
            .then(|| {
                ResidualStack::conv(
                    &format!("{prefix}.spc"),
                    c + extra_hw,
                    config.spc_hidden,
                    hw,
                    config.groups,
                    config.units_per_group,
                    config.spc_kernel,
                    config.bn,
                )
            })
            .transpose()?;
        let fuse = ConvBlock::new(&format!("{prefix}.fuse"), config.fused_inputs() * c, c, 1, 1, config.bn);
        Ok(Self { config, chn, spc, fuse })
    }

    pub fn register(&self, reg: &mut ParamRegistry) -> Result<()> {
        if let Some(s) = &self.chn {
            s.register(reg)?;
        }
        if let Some(s) = &self.spc {
            s.register(reg)?;
        }
        self.fuse.register(reg)
    }

    fn check_input(&self, tape: &Tape, f: Var) -> Result<[usize; 4]> {
        let d = dims(tape, f)?;
        let cfg = &self.config;
        if d[1..] != [cfg.channels, cfg.height, cfg.width] {
            return Err(NnError::Config(format!(
                "rectifier configured for {}×{}×{}, input is {:?}",
                cfg.channels,
                cfg.height,
                cfg.width,
                &d[1..]
            )));
        }
        Ok(d)
    }

    /// `f^c`: each channel row of `f` extended by its row of `S^c`.
    pub fn channel_input(&self, tape: &mut Tape, f: Var, sim: Option<&SelfSimilarity>) -> Result<Var> {
        let [n, c, h, w] = self.check_input(tape, f)?;
        let flat = tape.reshape(f, &[n, c, h * w])?;
        match (self.config.self_similarity, sim) {
            (true, Some(s)) => Ok(tape.concat(&[flat, s.channel], 2)?),
            (true, None) => Err(NnError::Usage("self-similarity required".into())),
            (false, _) => Ok(flat),
        }
    }

    /// `f^s`: `f` extended by `S^s` laid out as HW extra channels.
    pub fn spatial_input(&self, tape: &mut Tape, f: Var, sim: Option<&SelfSimilarity>) -> Result<Var> {
        let [n, _, h, w] = self.check_input(tape, f)?;
        match (self.config.self_similarity, sim) {
            (true, Some(s)) => {
                let maps = tape.reshape(s.spatial, &[n, h * w, h, w])?;
                Ok(tape.concat(&[f, maps], 1)?)
            }
            (true, None) => Err(NnError::Usage("self-similarity required".into())),
            (false, _) => Ok(f),
        }
    }

    /// ChnRec: predicts `M_c` and returns it with the (flip-fused) `f̂_c`.
    pub fn chn_rec(&self, s: &mut Session, f: Var, sim: Option<&SelfSimilarity>) -> Result<(Var, Var)> {
        let stack = self
            .chn
            .as_ref()
            .ok_or_else(|| NnError::Config("channel rectification disabled".into()))?;
        let [n, c, _, _] = self.check_input(&s.tape, f)?;
        let fc = self.channel_input(&mut s.tape, f, sim)?;
        let width = s.tape.shape(fc)[2];
        let rows = s.tape.reshape(fc, &[n * c, width])?;
        let m = stack.forward(s, rows)?;
        let m_c = s.tape.reshape(m, &[n, c, c])?;
        let mut out = apply_channel(&mut s.tape, m_c, f)?;
        if self.config.flipped_fusion {
            out = flipped_fusion(&mut s.tape, out)?;
        }
        Ok((m_c, out))
    }

    /// SpcRec: predicts `M_s` and returns it with `f̂_s`.
    pub fn spc_rec(&self, s: &mut Session, f: Var, sim: Option<&SelfSimilarity>) -> Result<(Var, Var)> {
        let stack = self
            .spc
            .as_ref()
            .ok_or_else(|| NnError::Config("spatial rectification disabled".into()))?;
        let [n, _, h, w] = self.check_input(&s.tape, f)?;
        let fs = self.spatial_input(&mut s.tape, f, sim)?;
        let maps = stack.forward(s, fs)?;
        let m_s = s.tape.reshape(maps, &[n, h * w, h * w])?;
        let out = apply_spatial(&mut s.tape, f, m_s)?;
        Ok((m_s, out))
    }

    /// Concatenates `[f̂_s, f̂_c, f]` (whichever are enabled) along channels
    /// and applies the fusion block.
    pub fn fuse(&self, s: &mut Session, f: Var, f_c: Option<Var>, f_s: Option<Var>) -> Result<Var> {
        let [n, c, h, w] = self.check_input(&s.tape, f)?;
        let mut parts = Vec::with_capacity(3);
        for (enabled, v) in [
            (self.config.fuse_spatial, f_s),
            (self.config.fuse_channel, f_c),
            (self.config.fuse_original, Some(f)),
        ] {
            if enabled {
                let v = v.ok_or_else(|| NnError::Usage("missing fusion input".into()))?;
                if s.tape.shape(v) != [n, c, h, w] {
                    return Err(NnError::Tensor(TensorError::Shape {
                        op: "fuse",
                        lhs: vec![n, c, h, w],
                        rhs: s.tape.shape(v).to_vec(),
                    }));
                }
                parts.push(v);
            }
        }
        let cat = s.tape.concat(&parts, 1)?;
        self.fuse.forward(s, cat)
    }

    pub fn forward(&self, s: &mut Session, f: Var) -> Result<RectifierOutput> {
        self.check_input(&s.tape, f)?;
        let sim = if self.config.self_similarity {
            Some(self_similarity(&mut s.tape, f)?)
        } else {
            None
        };
        let (m_c, f_c) = match self.chn {
            Some(_) => {
                let (m, o) = self.chn_rec(s, f, sim.as_ref())?;
                (Some(m), Some(o))
            }
            None => (None, None),
        };
        let (m_s, f_s) = match self.spc {
            Some(_) => {
                let (m, o) = self.spc_rec(s, f, sim.as_ref())?;
                (Some(m), Some(o))
            }
            None => (None, None),
        };
        let rectified = self.fuse(s, f, f_c, f_s)?;
        Ok(RectifierOutput {
            rectified,
            m_c,
            m_s,
            f_c,
            f_s,
        })
    }
}
