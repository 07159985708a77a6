//! Procedural identity images with simulated lower-face occlusion.
//!
//! Each identity is a horizontally symmetric arrangement of Gaussian blobs
//! (eyes, brows, nose, mouth) on a face oval, plus a low-frequency symmetric
//! texture. Renders add a small translation and pixel noise. Masks cover the
//! lower face with a solid, striped or noise fill.

mod external;
mod manifest;
mod pgm;

pub use external::load_pair_directory;
pub use manifest::{read_manifest, write_manifest, ManifestRow};
pub use pgm::{decode_pgm, encode_pgm, encode_pgm_annotated, read_pgm, write_pgm};

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SynthError>;

pub const DEFAULT_SIZE: usize = 56;
/// Mask rows start at this fraction of the image height.
pub const MASK_TOP: f64 = 0.55;
pub const MASK_LEFT: f64 = 0.15;
pub const MASK_RIGHT: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskType {
    Solid,
    Striped,
    Noise,
}

impl MaskType {
    pub const ALL: [MaskType; 3] = [MaskType::Solid, MaskType::Striped, MaskType::Noise];

    pub fn name(self) -> &'static str {
        match self {
            MaskType::Solid => "solid",
            MaskType::Striped => "striped",
            MaskType::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_size: usize,
    pub train_identities: usize,
    pub train_renders: usize,
    pub eval_identities: usize,
    pub eval_renders: usize,
    /// Largest translation of a render, in pixels.
    pub max_shift: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: DEFAULT_SIZE,
            train_identities: 20,
            train_renders: 40,
            eval_identities: 10,
            eval_renders: 20,
            max_shift: 2.0,
            noise_sigma: 0.02,
            seed: 7,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(SynthError::Usage(format!("image size {} is below 8", self.image_size)));
        }
        if self.train_identities < 2 || self.eval_identities < 2 {
            return Err(SynthError::Usage(
                "need at least 2 training and 2 evaluation identities".into(),
            ));
        }
        if self.train_renders == 0 || self.eval_renders < 2 {
            return Err(SynthError::Usage(
                "need renders per identity (at least 2 for evaluation)".into(),
            ));
        }
        if !(self.max_shift >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(SynthError::Usage("shift and noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Identity ids of the evaluation split, disjoint from training ids.
    pub fn eval_ids(&self) -> std::ops::Range<usize> {
        self.train_identities..self.train_identities + self.eval_identities
    }
}

/// SplitMix64 finalizer, a bijection on u64.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent and a label.
pub fn derive_seed(parent: u64, label: u64) -> u64 {
    mix64(mix64(parent) ^ label)
}

const N_PARAMS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySpec {
    pub id: usize,
    pub seed: u64,
    pub params: [f64; N_PARAMS],
}

impl IdentitySpec {
    /// The identity `id` under the dataset seed `base`.
    pub fn new(id: usize, base: u64) -> Self {
        // mix64 is a bijection, so distinct ids give distinct seeds
        let seed = mix64(base ^ mix64(id as u64));
        Self::from_seed(id, seed)
    }

    pub fn from_seed(id: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = [0.0; N_PARAMS];
        for p in params.iter_mut() {
            *p = rng.gen::<f64>();
        }
        Self { id, seed, params }
    }
}

/// Maps `t ∈ [0,1)` onto `[lo, hi)`.
fn lerp(lo: f64, hi: f64, t: f64) -> f64 {
    lo + (hi - lo) * t
}

/// Oriented Gaussian bump evaluated at offset `(du, dv)`.
fn blob(du: f64, dv: f64, su: f64, sv: f64, angle: f64) -> f64 {
    let (s, c) = angle.sin_cos();
    let a = c * du + s * dv;
    let b = -s * du + c * dv;
    (-0.5 * ((a / su).powi(2) + (b / sv).powi(2))).exp()
}

struct Face {
    face_level: f64,
    face_w: f64,
    face_h: f64,
    eye_u: f64,
    eye_v: f64,
    eye_su: f64,
    eye_sv: f64,
    eye_amp: f64,
    brow_dv: f64,
    brow_su: f64,
    brow_amp: f64,
    brow_angle: f64,
    nose_v: f64,
    nose_su: f64,
    nose_sv: f64,
    nose_amp: f64,
    mouth_v: f64,
    mouth_su: f64,
    mouth_sv: f64,
    mouth_amp: f64,
    tex: [(f64, f64, f64, f64); 3],
}

impl Face {
    fn from_params(p: &[f64; N_PARAMS]) -> Self {
        let tex = |k: usize| {
            (
                lerp(0.03, 0.1, p[18 + 4 * k]),
                lerp(1.0, 4.0, p[19 + 4 * k]),
                lerp(1.0, 5.0, p[20 + 4 * k]),
                lerp(0.0, std::f64::consts::TAU, p[21 + 4 * k]),
            )
        };
        Self {
            face_level: lerp(0.4, 0.65, p[0]),
            face_w: lerp(0.3, 0.4, p[1]),
            face_h: lerp(0.4, 0.48, p[2]),
            eye_u: lerp(0.1, 0.2, p[3]),
            eye_v: lerp(0.32, 0.42, p[4]),
            eye_su: lerp(0.025, 0.055, p[5]),
            eye_sv: lerp(0.018, 0.035, p[6]),
            eye_amp: -lerp(0.2, 0.45, p[7]),
            brow_dv: lerp(0.06, 0.1, p[8]),
            brow_su: lerp(0.05, 0.09, p[9]),
            brow_amp: -lerp(0.05, 0.35, p[10]),
            brow_angle: lerp(-0.35, 0.35, p[11]),
            nose_v: lerp(0.5, 0.6, p[12]),
            nose_su: lerp(0.02, 0.045, p[13]),
            nose_sv: lerp(0.05, 0.09, p[14]),
            nose_amp: lerp(-0.25, 0.25, p[15]),
            mouth_v: lerp(0.7, 0.8, p[16]),
            mouth_su: lerp(0.07, 0.14, p[17]),
            mouth_sv: lerp(0.018, 0.04, p[29]),
            mouth_amp: -lerp(0.15, 0.4, p[28]),
            tex: [tex(0), tex(1), tex(2)],
        }
    }

    /// Intensity at `(d, v)` where `d = |u − 0.5|`, so the image is
    /// mirror symmetric by construction.
    fn value(&self, d: f64, v: f64) -> f64 {
        let r = (d / self.face_w).powi(2) + ((v - 0.52) / self.face_h).powi(2);
        let oval = 1.0 / (1.0 + ((r - 1.0) * 12.0).exp());
        let mut x = 0.12 + (self.face_level - 0.12) * oval;
        // the two eyes and brows sit at ±eye_u; summing both mirrors keeps
        // the result even in d
        for side in [-1.0, 1.0] {
            let du = d - side * self.eye_u;
            x += self.eye_amp * blob(du, v - self.eye_v, self.eye_su, self.eye_sv, 0.0);
            let bv = v - (self.eye_v - self.brow_dv);
            x += self.brow_amp * blob(du, bv, self.brow_su, 0.012, side * self.brow_angle);
        }
        x += self.nose_amp * blob(d, v - self.nose_v, self.nose_su, self.nose_sv, 0.0);
        x += self.mouth_amp * blob(d, v - self.mouth_v, self.mouth_su, self.mouth_sv, 0.0);
        let mut t = 0.0;
        for &(amp, fu, fv, phase) in &self.tex {
            t += amp * (std::f64::consts::TAU * fu * d).cos() * (std::f64::consts::TAU * fv * v + phase).cos();
        }
        x + t * oval
    }
}

/// Per-render augmentation. Zero shift and zero noise give the bare pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub max_shift: f64,
    pub noise_sigma: f64,
}

impl From<&DataConfig> for Augment {
    fn from(c: &DataConfig) -> Self {
        Self {
            max_shift: c.max_shift,
            noise_sigma: c.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceSample {
    /// `1×S×S` grayscale in `[0, 1]`.
    pub image: Tensor,
    pub identity: usize,
    pub masked: bool,
    pub mask_type: Option<MaskType>,
    pub aug_seed: u64,
}

impl FaceSample {
    pub fn size(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Renders one mask-free sample of `spec`.
pub fn render_sample(spec: &IdentitySpec, aug_seed: u64, size: usize, aug: Augment) -> FaceSample {
    let face = Face::from_params(&spec.params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, aug_seed));
    let (tx, ty) = if aug.max_shift > 0.0 {
        (
            rng.gen_range(-aug.max_shift..=aug.max_shift),
            rng.gen_range(-aug.max_shift..=aug.max_shift),
        )
    } else {
        (0.0, 0.0)
    };
    let s = size as f64;
    let center = (s - 1.0) / 2.0;
    let noise = Normal::new(0.0, aug.noise_sigma.max(0.0)).expect("finite sigma");
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let d = ((x as f64 - tx) - center).abs() / s;
            let v = (y as f64 - ty + 0.5) / s;
            let mut p = face.value(d, v);
            if aug.noise_sigma > 0.0 {
                p += noise.sample(&mut rng);
            }
            data.push(p.clamp(0.0, 1.0));
        }
    }
    FaceSample {
        image: Tensor::new(&[1, size, size], data).expect("size > 0"),
        identity: spec.id,
        masked: false,
        mask_type: None,
        aug_seed,
    }
}

/// Row and column ranges covered by the mask (half open).
pub fn mask_region(size: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let s = size as f64;
    let r0 = (MASK_TOP * s).round() as usize;
    let c0 = (MASK_LEFT * s).round() as usize;
    let c1 = (MASK_RIGHT * s).round() as usize;
    (r0..size, c0..c1)
}

/// How a mask is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskFill {
    /// Type drawn uniformly, parameters drawn from the seed.
    Random,
    Kind(MaskType),
    /// Solid fill at a fixed gray value.
    Solid(f64),
}

/// Occludes the lower face of a mask-free sample.
pub fn apply_mask(x: &FaceSample, fill: MaskFill, seed: u64) -> Result<FaceSample> {
    if x.masked {
        return Err(SynthError::Usage("sample is already masked".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = match fill {
        MaskFill::Random => MaskType::ALL[rng.gen_range(0..3)],
        MaskFill::Kind(k) => k,
        MaskFill::Solid(_) => MaskType::Solid,
    };
    let size = x.size();
    let (rows, cols) = mask_region(size);
    let mut image = x.image.clone();
    let data = image.data_mut();
    match kind {
        MaskType::Solid => {
            let g = match fill {
                MaskFill::Solid(g) => g.clamp(0.0, 1.0),
                _ => rng.gen_range(0.0..1.0),
            };
            for r in rows {
                data[r * size + cols.start..r * size + cols.end].fill(g);
            }
        }
        MaskType::Striped => {
            let period = rng.gen_range(3..=8);
            let (a, b) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let vertical = rng.gen_bool(0.5);
            for r in rows {
                for c in cols.clone() {
                    let k = if vertical { c } else { r };
                    data[r * size + c] = if (k / period) % 2 == 0 { a } else { b };
                }
            }
        }
        MaskType::Noise => {
            for r in rows {
                for c in cols.clone() {
                    data[r * size + c] = rng.gen_range(0.0..1.0);
                }
            }
        }
    }
    Ok(FaceSample {
        image,
        identity: x.identity,
        masked: true,
        mask_type: Some(kind),
        aug_seed: x.aug_seed,
    })
}

/// Seed of the mask applied to a render, fixed by its augmentation seed.
pub fn mask_seed(aug_seed: u64) -> u64 {
    derive_seed(aug_seed, 0x6d61_736b)
}

/// Aligned mask-free and masked samples: index `i` of both is the same render.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub clean: Vec<FaceSample>,
    pub masked: Vec<FaceSample>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.clean.iter().map(|s| s.identity).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> PairBatch {
        PairBatch {
            clean: idx.iter().map(|&i| self.clean[i].clone()).collect(),
            masked: idx.iter().map(|&i| self.masked[i].clone()).collect(),
        }
    }
}

/// Augmentation seed of render `k` of identity `id`.
pub fn render_seed(base: u64, id: usize, k: usize) -> u64 {
    derive_seed(derive_seed(base, id as u64), k as u64)
}

/// Renders `renders` mask-free samples for each id.
pub fn render_identities(config: &DataConfig, ids: std::ops::Range<usize>, renders: usize) -> Vec<FaceSample> {
    let aug = Augment::from(config);
    let mut out = Vec::with_capacity(ids.len() * renders);
    for id in ids {
        let spec = IdentitySpec::new(id, config.seed);
        for k in 0..renders {
            out.push(render_sample(
                &spec,
                render_seed(config.seed, id, k),
                config.image_size,
                aug,
            ));
        }
    }
    out
}

/// Masks every sample with its own seeded random fill.
pub fn mask_all(samples: &[FaceSample]) -> Vec<FaceSample> {
    samples
        .iter()
        .map(|s| apply_mask(s, MaskFill::Random, mask_seed(s.aug_seed)).expect("mask-free input"))
        .collect()
}

/// The training pairs: every render of every training identity, with its mask.
pub fn training_pairs(config: &DataConfig) -> PairBatch {
    let clean = render_identities(config, 0..config.train_identities, config.train_renders);
    let masked = mask_all(&clean);
    PairBatch { clean, masked }
}

/// Mask-free renders of the held-out identities.
pub fn eval_samples(config: &DataConfig) -> Vec<FaceSample> {
    render_identities(config, config.eval_ids(), config.eval_renders)
}

/// Exactly `round(ratio·n)` samples masked, chosen by a seeded permutation.
/// Larger ratios mask a superset of the samples masked by smaller ones.
pub fn ratio_dataset(samples: &[FaceSample], ratio: f64, seed: u64) -> Result<Vec<FaceSample>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(SynthError::Usage(format!("ratio {ratio} outside [0, 1]")));
    }
    if samples.iter().any(|s| s.masked) {
        return Err(SynthError::Usage("ratio datasets start from mask-free samples".into()));
    }
    let n = samples.len();
    let k = (ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = samples.to_vec();
    for &i in &order[..k] {
        out[i] = apply_mask(&samples[i], MaskFill::Random, mask_seed(samples[i].aug_seed))?;
    }
    Ok(out)
}
