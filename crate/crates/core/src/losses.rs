//! Training losses: two identity losses, a cosine triplet loss and a
//! margin-softmax classification loss, plus their weighted sum.

use serde::{Deserialize, Serialize};

use crate::nn::{BatchNorm, BnConfig, Linear, NnError, ParamKind, ParamRegistry, Result, Session};
use crate::rectifier::{SelfSimilarity, COSINE_EPS};
use crate::tensor::{Tape, Tensor, Var};

pub const TRIPLET_MARGIN: f64 = 0.1;
pub const COSFACE_SCALE: f64 = 30.0;
pub const COSFACE_MARGIN: f64 = 0.4;
pub const ARCFACE_MARGIN: f64 = 0.5;
pub const EMBEDDING_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub id1: f64,
    pub id2: f64,
    pub triplet: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            id1: 1.0,
            id2: 1.0,
            triplet: 1.0,
            cls: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.id1, self.id2, self.triplet, self.cls]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(NnError::Config(format!(
                "loss weights must be finite and non-negative, got {w:?}"
            )));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(NnError::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Which self-similarity matrices enter the second identity loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityTerms {
    Both,
    Spatial,
    Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginKind {
    /// Additive cosine margin: `s(cosθ − m)`.
    CosFace,
    /// Additive angular margin: `s·cos(θ + m)`.
    ArcFace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub kind: MarginKind,
    pub scale: f64,
    pub margin: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: MarginKind::CosFace,
            scale: COSFACE_SCALE,
            margin: COSFACE_MARGIN,
        }
    }
}

impl HeadConfig {
    pub fn arcface() -> Self {
        Self {
            kind: MarginKind::ArcFace,
            scale: COSFACE_SCALE,
            margin: ARCFACE_MARGIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(NnError::Config(format!(
                "margin head scale must be positive, got {}",
                self.scale
            )));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(NnError::Config(format!(
                "margin must lie in [0, 1), got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

fn check_same(tape: &Tape, op: &str, vars: &[Var]) -> Result<()> {
    let first = tape.shape(vars[0]);
    for &v in &vars[1..] {
        if tape.shape(v) != first {
            return Err(NnError::Usage(format!(
                "{op}: batches are misaligned ({:?} vs {:?})",
                first,
                tape.shape(v)
            )));
        }
    }
    Ok(())
}

/// Mean over the batch of `‖a_i − b_i‖₂`, rows taken along axis 0.
fn mean_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let n = tape.shape(a)[0];
    let d = tape.value(a).len() / n;
    let diff = tape.sub(a, b)?;
    let rows = tape.reshape(diff, &[n, d])?;
    let norms = tape.l2_norm(rows, 1)?;
    Ok(tape.mean_all(norms))
}

/// `mean ‖f̂¹ − f⁰‖ + ‖f̂⁰ − f⁰‖` over the batch.
pub fn id_loss1(tape: &mut Tape, hat0: Var, hat1: Var, f0: Var) -> Result<Var> {
    check_same(tape, "id_loss1", &[hat0, hat1, f0])?;
    let a = mean_distance(tape, hat1, f0)?;
    let b = mean_distance(tape, hat0, f0)?;
    Ok(tape.add(a, b)?)
}

/// [`id_loss1`] applied to self-similarity matrices.
pub fn id_loss2(
    tape: &mut Tape,
    hat0: &SelfSimilarity,
    hat1: &SelfSimilarity,
    s0: &SelfSimilarity,
    terms: SimilarityTerms,
) -> Result<Var> {
    let spatial = |tape: &mut Tape| id_loss1(tape, hat0.spatial, hat1.spatial, s0.spatial);
    let channel = |tape: &mut Tape| id_loss1(tape, hat0.channel, hat1.channel, s0.channel);
    match terms {
        SimilarityTerms::Spatial => spatial(tape),
        SimilarityTerms::Channel => channel(tape),
        SimilarityTerms::Both => {
            let a = spatial(tape)?;
            let b = channel(tape)?;
            Ok(tape.add(a, b)?)
        }
    }
}

/// Cosine triplet loss on flattened `N×d` batches:
/// `mean hinge[(1 − cos(a, p)) − (1 − cos(a, n)) + m]`.
pub fn triplet_cosine(tape: &mut Tape, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    check_same(tape, "triplet_cosine", &[anchor, positive, negative])?;
    if tape.shape(anchor).len() != 2 {
        return Err(NnError::Usage(format!(
            "triplet_cosine expects N×d inputs, got {:?}",
            tape.shape(anchor)
        )));
    }
    let cp = tape.cosine_similarity(anchor, positive, COSINE_EPS)?;
    let cn = tape.cosine_similarity(anchor, negative, COSINE_EPS)?;
    let p = one_minus(tape, cp);
    let n = one_minus(tape, cn);
    let gap = tape.sub(p, n)?;
    let shifted = tape.add_scalar(gap, margin);
    let h = tape.hinge(shifted);
    // averaged around the margin so a tie returns it exactly
    let centered = tape.add_scalar(h, -margin);
    let mean = tape.mean_all(centered);
    Ok(tape.add_scalar(mean, margin))
}

fn one_minus(tape: &mut Tape, x: Var) -> Var {
    let neg = tape.neg(x);
    tape.add_scalar(neg, 1.0)
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(NnError::Usage(format!("label {y} outside [0, {classes})")));
        }
        t.set(&[i, y], 1.0);
    }
    Ok(t)
}

/// Margin-softmax cross entropy from an `N×K` matrix of cosines.
pub fn margin_softmax(tape: &mut Tape, cos: Var, labels: &[usize], head: &HeadConfig) -> Result<Var> {
    head.validate()?;
    let shape = tape.shape(cos).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(NnError::Usage(format!(
            "margin_softmax: cosines {:?} do not match {} labels",
            shape,
            labels.len()
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    let hot = tape.constant(one_hot(labels, k)?);
    let adjusted = match head.kind {
        MarginKind::CosFace => {
            let shift = tape.scale(hot, head.margin);
            tape.sub(cos, shift)?
        }
        MarginKind::ArcFace => {
            // cos(θ + m) = cosθ·cos m − sinθ·sin m on the target column only
            let sq = tape.square(cos);
            let rest = one_minus(tape, sq);
            let rest = tape.clamp_min(rest, 1e-12);
            let sin = tape.sqrt(rest)?;
            let a = tape.scale(cos, head.margin.cos() - 1.0);
            let b = tape.scale(sin, -head.margin.sin());
            let delta = tape.add(a, b)?;
            let delta = tape.mul(delta, hot)?;
            tape.add(cos, delta)?
        }
    };
    let logits = tape.scale(adjusted, head.scale);
    let v = tape.value(logits);
    let row_max = Tensor::from_fn(&[n, 1], |i| {
        v.data()[i * k..(i + 1) * k]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let row_max = tape.constant(row_max);
    let z = tape.sub(logits, row_max)?;
    let e = tape.exp(z);
    let total = tape.sum(e, &[1], false)?;
    let lse = tape.log(total)?;
    let picked = tape.mul(z, hot)?;
    let target = tape.sum(picked, &[1], false)?;
    let nll = tape.sub(lse, target)?;
    Ok(tape.mean_all(nll))
}

/// Class weight matrix `K×d` used in normalized form.
#[derive(Debug, Clone, PartialEq)]
pub struct CosFaceHead {
    pub name: String,
    pub classes: usize,
    pub dim: usize,
    pub config: HeadConfig,
}

impl CosFaceHead {
    pub fn new(name: &str, classes: usize, dim: usize, config: HeadConfig) -> Result<Self> {
        config.validate()?;
        if classes < 2 || dim == 0 {
            return Err(NnError::Config(format!(
                "{name}: need at least 2 classes and a positive width, got {classes}×{dim}"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            classes,
            dim,
            config,
        })
    }

    fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn register(&self, reg: &mut ParamRegistry) -> Result<()> {
        reg.insert(
            &self.weight_name(),
            &[self.classes, self.dim],
            ParamKind::Weight { fan_in: self.dim },
        )
    }

    /// `N×K` cosines between normalized embeddings and normalized class rows.
    pub fn cosines(&self, s: &mut Session, embedding: Var) -> Result<Var> {
        let w = s.param(&self.weight_name())?;
        let e = s.tape.l2_normalize(embedding, 1, COSINE_EPS)?;
        let w = s.tape.l2_normalize(w, 1, COSINE_EPS)?;
        let wt = s.tape.transpose_last(w)?;
        Ok(s.tape.matmul(e, wt)?)
    }

    pub fn loss(&self, s: &mut Session, embedding: Var, labels: &[usize]) -> Result<Var> {
        let cos = self.cosines(s, embedding)?;
        margin_softmax(&mut s.tape, cos, labels, &self.config)
    }
}

/// Cosface loss from raw embeddings.
pub fn cosface(s: &mut Session, embedding: Var, labels: &[usize], head: &CosFaceHead) -> Result<Var> {
    head.loss(s, embedding, labels)
}

/// Flattened feature → batch norm → linear projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub bn: BatchNorm,
    pub proj: Linear,
}

impl Embedding {
    pub fn new(name: &str, d_in: usize, d_out: usize, bn: BnConfig) -> Self {
        Self {
            bn: BatchNorm {
                name: format!("{name}.bn"),
                channels: d_in,
                config: bn,
            },
            proj: Linear::new(&format!("{name}.proj"), d_in, d_out),
        }
    }

    pub fn register(&self, reg: &mut ParamRegistry) -> Result<()> {
        self.bn.register(reg)?;
        self.proj.register(reg)
    }

    pub fn forward(&self, s: &mut Session, features: Var) -> Result<Var> {
        let n = s.tape.shape(features)[0];
        let d = s.value(features).len() / n;
        let flat = s.tape.reshape(features, &[n, d])?;
        let x = self.bn.forward(s, flat)?;
        self.proj.forward(s, x)
    }
}

/// Weighted sum of `[L_ID1, L_ID2, L_triplet, L_cls]`.
pub fn total_loss(tape: &mut Tape, components: [Var; 4], weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let mut acc: Option<Var> = None;
    for (c, w) in components.into_iter().zip(weights.as_array()) {
        let v = tape.value(c);
        if v.len() != 1 {
            return Err(NnError::Usage(format!(
                "loss components must be scalars, got {:?}",
                v.shape()
            )));
        }
        if !v.item().is_finite() {
            return Err(NnError::Usage("loss component is not finite".into()));
        }
        let term = tape.scale(c, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("four components"))
}
