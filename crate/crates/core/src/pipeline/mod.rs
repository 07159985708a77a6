//! Frozen encoder, trainable rectifier and heads, the training loop and
//! checkpoints.

mod checkpoint;
mod encoder;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CheckpointData, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::{Encoder, EncoderConfig};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::losses::{
    id_loss1, id_loss2, total_loss, triplet_cosine, CosFaceHead, Embedding, HeadConfig, LossWeights, SimilarityTerms,
    EMBEDDING_DIM, TRIPLET_MARGIN,
};
use crate::nn::{apply_stat_updates, BnConfig, Mode, NnError, ParamRegistry, Session};
use crate::rectifier::{self_similarity, Rectifier};
use crate::synth::{FaceSample, PairBatch, SynthError};
use crate::tensor::{Adam, AdamConfig, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("pretraining failed: {0}")]
    Pretrain(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<TensorError> for PipelineError {
    fn from(e: TensorError) -> Self {
        PipelineError::Nn(e.into())
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_pairs: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub head: HeadConfig,
    pub triplet_margin: f64,
    pub similarity_terms: SimilarityTerms,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_pairs: 32,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            head: HeadConfig::default(),
            triplet_margin: TRIPLET_MARGIN,
            similarity_terms: SimilarityTerms::Both,
            embedding_dim: EMBEDDING_DIM,
            seed: 13,
        }
    }
}

/// Layer descriptors of the whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub rectifier: Rectifier,
    pub embedding: Embedding,
    pub head: CosFaceHead,
}

impl Model {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let encoder = Encoder::new("enc", &config.encoder, config.data.image_size, BnConfig::default())?;
        let (c, h, w) = encoder.output_shape();
        let r = &config.rectifier;
        if (c, h, w) != (r.channels, r.height, r.width) {
            return Err(PipelineError::Config(format!(
                "encoder emits {c}×{h}×{w} features but the rectifier expects {}×{}×{}",
                r.channels, r.height, r.width
            )));
        }
        let rectifier = Rectifier::new("rect", *r)?;
        let embedding = Embedding::new("emb", c * h * w, config.train.embedding_dim, r.bn);
        let head = CosFaceHead::new(
            "head",
            config.data.train_identities,
            config.train.embedding_dim,
            config.train.head,
        )?;
        Ok(Self {
            encoder,
            rectifier,
            embedding,
            head,
        })
    }

    pub fn register(&self, reg: &mut ParamRegistry) -> Result<()> {
        self.encoder.register(reg)?;
        self.rectifier.register(reg)?;
        self.embedding.register(reg)?;
        self.head.register(reg)?;
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: u64,
    pub id1: f64,
    pub id2: f64,
    pub triplet: f64,
    pub cls: f64,
    pub total: f64,
}

/// Encoder features of the training pairs, computed once since the
/// encoder is frozen and eval mode is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingFeatures {
    pub clean: Tensor,
    pub masked: Tensor,
    pub labels: Vec<usize>,
}

impl TrainingFeatures {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub epochs: usize,
    pub accuracy: f64,
}

/// Everything a run mutates: parameters, optimizer, step counter and the
/// batch-order RNG.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: RunConfig,
    pub config_hash: [u8; 32],
    pub model: Model,
    pub registry: ParamRegistry,
    pub adam: Adam,
    pub step: u64,
    pub encoder_frozen: bool,
    pub rng: ChaCha8Rng,
    /// Pair order of the current epoch.
    pub order: Vec<usize>,
}

/// Stacks sample images into an `N×1×S×S` batch.
pub fn stack_images(samples: &[&FaceSample]) -> Result<Tensor> {
    let parts: Vec<Tensor> = samples
        .iter()
        .map(|s| {
            let mut shape = vec![1];
            shape.extend_from_slice(s.image.shape());
            s.image.reshape(&shape)
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(Tensor::stack_rows(&parts)?)
}

/// Worker threads for eval passes: `FFR_THREADS` if set, else the core count.
pub fn eval_threads() -> usize {
    std::env::var("FFR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

const EVAL_CHUNK: usize = 50;

/// Runs `f` over row chunks of `input` in eval mode and restacks the
/// results in order. Eval-mode outputs do not depend on chunking.
fn map_chunks(
    registry: &ParamRegistry,
    input: &Tensor,
    f: &(dyn Fn(&mut Session, Var) -> crate::nn::Result<Var> + Sync),
) -> Result<Tensor> {
    let n = input.shape()[0];
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let run = |start: usize| -> Result<Tensor> {
        let len = EVAL_CHUNK.min(n - start);
        let mut s = Session::new(registry, Mode::Eval);
        let x = s.input(input.select_rows(start, len)?);
        let y = f(&mut s, x)?;
        Ok(s.value(y).clone())
    };
    let threads = eval_threads().min(starts.len()).max(1);
    let parts: Vec<Result<Tensor>> = if threads == 1 {
        starts.iter().map(|&s| run(s)).collect()
    } else {
        let mut slots: Vec<Option<Result<Tensor>>> = (0..starts.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let chunks: Vec<_> = slots.chunks_mut(starts.len().div_ceil(threads)).collect();
            let mut offset = 0;
            for chunk in chunks {
                let base = offset;
                offset += chunk.len();
                let run = &run;
                let starts = &starts;
                scope.spawn(move || {
                    for (i, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(run(starts[base + i]));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk ran")).collect()
    };
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack_rows(&parts)?)
}

impl ModelState {
    /// A freshly initialized model for `config`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config)?;
        let mut registry = ParamRegistry::new();
        model.register(&mut registry)?;
        registry.init_params("enc.", config.encoder.seed);
        for prefix in ["rect.", "emb.", "head."] {
            registry.init_params(prefix, config.train.seed);
        }
        Ok(Self {
            config: config.clone(),
            config_hash: config.hash(),
            model,
            registry,
            adam: Adam::new(config.train.adam),
            step: 0,
            encoder_frozen: false,
            rng: ChaCha8Rng::seed_from_u64(config.train.seed),
            order: Vec::new(),
        })
    }

    /// Encoder features of `images` (`N×1×S×S`), eval mode.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let enc = &self.model.encoder;
        map_chunks(&self.registry, images, &|s, x| enc.forward(s, x))
    }

    pub fn encode_samples(&self, samples: &[&FaceSample]) -> Result<Tensor> {
        self.encode(&stack_images(samples)?)
    }

    /// Rectified features of encoder features, eval mode.
    pub fn rectify(&self, features: &Tensor) -> Result<Tensor> {
        let rect = &self.model.rectifier;
        map_chunks(&self.registry, features, &|s, f| Ok(rect.forward(s, f)?.rectified))
    }

    /// Trains the encoder with a temporary margin head on mask-free
    /// samples, then discards the head and freezes the encoder.
    pub fn pretrain(&mut self, clean: &[FaceSample]) -> Result<PretrainReport> {
        if self.encoder_frozen {
            return Err(PipelineError::Pretrain("encoder is already frozen".into()));
        }
        if clean.iter().any(|s| s.masked) {
            return Err(PipelineError::Pretrain(
                "pretraining uses mask-free samples only".into(),
            ));
        }
        let cfg = self.config.encoder.clone();
        let classes = self.config.data.train_identities;
        let labels: Vec<usize> = clean.iter().map(|s| s.identity).collect();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(PipelineError::Pretrain(format!(
                "label {bad} is not a training identity"
            )));
        }
        let images = stack_images(&clean.iter().collect::<Vec<_>>())?;
        let (c, h, w) = self.model.encoder.output_shape();
        let head = CosFaceHead::new("pre.head", classes, c * h * w, cfg.head)?;
        head.register(&mut self.registry)?;
        self.registry.init_params("pre.", cfg.seed);
        let mut adam = Adam::new(AdamConfig {
            lr: cfg.pretrain_lr,
            ..AdamConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = clean.len();
        let batch = cfg.pretrain_batch.clamp(2, n.max(2));
        let mut order: Vec<usize> = (0..n).collect();
        let mut accuracy = 0.0;
        let mut epochs = 0;
        for _ in 0..cfg.pretrain_epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks(batch).filter(|c| c.len() >= 2) {
                let x = images.gather_rows(idx)?;
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let mut s = Session::new(&self.registry, Mode::Train);
                let xv = s.input(x);
                let f = self.model.encoder.forward(&mut s, xv)?;
                let flat = s.tape.reshape(f, &[idx.len(), c * h * w])?;
                let loss = head.loss(&mut s, flat, &y)?;
                let value = s.value(loss).item();
                if !value.is_finite() {
                    return Err(PipelineError::NonFinite {
                        step: 0,
                        detail: format!("pretraining loss {value} in epoch {epochs}"),
                    });
                }
                let grads = s.gradients(loss)?;
                let updates = s.into_stat_updates();
                adam.step(self.registry.trainable_mut(), &grads)?;
                apply_stat_updates(&mut self.registry, updates)?;
            }
            epochs += 1;
            let feats = self.encode(&images)?;
            let flat = feats.reshape(&[n, c * h * w])?;
            let mut s = Session::new(&self.registry, Mode::Eval);
            let fv = s.input(flat);
            let cos = head.cosines(&mut s, fv)?;
            let cos = s.value(cos);
            let hits = (0..n)
                .filter(|&i| argmax(&cos.data()[i * classes..(i + 1) * classes]) == labels[i])
                .count();
            accuracy = hits as f64 / n as f64;
            if accuracy >= cfg.target_accuracy {
                break;
            }
        }
        self.registry.remove_prefix("pre.");
        if accuracy < cfg.min_accuracy {
            return Err(PipelineError::Pretrain(format!(
                "train accuracy {accuracy:.3} after {epochs} epochs is below {:.2}; check the generator or encoder config",
                cfg.min_accuracy
            )));
        }
        self.registry.freeze_prefix("enc.");
        self.encoder_frozen = true;
        Ok(PretrainReport { epochs, accuracy })
    }

    /// Encodes both halves of the training pairs.
    pub fn training_features(&self, pairs: &PairBatch) -> Result<TrainingFeatures> {
        Ok(TrainingFeatures {
            clean: self.encode_samples(&pairs.clean.iter().collect::<Vec<_>>())?,
            masked: self.encode_samples(&pairs.masked.iter().collect::<Vec<_>>())?,
            labels: pairs.labels(),
        })
    }

    /// Builds the four loss components and their weighted total for one
    /// pair-aligned batch of encoder features.
    pub fn losses(&self, s: &mut Session, f0: &Tensor, f1: &Tensor, labels: &[usize]) -> Result<(Var, [Var; 4])> {
        let n = labels.len();
        if f0.shape() != f1.shape() || f0.shape().first() != Some(&n) {
            return Err(PipelineError::Nn(NnError::Usage(format!(
                "batch halves {:?} / {:?} do not match {n} labels",
                f0.shape(),
                f1.shape()
            ))));
        }
        if let Some(i) = f0.data().iter().chain(f1.data()).position(|v| !v.is_finite()) {
            return Err(PipelineError::NonFinite {
                step: self.step,
                detail: format!("input feature {i} is not finite"),
            });
        }
        let tc = &self.config.train;
        let w = tc.weights;
        let both = Tensor::stack_rows(&[f0.clone(), f1.clone()])?;
        let x = s.input(both);
        let f0v = s.tape.slice(x, 0, 0, n)?;
        let f1v = s.tape.slice(x, 0, n, n)?;
        let out = self.model.rectifier.forward(s, x)?;
        let hat0 = s.tape.slice(out.rectified, 0, 0, n)?;
        let hat1 = s.tape.slice(out.rectified, 0, n, n)?;
        let zero = |s: &mut Session| s.input(Tensor::scalar(0.0));

        let l_id1 = if w.id1 > 0.0 {
            id_loss1(&mut s.tape, hat0, hat1, f0v)?
        } else {
            zero(s)
        };
        let l_id2 = if w.id2 > 0.0 {
            let sh0 = self_similarity(&mut s.tape, hat0)?;
            let sh1 = self_similarity(&mut s.tape, hat1)?;
            let s0 = self_similarity(&mut s.tape, f0v)?;
            id_loss2(&mut s.tape, &sh0, &sh1, &s0, tc.similarity_terms)?
        } else {
            zero(s)
        };
        let d = s.value(x).len() / (2 * n);
        let l_tri = if w.triplet > 0.0 {
            let a = s.tape.reshape(hat1, &[n, d])?;
            let p = s.tape.reshape(f0v, &[n, d])?;
            let q = s.tape.reshape(f1v, &[n, d])?;
            triplet_cosine(&mut s.tape, a, p, q, tc.triplet_margin)?
        } else {
            zero(s)
        };
        let l_cls = if w.cls > 0.0 {
            let e = self.model.embedding.forward(s, out.rectified)?;
            let both_labels: Vec<usize> = labels.iter().chain(labels).copied().collect();
            self.model.head.loss(s, e, &both_labels)?
        } else {
            zero(s)
        };
        let comps = [l_id1, l_id2, l_tri, l_cls];
        for (name, &c) in ["L_ID1", "L_ID2", "L_triplet", "L_cls"].iter().zip(&comps) {
            let v = s.value(c).item();
            if !v.is_finite() {
                return Err(PipelineError::NonFinite {
                    step: self.step,
                    detail: format!("{name} = {v}"),
                });
            }
        }
        let total = total_loss(&mut s.tape, comps, &w)?;
        Ok((total, comps))
    }

    fn record(&self, s: &Session, total: Var, comps: [Var; 4]) -> LossRecord {
        let v = |x: Var| s.value(x).item();
        LossRecord {
            step: self.step,
            epoch: self.epoch(),
            id1: v(comps[0]),
            id2: v(comps[1]),
            triplet: v(comps[2]),
            cls: v(comps[3]),
            total: v(total),
        }
    }

    /// Loss record of a batch at the current parameters, without updating.
    pub fn evaluate_losses(&self, f0: &Tensor, f1: &Tensor, labels: &[usize]) -> Result<LossRecord> {
        let mut s = Session::new(&self.registry, Mode::Train);
        let (total, comps) = self.losses(&mut s, f0, f1, labels)?;
        Ok(self.record(&s, total, comps))
    }

    fn domain_to_non_finite(&self, e: PipelineError) -> PipelineError {
        match e {
            PipelineError::Nn(NnError::Tensor(TensorError::Domain { op, detail })) => PipelineError::NonFinite {
                step: self.step,
                detail: format!("{op}: {detail}"),
            },
            other => other,
        }
    }

    /// One optimizer step on a pair-aligned batch of encoder features.
    pub fn train_step(&mut self, f0: &Tensor, f1: &Tensor, labels: &[usize]) -> Result<LossRecord> {
        if !self.encoder_frozen {
            return Err(PipelineError::Nn(NnError::Usage(
                "train_step needs a pretrained, frozen encoder".into(),
            )));
        }
        let (record, grads, updates) = {
            let mut s = Session::new(&self.registry, Mode::Train);
            let (total, comps) = self
                .losses(&mut s, f0, f1, labels)
                .map_err(|e| self.domain_to_non_finite(e))?;
            let record = self.record(&s, total, comps);
            let grads = s.gradients(total)?;
            (record, grads, s.into_stat_updates())
        };
        if let Some(bad) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(PipelineError::NonFinite {
                step: self.step,
                detail: format!("gradient of {}", bad.0),
            });
        }
        self.adam.step(self.registry.trainable_mut(), &grads)?;
        apply_stat_updates(&mut self.registry, updates)?;
        self.step += 1;
        Ok(record)
    }

    pub fn steps_per_epoch(&self, pairs: usize) -> u64 {
        (pairs / self.config.train.batch_pairs.max(1)).max(1) as u64
    }

    pub fn total_steps(&self, pairs: usize) -> u64 {
        self.steps_per_epoch(pairs) * self.config.train.epochs as u64
    }

    fn epoch(&self) -> u64 {
        match self.order.len() {
            0 => 0,
            n => self.step / self.steps_per_epoch(n),
        }
    }

    /// Pair indices of the next batch, reshuffling at epoch boundaries.
    pub fn next_batch(&mut self, pairs: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch(pairs);
        if self.step.is_multiple_of(spe) || self.order.len() != pairs {
            self.order = (0..pairs).collect();
            self.order.shuffle(&mut self.rng);
        }
        let b = self.config.train.batch_pairs.min(pairs);
        let start = (self.step % spe) as usize * b;
        self.order[start..start + b].to_vec()
    }

    /// Trains until `until` steps have been taken (the configured schedule
    /// when `None`), passing each loss record to `on_step`.
    pub fn train(
        &mut self,
        data: &TrainingFeatures,
        until: Option<u64>,
        on_step: &mut dyn FnMut(&ModelState, &LossRecord) -> Result<()>,
    ) -> Result<()> {
        if data.len() < 2 {
            return Err(PipelineError::Config("need at least 2 training pairs".into()));
        }
        let end = until.unwrap_or_else(|| self.total_steps(data.len()));
        while self.step < end {
            let idx = self.next_batch(data.len());
            let f0 = data.clean.gather_rows(&idx)?;
            let f1 = data.masked.gather_rows(&idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let rec = self.train_step(&f0, &f1, &labels)?;
            on_step(self, &rec)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode_checkpoint(&CheckpointData::from_state(self))?;
        std::fs::write(path, bytes).map_err(io_err(path))
    }

    /// Restores a state saved under `config`. A config-hash mismatch is
    /// refused unless `force` is set.
    pub fn load(path: &Path, config: &RunConfig, force: bool) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let data = decode_checkpoint(&bytes)?;
        let mut state = ModelState::new(config)?;
        data.restore_into(&mut state, force)?;
        Ok(state)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// CSV writer for loss records. A fresh log opens with a `# config <hash>`
/// comment line and the header row.
pub struct LossLog<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> LossLog<W> {
    pub fn new(mut w: W, config_hash: &str) -> Result<Self> {
        writeln!(w, "# config {config_hash}").map_err(io_err(Path::new("<loss log>")))?;
        Ok(Self {
            inner: csv::Writer::from_writer(w),
        })
    }

    /// Continues an existing log without repeating the header.
    pub fn append(w: W) -> Self {
        Self {
            inner: csv::WriterBuilder::new().has_headers(false).from_writer(w),
        }
    }

    pub fn write(&mut self, rec: &LossRecord) -> Result<()> {
        self.inner
            .serialize(rec)
            .map_err(|e| PipelineError::Checkpoint(format!("loss log: {e}")))?;
        self.inner.flush().map_err(io_err(Path::new("<loss log>")))
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| PipelineError::Checkpoint(format!("loss log: {e}")))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| PipelineError::Checkpoint(format!("loss log: {e}"))))
        .collect()
}
