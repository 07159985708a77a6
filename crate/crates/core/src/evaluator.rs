//! Evaluation protocols: ratio sweeps of pair verification accuracy, rank-1
//! identification with distractors, the enhanced score and embedding export.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pipeline::{io_err, ModelState, PipelineError, Result};
use crate::synth::{self, FaceSample};
use crate::tensor::Tensor;

pub const COSINE_EPS: f64 = 1e-12;

/// The eleven masked ratios `0.0, 0.1, …, 1.0`.
pub fn sweep_ratios() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdProtocol {
    /// Threshold fit on a seeded half of the pairs, accuracy on the other half.
    Split,
    /// Ten folds, each scored with the threshold fit on the other nine.
    Folds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pairs: usize,
    pub distractors: usize,
    pub protocol: ThresholdProtocol,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pairs: 500,
            distractors: 1000,
            protocol: ThresholdProtocol::Split,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    /// Cosine of frozen-encoder features.
    Raw,
    /// Cosine of rectified features.
    Rectified,
    /// `max(s, ŝ) + ŝ`.
    Enhanced,
}

impl Scorer {
    pub const ALL: [Scorer; 3] = [Scorer::Raw, Scorer::Rectified, Scorer::Enhanced];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::Raw => "raw",
            Scorer::Rectified => "rectified",
            Scorer::Enhanced => "enhanced",
        }
    }
}

pub fn enhanced_score(s: f64, s_hat: f64) -> f64 {
    s.max(s_hat) + s_hat
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt().max(COSINE_EPS) * nb.sqrt().max(COSINE_EPS))
}

fn usage(msg: impl Into<String>) -> PipelineError {
    PipelineError::Nn(crate::nn::NnError::Usage(msg.into()))
}

/// Sample index pairs `(a, b, same identity)`, half genuine and half impostor.
pub fn make_pairs(identities: &[usize], count: usize, seed: u64) -> Result<Vec<(usize, usize, bool)>> {
    let mut by_id: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &id) in identities.iter().enumerate() {
        by_id.entry(id).or_default().push(i);
    }
    let groups: Vec<&Vec<usize>> = by_id.values().filter(|v| v.len() >= 2).collect();
    if groups.is_empty() || by_id.len() < 2 {
        return Err(usage("pairs need two identities, one with at least two samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        if k % 2 == 0 {
            let g = groups[rng.gen_range(0..groups.len())];
            let a = rng.gen_range(0..g.len());
            let mut b = rng.gen_range(0..g.len() - 1);
            if b >= a {
                b += 1;
            }
            out.push((g[a], g[b], true));
        } else {
            loop {
                let a = rng.gen_range(0..identities.len());
                let b = rng.gen_range(0..identities.len());
                if identities[a] != identities[b] {
                    out.push((a, b, false));
                    break;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verification {
    pub accuracy: f64,
    pub threshold: f64,
}

fn accuracy_at(scores: &[f64], same: &[bool], idx: &[usize], threshold: f64) -> f64 {
    let hits = idx.iter().filter(|&&i| (scores[i] >= threshold) == same[i]).count();
    hits as f64 / idx.len() as f64
}

/// Threshold maximizing accuracy on `idx`; ties go to the lowest threshold.
fn best_threshold(scores: &[f64], same: &[bool], idx: &[usize]) -> f64 {
    let mut sorted: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut candidates = vec![sorted[0] - 1.0];
    candidates.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(sorted[sorted.len() - 1] + 1.0);
    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for t in candidates {
        let a = accuracy_at(scores, same, idx, t);
        if a > best.0 {
            best = (a, t);
        }
    }
    best.1
}

/// Pair verification accuracy on held-out pairs, with the threshold fit on
/// disjoint calibration pairs.
pub fn verification_accuracy(
    scores: &[f64],
    same: &[bool],
    protocol: ThresholdProtocol,
    seed: u64,
) -> Result<Verification> {
    if scores.len() != same.len() || scores.len() < 2 {
        return Err(usage("verification needs at least two scored pairs"));
    }
    if same.iter().all(|&s| s) || same.iter().all(|&s| !s) {
        return Err(usage("verification pairs must include both genuine and impostor pairs"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(usage("verification scores must be finite"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    match protocol {
        ThresholdProtocol::Split => {
            let (cal, test) = order.split_at(order.len() / 2);
            let threshold = best_threshold(scores, same, cal);
            Ok(Verification {
                accuracy: accuracy_at(scores, same, test, threshold),
                threshold,
            })
        }
        ThresholdProtocol::Folds => {
            let folds = 10.min(order.len());
            let mut total = 0.0;
            let mut thresholds = 0.0;
            for f in 0..folds {
                let test: Vec<usize> = order.iter().skip(f).step_by(folds).copied().collect();
                let train: Vec<usize> = order
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| k % folds != f)
                    .map(|(_, &i)| i)
                    .collect();
                let t = best_threshold(scores, same, &train);
                total += accuracy_at(scores, same, &test, t);
                thresholds += t;
            }
            Ok(Verification {
                accuracy: total / folds as f64,
                threshold: thresholds / folds as f64,
            })
        }
    }
}

/// Fraction of probes whose best-scoring gallery entry shares their
/// identity. `scores` is `probes × gallery`; ties go to the lowest index.
pub fn rank1_from_scores(scores: &[f64], probe_ids: &[usize], gallery_ids: &[usize]) -> Result<f64> {
    let g = gallery_ids.len();
    if g == 0 {
        return Err(usage("rank-1 identification needs a non-empty gallery"));
    }
    if probe_ids.is_empty() || scores.len() != probe_ids.len() * g {
        return Err(usage("score matrix does not match probes × gallery"));
    }
    let hits = probe_ids
        .iter()
        .enumerate()
        .filter(|&(p, &id)| {
            let row = &scores[p * g..(p + 1) * g];
            let mut best = 0;
            for (j, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = j;
                }
            }
            gallery_ids[best] == id
        })
        .count();
    Ok(hits as f64 / probe_ids.len() as f64)
}

/// Cosine scores of every probe row against every gallery row.
pub fn cosine_matrix(probes: &[Vec<f64>], gallery: &[Vec<f64>]) -> Vec<f64> {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let gn: Vec<Vec<f64>> = gallery.iter().map(unit).collect();
    let mut out = Vec::with_capacity(probes.len() * gallery.len());
    for p in probes {
        let pn = unit(p);
        out.extend(gn.iter().map(|g| pn.iter().zip(g).map(|(a, b)| a * b).sum::<f64>()));
    }
    out
}

pub fn rank1_identification(
    probes: &[Vec<f64>],
    probe_ids: &[usize],
    gallery: &[Vec<f64>],
    gallery_ids: &[usize],
) -> Result<f64> {
    if gallery.is_empty() {
        return Err(usage("rank-1 identification needs a non-empty gallery"));
    }
    rank1_from_scores(&cosine_matrix(probes, gallery), probe_ids, gallery_ids)
}

/// Adds `x` to a non-overlapping expansion without rounding error.
fn grow(partials: &mut Vec<f64>, mut x: f64) {
    let mut kept = 0;
    for i in 0..partials.len() {
        let mut y = partials[i];
        if x.abs() < y.abs() {
            std::mem::swap(&mut x, &mut y);
        }
        let hi = x + y;
        let lo = y - (hi - x);
        if lo != 0.0 {
            partials[kept] = lo;
            kept += 1;
        }
        x = hi;
    }
    partials.truncate(kept);
    partials.push(x);
}

fn expansion(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut p = Vec::new();
    for v in values {
        grow(&mut p, v);
    }
    p
}

/// Mean of finite values, rounded once from the exact sum, so a constant
/// list returns its value unchanged.
pub fn exact_mean(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let sum = expansion(values.iter().copied());
    let q0 = sum.iter().rev().sum::<f64>() / n;
    // residual sum − n·q0, exact up to the final rounding
    let p = n * q0;
    let e = n.mul_add(q0, -p);
    let r = expansion(sum.into_iter().chain([-p, -e]));
    q0 + r.iter().rev().sum::<f64>() / n
}

/// Rank-1 of every embedding against all the others.
pub fn rank1_leave_one_out(embeddings: &[Vec<f64>], ids: &[usize]) -> Result<f64> {
    let n = embeddings.len();
    if n < 2 || ids.len() != n {
        return Err(usage("leave-one-out rank-1 needs at least two labelled embeddings"));
    }
    let mut scores = cosine_matrix(embeddings, embeddings);
    for i in 0..n {
        scores[i * n + i] = f64::NEG_INFINITY;
    }
    rank1_from_scores(&scores, ids, ids)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub ratios: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub avg: f64,
    pub mask_free: f64,
    pub masked: f64,
}

impl SweepResult {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Result<Self> {
        if accuracies.len() != 11 {
            return Err(usage(format!("a sweep has 11 ratios, got {}", accuracies.len())));
        }
        let avg = exact_mean(&accuracies);
        Ok(Self {
            ratios: sweep_ratios(),
            mask_free: accuracies[0],
            masked: accuracies[10],
            accuracies,
            avg,
        })
    }

    pub fn write_csv(&self, mut w: impl Write, config_hash: &str) -> std::io::Result<()> {
        writeln!(w, "# config {config_hash}")?;
        writeln!(w, "ratio,accuracy")?;
        for (r, a) in self.ratios.iter().zip(&self.accuracies) {
            writeln!(w, "{r:.1},{a}")?;
        }
        writeln!(w, "Avg.,{}", self.avg)?;
        writeln!(w, "Mask-free,{}", self.mask_free)?;
        writeln!(w, "Masked,{}", self.masked)
    }
}

/// Flattened raw and rectified features of each evaluation sample, both
/// mask-free and masked.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFeatures {
    pub identities: Vec<usize>,
    pub raw_clean: Vec<Vec<f64>>,
    pub raw_masked: Vec<Vec<f64>>,
    pub rect_clean: Vec<Vec<f64>>,
    pub rect_masked: Vec<Vec<f64>>,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.shape()[0];
    let d = t.len() / n;
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

/// Raw and rectified features of `clean` and `masked` versions of samples.
pub fn features_of(state: &ModelState, clean: &[FaceSample], masked: &[FaceSample]) -> Result<EvalFeatures> {
    let fc = state.encode_samples(&clean.iter().collect::<Vec<_>>())?;
    let fm = state.encode_samples(&masked.iter().collect::<Vec<_>>())?;
    Ok(EvalFeatures {
        identities: clean.iter().map(|s| s.identity).collect(),
        rect_clean: rows(&state.rectify(&fc)?),
        rect_masked: rows(&state.rectify(&fm)?),
        raw_clean: rows(&fc),
        raw_masked: rows(&fm),
    })
}

impl EvalFeatures {
    fn pick(&self, masked: bool, i: usize) -> (&[f64], &[f64]) {
        if masked {
            (&self.raw_masked[i], &self.rect_masked[i])
        } else {
            (&self.raw_clean[i], &self.rect_clean[i])
        }
    }

    pub fn score(&self, scorer: Scorer, (a, ma): (usize, bool), (b, mb): (usize, bool)) -> f64 {
        let (ra, ha) = self.pick(ma, a);
        let (rb, hb) = self.pick(mb, b);
        match scorer {
            Scorer::Raw => cosine(ra, rb),
            Scorer::Rectified => cosine(ha, hb),
            Scorer::Enhanced => enhanced_score(cosine(ra, rb), cosine(ha, hb)),
        }
    }

    /// Mean cosine distance between each sample's masked and mask-free
    /// features, in the original and in the rectified space.
    pub fn consistency(&self) -> (f64, f64) {
        let n = self.identities.len() as f64;
        let raw: f64 = self
            .raw_clean
            .iter()
            .zip(&self.raw_masked)
            .map(|(a, b)| 1.0 - cosine(a, b))
            .sum();
        let rect: f64 = self
            .rect_clean
            .iter()
            .zip(&self.rect_masked)
            .map(|(a, b)| 1.0 - cosine(a, b))
            .sum();
        (raw / n, rect / n)
    }
}

/// Mask flags of the eleven ratio datasets.
pub fn ratio_masks(samples: &[FaceSample], seed: u64) -> Result<Vec<Vec<bool>>> {
    sweep_ratios()
        .into_iter()
        .map(|r| {
            Ok(synth::ratio_dataset(samples, r, seed)?
                .iter()
                .map(|s| s.masked)
                .collect())
        })
        .collect()
}

/// Verification accuracy of each scorer on each ratio dataset.
pub fn ratio_sweep(
    feats: &EvalFeatures,
    masks: &[Vec<bool>],
    pairs: &[(usize, usize, bool)],
    config: &EvalConfig,
) -> Result<Vec<(Scorer, SweepResult)>> {
    let same: Vec<bool> = pairs.iter().map(|p| p.2).collect();
    Scorer::ALL
        .into_iter()
        .map(|scorer| {
            let acc = masks
                .iter()
                .map(|m| {
                    let scores: Vec<f64> = pairs
                        .iter()
                        .map(|&(a, b, _)| feats.score(scorer, (a, m[a]), (b, m[b])))
                        .collect();
                    Ok(verification_accuracy(&scores, &same, config.protocol, config.seed)?.accuracy)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((scorer, SweepResult::from_accuracies(acc)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentificationResult {
    pub scorer: Scorer,
    pub masked_probes: bool,
    pub rank1: f64,
}

/// Rank-1 identification: render 0 of each evaluation identity (mask-free)
/// plus the distractors form the gallery; every other render is a probe,
/// scored once mask-free and once masked.
pub fn identification(
    feats: &EvalFeatures,
    distractors: &EvalFeatures,
    renders_per_identity: usize,
) -> Result<Vec<IdentificationResult>> {
    let n = feats.identities.len();
    let gallery_idx: Vec<usize> = (0..n).step_by(renders_per_identity).collect();
    let probe_idx: Vec<usize> = (0..n).filter(|i| i % renders_per_identity != 0).collect();
    let mut gallery_ids: Vec<usize> = gallery_idx.iter().map(|&i| feats.identities[i]).collect();
    gallery_ids.extend(&distractors.identities);
    let probe_ids: Vec<usize> = probe_idx.iter().map(|&i| feats.identities[i]).collect();
    let gallery = |space: &dyn Fn(&EvalFeatures) -> &Vec<Vec<f64>>| {
        let mut g: Vec<Vec<f64>> = gallery_idx.iter().map(|&i| space(feats)[i].clone()).collect();
        g.extend(space(distractors).iter().cloned());
        g
    };
    let raw_gallery = gallery(&|f| &f.raw_clean);
    let rect_gallery = gallery(&|f| &f.rect_clean);
    let mut out = Vec::new();
    for masked in [false, true] {
        let (raw_p, rect_p) = if masked {
            (&feats.raw_masked, &feats.rect_masked)
        } else {
            (&feats.raw_clean, &feats.rect_clean)
        };
        let raw_probes: Vec<Vec<f64>> = probe_idx.iter().map(|&i| raw_p[i].clone()).collect();
        let rect_probes: Vec<Vec<f64>> = probe_idx.iter().map(|&i| rect_p[i].clone()).collect();
        let s = cosine_matrix(&raw_probes, &raw_gallery);
        let s_hat = cosine_matrix(&rect_probes, &rect_gallery);
        let enhanced: Vec<f64> = s.iter().zip(&s_hat).map(|(&a, &b)| enhanced_score(a, b)).collect();
        for (scorer, scores) in [
            (Scorer::Raw, &s),
            (Scorer::Rectified, &s_hat),
            (Scorer::Enhanced, &enhanced),
        ] {
            out.push(IdentificationResult {
                scorer,
                masked_probes: masked,
                rank1: rank1_from_scores(scores, &probe_ids, &gallery_ids)?,
            });
        }
    }
    Ok(out)
}

/// Rank-1 identification on the held-out identities with the configured
/// distractor gallery.
pub fn identify(state: &ModelState) -> Result<Vec<IdentificationResult>> {
    let cfg = &state.config;
    let clean = synth::eval_samples(&cfg.data);
    let masked = synth::mask_all(&clean);
    let feats = features_of(state, &clean, &masked)?;
    let d = distractor_samples(state);
    let raw = state.encode_samples(&d.iter().collect::<Vec<_>>())?;
    let rect = rows(&state.rectify(&raw)?);
    let raw = rows(&raw);
    let distractors = EvalFeatures {
        identities: d.iter().map(|s| s.identity).collect(),
        raw_masked: raw.clone(),
        rect_masked: rect.clone(),
        raw_clean: raw,
        rect_clean: rect,
    };
    identification(&feats, &distractors, cfg.data.eval_renders)
}

/// Mask-free renders of distractor identities, disjoint from training and
/// evaluation ids.
pub fn distractor_samples(state: &ModelState) -> Vec<FaceSample> {
    let d = &state.config.data;
    let first = d.train_identities + d.eval_identities;
    synth::render_identities(d, first..first + state.config.eval.distractors, 1)
}

/// Writes original and rectified features of every sample:
/// `sample_id,identity,masked,space,dim0..dimK`.
pub fn export_embeddings(state: &ModelState, samples: &[FaceSample], path: &Path) -> Result<usize> {
    let feats = state.encode_samples(&samples.iter().collect::<Vec<_>>())?;
    let rect = state.rectify(&feats)?;
    let (raw, rect) = (rows(&feats), rows(&rect));
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    let write = |w: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<usize> {
        writeln!(w, "# config {}", hex::encode(state.config_hash))?;
        let dims: Vec<String> = (0..raw[0].len()).map(|k| format!("dim{k}")).collect();
        writeln!(w, "sample_id,identity,masked,space,{}", dims.join(","))?;
        let mut count = 0;
        for (i, s) in samples.iter().enumerate() {
            for (space, v) in [("original", &raw[i]), ("rectified", &rect[i])] {
                let vals: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
                writeln!(w, "{i},{},{},{space},{}", s.identity, s.masked as u8, vals.join(","))?;
                count += 1;
            }
        }
        w.flush()?;
        Ok(count)
    };
    write(&mut w).map_err(io_err(path))
}

/// Everything `eval-sweep` reports.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub sweeps: Vec<(Scorer, SweepResult)>,
    pub consistency: (f64, f64),
}

impl EvalReport {
    pub fn sweep(&self, scorer: Scorer) -> &SweepResult {
        &self
            .sweeps
            .iter()
            .find(|(s, _)| *s == scorer)
            .expect("all scorers present")
            .1
    }

    /// `scorer,ratio,accuracy` series for plotting.
    pub fn write_plot_data(&self, mut w: impl Write, config_hash: &str) -> std::io::Result<()> {
        writeln!(w, "# config {config_hash}")?;
        writeln!(w, "scorer,ratio,accuracy")?;
        for (scorer, s) in &self.sweeps {
            for (r, a) in s.ratios.iter().zip(&s.accuracies) {
                writeln!(w, "{},{r:.1},{a}", scorer.name())?;
            }
        }
        Ok(())
    }
}

/// The ratio sweep on the held-out identities.
pub fn evaluate(state: &ModelState) -> Result<EvalReport> {
    let cfg = &state.config;
    let clean = synth::eval_samples(&cfg.data);
    let masked = synth::mask_all(&clean);
    let feats = features_of(state, &clean, &masked)?;
    let masks = ratio_masks(&clean, cfg.eval.seed)?;
    let pairs = make_pairs(&feats.identities, cfg.eval.pairs, cfg.eval.seed)?;
    Ok(EvalReport {
        sweeps: ratio_sweep(&feats, &masks, &pairs, &cfg.eval)?,
        consistency: feats.consistency(),
    })
}
