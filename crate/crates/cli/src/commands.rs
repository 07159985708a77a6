//! One function per subcommand.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ffr_core::config::AblationTag;
use ffr_core::evaluator::{self, features_of, make_pairs, ratio_masks, verification_accuracy, EvalReport, Scorer};
use ffr_core::pipeline::{read_loss_log, LossLog, ModelState, PipelineError};
use ffr_core::selftest;
use ffr_core::synth::{self, read_pgm, write_manifest, write_pgm, FaceSample, ManifestRow};
use serde_json::json;

use crate::run::{io_error, resolve_config, CliError, RunDir};
use crate::Common;

fn open(common: &Common) -> Result<RunDir, CliError> {
    RunDir::open(&common.out, resolve_config(common, None)?)
}

pub fn gen_data(common: &Common) -> Result<(), CliError> {
    let run = open(common)?;
    let note = format!("config {}", run.hash);
    let d = &run.config.data;
    let train = synth::training_pairs(d);
    let eval_clean = synth::eval_samples(d);
    let eval = synth::PairBatch {
        masked: synth::mask_all(&eval_clean),
        clean: eval_clean,
    };
    let mut rows = Vec::new();
    for (split, batch) in [("train", &train), ("eval", &eval)] {
        let dir = run.file(&format!("data/{split}"));
        std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        let renders = if split == "train" {
            d.train_renders
        } else {
            d.eval_renders
        };
        for (i, (c, m)) in batch.clean.iter().zip(&batch.masked).enumerate() {
            let stem = format!("{}_{}", c.identity, i % renders);
            write_pgm(&dir.join(format!("{stem}_clean.pgm")), &c.image, Some(&note))?;
            write_pgm(&dir.join(format!("{stem}_masked.pgm")), &m.image, Some(&note))?;
            rows.push(ManifestRow::from_sample(rows.len(), c));
            rows.push(ManifestRow::from_sample(rows.len(), m));
        }
    }
    let path = run.file("data/manifest.csv");
    let f = File::create(&path).map_err(|e| io_error(&path, e))?;
    write_manifest(BufWriter::new(f), &rows, Some(&run.hash))?;
    println!("wrote {} samples to {}", rows.len(), run.file("data").display());
    Ok(())
}

/// Pretrains the encoder and saves the frozen state.
fn pretrained_state(run: &RunDir) -> Result<ModelState, CliError> {
    let mut state = ModelState::new(&run.config)?;
    let report = state.pretrain(&synth::training_pairs(&run.config.data).clean)?;
    run.save_state(&state, "pretrained.ffrk")?;
    run.write_json(
        "pretrain.json",
        &json!({"config_hash": run.hash, "epochs": report.epochs, "accuracy": report.accuracy}),
    )?;
    println!(
        "encoder pretrained for {} epochs, training accuracy {:.4}",
        report.epochs, report.accuracy
    );
    Ok(state)
}

pub fn pretrain(common: &Common) -> Result<(), CliError> {
    let run = open(common)?;
    pretrained_state(&run)?;
    println!("saved {}", run.pretrained().display());
    Ok(())
}

/// Trains to the configured schedule, resuming from the run's checkpoint,
/// then from the pretrained encoder, else pretraining first.
fn train_run(run: &RunDir, force: bool) -> Result<ModelState, CliError> {
    let (mut state, resumed) = if run.checkpoint().exists() {
        (ModelState::load(&run.checkpoint(), &run.config, force)?, true)
    } else if run.pretrained().exists() {
        (ModelState::load(&run.pretrained(), &run.config, force)?, false)
    } else {
        (pretrained_state(run)?, false)
    };
    let feats = state.training_features(&synth::training_pairs(&run.config.data))?;
    let total = state.total_steps(feats.len());
    let per_epoch = state.steps_per_epoch(feats.len());
    let log_path = run.file("loss.csv");
    // rows past the checkpoint belong to an interrupted run and are redone
    let kept = if resumed && log_path.exists() {
        read_loss_log(&log_path)?
            .into_iter()
            .filter(|r| r.step < state.step)
            .collect()
    } else {
        Vec::new()
    };
    let file = File::create(&log_path).map_err(|e| io_error(&log_path, e))?;
    let mut log = LossLog::new(BufWriter::new(file), &run.hash)?;
    for r in &kept {
        log.write(r)?;
    }
    if state.step >= total {
        println!("already trained ({total} steps)");
        return Ok(state);
    }
    println!("training steps {}..{total}", state.step);
    let mut save_err = None;
    let outcome = state.train(&feats, None, &mut |s, r| {
        log.write(r)?;
        if s.step % per_epoch == 0 || s.step == total {
            println!(
                "epoch {:>3} step {:>5} total loss {:.4}",
                s.step / per_epoch,
                s.step,
                r.total
            );
            if let Err(e) = run.save_state(s, "model.ffrk") {
                save_err = Some(e);
                return Err(PipelineError::Checkpoint("could not be saved".into()));
            }
        }
        Ok(())
    });
    if let Some(e) = save_err {
        return Err(e);
    }
    outcome?;
    Ok(state)
}

pub fn train(common: &Common) -> Result<(), CliError> {
    let run = open(common)?;
    train_run(&run, common.force)?;
    println!("saved {}", run.checkpoint().display());
    Ok(())
}

fn write_report(run: &RunDir, report: &EvalReport) -> Result<(), CliError> {
    for (scorer, sweep) in &report.sweeps {
        let mut buf = Vec::new();
        sweep.write_csv(&mut buf, &run.hash).expect("in-memory write");
        run.write_atomic(&format!("sweep_{}.csv", scorer.name()), &buf)?;
    }
    let mut buf = Vec::new();
    report.write_plot_data(&mut buf, &run.hash).expect("in-memory write");
    run.write_atomic("plot.csv", &buf)?;
    let sweeps: serde_json::Map<String, serde_json::Value> = report
        .sweeps
        .iter()
        .map(|(s, r)| (s.name().to_string(), serde_json::to_value(r).expect("serializable")))
        .collect();
    run.write_json(
        "summary.json",
        &json!({
            "config_hash": run.hash,
            "sweeps": sweeps,
            "consistency": {"original": report.consistency.0, "rectified": report.consistency.1},
        }),
    )?;
    println!("{:<10} {:>9} {:>9} {:>9}", "scorer", "Mask-free", "Masked", "Avg.");
    for (scorer, s) in &report.sweeps {
        println!(
            "{:<10} {:>9.4} {:>9.4} {:>9.4}",
            scorer.name(),
            s.mask_free,
            s.masked,
            s.avg
        );
    }
    println!(
        "masked/mask-free cosine distance: original {:.4}, rectified {:.4}",
        report.consistency.0, report.consistency.1
    );
    Ok(())
}

pub fn eval_sweep(common: &Common, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let run = open(common)?;
    let state = run.load_trained(checkpoint, common.force)?;
    write_report(&run, &evaluator::evaluate(&state)?)
}

pub fn verify(common: &Common, checkpoint: Option<&Path>, first: &Path, second: &Path) -> Result<(), CliError> {
    let run = open(common)?;
    let state = run.load_trained(checkpoint, common.force)?;
    let size = run.config.data.image_size;
    let load = |p: &Path| -> Result<FaceSample, CliError> {
        let image = read_pgm(p)?;
        if image.shape() != [1, size, size] {
            return Err(CliError::Usage(format!(
                "{}: expected a {size}×{size} image, got {:?}",
                p.display(),
                &image.shape()[1..]
            )));
        }
        Ok(FaceSample {
            image,
            identity: 0,
            masked: false,
            mask_type: None,
            aug_seed: 0,
        })
    };
    let pair = [load(first)?, load(second)?];
    let probe = features_of(&state, &pair, &pair)?;
    // thresholds are calibrated on the half-masked evaluation set
    let cfg = &run.config;
    let clean = synth::eval_samples(&cfg.data);
    let feats = features_of(&state, &clean, &synth::mask_all(&clean))?;
    let masks = ratio_masks(&clean, cfg.eval.seed)?;
    let half = &masks[masks.len() / 2];
    let pairs = make_pairs(&feats.identities, cfg.eval.pairs, cfg.eval.seed)?;
    let same: Vec<bool> = pairs.iter().map(|p| p.2).collect();
    let mut results = Vec::new();
    for scorer in Scorer::ALL {
        let scores: Vec<f64> = pairs
            .iter()
            .map(|&(a, b, _)| feats.score(scorer, (a, half[a]), (b, half[b])))
            .collect();
        let v = verification_accuracy(&scores, &same, cfg.eval.protocol, cfg.eval.seed)?;
        let score = probe.score(scorer, (0, false), (1, false));
        let decision = score >= v.threshold;
        println!(
            "{:<10} score {:>8.4} threshold {:>8.4} -> {}",
            scorer.name(),
            score,
            v.threshold,
            if decision { "same" } else { "different" }
        );
        results.push(json!({
            "scorer": scorer.name(), "score": score, "threshold": v.threshold, "same": decision,
        }));
    }
    run.write_json(
        "verify.json",
        &json!({
            "config_hash": run.hash,
            "first": first.display().to_string(),
            "second": second.display().to_string(),
            "results": results,
        }),
    )?;
    Ok(())
}

pub fn identify(common: &Common, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let run = open(common)?;
    let state = run.load_trained(checkpoint, common.force)?;
    let results = evaluator::identify(&state)?;
    println!(
        "gallery: 1 render per identity plus {} distractors",
        run.config.eval.distractors
    );
    for r in &results {
        println!(
            "{:<10} {:<9} rank-1 {:.4}",
            r.scorer.name(),
            if r.masked_probes { "masked" } else { "mask-free" },
            r.rank1
        );
    }
    run.write_json(
        "identification.json",
        &json!({
            "config_hash": run.hash,
            "distractors": run.config.eval.distractors,
            "results": results,
        }),
    )?;
    Ok(())
}

pub fn export_embeddings(common: &Common, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let run = open(common)?;
    let state = run.load_trained(checkpoint, common.force)?;
    let clean = synth::eval_samples(&run.config.data);
    let mut samples = synth::mask_all(&clean);
    samples.splice(0..0, clean);
    let path = run.file("embeddings.csv");
    let rows = evaluator::export_embeddings(&state, &samples, &path)?;
    println!("wrote {rows} rows to {}", path.display());
    Ok(())
}

pub fn ablate(common: &Common, tag: &str) -> Result<(), CliError> {
    let tag = AblationTag::parse(tag).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown ablation tag {tag:?}; expected one of A, B, C1, C2, C3, D1, D2, D3, E"
        ))
    })?;
    let full = resolve_config(common, None)?;
    let run = RunDir::open(&common.out, resolve_config(common, Some(tag))?)?;
    println!("ablation {} in {}", tag.name(), run.path.display());
    let state = train_run(&run, common.force)?;
    let report = evaluator::evaluate(&state)?;
    write_report(&run, &report)?;
    let reference = common.out.join(&full.hash_hex()[..16]).join("summary.json");
    if let Some(avg) = std::fs::read_to_string(&reference)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["sweeps"]["rectified"]["avg"].as_f64())
    {
        let own = report.sweep(Scorer::Rectified).avg;
        println!(
            "full model Avg. {avg:.4}, {} Avg. {own:.4} ({:+.2} points)",
            tag.name(),
            100.0 * (own - avg)
        );
    }
    Ok(())
}

pub fn selftest(seed: u64, instances: usize) -> Result<(), CliError> {
    if instances == 0 {
        return Err(CliError::Usage("--instances must be positive".into()));
    }
    let suites = [
        selftest::gradient_suite(instances, seed),
        selftest::invariant_suite(seed),
    ];
    let mut failed = 0;
    for s in &suites {
        println!("{:<11} {}/{} passed", s.suite, s.passed, s.total);
        for f in &s.failures {
            println!("  FAIL {f}");
        }
        failed += s.total - s.passed;
    }
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} selftest checks failed")));
    }
    Ok(())
}
