//! Training loop (AdamW, polynomial learning-rate decay), evaluation, and
//! checkpoint/resume plumbing.
//!
//! Determinism contract: batch sampling is keyed by (seed, step) alone, and
//! parameters plus optimizer moments are rounded to f32 after every step, so
//! a run resumed from a checkpoint continues bit-identically and checkpoints
//! round-trip losslessly through their f32 on-disk format.

use crate::config::RunConfig;
use crate::dataio::{self, Split};
use crate::encoders::Triplet;
use crate::error::{CrobimError, Result};
use crate::metrics::{binarize, MetricAccumulator, MetricReport};
use crate::model::CroBim;
use crate::params::{checkpoint_from_state, state_from_checkpoint, AdamW, Checkpoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Seed offset separating the synthetic validation stream from training.
const VAL_SEED_OFFSET: u64 = 0x5EED;

pub struct TrainOutcome {
    pub steps_run: usize,
    pub final_loss: f64,
    pub train_report: MetricReport,
    pub val_report: Option<MetricReport>,
    pub checkpoint_path: PathBuf,
    pub loss_log_path: PathBuf,
}

/// Load the configured data source: either `synth` streams or a manifest.
pub fn load_data(run: &RunConfig) -> Result<(Vec<Triplet>, Vec<Triplet>)> {
    if run.data == "synth" {
        let train = dataio::synth_generate(run.synth_train, &run.model, run.model.seed)?;
        let val = if run.synth_val > 0 {
            dataio::synth_generate(
                run.synth_val,
                &run.model,
                run.model.seed.wrapping_add(VAL_SEED_OFFSET),
            )?
        } else {
            Vec::new()
        };
        Ok((train, val))
    } else {
        let path = Path::new(&run.data);
        let train = dataio::load_manifest(path, Split::Train, &run.model)?;
        let val = dataio::load_manifest(path, Split::Val, &run.model)?;
        Ok((train, val))
    }
}

/// Batch indices for a step: stateless in the step number.
fn batch_indices(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

/// Run inference over samples, binarize at 0.5, accumulate IoU metrics.
pub fn evaluate(model: &CroBim, samples: &[Triplet]) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    for t in samples {
        let (_, logits_up, _, _) = model.predict(&t.image, &t.expression)?;
        let pred = binarize(&logits_up, 0.5);
        acc.accumulate(&pred, &t.mask)?;
    }
    acc.finalize()
}

/// Shard the samples, evaluate each shard into its own accumulator, and
/// merge. Produces the same report as the single pass.
pub fn evaluate_sharded(
    model: &CroBim,
    samples: &[Triplet],
    shards: usize,
) -> Result<MetricReport> {
    let shards = shards.max(1);
    let chunk = samples.len().div_ceil(shards);
    let mut merged = MetricAccumulator::new();
    for piece in samples.chunks(chunk.max(1)) {
        let mut acc = MetricAccumulator::new();
        for t in piece {
            let (_, logits_up, _, _) = model.predict(&t.image, &t.expression)?;
            let pred = binarize(&logits_up, 0.5);
            acc.accumulate(&pred, &t.mask)?;
        }
        merged = MetricAccumulator::merge(merged, acc);
    }
    merged.finalize()
}

/// Train per the run config, optionally resuming from a checkpoint.
/// Artifacts in `out_dir`: step-indexed `loss_log.tsv`, periodic and final
/// checkpoints, train/val metric reports, and (for synthetic data) the
/// materialized dataset.
pub fn train(run: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    run.validate()?;
    let out_dir = &run.out_dir;
    std::fs::create_dir_all(out_dir)?;
    let (train_data, val_data) = load_data(run)?;
    if train_data.is_empty() {
        return Err(CrobimError::InvalidArgument(
            "training split is empty".into(),
        ));
    }
    if run.data == "synth" {
        let manifest =
            dataio::synth::materialize(&out_dir.join("data"), &train_data, Split::Train)?;
        manifest.save(&out_dir.join("data").join("manifest.tsv"))?;
    }

    let template = CroBim::new(run.model.clone())?;
    let (mut model, mut opt, start_step) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let (params, opt) = state_from_checkpoint(&ckpt, &template.params, run.weight_decay)?;
            let step = ckpt.step as usize;
            (CroBim::with_params(run.model.clone(), params)?, opt, step)
        }
        None => {
            let mut model = template;
            // training state lives on the f32 grid from step zero
            model.params.quantize_f32();
            (model, AdamW::new(run.weight_decay), 0)
        }
    };
    opt.weight_decay = run.weight_decay;

    let log_path = out_dir.join("loss_log.tsv");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    if start_step == 0 {
        writeln!(log, "step\tloss\tce\tdice\tlr")?;
    }

    let ckpt_path = |step: usize| out_dir.join(format!("checkpoint_{step:06}.ckpt"));
    let final_path = out_dir.join("checkpoint_final.ckpt");
    let echo = run.to_kv_string();
    let mut last_loss = f64::NAN;
    for step in start_step..run.steps {
        let idx = batch_indices(run.model.seed, step, train_data.len(), run.batch_size);
        let batch: Vec<&Triplet> = idx.iter().map(|&i| &train_data[i]).collect();
        let mut g = crate::tape::Graph::new();
        let bound = model.params.bind(&mut g);
        let (total, reports) = model.batch_loss(&mut g, &bound, &batch)?;
        let loss = g.scalar_value(total);
        if !loss.is_finite() {
            // leave the last periodic checkpoint in place and stop
            return Err(CrobimError::numerical(
                format!("train step {step}"),
                "non-finite loss; last-good checkpoint retained",
            ));
        }
        let grads = g.backward(total);
        let named = bound.gradients(&g, &grads);
        let lr = run.lr_at(step);
        opt.apply(&mut model.params, &named, lr);
        model.params.quantize_f32();
        let ce = reports.iter().map(|r| r.ce_term).sum::<f64>() / reports.len() as f64;
        let dice = reports.iter().map(|r| r.dice_term).sum::<f64>() / reports.len() as f64;
        writeln!(log, "{step}\t{loss:?}\t{ce:?}\t{dice:?}\t{lr:?}")?;
        last_loss = loss;
        let done = step + 1;
        if run.checkpoint_every > 0 && done % run.checkpoint_every == 0 && done < run.steps {
            checkpoint_from_state(echo.clone(), &model.params, &opt).save(&ckpt_path(done))?;
        }
    }
    log.flush()?;
    checkpoint_from_state(echo, &model.params, &opt).save(&final_path)?;

    if run.dump_attention {
        let t = &train_data[0];
        let (_, _, trace, attn) = model.predict(&t.image, &t.expression)?;
        crate::dump::dump_attention(&out_dir.join("attention"), &trace, &attn)?;
    }
    let train_report = evaluate(&model, &train_data)?;
    train_report.write(out_dir, "metrics_train")?;
    let val_report = if val_data.is_empty() {
        None
    } else {
        let r = evaluate(&model, &val_data)?;
        r.write(out_dir, "metrics_val")?;
        Some(r)
    };
    Ok(TrainOutcome {
        steps_run: run.steps - start_step,
        final_loss: last_loss,
        train_report,
        val_report,
        checkpoint_path: final_path,
        loss_log_path: log_path,
    })
}

/// Restore a model from a checkpoint against a config template.
pub fn load_model(run: &RunConfig, checkpoint: &Path) -> Result<CroBim> {
    let template = CroBim::new(run.model.clone())?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (params, _) = state_from_checkpoint(&ckpt, &template.params, run.weight_decay)?;
    CroBim::with_params(run.model.clone(), params)
}
