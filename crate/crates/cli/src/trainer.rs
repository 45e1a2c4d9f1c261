//! Deterministic training loop with per-step logging, interim evaluation,
//! checkpoint snapshots and bit-exact resume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use spineseg_core::loss::{combined_loss_grad, ProbVolume};
use spineseg_core::metrics::{segmentation_metrics, MetricsReport};
use spineseg_core::network::SegmentationModel;
use spineseg_core::volume::LabeledVolume;
use spineseg_core::{Error, Result};

use crate::checkpoint::{self, TrainState};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::optim::Adam;

pub struct TrainOutcome {
    pub steps_run: u64,
    pub final_loss: f64,
    pub best_mdice: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Per-sample and mean metrics of a model over a dataset.
pub struct EvalSummary {
    pub per_sample: Vec<MetricsReport>,
    pub mean_miou: f64,
    pub mean_mdice: f64,
    pub mean_macc: f64,
}

/// Evaluate by argmax prediction. Means are arithmetic means of the
/// per-sample metric values.
pub fn evaluate(
    model: &mut SegmentationModel,
    samples: &[LabeledVolume],
    exclude_background: bool,
) -> Result<EvalSummary> {
    if samples.is_empty() {
        return Err(Error::config("no samples"));
    }
    let k = model.config().num_classes;
    let mut per_sample = Vec::with_capacity(samples.len());
    let (mut sum_iou, mut sum_dice, mut sum_acc) = (0.0, 0.0, 0.0);
    for sample in samples {
        let logits = model.forward(&sample.volume.as_input_tensor())?;
        let pred = ProbVolume::from_logits(&logits)?.argmax_labels();
        let report = segmentation_metrics(&pred, &sample.labels, k)?;
        let (miou, mdice, macc) = if exclude_background {
            report.foreground_means()
        } else {
            (report.miou, report.mdice, report.macc)
        };
        sum_iou += miou;
        sum_dice += mdice;
        sum_acc += macc;
        per_sample.push(report);
    }
    let n = samples.len() as f64;
    Ok(EvalSummary {
        per_sample,
        mean_miou: sum_iou / n,
        mean_mdice: sum_dice / n,
        mean_macc: sum_acc / n,
    })
}

/// Run (or resume) training. Writes `train.log`, optional
/// `checkpoint_NNNNNN.ssck` snapshots and a `final.ssck`.
pub fn train(config: &RunConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate_paths(true, false)?;
    let train_dir = config.data.train_dir.as_ref().expect("validated");
    let train_set = Dataset::load(train_dir)?;
    if train_set.is_empty() {
        return Err(Error::config("no samples"));
    }
    let eval_set = match &config.data.test_dir {
        Some(dir) => Some(Dataset::load(dir)?),
        None => None,
    };
    fs::create_dir_all(out_dir)?;

    let (mut model, mut state) = match resume {
        Some(ck_path) => {
            let (ck_config, model, state) = checkpoint::load(ck_path)?;
            if ck_config.to_config_text() != config.to_config_text() {
                return Err(Error::config(format!(
                    "checkpoint {} was trained under a different config",
                    ck_path.display()
                )));
            }
            (model, state)
        }
        None => {
            let model = SegmentationModel::init(config.model.clone())?;
            let optimizer = Adam::new(config.train.optim.clone(), &model.params);
            (
                model,
                TrainState {
                    step: 0,
                    best_mdice: 0.0,
                    optimizer,
                },
            )
        }
    };

    let log_path = out_dir.join("train.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;

    let n = train_set.len() as u64;
    let batch = config.train.batch_size as u64;
    let lambda = config.model.lambda;
    let start = state.step;
    let mut last_loss = f64::NAN;

    for step in start + 1..=config.train.steps {
        model.params.zero_grads();
        let mut loss_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut dice_sum = 0.0;
        // Samples are taken round-robin; with accumulation, a step consumes
        // `batch` consecutive samples.
        for j in 0..batch {
            let idx = (((step - 1) * batch + j) % n) as usize;
            let sample = &train_set.samples[idx];
            let logits = model.forward(&sample.volume.as_input_tensor())?;
            let (breakdown, mut dlogits) = combined_loss_grad(&logits, &sample.labels, lambda)?;
            if batch > 1 {
                dlogits = dlogits.scale(1.0 / batch as f64);
            }
            model.backward(&dlogits)?;
            loss_sum += breakdown.total;
            ce_sum += breakdown.ce;
            dice_sum += breakdown.dice;
        }
        let loss = loss_sum / batch as f64;
        let ce = ce_sum / batch as f64;
        let dice = dice_sum / batch as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss diverged to {loss} at step {step}"
            )));
        }
        state.optimizer.apply(&mut model.params)?;
        state.step = step;
        last_loss = loss;
        writeln!(log, "step {step} loss {loss:.12} ce {ce:.12} dice {dice:.12}")?;

        if config.train.eval_interval > 0 && step % config.train.eval_interval == 0 {
            let samples = eval_set
                .as_ref()
                .map(|d| d.samples.as_slice())
                .unwrap_or(&train_set.samples);
            let summary = evaluate(&mut model, samples, false)?;
            if summary.mean_mdice > state.best_mdice {
                state.best_mdice = summary.mean_mdice;
            }
            writeln!(
                log,
                "eval step {step} miou {:.6} mdice {:.6} macc {:.6}",
                summary.mean_miou, summary.mean_mdice, summary.mean_macc
            )?;
        }
        if config.train.checkpoint_interval > 0 && step % config.train.checkpoint_interval == 0 {
            let snap = out_dir.join(format!("checkpoint_{step:06}.ssck"));
            checkpoint::save(&snap, config, &model, &state)?;
        }
    }

    let final_path = out_dir.join("final.ssck");
    checkpoint::save(&final_path, config, &model, &state)?;
    Ok(TrainOutcome {
        steps_run: state.step.saturating_sub(start),
        final_loss: last_loss,
        best_mdice: state.best_mdice,
        checkpoint: final_path,
        log: log_path,
    })
}

/// Recompute the combined training loss a checkpoint would log next; used
/// to cross-check the log file against snapshots.
pub fn loss_at_checkpoint(ck_path: &Path) -> Result<(u64, f64)> {
    let (config, mut model, state) = checkpoint::load(ck_path)?;
    config.validate_paths(true, false)?;
    let train_set = Dataset::load(config.data.train_dir.as_ref().expect("validated"))?;
    let n = train_set.len() as u64;
    let batch = config.train.batch_size as u64;
    let next_step = state.step + 1;
    let mut loss_sum = 0.0;
    for j in 0..batch {
        let idx = (((next_step - 1) * batch + j) % n) as usize;
        let sample = &train_set.samples[idx];
        let logits = model.forward(&sample.volume.as_input_tensor())?;
        let (breakdown, _) = combined_loss_grad(&logits, &sample.labels, config.model.lambda)?;
        loss_sum += breakdown.total;
    }
    Ok((next_step, loss_sum / batch as f64))
}
