//! Implementations of the CLI subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spineseg_core::gradcheck::{gradcheck, DifferentiableScalar, GradcheckReport};
use spineseg_core::io::{slices, ssv};
use spineseg_core::loss::ProbVolume;
use spineseg_core::network::{ablate, AblationTarget, ModelObjective, SegmentationModel};
use spineseg_core::phantom::PhantomSpec;
use spineseg_core::volume::LabelVolume;
use spineseg_core::{ParameterStore, Result as CoreResult, Tensor};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, Dataset};
use crate::trainer::{self, evaluate};
use crate::{CliError, CliResult, EXIT_CONFIG, EXIT_GRADCHECK};

/// `synth`: write n phantom pairs plus a manifest.
pub fn cmd_synth(
    n: usize,
    dims: [usize; 3],
    vertebrae: usize,
    noise: f64,
    seed: u64,
    out_dir: &Path,
) -> CliResult<()> {
    let spec = PhantomSpec {
        dims,
        n_vertebrae: vertebrae,
        noise_sigma: noise,
    };
    let pairs = dataset::synthesize(out_dir, n, &spec, seed)?;
    println!(
        "wrote {} sample pair(s) and {} under {}",
        pairs.len(),
        dataset::MANIFEST_NAME,
        out_dir.display()
    );
    Ok(())
}

fn load_config(path: &Path, seed_override: Option<u64>) -> CliResult<RunConfig> {
    let mut config = RunConfig::from_file(path)?;
    if let Some(seed) = seed_override {
        config.model.seed = seed;
    }
    Ok(config)
}

/// `train`: run (or resume) a training loop.
pub fn cmd_train(
    config_path: &Path,
    seed_override: Option<u64>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> CliResult<()> {
    let config = load_config(config_path, seed_override)?;
    let outcome = trainer::train(&config, out_dir, resume)?;
    println!(
        "trained {} step(s), final loss {:.6}, best mDice {:.6}",
        outcome.steps_run, outcome.final_loss, outcome.best_mdice
    );
    println!("checkpoint: {}", outcome.checkpoint.display());
    println!("log: {}", outcome.log.display());
    Ok(())
}

/// `eval`: per-sample and aggregate metric reports for a checkpoint.
pub fn cmd_eval(
    checkpoint_path: &Path,
    data_dir: &Path,
    out_dir: &Path,
    exclude_background: bool,
) -> CliResult<()> {
    let (_config, mut model, _state) = checkpoint::load(checkpoint_path)?;
    let data = Dataset::load(data_dir)?;
    if data.is_empty() {
        return Err(CliError::config("no samples"));
    }
    let summary = evaluate(&mut model, &data.samples, exclude_background)?;
    fs::create_dir_all(out_dir)?;

    let mut csv = String::from("sample,miou,mdice,macc\n");
    let mut text = String::new();
    for (i, report) in summary.per_sample.iter().enumerate() {
        let (miou, mdice, macc) = if exclude_background {
            report.foreground_means()
        } else {
            (report.miou, report.mdice, report.macc)
        };
        csv.push_str(&format!("{i},{miou:.6},{mdice:.6},{macc:.6}\n"));
        text.push_str(&format!("sample {i}\n{}\n", report.to_text()));
    }
    csv.push_str(&format!(
        "mean,{:.6},{:.6},{:.6}\n",
        summary.mean_miou, summary.mean_mdice, summary.mean_macc
    ));
    fs::write(out_dir.join("per_sample.csv"), &csv)?;
    fs::write(out_dir.join("per_sample.txt"), &text)?;

    // Aggregate: means of the per-sample values, plus a pooled confusion
    // report for per-class detail.
    let k = summary.per_sample[0].num_classes;
    let mut pooled = vec![0u64; k * k];
    for report in &summary.per_sample {
        for (acc, &c) in pooled.iter_mut().zip(&report.confusion) {
            *acc += c;
        }
    }
    let pooled_report = spineseg_core::metrics::report_from_confusion(k, pooled)?;
    let mut agg = String::new();
    agg.push_str(&format!("samples {}\n", summary.per_sample.len()));
    agg.push_str(&format!(
        "mIoU {:.6}\nmDice {:.6}\nmAcc {:.6}\n",
        summary.mean_miou, summary.mean_mdice, summary.mean_macc
    ));
    agg.push_str("(means over per-sample values)\n\npooled confusion detail:\n");
    agg.push_str(&pooled_report.to_text());
    fs::write(out_dir.join("aggregate.txt"), &agg)?;
    let mut agg_csv = String::from("miou,mdice,macc\n");
    agg_csv.push_str(&format!(
        "{:.6},{:.6},{:.6}\n",
        summary.mean_miou, summary.mean_mdice, summary.mean_macc
    ));
    fs::write(out_dir.join("aggregate.csv"), &agg_csv)?;
    println!(
        "evaluated {} sample(s): mIoU {:.4} mDice {:.4} mAcc {:.4}",
        summary.per_sample.len(),
        summary.mean_miou,
        summary.mean_mdice,
        summary.mean_macc
    );
    Ok(())
}

pub const ABLATION_VARIANTS: [&str; 4] = [
    "ours",
    "remove_multiscale_fusion",
    "remove_adaptive_attention",
    "baseline",
];

/// `ablation`: train all four variants with one seed/schedule/dataset and
/// report mIoU/mDice/mAcc per row on the held-out split.
pub fn cmd_ablation(config_path: &Path, seed_override: Option<u64>, out_dir: &Path) -> CliResult<()> {
    let base = load_config(config_path, seed_override)?;
    base.validate_paths(true, true)?;
    fs::create_dir_all(out_dir)?;
    let test_dir = base.data.test_dir.clone().expect("validated");
    let test_set = Dataset::load(&test_dir)?;
    if test_set.is_empty() {
        return Err(CliError::config("no samples"));
    }

    let mut rows = Vec::new();
    for name in ABLATION_VARIANTS {
        let mut config = base.clone();
        config.model = match name {
            "ours" => base.model.clone(),
            "remove_multiscale_fusion" => ablate(&base.model, AblationTarget::Multiscale),
            "remove_adaptive_attention" => ablate(&base.model, AblationTarget::Adaptive),
            _ => ablate(&base.model, AblationTarget::Both),
        };
        let variant_dir = out_dir.join(name);
        let outcome = trainer::train(&config, &variant_dir, None)?;
        let (_, mut model, _) = checkpoint::load(&outcome.checkpoint)?;
        let params = model.parameter_count();
        let summary = evaluate(&mut model, &test_set.samples, false)?;
        println!(
            "{name}: mIoU {:.4} mDice {:.4} mAcc {:.4} ({params} parameters)",
            summary.mean_miou, summary.mean_mdice, summary.mean_macc
        );
        rows.push((
            name,
            summary.mean_miou,
            summary.mean_mdice,
            summary.mean_macc,
            params,
        ));
    }

    let mut csv = String::from("variant,miou,mdice,macc\n");
    for (name, miou, mdice, macc, _) in &rows {
        csv.push_str(&format!("{name},{miou:.6},{mdice:.6},{macc:.6}\n"));
    }
    fs::write(out_dir.join("ablation_table.csv"), &csv)?;

    let mut txt = String::new();
    txt.push_str(&format!(
        "{:<28} {:>8} {:>8} {:>8}\n",
        "variant", "mIoU", "mDice", "mAcc"
    ));
    for (name, miou, mdice, macc, _) in &rows {
        txt.push_str(&format!(
            "{name:<28} {miou:>8.4} {mdice:>8.4} {macc:>8.4}\n"
        ));
    }
    txt.push('\n');
    for (name, _, _, _, params) in &rows {
        txt.push_str(&format!("parameters {name} = {params}\n"));
    }
    fs::write(out_dir.join("ablation_table.txt"), &txt)?;
    Ok(())
}

/// Test hook: corrupts the analytic gradient of the first parameter so the
/// negative-control path of `gradcheck` is exercised end to end.
struct CorruptedObjective(ModelObjective);

impl DifferentiableScalar for CorruptedObjective {
    fn params(&self) -> &ParameterStore {
        self.0.params()
    }
    fn params_mut(&mut self) -> &mut ParameterStore {
        self.0.params_mut()
    }
    fn eval(&mut self) -> CoreResult<f64> {
        self.0.eval()
    }
    fn eval_with_grads(&mut self) -> CoreResult<f64> {
        let loss = self.0.eval_with_grads()?;
        let store = self.0.params_mut();
        let id = store.ids().next().expect("model has parameters");
        for g in store.grad_mut(id).data_mut() {
            *g += 1.0;
        }
        Ok(loss)
    }
}

/// Deterministic gradcheck fixture: random input volume and labels drawn
/// from the model seed.
pub fn gradcheck_objective(config: &RunConfig, dims: usize) -> CoreResult<ModelObjective> {
    let model = SegmentationModel::init(config.model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.model.seed ^ 0x5EED_C0DE);
    let c = config.model.in_channels;
    let n = c * dims * dims * dims;
    let input = Tensor::from_vec(
        &[c, dims, dims, dims],
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let k = config.model.num_classes;
    let labels: Vec<u8> = (0..dims * dims * dims)
        .map(|_| rng.gen_range(0..k) as u8)
        .collect();
    let truth = LabelVolume::new([dims, dims, dims], labels)?;
    Ok(ModelObjective {
        model,
        input,
        truth,
        lambda: config.model.lambda,
    })
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// `gradcheck`: end-to-end finite-difference check of
/// `combined_loss ∘ forward`. Exit 0 iff every tensor is within tolerance.
pub fn cmd_gradcheck(
    config_path: Option<&Path>,
    seed_override: Option<u64>,
    probes: usize,
    h: f64,
    dims: usize,
    corrupt_grad: bool,
) -> CliResult<GradcheckReport> {
    let config = match config_path {
        Some(path) => load_config(path, seed_override)?,
        None => {
            let mut c = RunConfig::tiny();
            if let Some(seed) = seed_override {
                c.model.seed = seed;
            }
            c
        }
    };
    if probes == 0 {
        return Err(CliError::config("no probes"));
    }
    config.model.validate_extents([dims, dims, dims])?;
    let objective = gradcheck_objective(&config, dims)?;
    let seed = config.model.seed ^ 0x6EAD;
    let report = if corrupt_grad {
        let mut target = CorruptedObjective(objective);
        gradcheck(&mut target, probes, h, seed)?
    } else {
        let mut target = objective;
        gradcheck(&mut target, probes, h, seed)?
    };
    for check in &report.per_tensor {
        println!(
            "tensor {:<32} max rel err {:>12.3e}  ({} probes)",
            check.name, check.max_rel_err, check.probes
        );
    }
    println!(
        "worst {:.3e} at {} (tolerance {GRADCHECK_TOLERANCE:.0e})",
        report.worst, report.worst_tensor
    );
    if report.passes(GRADCHECK_TOLERANCE) {
        println!("gradcheck PASS");
        Ok(report)
    } else {
        Err(CliError::new(
            EXIT_GRADCHECK,
            format!(
                "gradcheck FAIL: worst relative error {:.3e} at tensor {}",
                report.worst, report.worst_tensor
            ),
        ))
    }
}

/// `infer`: argmax prediction for one volume, optional triptych export.
pub fn cmd_infer(
    checkpoint_path: &Path,
    volume_path: &Path,
    out_dir: &Path,
    export: bool,
    truth_path: Option<&Path>,
    axis: usize,
) -> CliResult<PathBuf> {
    let (_config, mut model, _state) = checkpoint::load(checkpoint_path)?;
    let volume = ssv::read_volume(volume_path)?;
    let truth = match truth_path {
        Some(p) => Some(ssv::read_labels(p)?),
        None => None,
    };
    let logits = model
        .forward(&volume.as_input_tensor())
        .map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))?;
    let pred = ProbVolume::from_logits(&logits)?.argmax_labels();
    fs::create_dir_all(out_dir)?;
    let pred_path = out_dir.join("prediction.lab.ssv");
    ssv::write_labels(&pred_path, &pred)?;
    println!("prediction: {}", pred_path.display());
    if export {
        let mid = volume.dims()[axis] / 2;
        let k = model.config().num_classes;
        let written = slices::export_slices(
            &volume,
            truth.as_ref(),
            Some(&pred),
            axis,
            &[mid],
            k,
            out_dir,
        )?;
        for p in written {
            println!("slice: {}", p.display());
        }
    }
    Ok(pred_path)
}
