//! The prepare / train / eval / report commands.

use std::fs;
use std::path::{Path, PathBuf};

use plm_core::data::{
    gen_synthetic, inject_idn, inject_pair, inject_symmetric, load_idx, read_dataset_dir,
    split_train_val, write_dataset_dir, CleanDataset, NoiseGroundTruth, NoisyDataset,
};
use plm_core::eval::{
    build_pseudo_anchors_filtered, build_pseudo_anchors_oracle, matrix_error, posterior_error,
    report, test_accuracy, MetricsRecord,
};
use plm_core::trainer::{load_run_dir, run_pipeline, train_ce_classifier, Variant};
use plm_core::{PlmError, Result};

use crate::config::{AnchorSource, DatasetSpec, NoiseKindSpec, RunConfig};

/// Sibling seed for the synthetic test split, so the test set never
/// replays the training stream.
fn test_seed(seed: u64) -> u64 {
    seed ^ 0x7465_7374_5f73_6574 // "test_set"
}

fn build_clean(cfg: &RunConfig, base: &Path) -> Result<(CleanDataset, CleanDataset)> {
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            classes,
            per_class,
            test_per_class,
            height,
            width,
            noise_scale,
        } => {
            let train = gen_synthetic(*classes, *per_class, *height, *width, *noise_scale, cfg.seed)?;
            let test = gen_synthetic(
                *classes,
                *test_per_class,
                *height,
                *width,
                *noise_scale,
                test_seed(cfg.seed),
            )?;
            Ok((train, test))
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            limit,
            test_limit,
        } => {
            let train = load_idx(
                &RunConfig::resolve(base, train_images),
                &RunConfig::resolve(base, train_labels),
                *limit,
            )
            .map_err(|e| PlmError::Config(format!("dataset.train_images: {e}")))?;
            let test = load_idx(
                &RunConfig::resolve(base, test_images),
                &RunConfig::resolve(base, test_labels),
                *test_limit,
            )
            .map_err(|e| PlmError::Config(format!("dataset.test_images: {e}")))?;
            Ok((train, test))
        }
    }
}

fn dataset_dir(cfg: &RunConfig, base: &Path) -> PathBuf {
    RunConfig::resolve(base, &cfg.output_dir).join("dataset")
}

/// Build the dataset directory: generate or load the clean data, inject
/// the configured noise, and persist everything with its ground truth.
pub fn cmd_prepare(cfg: &RunConfig, base: &Path, quiet: bool) -> Result<PathBuf> {
    let (clean_train, test) = build_clean(cfg, base)?;
    let noisy = match cfg.noise.kind {
        NoiseKindSpec::Symmetric => inject_symmetric(&clean_train, cfg.noise.rate, cfg.seed)?,
        NoiseKindSpec::Pair => inject_pair(&clean_train, cfg.noise.rate, cfg.seed)?,
        NoiseKindSpec::Idn => inject_idn(&clean_train, cfg.noise.rate, cfg.seed)?,
    };
    let dir = dataset_dir(cfg, base);
    write_dataset_dir(&dir, &noisy, &test)?;
    if !quiet {
        println!(
            "prepared {} train / {} test instances at {}",
            noisy.len(),
            test.len(),
            dir.display()
        );
    }
    Ok(dir)
}

/// Train one variant against the prepared dataset and persist the run.
pub fn cmd_train(cfg: &RunConfig, base: &Path, variant: Variant, quiet: bool) -> Result<PathBuf> {
    let ds_dir = dataset_dir(cfg, base);
    let (noisy, _) = read_dataset_dir(&ds_dir)
        .map_err(|e| PlmError::Config(format!("prepared dataset missing: {e}")))?;
    let train_cfg = cfg.train_config(variant);
    let artifacts = run_pipeline(&noisy, &cfg.split_spec(), &train_cfg)?;
    let run_dir = RunConfig::resolve(base, &cfg.output_dir)
        .join("runs")
        .join(format!("{}-seed{}", variant.as_str(), cfg.seed));
    artifacts.write_to(&run_dir, Some("../../dataset"))?;
    if !quiet {
        println!(
            "run {} finished: stages [{}] in {} ms",
            run_dir.display(),
            artifacts.stage_names().join(", "),
            artifacts.total_millis()
        );
    }
    Ok(run_dir)
}

/// Evaluation-only network trained on the clean labels, used to select
/// pseudo-anchors when the dataset has no recorded oracle path.
fn clean_anchor_model(
    cfg: &RunConfig,
    noisy: &NoisyDataset,
) -> Result<plm_core::nn::MlpModel> {
    let clean_as_noisy = NoisyDataset {
        images: noisy.images.clone(),
        noisy_labels: noisy.clean_labels.clone(),
        clean_labels: noisy.clean_labels.clone(),
        num_classes: noisy.num_classes,
        kind: noisy.kind,
        rate: 0.0,
        truth: noisy.truth.clone(),
        seed: noisy.seed,
    };
    let split = plm_core::data::SplitSpec {
        val_fraction: cfg.split.val_fraction,
        seed: cfg.seed ^ 0x6576_616c, // "eval"
    };
    let (tr, va) = split_train_val(&clean_as_noisy, &split)?;
    let mut train_cfg = cfg.train_config(Variant::CeBaseline);
    train_cfg.epochs_classifier = cfg.eval.clean_epochs;
    train_cfg.seed = cfg.seed ^ 0x6576_616c;
    let (model, _) = train_ce_classifier(&tr, &va, &train_cfg, "classifier")?;
    Ok(model)
}

/// Measure the runs and write records plus the aggregate summary.
pub fn cmd_eval(
    cfg: &RunConfig,
    base: &Path,
    run_dirs: &[PathBuf],
    out: Option<&Path>,
    quiet: bool,
) -> Result<PathBuf> {
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| RunConfig::resolve(base, &cfg.output_dir).join("reports"));

    let dirs: Vec<PathBuf> = if run_dirs.is_empty() {
        let runs_root = RunConfig::resolve(base, &cfg.output_dir).join("runs");
        let mut found = Vec::new();
        let entries = fs::read_dir(&runs_root).map_err(|e| {
            PlmError::Eval(format!("no runs under {}: {e}", runs_root.display()))
        })?;
        for entry in entries {
            let p = entry?.path();
            if p.is_dir() {
                found.push(p);
            }
        }
        found.sort();
        found
    } else {
        run_dirs.to_vec()
    };
    if dirs.is_empty() {
        return Err(PlmError::Eval("nothing to evaluate".into()));
    }

    let mut records = Vec::new();
    for dir in &dirs {
        let run = load_run_dir(dir)?;
        let ds_rel = run.manifest.dataset_dir.clone().ok_or_else(|| {
            PlmError::Eval(format!("run {} records no dataset", dir.display()))
        })?;
        let (noisy, test) = read_dataset_dir(&dir.join(ds_rel))?;

        let anchors = match cfg.eval.anchor_source {
            AnchorSource::Oracle => build_pseudo_anchors_oracle(&noisy, cfg.eval.per_class_cap)?,
            AnchorSource::CleanModel => {
                let model = clean_anchor_model(cfg, &noisy)?;
                build_pseudo_anchors_filtered(
                    &model,
                    &noisy,
                    cfg.eval.confidence,
                    cfg.eval.per_class_cap,
                )?
            }
        };
        let p_err = posterior_error(&run.posterior, &noisy.images, &anchors)?;
        let acc = test_accuracy(&run.classifier, &test)?;
        let t_error = match (&run.t_estimated, &noisy.truth) {
            (Some(t_hat), NoiseGroundTruth::Matrix(t_true)) => {
                Some(matrix_error(t_hat.entries(), t_true.entries())?)
            }
            _ => None,
        };
        let record = MetricsRecord {
            variant: run.manifest.variant.as_str().to_string(),
            noise_kind: noisy.kind.as_str().to_string(),
            rate: noisy.rate,
            seed: run.manifest.seed,
            posterior_error: p_err,
            test_accuracy: acc,
            t_error,
            total_millis: run.manifest.total_millis(),
            stage_timings: run.manifest.timings.clone(),
        };
        if !quiet {
            println!(
                "{}: posterior_error={:.4} accuracy={:.4}",
                dir.display(),
                record.posterior_error,
                record.test_accuracy
            );
        }
        records.push(record);
    }

    fs::create_dir_all(&out_dir)?;
    let mut json = serde_json::to_string_pretty(&records)
        .map_err(|e| PlmError::Format(e.to_string()))?;
    json.push('\n');
    fs::write(out_dir.join("records.json"), json)?;
    report(&records, &out_dir)?;
    if !quiet {
        println!("summary written to {}", out_dir.display());
    }
    Ok(out_dir)
}

/// Aggregate previously written record files into a fresh summary.
pub fn cmd_report(record_files: &[PathBuf], out: &Path, quiet: bool) -> Result<()> {
    let mut records: Vec<MetricsRecord> = Vec::new();
    for f in record_files {
        let text = fs::read_to_string(f)
            .map_err(|e| PlmError::Eval(format!("cannot read {}: {e}", f.display())))?;
        let batch: Vec<MetricsRecord> =
            serde_json::from_str(&text).map_err(|e| PlmError::Format(e.to_string()))?;
        records.extend(batch);
    }
    if records.is_empty() {
        return Err(PlmError::Eval("no records given".into()));
    }
    report(&records, out)?;
    if !quiet {
        println!("summary written to {}", out.display());
    }
    Ok(())
}
