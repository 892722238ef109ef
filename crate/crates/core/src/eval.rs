//! Measurement: pseudo-anchor posterior error, test accuracy, matrix
//! estimation error, runtime ratios, and aggregate reporting.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CleanDataset, ImageGrid, NoisyDataset};
use crate::error::{PlmError, Result};
use crate::nn::MlpModel;
use crate::trainer::{RunManifest, StageTiming};

/// Instances asserted to have a deterministic clean class, paired with
/// the injector's recorded noisy-posterior row.
#[derive(Debug, Clone)]
pub struct PseudoAnchorSet {
    pub indices: Vec<usize>,
    pub classes: Vec<usize>,
    pub truth: Vec<Vec<f64>>,
}

impl PseudoAnchorSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn truth_rows_for(ds: &NoisyDataset, indices: &[usize]) -> Vec<Vec<f64>> {
    indices
        .iter()
        .map(|&i| ds.truth.row_for(i, ds.clean_labels[i]).to_vec())
        .collect()
}

/// Known-label oracle path: every instance qualifies because the clean
/// label is recorded; a per-class cap keeps the set small. Used for
/// synthetic data where the clean class is certain by construction.
pub fn build_pseudo_anchors_oracle(
    ds: &NoisyDataset,
    per_class_cap: usize,
) -> Result<PseudoAnchorSet> {
    if per_class_cap == 0 {
        return Err(PlmError::Eval("per-class cap must be at least 1".into()));
    }
    let mut indices = Vec::new();
    let mut counts = vec![0usize; ds.num_classes];
    for (i, &y) in ds.clean_labels.iter().enumerate() {
        if counts[y] < per_class_cap {
            counts[y] += 1;
            indices.push(i);
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(PlmError::Eval(format!(
            "no anchors available for class {empty}"
        )));
    }
    let classes = indices.iter().map(|&i| ds.clean_labels[i]).collect();
    let truth = truth_rows_for(ds, &indices);
    Ok(PseudoAnchorSet {
        indices,
        classes,
        truth,
    })
}

/// Filtered path: a model trained on clean labels proposes anchors. An
/// instance qualifies when the model puts at least `tau` probability on
/// its clean label; the per-class cap keeps the most confident ones.
pub fn build_pseudo_anchors_filtered(
    clean_model: &MlpModel,
    ds: &NoisyDataset,
    tau: f64,
    per_class_cap: usize,
) -> Result<PseudoAnchorSet> {
    if per_class_cap == 0 {
        return Err(PlmError::Eval("per-class cap must be at least 1".into()));
    }
    let n = ds.len();
    let c = ds.num_classes;
    let dim = clean_model.input_dim();
    let mut feats = Vec::with_capacity(n * dim);
    for im in &ds.images {
        feats.extend_from_slice(&im.pixels);
    }
    let probs = clean_model.posteriors(n, &feats)?;

    // most confident first, ties by instance index
    let mut by_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); c];
    for (i, &y) in ds.clean_labels.iter().enumerate() {
        let p = probs[i * c + y];
        if p >= tau {
            by_class[y].push((p, i));
        }
    }
    let mut indices = Vec::new();
    for (y, cand) in by_class.iter_mut().enumerate() {
        if cand.is_empty() {
            return Err(PlmError::Eval(format!(
                "no instance reaches confidence {tau} for class {y}"
            )));
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        indices.extend(cand.iter().take(per_class_cap).map(|&(_, i)| i));
    }
    indices.sort_unstable();
    let classes = indices.iter().map(|&i| ds.clean_labels[i]).collect();
    let truth = truth_rows_for(ds, &indices);
    Ok(PseudoAnchorSet {
        indices,
        classes,
        truth,
    })
}

/// Mean Euclidean distance between the network's noisy-posterior
/// estimates and the recorded ground-truth rows over the anchor set.
pub fn posterior_error(
    posterior_net: &MlpModel,
    images: &[ImageGrid],
    anchors: &PseudoAnchorSet,
) -> Result<f64> {
    if anchors.is_empty() {
        return Err(PlmError::Eval("empty pseudo-anchor set".into()));
    }
    let dim = posterior_net.input_dim();
    let c = posterior_net.output_dim();
    let mut feats = Vec::with_capacity(anchors.len() * dim);
    for &i in &anchors.indices {
        feats.extend_from_slice(&images[i].pixels);
    }
    let probs = posterior_net.posteriors(anchors.len(), &feats)?;
    let mut total = 0.0;
    for (row, truth) in probs.chunks(c).zip(&anchors.truth) {
        if truth.len() != c {
            return Err(PlmError::Shape(
                "ground-truth row width does not match the network".into(),
            ));
        }
        let d2: f64 = row
            .iter()
            .zip(truth)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += d2.sqrt();
    }
    Ok(total / anchors.len() as f64)
}

/// Fraction of argmax predictions that match the clean test labels.
pub fn test_accuracy(model: &MlpModel, test: &CleanDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(PlmError::Eval("empty test set".into()));
    }
    let dim = model.input_dim();
    let c = model.output_dim();
    let mut feats = Vec::with_capacity(test.len() * dim);
    for im in &test.images {
        feats.extend_from_slice(&im.pixels);
    }
    let logits = model.logits(test.len(), &feats)?;
    let hits = logits
        .chunks(c)
        .zip(&test.labels)
        .filter(|(row, &l)| crate::linalg::argmax(row) == l)
        .count();
    Ok(hits as f64 / test.len() as f64)
}

/// Largest absolute entry difference between two equally sized matrices.
pub fn matrix_error(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(PlmError::Shape(format!(
            "matrix sizes {} and {} differ",
            estimate.len(),
            truth.len()
        )));
    }
    Ok(estimate
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Wall-clock ratio of a part-level run to a forward run with matched
/// per-stage epoch counts.
pub fn timing_ratio(plm: &RunManifest, forward: &RunManifest) -> Result<f64> {
    let epochs = |m: &RunManifest| {
        (
            m.config.epochs_labeler,
            m.config.epochs_joint,
            m.config.epochs_classifier,
            m.config.batch_size,
            m.config.hidden.clone(),
        )
    };
    if epochs(plm) != epochs(forward) {
        return Err(PlmError::Comparison(
            "runs were not configured with matched stage epochs".into(),
        ));
    }
    let denom = forward.total_millis();
    if denom == 0 {
        return Err(PlmError::Comparison("forward run recorded no wall clock".into()));
    }
    Ok(plm.total_millis() as f64 / denom as f64)
}

/// One evaluated run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub variant: String,
    pub noise_kind: String,
    pub rate: f64,
    pub seed: u64,
    pub posterior_error: f64,
    pub test_accuracy: f64,
    pub t_error: Option<f64>,
    pub total_millis: u64,
    pub stage_timings: Vec<StageTiming>,
}

#[derive(Debug, Clone, Serialize)]
struct SummaryRow {
    variant: String,
    noise_kind: String,
    rate: f64,
    n_seeds: usize,
    posterior_error_mean: f64,
    posterior_error_std: f64,
    acc_mean: f64,
    acc_std: f64,
    t_error_mean: Option<f64>,
    time_ratio: Option<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn format_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

/// Aggregate records into one row per variant x noise cell (mean and
/// sample standard deviation over seeds), written as CSV plus a JSON
/// mirror. Output is deterministic and permutation-invariant.
pub fn report(records: &[MetricsRecord], out_dir: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(PlmError::Eval("no records to report".into()));
    }
    fs::create_dir_all(out_dir)?;

    let mut cells: BTreeMap<(String, String, String), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        cells
            .entry((r.variant.clone(), r.noise_kind.clone(), format!("{:.6}", r.rate)))
            .or_default()
            .push(r);
    }

    // forward totals per noise cell, for the runtime ratio column
    let mut forward_totals: BTreeMap<(String, String), f64> = BTreeMap::new();
    for ((variant, kind, rate), rs) in &cells {
        if variant == "forward_baseline" {
            let mean = rs.iter().map(|r| r.total_millis as f64).sum::<f64>() / rs.len() as f64;
            forward_totals.insert((kind.clone(), rate.clone()), mean);
        }
    }

    let mut rows = Vec::new();
    for ((variant, kind, rate_key), mut rs) in cells {
        rs.sort_by_key(|r| r.seed);
        let perr: Vec<f64> = rs.iter().map(|r| r.posterior_error).collect();
        let acc: Vec<f64> = rs.iter().map(|r| r.test_accuracy).collect();
        let terr: Vec<f64> = rs.iter().filter_map(|r| r.t_error).collect();
        let (pm, ps) = mean_std(&perr);
        let (am, asd) = mean_std(&acc);
        let t_error_mean = if terr.is_empty() {
            None
        } else {
            Some(mean_std(&terr).0)
        };
        let mean_total = rs.iter().map(|r| r.total_millis as f64).sum::<f64>() / rs.len() as f64;
        let time_ratio = forward_totals
            .get(&(kind.clone(), rate_key.clone()))
            .map(|f| mean_total / f);
        rows.push(SummaryRow {
            variant,
            noise_kind: kind,
            rate: rs[0].rate,
            n_seeds: rs.len(),
            posterior_error_mean: pm,
            posterior_error_std: ps,
            acc_mean: am,
            acc_std: asd,
            t_error_mean,
            time_ratio,
        });
    }

    let mut csv = String::from(
        "variant,noise_kind,rate,n_seeds,posterior_error_mean,posterior_error_std,acc_mean,acc_std,t_error_mean,time_ratio\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.noise_kind,
            r.rate,
            r.n_seeds,
            r.posterior_error_mean,
            r.posterior_error_std,
            r.acc_mean,
            r.acc_std,
            format_opt(r.t_error_mean),
            format_opt(r.time_ratio),
        ));
    }
    fs::write(out_dir.join("summary.csv"), csv)?;

    let json = serde_json::json!({
        "anchor_averaging": "pooled over classes",
        "rows": rows,
    });
    let mut text =
        serde_json::to_string_pretty(&json).map_err(|e| PlmError::Format(e.to_string()))?;
    text.push('\n');
    fs::write(out_dir.join("summary.json"), text)?;
    Ok(())
}
