//! Train-and-score runs over the mode ladder, shared by the `ablate`
//! command and the examples.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::StoredDataset;
use crate::detector::DetectorConfig;
use crate::error::Result;
use crate::eval::{emd_distance, instance_features, sample_balanced_instances, weak_localization_rate};
use crate::model::Model;
use crate::trainer::{evaluate_model, train, Mode, RunConfig, TrainOutcome};

pub const IOU_THRESHOLD: f64 = 0.5;
/// Balanced GT instances per class for the domain distance, split evenly
/// between the two domains.
pub const EMD_PER_CLASS: usize = 50;

/// Scores of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub target_map: f64,
    pub source_map: f64,
    /// EMD between balanced source and target GT-instance features.
    pub instance_emd: f64,
    /// Share of source validation images whose ICR evidence peak lands in a box.
    pub weak_localization: f64,
    pub target_annotation_reads: usize,
    pub icr_target_updates: usize,
    pub final_total: f64,
}

pub fn detector_config(data: &StoredDataset) -> DetectorConfig {
    DetectorConfig::new(data.spec.num_classes, data.spec.image_size)
}

/// Domain distance of a model on the validation splits.
pub fn instance_emd(model: &Model, data: &StoredDataset, per_class: usize, seed: u64) -> Result<f64> {
    let (rs, rt) = sample_balanced_instances(
        &data.source_val,
        &data.target_val,
        data.spec.num_classes,
        per_class,
        seed,
    );
    let fs = instance_features(model, &data.source_val, &rs)?;
    let ft = instance_features(model, &data.target_val, &rt)?;
    emd_distance(&fs, &ft)
}

/// Scores a trained model. Training-side counters are left at zero.
pub fn score(model: &Model, config: &RunConfig, data: &StoredDataset) -> Result<RunReport> {
    Ok(RunReport {
        mode: config.mode,
        seed: config.seed,
        target_map: evaluate_model(model, &data.target_val, IOU_THRESHOLD).map,
        source_map: evaluate_model(model, &data.source_val, IOU_THRESHOLD).map,
        instance_emd: instance_emd(model, data, EMD_PER_CLASS, config.seed)?,
        weak_localization: weak_localization_rate(model, &data.source_val),
        target_annotation_reads: 0,
        icr_target_updates: 0,
        final_total: 0.0,
    })
}

/// Trains one configuration on the training splits and scores it on the
/// validation splits.
pub fn run_experiment(
    config: &RunConfig,
    data: &StoredDataset,
    out_dir: Option<&Path>,
) -> Result<(TrainOutcome, RunReport)> {
    let outcome = train(config, detector_config(data), &data.source, &data.target, out_dir)?;
    let report = RunReport {
        target_annotation_reads: outcome.target_annotation_reads,
        icr_target_updates: outcome.icr_target_updates,
        final_total: outcome.metrics.last().map_or(0.0, |m| m.total),
        ..score(&outcome.model, config, data)?
    };
    Ok((outcome, report))
}

/// Runs every ladder mode for every seed. `base` supplies everything but
/// the mode and seed. `on_run` sees each report as it completes.
pub fn run_ladder(
    base: &RunConfig,
    data: &StoredDataset,
    seeds: &[u64],
    out_dir: Option<&Path>,
    mut on_run: impl FnMut(&RunReport),
) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    for &seed in seeds {
        for mode in Mode::LADDER {
            let config = RunConfig {
                mode,
                seed,
                ..base.clone()
            };
            let dir = out_dir.map(|d| d.join(format!("{mode}_seed{seed}")));
            let (_, report) = run_experiment(&config, data, dir.as_deref())?;
            on_run(&report);
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Mean of `field` over the reports of `mode`.
pub fn mode_mean(reports: &[RunReport], mode: Mode, field: impl Fn(&RunReport) -> f64) -> f64 {
    let vals: Vec<f64> = reports.iter().filter(|r| r.mode == mode).map(field).collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Markdown table with one row per mode: target mAP per seed, the mean,
/// and the mean source mAP and instance EMD.
pub fn summary_table(reports: &[RunReport]) -> String {
    let mut seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut out = String::from("| mode |");
    for s in &seeds {
        let _ = write!(out, " seed {s} |");
    }
    out.push_str(" mean target mAP | mean source mAP | mean EMD |\n|---|");
    for _ in 0..seeds.len() + 3 {
        out.push_str("---|");
    }
    out.push('\n');
    for mode in Mode::LADDER {
        if !reports.iter().any(|r| r.mode == mode) {
            continue;
        }
        let _ = write!(out, "| {mode} |");
        for s in &seeds {
            match reports.iter().find(|r| r.mode == mode && r.seed == *s) {
                Some(r) => {
                    let _ = write!(out, " {:.4} |", r.target_map);
                }
                None => out.push_str(" - |"),
            }
        }
        let _ = writeln!(
            out,
            " {:.4} | {:.4} | {:.4} |",
            mode_mean(reports, mode, |r| r.target_map),
            mode_mean(reports, mode, |r| r.source_map),
            mode_mean(reports, mode, |r| r.instance_emd)
        );
    }
    out
}
