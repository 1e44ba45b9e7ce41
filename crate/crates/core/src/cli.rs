//! Command-line front end. `dispatch` parses arguments, runs one subcommand
//! and maps the outcome to an exit code: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::dataset::{load_dataset, DatasetSpec, Domain, StoredDataset};
use crate::error::{Error, Result};
use crate::eval::{export_features, MapResult};
use crate::experiment::{self, detector_config, run_ladder, summary_table, RunReport, IOU_THRESHOLD};
use crate::icr::ImageLevelPrediction;
use crate::model::Model;
use crate::trainer::{evaluate_model, train, Mode, RunConfig, FINAL_CHECKPOINT, METRICS_FILE};

pub const MANIFEST_FILE: &str = "experiment.json";
pub const CONFIG_SNAPSHOT: &str = "run_config.toml";

#[derive(Debug, Parser)]
#[command(
    name = "catreg",
    version,
    about = "Domain-adaptive detection with categorical regularization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic two-domain benchmark into a directory.
    GenerateData(GenerateArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Score a checkpoint on a validation split.
    Eval(EvalArgs),
    /// Earth mover's distance between source and target instance features.
    Emd(EmdArgs),
    /// Write per-class evidence maps as grayscale PNGs.
    Heatmap(HeatmapArgs),
    /// Train and score the four-mode ladder over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset spec (TOML); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Source,
    Target,
}

impl Split {
    fn domain(self) -> Domain {
        match self {
            Split::Source => Domain::Source,
            Split::Target => Domain::Target,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub split: Split,
    #[arg(long, default_value_t = IOU_THRESHOLD)]
    pub iou: f64,
    /// Also write the result as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmdArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = experiment::EMD_PER_CLASS)]
    pub per_class: usize,
    /// JSON result file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for image- and instance-level feature matrices.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Source)]
    pub split: Split,
    /// Number of validation images to render.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Runs seeds `0..seeds` for every mode.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Base run config; its mode and seed are replaced per run.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Record of one command invocation, rewritten atomically when the run
/// starts and when it ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub run_id: String,
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    /// Everything needed to repeat the run: configs and input paths.
    pub config: serde_json::Value,
    pub started: String,
    pub finished: Option<String>,
    pub status: RunStatus,
    pub artifacts: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

impl ExperimentManifest {
    pub fn start(command: &str, seed: u64, config: serde_json::Value) -> Self {
        let now = chrono::Utc::now();
        Self {
            run_id: format!("{command}-{}", now.format("%Y%m%dT%H%M%S%.3fZ")),
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            started: now.to_rfc3339(),
            finished: None,
            status: RunStatus::Running,
            artifacts: Vec::new(),
        }
    }

    pub fn finish(&mut self, status: RunStatus, artifacts: Vec<String>) {
        self.finished = Some(chrono::Utc::now().to_rfc3339());
        self.status = status;
        self.artifacts = artifacts;
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            message: e.to_string(),
        })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parses `args` (program name first) and runs the command.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenerateData(a) => generate_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Emd(a) => emd_cmd(&a),
        Command::Heatmap(a) => heatmap_cmd(&a),
        Command::Ablate(a) => ablate_cmd(&a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Refuses output locations inside the input data directory.
fn check_out_dir(out: &Path, data: &Path) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let data = canon(data);
    let mut probe = out.to_path_buf();
    while !probe.exists() {
        match probe.parent() {
            Some(p) if !p.as_os_str().is_empty() => probe = p.to_path_buf(),
            _ => return Ok(()),
        }
    }
    if canon(&probe).starts_with(&data) {
        return Err(Error::config("out", "output must not be inside the data directory"));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn generate_data(a: &GenerateArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => DatasetSpec::from_toml(&read_text(p)?)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.rng_seed = s;
    }
    if let Some(n) = a.samples {
        spec.samples_per_domain = n;
    }
    spec.validate()?;
    let data = StoredDataset::generate(&spec)?;
    create_dir(&a.out)?;
    let mut manifest =
        ExperimentManifest::start("generate-data", spec.rng_seed, serde_json::json!({ "dataset": spec }));
    manifest.write(&a.out)?;
    data.save(&a.out)?;
    manifest.finish(
        RunStatus::Completed,
        vec![
            crate::dataset::SPEC_FILE.into(),
            crate::dataset::MANIFEST_FILE.into(),
            "images".into(),
        ],
    );
    manifest.write(&a.out)?;
    println!(
        "wrote {} + {} training and {} + {} validation samples to {}",
        data.source.len(),
        data.target.len(),
        data.source_val.len(),
        data.target_val.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let config = RunConfig::from_toml(&read_text(&a.config)?)?;
    check_out_dir(&a.out, &a.data)?;
    let data = load_dataset(&a.data)?;
    create_dir(&a.out)?;
    let mut manifest = ExperimentManifest::start(
        "train",
        config.seed,
        serde_json::json!({ "run": config, "dataset": data.spec, "data_dir": a.data }),
    );
    manifest.write(&a.out)?;
    write_atomic(&a.out.join(CONFIG_SNAPSHOT), config.to_toml().as_bytes())?;
    let result = train(
        &config,
        detector_config(&data),
        &data.source,
        &data.target,
        Some(&a.out),
    );
    match result {
        Ok(outcome) => {
            let map = evaluate_model(&outcome.model, &data.target_val, IOU_THRESHOLD);
            let last = outcome.metrics.last().expect("at least one iteration");
            manifest.finish(
                RunStatus::Completed,
                vec![CONFIG_SNAPSHOT.into(), METRICS_FILE.into(), FINAL_CHECKPOINT.into()],
            );
            manifest.write(&a.out)?;
            println!(
                "{}: {} iterations, final total {:.4}, target mAP {:.4}",
                config.mode,
                last.iter + 1,
                last.total,
                map.map
            );
            Ok(())
        }
        Err(e) => {
            manifest.finish(RunStatus::Failed, vec![]);
            manifest.write(&a.out)?;
            Err(e)
        }
    }
}

fn load_model(checkpoint: &Path, data: &StoredDataset) -> Result<Model> {
    let ck = load_checkpoint(checkpoint)?;
    if ck.model.num_classes() != data.spec.num_classes {
        return Err(Error::contract(format!(
            "checkpoint has {} classes, dataset has {}",
            ck.model.num_classes(),
            data.spec.num_classes
        )));
    }
    Ok(ck.model)
}

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: &'a Path,
    split: Domain,
    iou_threshold: f64,
    per_class_ap: &'a [Option<f64>],
    map: f64,
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.iou) || a.iou == 0.0 {
        return Err(Error::config("iou", "must lie in (0, 1]"));
    }
    if let Some(out) = &a.out {
        check_out_dir(out, &a.data)?;
    }
    let data = load_dataset(&a.data)?;
    let model = load_model(&a.checkpoint, &data)?;
    let samples = data.split(a.split.domain(), true);
    let MapResult { per_class_ap, map } = evaluate_model(&model, samples, a.iou);
    for (c, ap) in per_class_ap.iter().enumerate() {
        match ap {
            Some(ap) => println!("class {c}: AP {ap:.4}"),
            None => println!("class {c}: no ground truth"),
        }
    }
    println!("{} mAP@{}: {map:.4}", a.split.domain(), a.iou);
    if let Some(out) = &a.out {
        let report = EvalReport {
            checkpoint: &a.checkpoint,
            split: a.split.domain(),
            iou_threshold: a.iou,
            per_class_ap: &per_class_ap,
            map,
        };
        write_atomic(
            out,
            serde_json::to_string_pretty(&report).expect("serializes").as_bytes(),
        )?;
    }
    Ok(())
}

fn emd_cmd(a: &EmdArgs) -> Result<()> {
    if a.per_class < 2 {
        return Err(Error::config("per-class", "must be at least 2"));
    }
    check_out_dir(&a.out, &a.data)?;
    if let Some(dir) = &a.features {
        check_out_dir(dir, &a.data)?;
    }
    let data = load_dataset(&a.data)?;
    let model = load_model(&a.checkpoint, &data)?;
    let emd = experiment::instance_emd(&model, &data, a.per_class, a.seed)?;
    if let Some(dir) = &a.features {
        let mut samples = data.source_val.clone();
        samples.extend(data.target_val.iter().cloned());
        export_features(&model, &samples, dir)?;
    }
    let report = serde_json::json!({
        "checkpoint": a.checkpoint,
        "per_class": a.per_class,
        "seed": a.seed,
        "emd": emd,
    });
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_atomic(
        &a.out,
        serde_json::to_string_pretty(&report).expect("serializes").as_bytes(),
    )?;
    println!("instance EMD: {emd:.4}");
    Ok(())
}

/// Min-max normalization to `[0, 1]`; constant maps become all zeros.
pub fn normalize_unit(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect()
}

/// Writes one class map, upsampled by `scale` with nearest neighbour.
pub fn write_heatmap(path: &Path, map: ndarray::ArrayView2<f64>, scale: usize) -> Result<()> {
    let (h, w) = map.dim();
    let flat: Vec<f64> = map.iter().cloned().collect();
    let norm = normalize_unit(&flat);
    let img = image::GrayImage::from_fn((w * scale) as u32, (h * scale) as u32, |x, y| {
        let v = norm[(y as usize / scale) * w + x as usize / scale];
        image::Luma([(v * 255.0).round() as u8])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn heatmap_cmd(a: &HeatmapArgs) -> Result<()> {
    check_out_dir(&a.out, &a.data)?;
    let data = load_dataset(&a.data)?;
    let model = load_model(&a.checkpoint, &data)?;
    create_dir(&a.out)?;
    let mut written = 0;
    for s in data.split(a.split.domain(), true).iter().take(a.count) {
        let feats = model.backbone_features(&s.image);
        let maps = model.icr.class_evidence_maps(&model.params, &feats);
        let ImageLevelPrediction { probs, .. } = model.icr.icr_forward(&model.params, &feats, s.domain);
        for (c, map) in maps.outer_iter().enumerate() {
            write_heatmap(&a.out.join(format!("{}_class{c}.png", s.id)), map, feats.stride)?;
            written += 1;
        }
        let labels = s.evaluation_image_labels();
        println!("{}: labels {labels:?} image-level probs {probs:.3?}", s.id);
    }
    println!("wrote {written} heatmaps to {}", a.out.display());
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(Error::config("seeds", "must be at least 1"));
    }
    let base = match &a.config {
        Some(p) => {
            let text = read_text(p)?;
            let mut table: toml::Table = text.parse().map_err(|e| Error::toml(&text, &e, "run config"))?;
            table.entry("mode").or_insert_with(|| Mode::SourceOnly.as_str().into());
            RunConfig::from_toml(&table.to_string())?
        }
        None => RunConfig::new(Mode::SourceOnly),
    };
    check_out_dir(&a.out, &a.data)?;
    let data = load_dataset(&a.data)?;
    create_dir(&a.out)?;
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let mut manifest = ExperimentManifest::start(
        "ablate",
        0,
        serde_json::json!({
            "base_run": base,
            "modes": Mode::LADDER,
            "seeds": seeds,
            "dataset": data.spec,
            "data_dir": a.data,
        }),
    );
    manifest.write(&a.out)?;
    let reports_path = a.out.join("reports.jsonl");
    let mut lines = String::new();
    let result = run_ladder(&base, &data, &seeds, Some(&a.out), |r: &RunReport| {
        println!(
            "{} seed {}: target mAP {:.4}, source mAP {:.4}, EMD {:.4}",
            r.mode, r.seed, r.target_map, r.source_map, r.instance_emd
        );
        lines.push_str(&serde_json::to_string(r).expect("report serializes"));
        lines.push('\n');
    });
    write_atomic(&reports_path, lines.as_bytes())?;
    let reports = match result {
        Ok(r) => r,
        Err(e) => {
            manifest.finish(RunStatus::Failed, vec!["reports.jsonl".into()]);
            manifest.write(&a.out)?;
            return Err(e);
        }
    };
    let table = summary_table(&reports);
    write_atomic(&a.out.join("summary.md"), table.as_bytes())?;
    let mut artifacts = vec!["reports.jsonl".to_string(), "summary.md".to_string()];
    artifacts.extend(
        reports
            .iter()
            .map(|r| format!("{}_seed{}/{FINAL_CHECKPOINT}", r.mode, r.seed)),
    );
    manifest.finish(RunStatus::Completed, artifacts);
    manifest.write(&a.out)?;
    println!("\n{table}");
    Ok(())
}
