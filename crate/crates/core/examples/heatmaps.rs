//! Trains with the image-level classifier attached and writes its class
//! evidence maps as grayscale PNGs, alongside the rate at which each map's
//! peak falls inside a ground-truth box.
//!
//! cargo run --release --example heatmaps -- /tmp/heatmaps 600

use std::path::PathBuf;

use catreg::cli::write_heatmap;
use catreg::dataset::{DatasetSpec, StoredDataset};
use catreg::eval::weak_localization_rate;
use catreg::experiment::detector_config;
use catreg::trainer::{train, Mode, RunConfig};

fn main() -> catreg::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "heatmaps".into()));
    let iters: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(600);
    std::fs::create_dir_all(&out).map_err(|e| catreg::Error::io(&out, e))?;

    let data = StoredDataset::generate(&DatasetSpec::default())?;
    let config = RunConfig {
        iters_phase1: iters * 3 / 4,
        iters_phase2: iters - iters * 3 / 4,
        ..RunConfig::new(Mode::DaFasterIcr)
    };
    let model = train(&config, detector_config(&data), &data.source, &data.target, None)?.model;

    for sample in data.source_val.iter().chain(&data.target_val[..4]).take(8) {
        let features = model.backbone_features(&sample.image);
        let maps = model.icr.class_evidence_maps(&model.params, &features);
        for c in 0..maps.shape()[0] {
            let path = out.join(format!("{}_class{c}.png", sample.id));
            write_heatmap(&path, maps.index_axis(ndarray::Axis(0), c), features.stride)?;
        }
    }
    println!("maps written to {}", out.display());
    println!(
        "evidence peak inside a ground-truth box on {:.1}% of source validation images",
        100.0 * weak_localization_rate(&model, &data.source_val)
    );
    Ok(())
}
