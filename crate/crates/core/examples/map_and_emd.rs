//! Trains a source-only and a fully regularized detector, then compares
//! per-class AP on the target domain and the EMD between source and target
//! ground-truth instance features.
//!
//! cargo run --release --example map_and_emd -- 600

use catreg::dataset::{shape_name, DatasetSpec, StoredDataset};
use catreg::eval::{emd_distance, image_features};
use catreg::experiment::{detector_config, instance_emd, EMD_PER_CLASS, IOU_THRESHOLD};
use catreg::trainer::{evaluate_model, train, Mode, RunConfig};

fn main() -> catreg::Result<()> {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let data = StoredDataset::generate(&DatasetSpec::default())?;

    for mode in [Mode::SourceOnly, Mode::DaFasterIcrCcr] {
        let config = RunConfig {
            iters_phase1: iters * 3 / 4,
            iters_phase2: iters - iters * 3 / 4,
            ..RunConfig::new(mode)
        };
        let model = train(&config, detector_config(&data), &data.source, &data.target, None)?.model;
        let result = evaluate_model(&model, &data.target_val, IOU_THRESHOLD);
        println!("{mode}");
        for (c, ap) in result.per_class_ap.iter().enumerate() {
            if let Some(ap) = ap {
                println!("  {:<9} AP {ap:.4}", shape_name(c));
            }
        }
        println!("  target mAP {:.4}", result.map);
        println!("  instance EMD {:.4}", instance_emd(&model, &data, EMD_PER_CLASS, 0)?);
        let n = data.source_val.len().min(data.target_val.len());
        let src = image_features(&model, &data.source_val[..n])?;
        let tgt = image_features(&model, &data.target_val[..n])?;
        println!("  image-level EMD {:.4}", emd_distance(&src, &tgt)?);
    }
    Ok(())
}
