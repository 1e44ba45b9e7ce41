//! Trains one mode on a freshly generated benchmark and reports target and
//! source mAP on the held-out split.
//!
//! cargo run --release --example train_da_faster -- da_faster_icr_ccr 400

use std::time::Instant;

use catreg::dataset::{generate_dataset, generate_validation, DatasetSpec};
use catreg::detector::DetectorConfig;
use catreg::trainer::{evaluate_model, train, Mode, RunConfig};

fn main() -> catreg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mode: Mode = args.get(1).map_or("da_faster_icr_ccr", |s| s.as_str()).parse()?;
    let iters: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(400);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);

    let spec = DatasetSpec::default();
    let (source, target) = generate_dataset(&spec)?;
    let (source_val, target_val) = generate_validation(&spec)?;

    let mut config = RunConfig::new(mode);
    config.seed = seed;
    config.iters_phase1 = iters * 3 / 4;
    config.iters_phase2 = iters - config.iters_phase1;

    let start = Instant::now();
    let out = train(
        &config,
        DetectorConfig::new(spec.num_classes, spec.image_size),
        &source,
        &target,
        None,
    )?;
    let secs = start.elapsed().as_secs_f64();
    for r in out.metrics.iter().step_by((iters / 10).max(1)) {
        println!(
            "iter {:5}  total {:8.4}  det {:.4}  icr {:.4}  img {:.4}  ins {:.4}  cst {:.4}",
            r.iter, r.total, r.l_det, r.l_icr, r.l_img, r.l_ins, r.l_cst
        );
    }
    println!("{:.1} ms/iter", 1e3 * secs / iters as f64);
    let t = evaluate_model(&out.model, &target_val, 0.5);
    let s = evaluate_model(&out.model, &source_val, 0.5);
    println!("{mode}: target mAP {:.4}  source mAP {:.4}", t.map, s.map);
    println!("target annotation reads: {}", out.target_annotation_reads);
    Ok(())
}
