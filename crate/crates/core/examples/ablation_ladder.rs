//! Runs source_only, da_faster, da_faster_icr and da_faster_icr_ccr over
//! several seeds and prints the comparison table.
//!
//! cargo run --release --example ablation_ladder -- 2000 3

use catreg::dataset::{DatasetSpec, StoredDataset};
use catreg::experiment::{run_ladder, summary_table};
use catreg::trainer::{Mode, RunConfig};

fn main() -> catreg::Result<()> {
    let mut args = std::env::args().skip(1);
    let iters: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);

    let data = StoredDataset::generate(&DatasetSpec::default())?;
    let base = RunConfig {
        iters_phase1: iters * 3 / 4,
        iters_phase2: iters - iters * 3 / 4,
        ..RunConfig::new(Mode::SourceOnly)
    };
    let seeds: Vec<u64> = (0..seeds).collect();
    let reports = run_ladder(&base, &data, &seeds, None, |r| {
        println!(
            "{} seed {}: target {:.4}  source {:.4}  EMD {:.4}",
            r.mode, r.seed, r.target_map, r.source_map, r.instance_emd
        );
    })?;
    println!("\n{}", summary_table(&reports));
    Ok(())
}
