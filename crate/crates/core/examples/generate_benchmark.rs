//! Renders the synthetic source/target benchmark, prints per-class counts
//! and how far the fog shift moves pixels, and optionally writes it to disk.
//!
//! cargo run --release --example generate_benchmark -- /tmp/bench

use std::path::Path;

use catreg::dataset::{apply_domain_shift, render_scene, shape_name, DatasetSpec, Domain, StoredDataset};

fn main() -> catreg::Result<()> {
    let spec = DatasetSpec::default();
    let data = StoredDataset::generate(&spec)?;

    for (name, split) in [
        ("source train", &data.source),
        ("target train", &data.target),
        ("source val", &data.source_val),
        ("target val", &data.target_val),
    ] {
        let mut counts = vec![0usize; spec.num_classes];
        for s in split.iter() {
            for inst in s.evaluation_instances() {
                counts[inst.class_id] += 1;
            }
        }
        let per_class: Vec<String> = counts
            .iter()
            .enumerate()
            .map(|(c, n)| format!("{} {n}", shape_name(c)))
            .collect();
        println!("{name:>12}: {} images, {}", split.len(), per_class.join(", "));
    }

    let (clean, _) = render_scene(&spec, Domain::Target, 0);
    for strength in [0.2, 0.4, 0.6, 0.8, 1.0] {
        let shifted = apply_domain_shift(&clean, spec.shift_kind, strength)?;
        let l2 = (&shifted - &clean).mapv(|v| v * v).sum().sqrt();
        println!("fog strength {strength:.1}: L2 distance to the clean render {l2:.2}");
    }

    if let Some(dir) = std::env::args().nth(1) {
        data.save(Path::new(&dir))?;
        println!("written to {dir}");
    }
    Ok(())
}
