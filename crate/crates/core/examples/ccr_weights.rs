//! Shows the instance weights CCR hands to the instance-level alignment
//! loss on target images, after a short ICR + CCR training run.
//!
//! cargo run --release --example ccr_weights -- 300

use catreg::ccr::{assign_weights, ccr_weight, WeightStats};
use catreg::dataset::{generate_dataset, DatasetSpec, Domain};
use catreg::detector::DetectorConfig;
use catreg::nn::Graph;
use catreg::trainer::{train, Mode, RunConfig};

fn main() -> catreg::Result<()> {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);

    println!("weight as a function of the gap between RoI and image-level confidence:");
    for (p, y) in [(0.7, 0.7), (0.8, 0.6), (0.9, 0.1), (1.0, 0.0)] {
        println!("  p = {p:.1}, y = {y:.1}  ->  d = {:.4}", ccr_weight(p, y)?);
    }

    let spec = DatasetSpec {
        samples_per_domain: 60,
        ..DatasetSpec::default()
    };
    let (source, target) = generate_dataset(&spec)?;
    let config = RunConfig {
        iters_phase1: iters,
        iters_phase2: 0,
        ..RunConfig::new(Mode::DaFasterIcrCcr)
    };
    let det = DetectorConfig::new(spec.num_classes, spec.image_size);
    let model = train(&config, det, &source, &target, None)?.model;

    for sample in target.iter().take(4) {
        let pred = model.image_prediction(&sample.image, Domain::Target);
        let mut g = Graph::inference(&model.params);
        let bb = model.detector.backbone(&mut g, &sample.image);
        let hw = (sample.height(), sample.width());
        let (rois, scores) = model.detector.unsupervised_rois(&mut g, &bb, hw, 8);
        let batch = model.detector.proposal_batch(&g, &rois, scores);
        let weights = assign_weights(&batch, &pred, Domain::Target)?;
        let probs: Vec<String> = pred.probs.iter().map(|p| format!("{p:.2}")).collect();
        println!(
            "\n{}: image-level class probabilities [{}]",
            sample.id,
            probs.join(", ")
        );
        for w in &weights {
            let b = batch.boxes[w.proposal_index];
            let class = w.class.map_or("background".to_string(), |c| format!("class {c}"));
            println!(
                "  box ({:5.1},{:5.1})-({:5.1},{:5.1})  {class:<10}  weight {:.3}",
                b.x_min, b.y_min, b.x_max, b.y_max, w.weight
            );
        }
        let stats = WeightStats::from_weights(&weights);
        println!("  min {:.3}  max {:.3}  mean {:.3}", stats.min, stats.max, stats.mean);
    }
    Ok(())
}
