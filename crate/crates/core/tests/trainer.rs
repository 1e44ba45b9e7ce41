use catreg::dataset::{generate_dataset, DatasetSpec, DetectionSample};
use catreg::detector::DetectorConfig;
use catreg::trainer::{train, Mode, RunConfig, TrainOverrides, Trainer, METRICS_FILE};

fn small_data() -> (Vec<DetectionSample>, Vec<DetectionSample>) {
    generate_dataset(&DatasetSpec {
        samples_per_domain: 24,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn short(mode: Mode, iters: usize) -> RunConfig {
    RunConfig {
        iters_phase1: iters,
        iters_phase2: 0,
        ..RunConfig::new(mode)
    }
}

fn det() -> DetectorConfig {
    DetectorConfig::new(3, 64)
}

#[test]
fn source_only_detection_loss_goes_down() {
    let (s, t) = small_data();
    let out = train(&short(Mode::SourceOnly, 160), det(), &s, &t, None).unwrap();
    let mean = |r: &[catreg::trainer::MetricsRecord]| r.iter().map(|m| m.l_det).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&out.metrics[..40]), mean(&out.metrics[120..]));
    assert!(last < first, "l_det {first} -> {last}");
}

#[test]
fn identical_seeds_give_identical_logs() {
    let (s, t) = small_data();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let cfg = RunConfig {
        seed: 5,
        ..short(Mode::DaFasterIcrCcr, 25)
    };
    for d in &dirs {
        train(&cfg, det(), &s, &t, Some(d.path())).unwrap();
    }
    let a = std::fs::read(dirs[0].path().join(METRICS_FILE)).unwrap();
    let b = std::fs::read(dirs[1].path().join(METRICS_FILE)).unwrap();
    assert_eq!(a.len(), b.len());
    assert!(a == b, "metrics logs differ");
    let other = RunConfig { seed: 6, ..cfg };
    let d = tempfile::tempdir().unwrap();
    train(&other, det(), &s, &t, Some(d.path())).unwrap();
    assert_ne!(std::fs::read(d.path().join(METRICS_FILE)).unwrap(), a);
}

fn detector_params(model: &catreg::model::Model) -> Vec<(String, catreg::autograd::Tensor)> {
    model
        .params
        .ids()
        .filter(|&id| {
            let n = model.params.name(id);
            n.starts_with("backbone.") || n.starts_with("rpn.") || n.starts_with("head.")
        })
        .map(|id| (model.params.name(id).to_string(), model.params.get(id).clone()))
        .collect()
}

#[test]
fn zero_lambda_reproduces_source_only_trajectory() {
    let (s, t) = small_data();
    let base = train(&short(Mode::SourceOnly, 30), det(), &s, &t, None).unwrap();
    let cfg = RunConfig {
        lambda: 0.0,
        ..short(Mode::DaFaster, 30)
    };
    let da = train(&cfg, det(), &s, &t, None).unwrap();
    assert_eq!(detector_params(&base.model), detector_params(&da.model));
    let plain = train(&short(Mode::DaFaster, 30), det(), &s, &t, None).unwrap();
    assert_ne!(detector_params(&base.model), detector_params(&plain.model));
}

#[test]
fn icr_changes_backbone_gradients_from_the_first_step() {
    let (s, t) = small_data();
    let grads = |mode| {
        let mut tr = Trainer::new(short(mode, 1), det(), &s, &t).unwrap();
        let out = tr.forward_backward().unwrap();
        let ids: Vec<_> = tr
            .model
            .params
            .ids()
            .filter(|&id| tr.model.params.name(id).starts_with("backbone."))
            .collect();
        ids.into_iter()
            .map(|id| out.grads[id.index()].clone().unwrap())
            .collect::<Vec<_>>()
    };
    let (a, b) = (grads(Mode::DaFaster), grads(Mode::DaFasterIcr));
    assert_ne!(a, b);
}

#[test]
fn disabling_icr_and_ccr_recovers_da_faster() {
    let (s, t) = small_data();
    let run = |mode, overrides| {
        let mut tr = Trainer::new(short(mode, 20), det(), &s, &t)
            .unwrap()
            .with_overrides(overrides);
        tr.run(None).unwrap();
        tr.model
            .params
            .ids()
            .filter(|&id| !tr.model.params.name(id).starts_with("icr."))
            .map(|id| tr.model.params.get(id).clone())
            .collect::<Vec<_>>()
    };
    let da = run(Mode::DaFaster, TrainOverrides::default());
    let stripped = run(
        Mode::DaFasterIcrCcr,
        TrainOverrides {
            icr_loss_scale: 0.0,
            ccr_enabled: false,
        },
    );
    assert_eq!(da, stripped);
    let full = run(Mode::DaFasterIcrCcr, TrainOverrides::default());
    assert_ne!(da, full);
}

#[test]
fn logged_total_matches_mode_objective() {
    let (s, t) = small_data();
    for mode in [
        Mode::SourceOnly,
        Mode::DaFaster,
        Mode::DaFasterIcr,
        Mode::DaFasterIcrCcr,
        Mode::SwStructure,
    ] {
        let out = train(&short(mode, 6), det(), &s, &t, None).unwrap();
        for m in &out.metrics {
            let expect = match mode {
                Mode::SourceOnly => m.l_det,
                Mode::DaFaster => m.l_det + 0.1 * (m.l_img + m.l_ins + m.l_cst),
                Mode::DaFasterIcr | Mode::DaFasterIcrCcr => m.l_det + m.l_icr + 0.1 * (m.l_img + m.l_ins + m.l_cst),
                Mode::SwStructure => m.l_det + m.l_icr + m.l_ins + m.l_global + m.l_local,
            };
            assert!(
                (m.total - expect).abs() < 1e-9,
                "{mode} iter {}: {} vs {expect}",
                m.iter,
                m.total
            );
            assert!(m.grad_norm.is_finite());
        }
    }
}

#[test]
fn ccr_statistics_are_logged_and_source_weights_stay_unit() {
    let (s, t) = small_data();
    let out = train(&short(Mode::DaFasterIcrCcr, 8), det(), &s, &t, None).unwrap();
    for m in &out.metrics {
        let d = m.d_stats.expect("ccr mode logs weight statistics");
        assert_eq!((d.source.min, d.source.max, d.source.fg_fraction), (1.0, 1.0, 0.0));
        assert!(d.target.min >= 1.0 && d.target.max <= std::f64::consts::E);
        assert!(m.map_size > 0);
    }
    let plain = train(&short(Mode::DaFaster, 2), det(), &s, &t, None).unwrap();
    assert!(plain.metrics.iter().all(|m| m.d_stats.is_none()));
}

#[test]
fn target_annotations_stay_unread() {
    let (s, t) = small_data();
    for mode in Mode::LADDER {
        let out = train(&short(mode, 4), det(), &s, &t, None).unwrap();
        assert_eq!(out.target_annotation_reads, 0, "{mode}");
        assert_eq!(out.icr_target_updates, 0, "{mode}");
    }
}

#[test]
fn checkpoints_are_written_on_schedule() {
    let (s, t) = small_data();
    let d = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        checkpoint_interval: 4,
        ..short(Mode::DaFaster, 10)
    };
    let out = train(&cfg, det(), &s, &t, Some(d.path())).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(d.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    names.sort();
    assert_eq!(names.len(), 3, "{names:?}");
    assert!(names.contains(&"model.ckpt".to_string()));
    let ck = catreg::checkpoint::load_checkpoint(&d.path().join("model.ckpt")).unwrap();
    assert_eq!(ck.header.iteration, 10);
    assert_eq!(ck.model.params.values(), out.model.params.values());
    assert!(ck.momentum.is_some());
}
