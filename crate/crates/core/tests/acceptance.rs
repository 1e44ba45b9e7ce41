//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Criteria 8 to 11 share one training ladder.

use std::f64::consts::{E, LN_2};
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use catreg::alignment::{consistency_loss, image_align_loss, image_align_term, instance_align_loss, GrlConfig};
use catreg::autograd::{finite_difference, max_relative_error, Tensor};
use catreg::boxes::BoundingBox;
use catreg::ccr::{
    ccr_weight, gradient_weighted_instance_term, loss_weighted_instance_term, weighted_instance_align, InstanceWeight,
};
use catreg::dataset::{generate_dataset, DatasetSpec, DetectionSample, Domain, Instance, StoredDataset};
use catreg::detector::{Detection, DetectorConfig};
use catreg::eval::{emd_points, map_score};
use catreg::experiment::{mode_mean, run_ladder, RunReport};
use catreg::icr::{icr_loss_values, icr_term};
use catreg::model::Model;
use catreg::nn::Graph;
use catreg::trainer::{train, Mode, RunConfig, METRICS_FILE};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(size: usize, r: &mut ChaCha8Rng) -> ndarray::Array3<f64> {
    ndarray::Array3::from_shape_fn((size, size, 3), |_| r.random_range(0.0..1.0))
}

fn random_boxes(n: usize, size: f64, r: &mut ChaCha8Rng) -> Vec<BoundingBox> {
    (0..n)
        .map(|_| {
            let x0 = r.random_range(0.0..size * 0.6);
            let y0 = r.random_range(0.0..size * 0.6);
            let w = r.random_range(4.0..size * 0.4);
            let h = r.random_range(4.0..size * 0.4);
            BoundingBox::from_corners_unchecked(x0, y0, x0 + w, y0 + h)
        })
        .collect()
}

fn backbone_ids(model: &Model) -> Vec<catreg::nn::ParamId> {
    model
        .params
        .ids()
        .filter(|&id| model.params.name(id).starts_with("backbone."))
        .collect()
}

// ---------------------------------------------------------------- 1

fn grl_exactness() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst_param = 0.0f64;
    for fixture in 0..20u64 {
        let model = Model::new(DetectorConfig::new(3, 32), fixture);
        let image = random_image(32, &mut r);
        let lambda = r.random_range(0.01..2.0);
        let domain = if fixture % 2 == 0 {
            Domain::Source
        } else {
            Domain::Target
        };
        let run = |reverse: bool| {
            let mut g = Graph::train(&model.params);
            let bb = model.detector.backbone(&mut g, &image);
            let x = if reverse {
                GrlConfig::new(lambda).unwrap().apply(&mut g, bb.features)
            } else {
                bb.features
            };
            let scores = model.image_dc.forward(&mut g, x);
            let loss = image_align_term(&mut g, scores, domain);
            let grads = g.tape.backward(loss);
            let at_features = grads.get(bb.features).unwrap().clone();
            (at_features, g.param_grads(&grads))
        };
        let (plain_f, plain) = run(false);
        let (rev_f, rev) = run(true);
        if rev_f != &plain_f * -lambda {
            return Err(format!(
                "fixture {fixture}: gradient at the reversal point is not -lambda * identity"
            ));
        }
        for id in backbone_ids(&model) {
            let a = plain[id.index()].as_ref().unwrap() * -lambda;
            let b = rev[id.index()].as_ref().unwrap();
            let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
            let err = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale;
            worst_param = worst_param.max(err);
        }
        for id in model
            .params
            .ids()
            .filter(|&id| model.params.name(id).starts_with("image_dc."))
        {
            if plain[id.index()] != rev[id.index()] {
                return Err(format!(
                    "fixture {fixture}: classifier gradients changed by the reversal"
                ));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_param < 1e-12 && secs < 10.0,
        format!("20 fixtures, exact at the reversal point, backbone params max rel err {worst_param:.1e}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 2

fn close(name: &str, got: f64, want: f64, tol: f64, fails: &mut Vec<String>) {
    if (got - want).abs().is_nan() || (got - want).abs() > tol {
        fails.push(format!("{name}: {got} vs {want}"));
    }
}

fn loss_closed_forms() -> Outcome {
    let start = Instant::now();
    let mut f = Vec::new();
    let half = |h, w| Array2::from_elem((h, w), 0.5);
    close(
        "img 1x1 source",
        image_align_loss(&half(1, 1), Domain::Source),
        LN_2,
        1e-6,
        &mut f,
    );
    close(
        "img 2x2 source",
        image_align_loss(&half(2, 2), Domain::Source),
        4.0 * LN_2,
        1e-6,
        &mut f,
    );
    close(
        "img 2x2 target",
        image_align_loss(&half(2, 2), Domain::Target),
        4.0 * LN_2,
        1e-6,
        &mut f,
    );
    close(
        "img confident target",
        image_align_loss(&Array2::from_elem((1, 1), 1.0 - 1e-12), Domain::Target),
        0.0,
        1e-6,
        &mut f,
    );
    close(
        "ins single",
        instance_align_loss(&[0.5], Domain::Source, None).unwrap(),
        LN_2,
        1e-6,
        &mut f,
    );
    close(
        "ins weighted",
        instance_align_loss(&[0.5, 0.5], Domain::Target, Some(&[1.0, E])).unwrap(),
        LN_2 * (1.0 + E),
        1e-6,
        &mut f,
    );
    let m = half(3, 3);
    close("cst agree", consistency_loss(&m, &[0.5, 0.5]), 0.0, 1e-6, &mut f);
    close("cst one", consistency_loss(&m, &[0.7]), 0.2, 1e-6, &mut f);
    close("cst two", consistency_loss(&m, &[0.4, 0.6]), 0.2, 1e-6, &mut f);
    close("cst empty", consistency_loss(&m, &[]), 0.0, 1e-6, &mut f);
    close(
        "icr two",
        icr_loss_values(&[0.5, 0.5], &[1, 0]).unwrap(),
        2.0 * LN_2,
        1e-6,
        &mut f,
    );
    close(
        "icr perfect",
        icr_loss_values(&[1.0, 0.0], &[1, 0]).unwrap(),
        0.0,
        1e-6,
        &mut f,
    );
    close(
        "icr 0.9",
        icr_loss_values(&[0.9], &[1]).unwrap(),
        -(0.9f64.ln()),
        1e-6,
        &mut f,
    );
    close("d zero gap", ccr_weight(0.7, 0.7).unwrap(), 1.0, 1e-6, &mut f);
    close("d max gap", ccr_weight(1.0, 0.0).unwrap(), E, 1e-6, &mut f);
    close("d 0.9/0.1", ccr_weight(0.9, 0.1).unwrap(), 0.8f64.exp(), 1e-6, &mut f);
    close("d 0.8/0.1", ccr_weight(0.8, 0.1).unwrap(), 0.7f64.exp(), 1e-6, &mut f);
    let unit = |n: usize| {
        (0..n)
            .map(|j| InstanceWeight {
                proposal_index: j,
                class: None,
                weight: 1.0,
            })
            .collect::<Vec<_>>()
    };
    let mut single = unit(1);
    single[0].weight = E;
    close(
        "ccr single",
        weighted_instance_align(&[0.5], &single, Domain::Target).unwrap(),
        E * LN_2,
        1e-6,
        &mut f,
    );
    let mut r = rng(202);
    for k in 0..200 {
        let n = 1 + k % 9;
        let p: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let domain = if k % 2 == 0 { Domain::Source } else { Domain::Target };
        close(
            &format!("unit weights {k}"),
            weighted_instance_align(&p, &unit(n), domain).unwrap(),
            instance_align_loss(&p, domain, None).unwrap(),
            1e-9,
            &mut f,
        );
    }
    let mut out_of_range = 0usize;
    let mut iff = 0usize;
    for k in 0..100_000 {
        let p: f64 = r.random_range(0.0..=1.0);
        let y = if k % 10 == 0 { p } else { r.random_range(0.0..=1.0) };
        let d = ccr_weight(p, y).unwrap();
        out_of_range += !(1.0..=E).contains(&d) as usize;
        iff += ((d == 1.0) != (p == y)) as usize;
    }
    if out_of_range + iff > 0 {
        f.push(format!(
            "{out_of_range} weights outside [1, e], {iff} violate d = 1 iff zero gap"
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 30.0 {
        f.push(format!("took {secs:.1}s"));
    }
    check(
        f.is_empty(),
        if f.is_empty() {
            format!("all closed forms within 1e-6, 200 unit-weight checks, 1e5 weight pairs, {secs:.1}s")
        } else {
            f.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 3

fn ccr_realizations_agree() -> Outcome {
    let mut r = rng(303);
    let mut worst = 0.0f64;
    for fixture in 0..20u64 {
        let model = Model::new(DetectorConfig::new(3, 32), 50 + fixture);
        let image = random_image(32, &mut r);
        let n = 1 + (fixture as usize) % 6;
        let boxes = random_boxes(n, 32.0, &mut r);
        let weights: Vec<f64> = (0..n)
            .map(|_| ccr_weight(r.random_range(0.0..1.0), r.random_range(0.0..1.0)).unwrap())
            .collect();
        let domain = if fixture % 2 == 0 {
            Domain::Target
        } else {
            Domain::Source
        };
        let grl = GrlConfig::new(r.random_range(0.05..1.0)).unwrap();
        let run = |gradient_side: bool| {
            let mut g = Graph::train(&model.params);
            let bb = model.detector.backbone(&mut g, &image);
            let rois = model.detector.roi_head(&mut g, bb.features, &boxes);
            let (loss, _) = if gradient_side {
                gradient_weighted_instance_term(&mut g, &model.instance_dc, rois.pooled, &weights, domain, grl)
            } else {
                loss_weighted_instance_term(&mut g, &model.instance_dc, rois.pooled, &weights, domain, grl)
            }
            .unwrap();
            let grads = g.tape.backward(loss);
            g.param_grads(&grads)
        };
        let (a, b) = (run(false), run(true));
        for id in backbone_ids(&model) {
            let (ga, gb) = (a[id.index()].as_ref().unwrap(), b[id.index()].as_ref().unwrap());
            let scale = ga.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
            let err = ga.iter().zip(gb).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale;
            worst = worst.max(err);
        }
    }
    check(
        worst < 1e-12,
        format!("20 fixtures through backbone and RoI pooling, max rel diff {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- 4

fn gradient_checks() -> Outcome {
    let (source, _) = generate_dataset(&DatasetSpec {
        samples_per_domain: 4,
        image_size: 32,
        ..DatasetSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let model = Model::new(DetectorConfig::new(3, 32), 404);
    let d = model.config().feature_dim();
    let mut r = rng(404);
    let feats = Tensor::from_shape_fn(IxDyn(&[d, 4, 4]), |_| r.random_range(-1.0..1.0));

    let icr_loss = |x: &Tensor, sample: &DetectionSample, grad: bool| {
        let mut g = Graph::train(&model.params);
        let v = if grad {
            g.tape.variable(x.clone())
        } else {
            g.tape.constant(x.clone())
        };
        let scores = model.icr.forward(&mut g, v);
        let l = icr_term(&mut g, scores, sample).unwrap();
        let value = g.tape.scalar(l);
        let gx = grad.then(|| g.tape.backward(l).get(v).unwrap().clone());
        (value, gx)
    };
    let mut icr_err = 0.0f64;
    for sample in &source {
        let analytic = icr_loss(&feats, sample, true).1.unwrap();
        let numeric = finite_difference(&feats, 1e-5, |x| icr_loss(x, sample, false).0);
        icr_err = icr_err.max(max_relative_error(&analytic, &numeric, 1e-6));
    }

    let boxes = random_boxes(3, 32.0, &mut r);
    let roi_loss = |x: &Tensor, grad: bool| {
        let mut g = Graph::train(&model.params);
        let v = if grad {
            g.tape.variable(x.clone())
        } else {
            g.tape.constant(x.clone())
        };
        let rois = model.detector.roi_head(&mut g, v, &boxes);
        let a = g.tape.sigmoid(rois.cls_logits);
        let b = g.tape.sigmoid(rois.deltas);
        let p = g.tape.sigmoid(rois.pooled);
        let sums = [g.tape.sum(a), g.tape.sum(b), g.tape.sum(p)];
        let l = g.tape.sum_vars(&sums);
        let value = g.tape.scalar(l);
        let gx = grad.then(|| g.tape.backward(l).get(v).unwrap().clone());
        (value, gx)
    };
    let analytic = roi_loss(&feats, true).1.unwrap();
    let numeric = finite_difference(&feats, 1e-5, |x| roi_loss(x, false).0);
    let roi_err = max_relative_error(&analytic, &numeric, 1e-6);
    check(
        icr_err < 1e-4 && roi_err < 1e-3,
        format!("ICR loss max rel err {icr_err:.1e} (< 1e-4), RoI path {roi_err:.1e} (< 1e-3)"),
    )
}

// ---------------------------------------------------------------- 5

fn oracle_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let area = |x: &BoundingBox| (x.x_max - x.x_min) * (x.y_max - x.y_min);
    inter / (area(a) + area(b) - inter)
}

/// Recomputes the matching from scratch for every score cutoff, collects
/// the (recall, precision) points and integrates the upper envelope.
fn brute_force_ap(dets: &[(usize, Detection)], gts: &[Vec<Instance>], class: usize) -> Option<f64> {
    let num_gt = gts.iter().flatten().filter(|g| g.class_id == class).count();
    if num_gt == 0 {
        return None;
    }
    let mut own: Vec<&(usize, Detection)> = dets.iter().filter(|(_, d)| d.class_id == class).collect();
    own.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
    let mut points = Vec::new();
    for k in 1..=own.len() {
        let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for (img, d) in own.iter().take(k).map(|x| (x.0, &x.1)) {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[img].iter().enumerate() {
                if g.class_id != class {
                    continue;
                }
                let o = oracle_iou(&d.bbox, &g.bbox);
                if best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            if let Some((j, o)) = best {
                if o >= 0.5 && !taken[img][j] {
                    taken[img][j] = true;
                    tp += 1;
                }
            }
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / k as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(rec, _) in &points {
        let envelope = points
            .iter()
            .filter(|(r2, _)| *r2 >= rec)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        ap += (rec - prev_recall) * envelope;
        prev_recall = rec;
    }
    Some(ap)
}

fn map_oracle() -> Outcome {
    let sq = |x: f64, y: f64| BoundingBox::from_corners_unchecked(x, y, x + 10.0, y + 10.0);
    let gt = vec![vec![
        Instance {
            bbox: sq(0.0, 0.0),
            class_id: 0,
        },
        Instance {
            bbox: sq(30.0, 30.0),
            class_id: 0,
        },
    ]];
    let fixed = vec![vec![
        Detection {
            bbox: sq(0.0, 0.0),
            class_id: 0,
            score: 0.9,
        },
        Detection {
            bbox: sq(60.0, 0.0),
            class_id: 0,
            score: 0.8,
        },
        Detection {
            bbox: sq(30.0, 30.0),
            class_id: 0,
            score: 0.7,
        },
    ]];
    let fixed_map = map_score(&fixed, &gt, 1, 0.5).map;
    let mut r = rng(505);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let images = r.random_range(1..=2);
        let classes = r.random_range(1..=2);
        let mut gts: Vec<Vec<Instance>> = vec![Vec::new(); images];
        for _ in 0..r.random_range(1..=3) {
            let img = r.random_range(0..images);
            let (x, y) = (r.random_range(0.0..30.0), r.random_range(0.0..30.0));
            gts[img].push(Instance {
                bbox: sq(x, y),
                class_id: r.random_range(0..classes),
            });
        }
        let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); images];
        let mut flat = Vec::new();
        for _ in 0..r.random_range(0..=5) {
            let img = r.random_range(0..images);
            let near = !gts[img].is_empty() && r.random_bool(0.7);
            let (x, y) = if near {
                let g = gts[img][r.random_range(0..gts[img].len())].bbox;
                (g.x_min + r.random_range(-4.0..4.0), g.y_min + r.random_range(-4.0..4.0))
            } else {
                (r.random_range(0.0..30.0), r.random_range(0.0..30.0))
            };
            let d = Detection {
                bbox: sq(x, y),
                class_id: r.random_range(0..classes),
                score: r.random_range(0.0..1.0),
            };
            dets[img].push(d);
            flat.push((img, d));
        }
        let got = map_score(&dets, &gts, classes, 0.5);
        let aps: Vec<Option<f64>> = (0..classes).map(|c| brute_force_ap(&flat, &gts, c)).collect();
        let present: Vec<f64> = aps.iter().flatten().copied().collect();
        let want = present.iter().sum::<f64>() / present.len() as f64;
        worst = worst.max((got.map - want).abs());
        for (a, b) in got.per_class_ap.iter().zip(&aps) {
            match (a, b) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => return Err("per-class presence differs from the oracle".into()),
            }
        }
    }
    check(
        worst < 1e-9 && (fixed_map - 0.8333).abs() < 1e-4,
        format!("50 fixtures max |diff| {worst:.1e}, fixed example AP {fixed_map:.4}"),
    )
}

// ---------------------------------------------------------------- 6

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_force_emd(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let dist = |i: usize, j: usize| {
        a.row(i)
            .iter()
            .zip(b.row(j).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    permutations(n)
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| dist(i, j)).sum::<f64>() / n as f64)
        .fold(f64::INFINITY, f64::min)
}

fn emd_oracle() -> Outcome {
    let mut r = rng(606);
    let mut mismatches = 0;
    let cloud = |n: usize, d: usize, r: &mut ChaCha8Rng| Array2::from_shape_fn((n, d), |_| r.random_range(-2.0..2.0));
    for k in 0..100 {
        let n = 1 + k % 7;
        let d = 1 + k % 4;
        let (a, b) = (cloud(n, d, &mut r), cloud(n, d, &mut r));
        if emd_points(&a, &b).unwrap() != brute_force_emd(&a, &b) {
            mismatches += 1;
        }
    }
    let mut axiom_failures = 0;
    for k in 0..200 {
        let n = 1 + k % 6;
        let d = 1 + k % 3;
        let (a, b, c) = (cloud(n, d, &mut r), cloud(n, d, &mut r), cloud(n, d, &mut r));
        let e = |x: &Array2<f64>, y: &Array2<f64>| emd_points(x, y).unwrap();
        let (ab, ba, bc, ac) = (e(&a, &b), e(&b, &a), e(&b, &c), e(&a, &c));
        let mut shuffled = a.clone();
        shuffled.invert_axis(ndarray::Axis(0));
        let ok = ab >= 0.0 && (ab - ba).abs() <= 1e-12 && e(&a, &shuffled) == 0.0 && ab > 0.0 && ac <= ab + bc + 1e-12;
        axiom_failures += !ok as usize;
    }
    check(
        mismatches == 0 && axiom_failures == 0,
        format!("{mismatches}/100 oracle mismatches (N <= 7, exact), {axiom_failures}/200 axiom failures"),
    )
}

// ---------------------------------------------------------------- 7

fn objective_is_literal(data: &StoredDataset) -> Outcome {
    let config = RunConfig {
        iters_phase1: 100,
        iters_phase2: 0,
        ..RunConfig::new(Mode::DaFasterIcrCcr)
    };
    let detector = catreg::experiment::detector_config(data);
    let out = train(&config, detector, &data.source, &data.target, None).map_err(|e| e.to_string())?;
    let worst = out
        .metrics
        .iter()
        .map(|m| (m.total - (m.l_det + m.l_icr + 0.1 * (m.l_img + m.l_ins + m.l_cst))).abs())
        .fold(0.0f64, f64::max);
    check(
        config.lambda == 0.1 && out.metrics.len() == 100 && worst < 1e-6,
        format!(
            "lambda {}, {} steps, max |total - formula| {worst:.1e}",
            config.lambda,
            out.metrics.len()
        ),
    )
}

// ---------------------------------------------------------------- 8 to 11

struct Ladder {
    reports: Vec<RunReport>,
    dir: tempfile::TempDir,
    base: RunConfig,
    seconds: f64,
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn run_the_ladder(data: &StoredDataset) -> Result<Ladder, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = RunConfig::new(Mode::SourceOnly);
    let start = Instant::now();
    let reports = run_ladder(&base, data, &SEEDS, Some(dir.path()), |r| {
        println!(
            "  ladder {} seed {}: target mAP {:.4}  source mAP {:.4}  EMD {:.4}  weak loc {:.3}",
            r.mode, r.seed, r.target_map, r.source_map, r.instance_emd, r.weak_localization
        );
    })
    .map_err(|e| e.to_string())?;
    Ok(Ladder {
        reports,
        dir,
        base,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn by(ladder: &Ladder, mode: Mode, seed: u64) -> &RunReport {
    ladder
        .reports
        .iter()
        .find(|r| r.mode == mode && r.seed == seed)
        .unwrap()
}

fn directional_adaptation(ladder: &Ladder) -> Outcome {
    let mean = |m| mode_mean(&ladder.reports, m, |r| r.target_map);
    let [so, da, icr, full] = Mode::LADDER.map(mean);
    let wins = SEEDS
        .iter()
        .filter(|&&s| by(ladder, Mode::DaFasterIcrCcr, s).target_map > by(ladder, Mode::DaFaster, s).target_map)
        .count();
    check(
        so < da && da <= icr && icr <= full && wins >= 2 && ladder.seconds < 45.0 * 60.0,
        format!(
            "mean target mAP source_only {so:.4}, da_faster {da:.4}, da_faster_icr {icr:.4}, da_faster_icr_ccr {full:.4}; \
             full beats da_faster in {wins}/3 seeds; ladder {:.0}s",
            ladder.seconds
        ),
    )
}

fn directional_distance(ladder: &Ladder) -> Outcome {
    let lower = SEEDS
        .iter()
        .filter(|&&s| by(ladder, Mode::DaFasterIcrCcr, s).instance_emd < by(ladder, Mode::SourceOnly, s).instance_emd)
        .count();
    let pairs: Vec<String> = SEEDS
        .iter()
        .map(|&s| {
            format!(
                "{:.3}/{:.3}",
                by(ladder, Mode::SourceOnly, s).instance_emd,
                by(ladder, Mode::DaFasterIcrCcr, s).instance_emd
            )
        })
        .collect();
    check(
        lower >= 2,
        format!(
            "EMD source_only/da_faster_icr_ccr per seed {}; lower in {lower}/3",
            pairs.join(", ")
        ),
    )
}

fn firewall_and_determinism(ladder: &Ladder, data: &StoredDataset) -> Outcome {
    let leaks: usize = ladder
        .reports
        .iter()
        .map(|r| r.target_annotation_reads + r.icr_target_updates)
        .sum();
    let config = RunConfig {
        mode: Mode::DaFasterIcrCcr,
        seed: 0,
        ..ladder.base.clone()
    };
    let again = tempfile::tempdir().map_err(|e| e.to_string())?;
    train(
        &config,
        catreg::experiment::detector_config(data),
        &data.source,
        &data.target,
        Some(again.path()),
    )
    .map_err(|e| e.to_string())?;
    let read = |p: std::path::PathBuf| std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
    let first = read(ladder.dir.path().join("da_faster_icr_ccr_seed0").join(METRICS_FILE))?;
    let second = read(again.path().join(METRICS_FILE))?;
    check(
        leaks == 0 && first == second,
        format!(
            "target annotation reads + ICR target updates over 12 runs: {leaks}; rerun log {} ({} bytes)",
            if first == second { "byte-identical" } else { "differs" },
            second.len()
        ),
    )
}

fn weak_localization(ladder: &Ladder) -> Outcome {
    let rates: Vec<f64> = SEEDS
        .iter()
        .map(|&s| by(ladder, Mode::DaFasterIcrCcr, s).weak_localization)
        .collect();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    check(
        rates.iter().all(|&r| r >= 0.6),
        format!(
            "da_faster_icr_ccr evidence peak inside a GT box per seed {:?}, mean {mean:.3}",
            rates.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
        ),
    )
}

// ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let data = StoredDataset::generate(&DatasetSpec::default()).expect("benchmark data");
    let mut failed = 0;
    let mut report = |n: u32, name: &str, r: Outcome| {
        failed += r.is_err() as usize;
        print_line(n, name, &r);
    };
    report(1, "GRL exactness", guarded(grl_exactness));
    report(2, "loss closed forms", guarded(loss_closed_forms));
    report(3, "CCR realization equivalence", guarded(ccr_realizations_agree));
    report(4, "gradient checks", guarded(gradient_checks));
    report(5, "mAP oracle", guarded(map_oracle));
    report(6, "EMD oracle", guarded(emd_oracle));
    report(7, "objective literalness", guarded(|| objective_is_literal(&data)));
    match panic::catch_unwind(AssertUnwindSafe(|| run_the_ladder(&data))) {
        Ok(Ok(ladder)) => {
            report(8, "directional adaptation", guarded(|| directional_adaptation(&ladder)));
            report(
                9,
                "directional domain distance",
                guarded(|| directional_distance(&ladder)),
            );
            report(
                10,
                "firewall and determinism",
                guarded(|| firewall_and_determinism(&ladder, &data)),
            );
            report(11, "weak localization", guarded(|| weak_localization(&ladder)));
        }
        other => {
            let why = match other {
                Ok(Err(e)) => e,
                _ => "ladder panicked".to_string(),
            };
            for (n, name) in [
                (8, "directional adaptation"),
                (9, "directional domain distance"),
                (10, "firewall and determinism"),
                (11, "weak localization"),
            ] {
                report(n, name, Err(format!("ladder failed: {why}")));
            }
        }
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn print_line(n: u32, name: &str, r: &Outcome) {
    match r {
        Ok(d) => println!("PASS criterion {n:>2} ({name}): {d}"),
        Err(d) => println!("FAIL criterion {n:>2} ({name}): {d}"),
    }
}
