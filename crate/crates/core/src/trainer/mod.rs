//! Two-domain training loop: every iteration draws one source and one target
//! image, builds the mode's objective on a single graph, and takes one SGD
//! step.

pub mod config;
pub mod injected;
pub mod objective;
pub mod optim;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{consistency_term, image_align_term, GrlConfig};
use crate::autograd::{Tensor, Var};
use crate::ccr::{assign_weights, loss_weighted_instance_term, WeightStats};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{DetectionSample, Domain};
use crate::detector::{BackboneFeatures, DetectorConfig};
use crate::error::{Error, Result};
use crate::eval::{map_score, MapResult};
use crate::icr::icr_term;
use crate::model::Model;
use crate::nn::Graph;

pub use config::{Mode, RunConfig};
pub use injected::AlignmentTerm;
pub use objective::{compose_objective, LossBundle, Objective, Term};
pub use optim::{clip_grad_norm, Sgd};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

const SOURCE_ORDER: u64 = 1;
const TARGET_ORDER: u64 = 2;
const SAMPLING: u64 = 3;

/// Deterministic sub-stream of a run seed.
pub fn derived_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) ^ index);
    rng
}

/// Visiting order over a dataset, reshuffled every epoch from a seed
/// derived from the run seed and the epoch number.
#[derive(Clone, Debug)]
struct EpochOrder {
    seed: u64,
    tag: u64,
    epoch: Option<usize>,
    perm: Vec<usize>,
}

impl EpochOrder {
    fn new(seed: u64, tag: u64, len: usize) -> Self {
        Self {
            seed,
            tag,
            epoch: None,
            perm: (0..len).collect(),
        }
    }

    fn index(&mut self, iter: usize) -> usize {
        let n = self.perm.len();
        let epoch = iter / n;
        if self.epoch != Some(epoch) {
            self.perm = (0..n).collect();
            self.perm.shuffle(&mut derived_rng(self.seed, self.tag, epoch as u64));
            self.epoch = Some(epoch);
        }
        self.perm[iter % n]
    }
}

/// Test-only switches used to check the mode ladder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOverrides {
    /// Multiplier on the ICR loss inside the graph.
    pub icr_loss_scale: f64,
    /// When false, CCR modes use unit instance weights.
    pub ccr_enabled: bool,
}

impl Default for TrainOverrides {
    fn default() -> Self {
        Self {
            icr_loss_scale: 1.0,
            ccr_enabled: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DStats {
    pub source: WeightStats,
    pub target: WeightStats,
}

/// One line of the metrics log. Absent terms are written as 0 and left out
/// of `present`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub lr: f64,
    pub l_det: f64,
    pub l_icr: f64,
    pub l_img: f64,
    pub l_ins: f64,
    pub l_cst: f64,
    pub l_global: f64,
    pub l_local: f64,
    pub total: f64,
    pub present: Vec<String>,
    pub d_stats: Option<DStats>,
    /// Locations per image-level domain map, `h * w`.
    pub map_size: usize,
    pub source_sample: String,
    pub target_sample: String,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

impl MetricsRecord {
    pub fn bundle(&self) -> LossBundle {
        let mut b = LossBundle::default();
        let vals = [
            self.l_det,
            self.l_icr,
            self.l_img,
            self.l_ins,
            self.l_cst,
            self.l_global,
            self.l_local,
        ];
        for (t, v) in Term::ALL.into_iter().zip(vals) {
            if self.present.iter().any(|p| p == t.name()) {
                b.set(t, v);
            }
        }
        b
    }
}

/// Forward/backward result of one iteration, before the update.
pub struct StepOutput {
    pub record: MetricsRecord,
    pub grads: Vec<Option<Tensor>>,
}

pub struct Trainer<'a> {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: Sgd,
    pub overrides: TrainOverrides,
    source: &'a [DetectionSample],
    target: &'a [DetectionSample],
    source_order: EpochOrder,
    target_order: EpochOrder,
    global_term: Box<dyn AlignmentTerm>,
    local_term: Box<dyn AlignmentTerm>,
    grl: GrlConfig,
    iter: usize,
    /// ICR loss evaluations per domain `[source, target]`.
    icr_evaluations: [usize; 2],
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: RunConfig,
        detector: DetectorConfig,
        source: &'a [DetectionSample],
        target: &'a [DetectionSample],
    ) -> Result<Self> {
        config.validate()?;
        if source.is_empty() || target.is_empty() {
            return Err(Error::Data("both domains need at least one training sample".into()));
        }
        if source.iter().any(|s| s.domain != Domain::Source) || target.iter().any(|s| s.domain != Domain::Target) {
            return Err(Error::contract(
                "training splits must be source and target respectively",
            ));
        }
        let labels = source[0].evaluation_image_labels().len();
        if labels != detector.num_classes {
            return Err(Error::contract(format!(
                "dataset has {labels} classes, detector is configured for {}",
                detector.num_classes
            )));
        }
        if config.mode.is_adaptive() && config.lambda == 0.0 {
            log::warn!("lambda = 0 disables every adaptation term");
        }
        let grl = GrlConfig::new(Objective::for_config(&config).coefficient)?;
        let model = Model::new(detector, config.seed);
        let optimizer = Sgd::new(&model.params, config.momentum, config.weight_decay);
        Ok(Self {
            source_order: EpochOrder::new(config.seed, SOURCE_ORDER, source.len()),
            target_order: EpochOrder::new(config.seed, TARGET_ORDER, target.len()),
            global_term: Box::new(model.sw_global),
            local_term: Box::new(model.sw_local),
            grl,
            config,
            model,
            optimizer,
            overrides: TrainOverrides::default(),
            source,
            target,
            iter: 0,
            icr_evaluations: [0, 0],
        })
    }

    pub fn with_overrides(mut self, overrides: TrainOverrides) -> Self {
        self.overrides = overrides;
        self
    }

    /// Replaces the default `L_global` / `L_local` terms of `sw_structure`.
    pub fn with_injected_terms(mut self, global: Box<dyn AlignmentTerm>, local: Box<dyn AlignmentTerm>) -> Self {
        self.global_term = global;
        self.local_term = local;
        self
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    /// Number of ICR loss evaluations on target images; always 0.
    pub fn icr_target_updates(&self) -> usize {
        self.icr_evaluations[Domain::Target as usize]
    }

    /// Builds the objective for the current iteration and differentiates it
    /// without touching the weights.
    pub fn forward_backward(&mut self) -> Result<StepOutput> {
        let iter = self.iter;
        let cfg = &self.config;
        let mode = cfg.mode;
        let src = &self.source[self.source_order.index(iter)];
        let tgt = &self.target[self.target_order.index(iter)];
        let model = &self.model;
        let det = &model.detector;
        let grl = self.grl;
        let mut rng = derived_rng(cfg.seed, SAMPLING, iter as u64);
        let mut g = Graph::train(&model.params);
        let mut vars: Vec<(Term, Var)> = Vec::new();

        let bb_s = det.backbone(&mut g, &src.image);
        let dl = det.detection_loss(&mut g, &bb_s, src, &mut rng)?;
        vars.push((Term::Det, dl.total));

        if mode.uses_icr() {
            let p = model.icr.forward(&mut g, bb_s.features);
            let mut l = icr_term(&mut g, p, src)?;
            self.icr_evaluations[src.domain as usize] += 1;
            if self.overrides.icr_loss_scale != 1.0 {
                l = g.tape.scale(l, self.overrides.icr_loss_scale);
            }
            vars.push((Term::Icr, l));
        }

        let mut d_stats = None;
        let mut map_size = 0;
        if mode.is_adaptive() {
            let bb_t = det.backbone(&mut g, &tgt.image);
            let (rois_t, obj_t) =
                det.unsupervised_rois(&mut g, &bb_t, (tgt.height(), tgt.width()), det.config.roi_batch);

            let (w_s, w_t) = if mode.uses_ccr() && self.overrides.ccr_enabled {
                let feats = |v: Var| BackboneFeatures {
                    feature_map: g.tape.value(v).clone().into_dimensionality().expect("rank 3"),
                    stride: crate::detector::STRIDE,
                };
                let pred_s = model
                    .icr
                    .icr_forward(&model.params, &feats(bb_s.features), Domain::Source);
                let pred_t = model
                    .icr
                    .icr_forward(&model.params, &feats(bb_t.features), Domain::Target);
                let batch_s = det.proposal_batch(&g, &dl.rois, vec![1.0; dl.rois.boxes.len()]);
                let batch_t = det.proposal_batch(&g, &rois_t, obj_t);
                let ws = assign_weights(&batch_s, &pred_s, Domain::Source)?;
                let wt = assign_weights(&batch_t, &pred_t, Domain::Target)?;
                d_stats = Some(DStats {
                    source: WeightStats::from_weights(&ws),
                    target: WeightStats::from_weights(&wt),
                });
                (
                    ws.iter().map(|w| w.weight).collect(),
                    wt.iter().map(|w| w.weight).collect(),
                )
            } else {
                (vec![1.0; dl.rois.boxes.len()], vec![1.0; rois_t.boxes.len()])
            };

            let dc = &model.instance_dc;
            let (ins_s, inst_s) = loss_weighted_instance_term(&mut g, dc, dl.rois.pooled, &w_s, Domain::Source, grl)?;
            let (ins_t, inst_t) = loss_weighted_instance_term(&mut g, dc, rois_t.pooled, &w_t, Domain::Target, grl)?;
            let l_ins = g.tape.add(ins_s, ins_t);
            vars.push((Term::Ins, l_ins));

            if mode.uses_image_alignment() {
                let f_s = grl.apply(&mut g, bb_s.features);
                let map_s = model.image_dc.forward(&mut g, f_s);
                let f_t = grl.apply(&mut g, bb_t.features);
                let map_t = model.image_dc.forward(&mut g, f_t);
                map_size = g.tape.value(map_s.probs).len();
                let img_s = image_align_term(&mut g, map_s, Domain::Source);
                let img_t = image_align_term(&mut g, map_t, Domain::Target);
                let l_img = g.tape.add(img_s, img_t);
                vars.push((Term::Img, l_img));
                if cfg.consistency {
                    let c_s = consistency_term(&mut g, map_s.probs, inst_s.probs);
                    let c_t = consistency_term(&mut g, map_t.probs, inst_t.probs);
                    let l_cst = g.tape.add(c_s, c_t);
                    vars.push((Term::Cst, l_cst));
                }
            }
            if mode == Mode::SwStructure {
                let gs = self.global_term.loss(&mut g, &bb_s, Domain::Source);
                let gt = self.global_term.loss(&mut g, &bb_t, Domain::Target);
                let l_global = g.tape.add(gs, gt);
                let ls = self.local_term.loss(&mut g, &bb_s, Domain::Source);
                let lt = self.local_term.loss(&mut g, &bb_t, Domain::Target);
                let l_local = g.tape.add(ls, lt);
                vars.push((Term::Global, l_global));
                vars.push((Term::Local, l_local));
            }
        }

        let mut bundle = LossBundle::default();
        for &(t, v) in &vars {
            let value = g.tape.scalar(v);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    term: t.name().to_string(),
                    iter,
                });
            }
            bundle.set(t, value);
        }
        let total_value = compose_objective(&bundle, cfg)?;

        let obj = Objective::for_config(cfg);
        let pick = |ts: &[Term]| -> Vec<Var> {
            ts.iter()
                .map(|t| vars.iter().find(|(vt, _)| vt == t).expect("composed above").1)
                .collect()
        };
        let base = g.tape.sum_vars(&pick(&obj.unit));
        let total = if obj.scaled.is_empty() {
            base
        } else {
            let s = g.tape.sum_vars(&pick(&obj.scaled));
            let s = g.tape.scale(s, obj.coefficient);
            g.tape.add(base, s)
        };
        if !g.tape.scalar(total).is_finite() {
            return Err(Error::NonFinite {
                term: "total".into(),
                iter,
            });
        }
        let grads = g.tape.backward(total);
        let grads = g.param_grads(&grads);

        let record = MetricsRecord {
            iter,
            lr: cfg.learning_rate(iter),
            l_det: bundle.value(Term::Det),
            l_icr: bundle.value(Term::Icr),
            l_img: bundle.value(Term::Img),
            l_ins: bundle.value(Term::Ins),
            l_cst: bundle.value(Term::Cst),
            l_global: bundle.value(Term::Global),
            l_local: bundle.value(Term::Local),
            total: total_value,
            present: bundle.present().into_iter().map(String::from).collect(),
            d_stats,
            map_size,
            source_sample: src.id.clone(),
            target_sample: tgt.id.clone(),
            grad_norm: 0.0,
        };
        Ok(StepOutput { record, grads })
    }

    /// One full iteration: forward, backward, SGD update.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let mut out = self.forward_backward()?;
        if let Some((i, _)) = out
            .grads
            .iter()
            .enumerate()
            .find(|(_, g)| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        {
            return Err(Error::NonFinite {
                term: format!(
                    "gradient of {}",
                    self.model.params.name(crate::nn::ParamId::from_index(i))
                ),
                iter: self.iter,
            });
        }
        out.record.grad_norm = clip_grad_norm(&mut out.grads, self.config.max_grad_norm);
        self.optimizer.step(&mut self.model.params, &out.grads, out.record.lr);
        self.iter += 1;
        Ok(out.record)
    }

    /// Runs the remaining iterations. With an output directory, streams the
    /// metrics log and writes periodic and final checkpoints there.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<Vec<MetricsRecord>> {
        let mut writer = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join(METRICS_FILE);
                Some(BufWriter::new(fs::File::create(&p).map_err(|e| Error::io(&p, e))?))
            }
            None => None,
        };
        let total = self.config.total_iters();
        let mut records = Vec::with_capacity(total.saturating_sub(self.iter));
        while self.iter < total {
            let rec = self.step()?;
            if let (Some(w), Some(dir)) = (writer.as_mut(), out_dir) {
                let line = serde_json::to_string(&rec).expect("record serializes");
                writeln!(w, "{line}").map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
                let k = self.config.checkpoint_interval;
                if k > 0 && self.iter.is_multiple_of(k) && self.iter < total {
                    let p = dir.join(format!("checkpoint_{:06}.ckpt", self.iter));
                    save_checkpoint(&p, &self.model, Some(&self.optimizer.velocity), self.iter)?;
                }
            }
            if self.iter.is_multiple_of(100) {
                log::info!("iter {} total {:.4} det {:.4}", self.iter, rec.total, rec.l_det);
            }
            records.push(rec);
        }
        if let (Some(mut w), Some(dir)) = (writer, out_dir) {
            w.flush().map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
            save_checkpoint(
                &dir.join(FINAL_CHECKPOINT),
                &self.model,
                Some(&self.optimizer.velocity),
                self.iter,
            )?;
        }
        Ok(records)
    }
}

/// Result of a complete training run.
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRecord>,
    pub icr_target_updates: usize,
    /// Attempted reads of target annotations by training code.
    pub target_annotation_reads: usize,
}

pub fn train(
    config: &RunConfig,
    detector: DetectorConfig,
    source: &[DetectionSample],
    target: &[DetectionSample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), detector, source, target)?;
    let metrics = trainer.run(out_dir)?;
    Ok(TrainOutcome {
        icr_target_updates: trainer.icr_target_updates(),
        target_annotation_reads: target.first().map_or(0, |t| t.guard().reads()),
        model: trainer.model,
        metrics,
    })
}

/// Detections of `model` on `samples`, scored against their annotations.
pub fn evaluate_model(model: &Model, samples: &[DetectionSample], iou_threshold: f64) -> MapResult {
    let dets: Vec<_> = samples.iter().map(|s| model.detect(&s.image)).collect();
    let gts: Vec<_> = samples.iter().map(|s| s.evaluation_instances().to_vec()).collect();
    map_score(&dets, &gts, model.num_classes(), iou_threshold)
}

pub fn evaluate_checkpoint(
    path: &Path,
    samples: &[DetectionSample],
    num_classes: usize,
    iou_threshold: f64,
) -> Result<MapResult> {
    let ck = load_checkpoint(path)?;
    if ck.model.num_classes() != num_classes {
        return Err(Error::contract(format!(
            "checkpoint has {} classes, dataset has {num_classes}",
            ck.model.num_classes()
        )));
    }
    Ok(evaluate_model(&ck.model, samples, iou_threshold))
}
