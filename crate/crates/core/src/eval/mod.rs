//! Evaluation and analysis: mAP, earth mover's distance between domains, and
//! feature export for external projection tools.

mod emd;
mod map;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::boxes::BoundingBox;
use crate::dataset::{DetectionSample, Domain};
use crate::error::{Error, Result};
use crate::icr::evidence_peak;
use crate::model::Model;
use crate::trainer::derived_rng;

pub use emd::{distance_matrix, emd_points, euclidean, hungarian, matching_cost};
pub use map::{average_precision, map_score, MapResult};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureTag {
    pub domain: Domain,
    /// `None` for image-level rows.
    pub class_id: Option<usize>,
    pub sample_id: String,
}

/// Feature rows with one tag per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub points: Array2<f64>,
    pub tags: Vec<FeatureTag>,
}

impl FeatureSet {
    pub fn new(points: Array2<f64>, tags: Vec<FeatureTag>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::contract("a feature set needs at least one row"));
        }
        if points.nrows() != tags.len() {
            return Err(Error::contract(format!(
                "{} feature rows but {} tags",
                points.nrows(),
                tags.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("feature set contains non-finite values"));
        }
        Ok(Self { points, tags })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

/// EMD between two tagged feature sets; see [`emd_points`].
pub fn emd_distance(source: &FeatureSet, target: &FeatureSet) -> Result<f64> {
    emd_points(&source.points, &target.points)
}

/// One ground-truth instance chosen for feature analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstanceRef {
    pub domain: Domain,
    pub sample: usize,
    pub instance: usize,
    pub class_id: usize,
}

fn instances_of_class(samples: &[DetectionSample], domain: Domain, class: usize) -> Vec<InstanceRef> {
    samples
        .iter()
        .enumerate()
        .flat_map(|(s, smp)| {
            smp.evaluation_instances()
                .iter()
                .enumerate()
                .filter(move |(_, inst)| inst.class_id == class)
                .map(move |(k, _)| InstanceRef {
                    domain,
                    sample: s,
                    instance: k,
                    class_id: class,
                })
        })
        .collect()
}

/// Per class, draws `min(per_class_count / 2, available)` instances from each
/// domain, with the same count on both sides. When one domain has fewer than
/// half, all of its instances are used and the other side is matched to it.
/// Returns `(source_refs, target_refs)` aligned class by class.
pub fn sample_balanced_instances(
    source: &[DetectionSample],
    target: &[DetectionSample],
    num_classes: usize,
    per_class_count: usize,
    seed: u64,
) -> (Vec<InstanceRef>, Vec<InstanceRef>) {
    let mut out_s = Vec::new();
    let mut out_t = Vec::new();
    for c in 0..num_classes {
        let mut s = instances_of_class(source, Domain::Source, c);
        let mut t = instances_of_class(target, Domain::Target, c);
        if s.is_empty() && t.is_empty() {
            log::warn!("class {c} has no instances in either domain; skipped");
            continue;
        }
        let n = (per_class_count / 2).min(s.len()).min(t.len());
        if n == 0 {
            log::warn!("class {c} is missing from one domain; skipped");
            continue;
        }
        s.shuffle(&mut derived_rng(seed, 0x51, c as u64));
        t.shuffle(&mut derived_rng(seed, 0x52, c as u64));
        out_s.extend_from_slice(&s[..n]);
        out_t.extend_from_slice(&t[..n]);
    }
    (out_s, out_t)
}

/// RoI features of the referenced ground-truth boxes, one row per reference.
pub fn instance_features(model: &Model, samples: &[DetectionSample], refs: &[InstanceRef]) -> Result<FeatureSet> {
    let dim = model.config().roi_feature_dim();
    let mut points = Array2::zeros((refs.len(), dim));
    let mut tags = Vec::with_capacity(refs.len());
    let mut by_sample: Vec<Vec<usize>> = vec![Vec::new(); samples.len()];
    for (row, r) in refs.iter().enumerate() {
        by_sample
            .get_mut(r.sample)
            .ok_or_else(|| Error::contract(format!("sample index {} out of range", r.sample)))?
            .push(row);
    }
    for (s, rows) in by_sample.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let inst = samples[s].evaluation_instances();
        let boxes: Vec<BoundingBox> = rows.iter().map(|&row| inst[refs[row].instance].bbox).collect();
        let feats = model.detector.roi_features(&model.params, &samples[s].image, &boxes);
        for (k, &row) in rows.iter().enumerate() {
            points.row_mut(row).assign(&feats.row(k));
        }
    }
    for r in refs {
        tags.push(FeatureTag {
            domain: r.domain,
            class_id: Some(r.class_id),
            sample_id: samples[r.sample].id.clone(),
        });
    }
    FeatureSet::new(points, tags)
}

/// Globally pooled backbone features, one row per sample.
pub fn image_features(model: &Model, samples: &[DetectionSample]) -> Result<FeatureSet> {
    let d = model.config().feature_dim();
    let mut points = Array2::zeros((samples.len(), d));
    for (i, s) in samples.iter().enumerate() {
        let fm = model.backbone_features(&s.image).feature_map;
        let pooled = fm
            .mean_axis(Axis(2))
            .and_then(|m| m.mean_axis(Axis(1)))
            .expect("non-empty map");
        points.row_mut(i).assign(&pooled);
    }
    let tags = samples
        .iter()
        .map(|s| FeatureTag {
            domain: s.domain,
            class_id: None,
            sample_id: s.id.clone(),
        })
        .collect();
    FeatureSet::new(points, tags)
}

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    rows: usize,
    cols: usize,
    dtype: String,
}

/// Share of `samples` on which the evidence map of the most confident
/// present class peaks inside a ground-truth box of a present class.
/// Images without objects are skipped.
pub fn weak_localization_rate(model: &Model, samples: &[DetectionSample]) -> f64 {
    let mut hits = 0;
    let mut counted = 0;
    for s in samples {
        let inst = s.evaluation_instances();
        if inst.is_empty() {
            continue;
        }
        let feats = model.backbone_features(&s.image);
        let pred = model.icr.icr_forward(&model.params, &feats, s.domain);
        let labels = s.evaluation_image_labels();
        let class = (0..labels.len())
            .filter(|&c| labels[c] == 1)
            .max_by(|&a, &b| pred.probs[a].total_cmp(&pred.probs[b]))
            .expect("non-empty image has a present class");
        let maps = model.icr.class_evidence_maps(&model.params, &feats);
        let (x, y) = evidence_peak(&maps, class, feats.stride);
        counted += 1;
        if inst.iter().any(|i| i.bbox.contains_point(x, y)) {
            hits += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        hits as f64 / counted as f64
    }
}

/// Writes `<stem>.bin` (one JSON header line, then row-major little-endian
/// `f64`) and `<stem>.tags.jsonl` (one tag per row).
pub fn write_feature_set(stem: &Path, set: &FeatureSet) -> Result<(PathBuf, PathBuf)> {
    let bin = stem.with_extension("bin");
    let tags = stem.with_extension("tags.jsonl");
    let header = MatrixHeader {
        rows: set.len(),
        cols: set.dim(),
        dtype: "f64-le".into(),
    };
    let mut buf = serde_json::to_vec(&header).expect("header serializes");
    buf.push(b'\n');
    for v in set.points.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin, buf).map_err(|e| Error::io(&bin, e))?;
    let mut f = fs::File::create(&tags).map_err(|e| Error::io(&tags, e))?;
    for t in &set.tags {
        writeln!(f, "{}", serde_json::to_string(t).expect("tag serializes")).map_err(|e| Error::io(&tags, e))?;
    }
    Ok((bin, tags))
}

pub fn read_feature_set(stem: &Path) -> Result<FeatureSet> {
    let bin = stem.with_extension("bin");
    let tags_path = stem.with_extension("tags.jsonl");
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let fmt = |m: String| Error::Format {
        path: bin.clone(),
        message: m,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fmt("missing header line".into()))?;
    let header: MatrixHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| fmt(format!("bad header: {e}")))?;
    if header.dtype != "f64-le" {
        return Err(fmt(format!("unsupported dtype {}", header.dtype)));
    }
    let body = &bytes[nl + 1..];
    if body.len() != 8 * header.rows * header.cols {
        return Err(fmt("body length does not match header".into()));
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let points = Array2::from_shape_vec((header.rows, header.cols), vals).expect("checked length");
    let text = fs::read_to_string(&tags_path).map_err(|e| Error::io(&tags_path, e))?;
    let tags = text
        .lines()
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: tags_path.clone(),
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<FeatureTag>>>()?;
    FeatureSet::new(points, tags)
}

/// Exports image-level features of every sample and instance-level features
/// of every ground-truth box into `dir`.
pub fn export_features(model: &Model, samples: &[DetectionSample], dir: &Path) -> Result<(FeatureSet, FeatureSet)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let image = image_features(model, samples)?;
    let refs: Vec<InstanceRef> = samples
        .iter()
        .enumerate()
        .flat_map(|(s, smp)| {
            smp.evaluation_instances()
                .iter()
                .enumerate()
                .map(move |(k, inst)| InstanceRef {
                    domain: smp.domain,
                    sample: s,
                    instance: k,
                    class_id: inst.class_id,
                })
        })
        .collect();
    let instance = instance_features(model, samples, &refs)?;
    write_feature_set(&dir.join("image_features"), &image)?;
    write_feature_set(&dir.join("instance_features"), &instance)?;
    Ok((image, instance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, DatasetSpec};
    use crate::detector::DetectorConfig;

    fn data(n: usize) -> (Vec<DetectionSample>, Vec<DetectionSample>) {
        generate_dataset(&DatasetSpec {
            samples_per_domain: n,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn balanced_sampling_matches_counts() {
        let (s, t) = data(40);
        let (rs, rt) = sample_balanced_instances(&s, &t, 3, 20, 1);
        assert_eq!(rs.len(), rt.len());
        for c in 0..3 {
            let ns = rs.iter().filter(|r| r.class_id == c).count();
            let nt = rt.iter().filter(|r| r.class_id == c).count();
            assert_eq!(ns, nt);
            assert_eq!(ns, 10);
        }
        assert_eq!(sample_balanced_instances(&s, &t, 3, 20, 1), (rs, rt));
    }

    #[test]
    fn scarce_domain_limits_both_sides() {
        let (s, t) = data(40);
        let t_small = &t[..3];
        let avail = |set: &[DetectionSample], c| {
            set.iter()
                .flat_map(|x| x.evaluation_instances())
                .filter(|i| i.class_id == c)
                .count()
        };
        let (rs, rt) = sample_balanced_instances(&s, t_small, 3, 50, 2);
        for c in 0..3 {
            let want = avail(t_small, c).min(25).min(avail(&s, c));
            assert_eq!(rs.iter().filter(|r| r.class_id == c).count(), want);
            assert_eq!(rt.iter().filter(|r| r.class_id == c).count(), want);
        }
    }

    #[test]
    fn export_round_trip_and_alignment() {
        let (s, _) = data(4);
        let model = Model::new(DetectorConfig::new(3, 64), 0);
        let dir = tempfile::tempdir().unwrap();
        let (image, instance) = export_features(&model, &s, dir.path()).unwrap();
        assert_eq!(image.len(), 4);
        let n_inst: usize = s.iter().map(|x| x.evaluation_instances().len()).sum();
        assert_eq!(instance.len(), n_inst);
        let back = read_feature_set(&dir.path().join("instance_features")).unwrap();
        assert_eq!(back, instance);
        let again = image_features(&model, &s).unwrap();
        assert_eq!(again, image);
        for (tag, smp) in image.tags.iter().zip(&s) {
            assert_eq!(tag.sample_id, smp.id);
        }
    }

    #[test]
    fn feature_set_rejects_bad_input() {
        let tag = FeatureTag {
            domain: Domain::Source,
            class_id: None,
            sample_id: "a".into(),
        };
        assert!(FeatureSet::new(Array2::zeros((0, 2)), vec![]).is_err());
        assert!(FeatureSet::new(Array2::from_elem((1, 2), f64::NAN), vec![tag.clone()]).is_err());
        assert!(FeatureSet::new(Array2::zeros((2, 2)), vec![tag]).is_err());
    }
}
