//! Synthetic paired-domain detection benchmark.
//!
//! Source and target scenes are drawn from the same generator; target images
//! additionally pass through [`apply_domain_shift`]. Target annotations exist
//! so the evaluation tools can score detections, but training code reaches
//! them only through [`DetectionSample::training_instances`], which refuses
//! and counts the attempt on an [`AnnotationGuard`].

mod render;
mod store;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoundingBox;
use crate::error::{Error, Result};

pub use render::{render_scene, shape_name, FOG_COLOR};
pub use store::{load_dataset, save_dataset, ManifestRecord, StoredDataset, MANIFEST_FILE, SPEC_FILE};

/// `H x W x 3` image in `[0, 1]`.
pub type Image = Array3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source = 0,
    Target = 1,
}

impl Domain {
    /// Domain label `D` of the alignment losses.
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 0.0,
            Domain::Target => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::config("domain", format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    FogBlend,
    ColorShift,
    TextureNoise,
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fog_blend" => Ok(ShiftKind::FogBlend),
            "color_shift" => Ok(ShiftKind::ColorShift),
            "texture_noise" => Ok(ShiftKind::TextureNoise),
            other => Err(Error::config(
                "shift_kind",
                format!("unknown shift kind `{other}` (fog_blend, color_shift, texture_noise)"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub bbox: BoundingBox,
    pub class_id: usize,
}

/// Counts attempts by training code to read target-domain annotations.
#[derive(Clone, Debug, Default)]
pub struct AnnotationGuard(Arc<AtomicUsize>);

impl AnnotationGuard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reads(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }

    fn record(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }
}

#[derive(Clone, Debug)]
pub struct DetectionSample {
    pub id: String,
    pub domain: Domain,
    pub image: Image,
    instances: Vec<Instance>,
    image_labels: Vec<u8>,
    guard: AnnotationGuard,
}

impl DetectionSample {
    pub fn new(
        id: impl Into<String>,
        domain: Domain,
        image: Image,
        instances: Vec<Instance>,
        num_classes: usize,
        guard: AnnotationGuard,
    ) -> Result<Self> {
        if image.shape()[2] != 3 {
            return Err(Error::Data(format!(
                "image must have 3 channels, got {}",
                image.shape()[2]
            )));
        }
        let classes: Vec<usize> = instances.iter().map(|i| i.class_id).collect();
        let image_labels = image_label_vector(&classes, num_classes)?;
        Ok(Self {
            id: id.into(),
            domain,
            image,
            instances,
            image_labels,
            guard,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn guard(&self) -> &AnnotationGuard {
        &self.guard
    }

    /// Instance annotations for supervised training. Source only: a target
    /// sample records the attempt on its guard and returns a contract error.
    pub fn training_instances(&self) -> Result<&[Instance]> {
        self.check_trainable("instance annotations")?;
        Ok(&self.instances)
    }

    /// Image-level label vector for supervised training. Source only.
    pub fn training_image_labels(&self) -> Result<&[u8]> {
        self.check_trainable("image-level labels")?;
        Ok(&self.image_labels)
    }

    /// Annotations for evaluation and analysis. Never call from a training
    /// path.
    pub fn evaluation_instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn evaluation_image_labels(&self) -> &[u8] {
        &self.image_labels
    }

    fn check_trainable(&self, what: &str) -> Result<()> {
        if self.domain == Domain::Target {
            self.guard.record();
            return Err(Error::contract(format!(
                "{what} of target sample `{}` are not available to training",
                self.id
            )));
        }
        Ok(())
    }
}

fn default_val_samples() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub samples_per_domain: usize,
    pub shift_kind: ShiftKind,
    pub shift_strength: f64,
    pub rng_seed: u64,
    /// Held-out samples per domain for evaluation.
    #[serde(default = "default_val_samples")]
    pub val_samples_per_domain: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            image_size: 64,
            samples_per_domain: 200,
            shift_kind: ShiftKind::FogBlend,
            shift_strength: 0.6,
            rng_seed: 7,
            val_samples_per_domain: default_val_samples(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.num_classes > render::MAX_CLASSES {
            return Err(Error::config(
                "num_classes",
                format!("at most {} shape classes are available", render::MAX_CLASSES),
            ));
        }
        if self.image_size < 32 {
            return Err(Error::config("image_size", "must be at least 32"));
        }
        if self.samples_per_domain == 0 {
            return Err(Error::config("samples_per_domain", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.shift_strength) {
            return Err(Error::config("shift_strength", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::toml(text, &e, "dataset config"))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Training split: `samples_per_domain` scenes per domain.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(Vec<DetectionSample>, Vec<DetectionSample>)> {
    spec.validate()?;
    Ok(generate_split(spec, "train", spec.samples_per_domain, 0))
}

/// Held-out split drawn from disjoint per-sample streams.
pub fn generate_validation(spec: &DatasetSpec) -> Result<(Vec<DetectionSample>, Vec<DetectionSample>)> {
    spec.validate()?;
    Ok(generate_split(
        spec,
        "val",
        spec.val_samples_per_domain,
        VAL_STREAM_OFFSET,
    ))
}

const VAL_STREAM_OFFSET: u64 = 1 << 32;

fn generate_split(
    spec: &DatasetSpec,
    split: &str,
    count: usize,
    offset: u64,
) -> (Vec<DetectionSample>, Vec<DetectionSample>) {
    let source_guard = AnnotationGuard::new();
    let target_guard = AnnotationGuard::new();
    let build = |domain: Domain, guard: &AnnotationGuard| -> Vec<DetectionSample> {
        (0..count)
            .map(|i| {
                let index = offset + i as u64;
                let (mut image, instances) = render_scene(spec, domain, index);
                if domain == Domain::Target {
                    image =
                        apply_domain_shift(&image, spec.shift_kind, spec.shift_strength).expect("strength validated");
                    render::quantize(&mut image);
                }
                DetectionSample::new(
                    format!("{split}-{}-{i:05}", domain.as_str()),
                    domain,
                    image,
                    instances,
                    spec.num_classes,
                    guard.clone(),
                )
                .expect("generator emits valid samples")
            })
            .collect()
    };
    (
        build(Domain::Source, &source_guard),
        build(Domain::Target, &target_guard),
    )
}

/// Per-sample RNG stream derived from the dataset seed.
pub(crate) fn sample_rng(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 48) ^ index);
    rng
}

/// Synthetic domain shift. Output stays in `[0, 1]`; strength 0 is the
/// identity and the L2 distance to the input grows with strength.
pub fn apply_domain_shift(image: &Image, kind: ShiftKind, strength: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::config("shift_strength", "must lie in [0, 1]"));
    }
    let mut out = image.clone();
    match kind {
        ShiftKind::FogBlend => {
            for ((_, _, c), v) in out.indexed_iter_mut() {
                *v = (1.0 - strength) * *v + strength * FOG_COLOR[c];
            }
        }
        ShiftKind::ColorShift => {
            const OFFSET: [f64; 3] = [0.35, -0.25, 0.15];
            for ((_, _, c), v) in out.indexed_iter_mut() {
                *v = (*v + strength * OFFSET[c]).clamp(0.0, 1.0);
            }
        }
        ShiftKind::TextureNoise => {
            for ((y, x, c), v) in out.indexed_iter_mut() {
                let n = render::hash_noise(x as u64, y as u64, c as u64);
                *v = (*v + strength * 0.5 * n).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Binary vector of length `num_classes`; entry `c` is 1 iff class `c`
/// occurs among `class_ids`.
pub fn image_label_vector(class_ids: &[usize], num_classes: usize) -> Result<Vec<u8>> {
    let mut labels = vec![0u8; num_classes];
    for &c in class_ids {
        if c >= num_classes {
            return Err(Error::Data(format!(
                "class id {c} out of range for {num_classes} classes"
            )));
        }
        labels[c] = 1;
    }
    Ok(labels)
}
