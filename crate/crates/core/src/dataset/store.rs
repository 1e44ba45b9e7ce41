//! On-disk layout of a generated benchmark:
//!
//! ```text
//! <dir>/dataset.toml      generator spec
//! <dir>/manifest.jsonl    one record per sample
//! <dir>/images/<id>.png
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotationGuard, DatasetSpec, DetectionSample, Domain, Image, Instance};
use crate::boxes::BoundingBox;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPEC_FILE: &str = "dataset.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub domain: Domain,
    pub split: String,
    pub image_path: String,
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct StoredDataset {
    pub spec: DatasetSpec,
    pub source: Vec<DetectionSample>,
    pub target: Vec<DetectionSample>,
    pub source_val: Vec<DetectionSample>,
    pub target_val: Vec<DetectionSample>,
}

impl StoredDataset {
    /// Generates all four splits in memory.
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let (source, target) = super::generate_dataset(spec)?;
        let (source_val, target_val) = super::generate_validation(spec)?;
        Ok(Self {
            spec: spec.clone(),
            source,
            target,
            source_val,
            target_val,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_dataset(
            dir,
            &self.spec,
            (&self.source, &self.target),
            (&self.source_val, &self.target_val),
        )
    }

    pub fn split(&self, domain: Domain, val: bool) -> &[DetectionSample] {
        match (domain, val) {
            (Domain::Source, false) => &self.source,
            (Domain::Target, false) => &self.target,
            (Domain::Source, true) => &self.source_val,
            (Domain::Target, true) => &self.target_val,
        }
    }
}

fn write_png(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            px.0[c] = (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Image::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Writes both splits of both domains into `dir`.
pub fn save_dataset(
    dir: &Path,
    spec: &DatasetSpec,
    train: (&[DetectionSample], &[DetectionSample]),
    val: (&[DetectionSample], &[DetectionSample]),
) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let spec_path = dir.join(SPEC_FILE);
    let text = toml::to_string(spec).map_err(|e| Error::config("dataset", e.to_string()))?;
    fs::write(&spec_path, text).map_err(|e| Error::io(&spec_path, e))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut out = BufWriter::new(file);
    let splits = [("train", train.0), ("train", train.1), ("val", val.0), ("val", val.1)];
    for (split, samples) in splits {
        for s in samples {
            let rel = format!("images/{}.png", s.id);
            write_png(&dir.join(&rel), &s.image)?;
            let inst = s.evaluation_instances();
            let rec = ManifestRecord {
                id: s.id.clone(),
                domain: s.domain,
                split: split.to_string(),
                image_path: rel,
                boxes: inst.iter().map(|i| i.bbox.to_array()).collect(),
                classes: inst.iter().map(|i| i.class_id).collect(),
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_dataset(dir: &Path) -> Result<StoredDataset> {
    let spec_path = dir.join(SPEC_FILE);
    let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec = DatasetSpec::from_toml(&text)?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let guards: [AnnotationGuard; 4] = Default::default();
    let mut buckets: [Vec<DetectionSample>; 4] = Default::default();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Format {
            path: manifest_path.clone(),
            message: format!("line {}: {message}", lineno + 1),
        };
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if rec.boxes.len() != rec.classes.len() {
            return Err(bad("boxes and classes differ in length".into()));
        }
        let slot = match (rec.domain, rec.split.as_str()) {
            (Domain::Source, "train") => 0,
            (Domain::Target, "train") => 1,
            (Domain::Source, "val") => 2,
            (Domain::Target, "val") => 3,
            (_, other) => return Err(bad(format!("unknown split `{other}`"))),
        };
        let instances = rec
            .boxes
            .iter()
            .zip(&rec.classes)
            .map(|(b, &c)| {
                Ok(Instance {
                    bbox: BoundingBox::from_array(*b)?,
                    class_id: c,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| bad(e.to_string()))?;
        let image_path: PathBuf = dir.join(&rec.image_path);
        let image = read_png(&image_path)?;
        let sample = DetectionSample::new(
            rec.id,
            rec.domain,
            image,
            instances,
            spec.num_classes,
            guards[slot].clone(),
        )
        .map_err(|e| bad(e.to_string()))?;
        buckets[slot].push(sample);
    }
    let [source, target, source_val, target_val] = buckets;
    Ok(StoredDataset {
        spec,
        source,
        target,
        source_val,
        target_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, generate_validation};

    #[test]
    fn save_load_round_trip_is_exact() {
        let spec = DatasetSpec {
            samples_per_domain: 4,
            val_samples_per_domain: 2,
            ..DatasetSpec::default()
        };
        let (s, t) = generate_dataset(&spec).unwrap();
        let (sv, tv) = generate_validation(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &spec, (&s, &t), (&sv, &tv)).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.spec, spec);
        assert_eq!(back.source.len(), 4);
        assert_eq!(back.target_val.len(), 2);
        for (a, b) in s.iter().chain(&t).zip(back.source.iter().chain(&back.target)) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.image, b.image);
            assert_eq!(a.evaluation_instances(), b.evaluation_instances());
        }
        let first = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        for key in ["id", "domain", "image_path", "boxes", "classes"] {
            assert!(rec.get(key).is_some(), "missing {key}");
        }
    }
}
