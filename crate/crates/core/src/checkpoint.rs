//! Binary checkpoints: an 8-byte magic, a little-endian `u32` header length,
//! a JSON header, then every parameter and (optionally) every momentum
//! buffer as little-endian `f64` in store order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::model::Model;

const MAGIC: &[u8; 8] = b"CATREG\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub num_classes: usize,
    pub image_size: usize,
    pub iteration: usize,
    pub detector: DetectorConfig,
    pub params: Vec<(String, Vec<usize>)>,
    pub has_momentum: bool,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
    pub momentum: Option<Vec<Tensor>>,
}

pub fn save_checkpoint(path: &Path, model: &Model, momentum: Option<&[Tensor]>, iteration: usize) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        num_classes: model.num_classes(),
        image_size: model.config().image_size,
        iteration,
        detector: model.config().clone(),
        params: model.params.shapes(),
        has_momentum: momentum.is_some(),
    };
    let head = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(16 + head.len() + 16 * model.params.num_scalars());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(head.len() as u32).to_le_bytes());
    buf.extend_from_slice(&head);
    let mut put = |t: &Tensor| {
        for v in t.as_standard_layout().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    model.params.values().iter().for_each(&mut put);
    if let Some(m) = momentum {
        m.iter().for_each(&mut put);
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let hend = 12 + hlen;
    let header: CheckpointHeader = bytes
        .get(12..hend)
        .ok_or_else(|| bad("truncated header"))
        .and_then(|h| serde_json::from_slice(h).map_err(|e| bad(&format!("bad header: {e}"))))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(&format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let mut model = Model::new(header.detector.clone(), 0);
    if model.params.shapes() != header.params {
        return Err(bad("parameter layout does not match this build"));
    }
    let mut cursor = hend;
    let mut read = |t: &mut Tensor| -> Result<()> {
        let n = t.len();
        let chunk = bytes
            .get(cursor..cursor + 8 * n)
            .ok_or_else(|| bad("truncated parameter data"))?;
        let vals: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *t = Tensor::from_shape_vec(t.raw_dim(), vals).expect("shape checked");
        cursor += 8 * n;
        Ok(())
    };
    for t in model.params.values_mut() {
        read(t)?;
    }
    let momentum = if header.has_momentum {
        let mut m: Vec<Tensor> = model
            .params
            .values()
            .iter()
            .map(|v| Tensor::zeros(v.raw_dim()))
            .collect();
        for t in &mut m {
            read(t)?;
        }
        Some(m)
    } else {
        None
    };
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after parameter data"));
    }
    Ok(Checkpoint {
        header,
        model,
        momentum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::new(DetectorConfig::new(3, 64), 9);
        let mom: Vec<Tensor> = model.params.values().iter().map(|v| v.mapv(|x| x * 0.5)).collect();
        save_checkpoint(&path, &model, Some(&mom), 42).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.header.iteration, 42);
        assert_eq!(ck.model.params.values(), model.params.values());
        assert_eq!(ck.momentum.unwrap(), mom);
    }

    #[test]
    fn corrupt_files_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        let model = Model::new(DetectorConfig::new(2, 64), 1);
        save_checkpoint(&path, &model, None, 0).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
