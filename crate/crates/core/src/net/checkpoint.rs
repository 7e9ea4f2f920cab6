//! `E2VCKPT/1`: a tag line, one JSON header line describing the config and
//! every named array, then the arrays as contiguous little-endian f32.

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_TAG: &str = "E2VCKPT/1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<Entry>,
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob = Vec::with_capacity(4 * model.params.num_scalars());
    for id in model.params.ids() {
        let t = model.params.get(id);
        entries.push(Entry {
            name: model.params.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() / 4,
        });
        blob.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    let header = serde_json::to_string(&Header {
        config: model.config.clone(),
        params: entries,
    })
    .expect("header serialises");
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "{CHECKPOINT_TAG}").map_err(io)?;
    writeln!(f, "{header}").map_err(io)?;
    f.write_all(&blob).map_err(io)?;
    f.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::format(path, m);
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    if lines.next() != Some(CHECKPOINT_TAG.as_bytes()) {
        return Err(bad(format!("missing {CHECKPOINT_TAG} tag")));
    }
    let header: Header = serde_json::from_slice(lines.next().unwrap_or_default()).map_err(|e| bad(format!("header: {e}")))?;
    let blob = lines.next().unwrap_or_default();
    let mut model = Model::<f32>::new(header.config, 0)?;
    if header.params.len() != model.params.len() {
        return Err(bad(format!(
            "{} arrays stored, architecture has {}",
            header.params.len(),
            model.params.len()
        )));
    }
    for e in header.params {
        let id = model.params.find(&e.name).ok_or_else(|| bad(format!("unknown array {}", e.name)))?;
        let t = model.params.get_mut(id);
        if t.shape() != e.shape.as_slice() {
            return Err(bad(format!("{}: shape {:?} != {:?}", e.name, e.shape, t.shape())));
        }
        let (lo, hi) = (4 * e.offset, 4 * (e.offset + t.numel()));
        let raw = blob.get(lo..hi).ok_or_else(|| bad(format!("{}: data truncated", e.name)))?;
        for (v, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap());
        }
    }
    Ok(model)
}
