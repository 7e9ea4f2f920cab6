//! Per-frame teacher cache under `<sequence>/teacher/`. Each frame is a
//! `TCH1` file: tag, six u32 dims `(C, h, w, N, mh, mw)`, the feature as f32,
//! the masks as packed bits (row-major, MSB first), then N u32 category ids,
//! all little-endian. A `COMPLETE` file holding the provider fingerprint
//! marks a finished sequence.

use super::{TeacherBundle, TeacherProvider};
use crate::error::{Error, Result};
use crate::frame::Mask;
use crate::synthgen::{list_sequences, load_sequence};
use e2v_tensor::Tensor;
use std::path::{Path, PathBuf};

const TAG: &[u8; 4] = b"TCH1";
pub const COMPLETE_FILE: &str = "COMPLETE";

pub fn cache_dir(seq_dir: &Path) -> PathBuf {
    seq_dir.join("teacher")
}

pub fn cache_path(seq_dir: &Path, k: usize) -> PathBuf {
    cache_dir(seq_dir).join(format!("{k:06}.tch1"))
}

pub fn encode_bundle(b: &TeacherBundle) -> Vec<u8> {
    let (_, c, h, w) = b.feature.dims4();
    let (mh, mw) = (b.masks[0].height, b.masks[0].width);
    let mut out = Vec::new();
    out.extend_from_slice(TAG);
    for d in [c, h, w, b.masks.len(), mh, mw] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend(b.feature.data().iter().flat_map(|v| v.to_le_bytes()));
    let bits: Vec<bool> = b.masks.iter().flat_map(|m| m.data.iter().copied()).collect();
    for chunk in bits.chunks(8) {
        out.push(chunk.iter().enumerate().fold(0u8, |acc, (i, &bit)| acc | (u8::from(bit) << (7 - i))));
    }
    out.extend(b.category_ids.iter().flat_map(|v| v.to_le_bytes()));
    out
}

pub fn decode_bundle(bytes: &[u8]) -> std::result::Result<TeacherBundle, String> {
    if bytes.len() < 28 || &bytes[..4] != TAG {
        return Err("missing TCH1 tag".into());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w, n, mh, mw) = (dim(0), dim(1), dim(2), dim(3), dim(4), dim(5));
    if n == 0 {
        return Err("no masks".into());
    }
    let feat_len = 4 * c * h * w;
    let bit_len = (n * mh * mw).div_ceil(8);
    let expected = 28 + feat_len + bit_len + 4 * n;
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes, found {}", bytes.len()));
    }
    let feat = &bytes[28..28 + feat_len];
    let feature = Tensor::from_vec(
        &[1, c, h, w],
        feat.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
    );
    if !feature.all_finite() {
        return Err("non-finite feature values".into());
    }
    let packed = &bytes[28 + feat_len..28 + feat_len + bit_len];
    let bit = |i: usize| packed[i / 8] & (1 << (7 - i % 8)) != 0;
    let plane = mh * mw;
    let masks = (0..n)
        .map(|m| Mask {
            width: mw,
            height: mh,
            data: (0..plane).map(|i| bit(m * plane + i)).collect(),
        })
        .collect();
    let ids = &bytes[28 + feat_len + bit_len..];
    let category_ids = ids.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(TeacherBundle {
        feature,
        masks,
        category_ids,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CacheReport {
    pub sequences: usize,
    pub computed: usize,
    pub reused: usize,
    /// One line per failed sequence or frame.
    pub errors: Vec<String>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("part");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Fills the cache of every sequence under `root`. Existing readable
/// entries written by the same provider are kept, so an interrupted run
/// resumes where it stopped.
pub fn precompute_teacher(root: &Path, provider: &dyn TeacherProvider) -> Result<CacheReport> {
    let mut report = CacheReport::default();
    let fp = provider.fingerprint();
    for seq in list_sequences(root)? {
        report.sequences += 1;
        let name = seq.file_name().unwrap_or_default().to_string_lossy().to_string();
        let dir = cache_dir(&seq);
        let done = dir.join(COMPLETE_FILE);
        let (_, data) = match load_sequence(&seq) {
            Ok(x) => x,
            Err(e) => {
                report.errors.push(format!("{name}: {e}"));
                continue;
            }
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        // entries written by a different provider are recomputed
        let stale = std::fs::read_to_string(dir.join("provider")).is_ok_and(|s| s.trim() != fp);
        if stale || !done.exists() {
            let _ = std::fs::remove_file(&done);
        }
        write_atomic(&dir.join("provider"), fp.as_bytes())?;
        let mut ok = true;
        for (k, frame) in data.frames.iter().enumerate() {
            let path = cache_path(&seq, k);
            if !stale && path.exists() {
                if let Ok(bytes) = std::fs::read(&path) {
                    if decode_bundle(&bytes).is_ok() {
                        report.reused += 1;
                        continue;
                    }
                }
            }
            let bundle = provider.bundle(frame, &data.masks[k]);
            if let Err(e) = write_atomic(&path, &encode_bundle(&bundle)) {
                report.errors.push(format!("{name} frame {k}: {e}"));
                ok = false;
                continue;
            }
            report.computed += 1;
        }
        if ok {
            write_atomic(&done, fp.as_bytes())?;
        }
    }
    Ok(report)
}

pub fn is_complete(seq_dir: &Path) -> bool {
    cache_dir(seq_dir).join(COMPLETE_FILE).is_file()
}

/// Reads `frames` cached bundles of one sequence. Corrupt or missing entries
/// are reported with the sequence and frame.
pub fn load_teacher_cache(seq_dir: &Path, frames: usize) -> Result<Vec<TeacherBundle>> {
    if !is_complete(seq_dir) {
        return Err(Error::Data(format!("{}: teacher cache incomplete", seq_dir.display())));
    }
    (0..frames)
        .map(|k| {
            let p = cache_path(seq_dir, k);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            decode_bundle(&bytes).map_err(|m| Error::Data(format!("{} frame {k}: corrupt teacher entry: {m}", seq_dir.display())))
        })
        .collect()
}

/// Union mask helper for cached bundles.
pub fn union_mask(b: &TeacherBundle) -> Mask {
    let (w, h) = (b.masks[0].width, b.masks[0].height);
    Mask {
        width: w,
        height: h,
        data: (0..w * h).map(|i| b.masks.iter().any(|m| m.data[i])).collect(),
    }
}
