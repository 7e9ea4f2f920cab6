use super::{random_scene, render_sequence, simulate_events, SceneConfig, SceneSequence};
use crate::error::{Error, Result};
use crate::evstream::{read_evb1, write_evb1};
use crate::frame::{Flow, Frame, Mask};
use crate::seed;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const META_FILE: &str = "meta.txt";

/// Scalar facts about a stored sequence, kept as `key=value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMeta {
    pub width: usize,
    pub height: usize,
    pub frame_rate: f64,
    pub epsilon: f64,
    pub offset: f64,
    pub seed: u64,
    pub sprites: usize,
    pub frame_times: Vec<f64>,
}

impl SequenceMeta {
    fn render(&self) -> String {
        let times: Vec<String> = self.frame_times.iter().map(|t| t.to_string()).collect();
        let mut s = String::new();
        writeln!(s, "width={}", self.width).unwrap();
        writeln!(s, "height={}", self.height).unwrap();
        writeln!(s, "frames={}", self.frame_times.len()).unwrap();
        writeln!(s, "frame_rate={}", self.frame_rate).unwrap();
        writeln!(s, "epsilon={}", self.epsilon).unwrap();
        writeln!(s, "offset={}", self.offset).unwrap();
        writeln!(s, "seed={}", self.seed).unwrap();
        writeln!(s, "sprites={}", self.sprites).unwrap();
        writeln!(s, "frame_times={}", times.join(",")).unwrap();
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let kv: BTreeMap<&str, &str> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::format(path, format!("missing key {k}")));
        fn num<T: std::str::FromStr>(path: &Path, k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::format(path, format!("bad value for {k}: {v}")))
        }
        let frame_times = get("frame_times")?
            .split(',')
            .map(|v| num::<f64>(path, "frame_times", v))
            .collect::<Result<Vec<_>>>()?;
        let meta = Self {
            width: num(path, "width", get("width")?)?,
            height: num(path, "height", get("height")?)?,
            frame_rate: num(path, "frame_rate", get("frame_rate")?)?,
            epsilon: num(path, "epsilon", get("epsilon")?)?,
            offset: num(path, "offset", get("offset")?)?,
            seed: num(path, "seed", get("seed")?)?,
            sprites: num(path, "sprites", get("sprites")?)?,
            frame_times,
        };
        let frames: usize = num(path, "frames", get("frames")?)?;
        if frames != meta.frame_times.len() {
            return Err(Error::format(path, "frame count disagrees with frame_times"));
        }
        Ok(meta)
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn frame_path(dir: &Path, k: usize) -> PathBuf {
    dir.join("frames").join(format!("{k:06}.pgm"))
}

pub fn flow_path(dir: &Path, k: usize) -> PathBuf {
    dir.join("flow").join(format!("{k:06}.flo2"))
}

pub fn mask_path(dir: &Path, k: usize, sprite: usize) -> PathBuf {
    dir.join("masks").join(format!("{k:06}_s{sprite:02}.pbm"))
}

/// `flow/%06d.flo2` is indexed by the later frame k of the pair (k-1, k).
pub fn write_sequence(dir: &Path, seq: &SceneSequence, meta: &SequenceMeta) -> Result<()> {
    for sub in ["frames", "flow", "masks"] {
        create_dir(&dir.join(sub))?;
    }
    for (k, f) in seq.frames.iter().enumerate() {
        f.write_pgm(&frame_path(dir, k))?;
        for (s, m) in seq.masks[k].iter().enumerate() {
            m.write_pbm(&mask_path(dir, k, s))?;
        }
    }
    for (i, fl) in seq.flows.iter().enumerate() {
        fl.write(&flow_path(dir, i + 1))?;
    }
    write_evb1(&dir.join("events.evb1"), &seq.events)?;
    let p = dir.join(META_FILE);
    std::fs::write(&p, meta.render()).map_err(|e| Error::io(&p, e))
}

/// Reads a sequence directory. Frames come back 8-bit quantized.
pub fn load_sequence(dir: &Path) -> Result<(SequenceMeta, SceneSequence)> {
    let meta = SequenceMeta::read(&dir.join(META_FILE))?;
    let n = meta.frame_times.len();
    let mut frames = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for k in 0..n {
        let f = Frame::read_pgm(&frame_path(dir, k))?;
        if (f.width, f.height) != (meta.width, meta.height) {
            return Err(Error::format(frame_path(dir, k), "frame size disagrees with meta"));
        }
        frames.push(f);
        masks.push(
            (0..meta.sprites)
                .map(|s| Mask::read_pbm(&mask_path(dir, k, s)))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let flows = (1..n)
        .map(|k| Flow::read(&flow_path(dir, k), meta.width, meta.height))
        .collect::<Result<Vec<_>>>()?;
    let events = read_evb1(&dir.join("events.evb1"))?;
    let seq = SceneSequence {
        frames,
        flows,
        masks,
        events,
        frame_times: meta.frame_times.clone(),
        warnings: Vec::new(),
    };
    Ok((meta, seq))
}

/// Sequence directories under `root`, sorted by name.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Renders and simulates `count` random scenes into `root/seq_NNNN`.
/// Returns the sequence directories and any renderer warnings.
pub fn generate_dataset(root: &Path, count: usize, cfg: &SceneConfig, master_seed: u64) -> Result<(Vec<PathBuf>, Vec<String>)> {
    create_dir(root)?;
    let mut dirs = Vec::with_capacity(count);
    let mut warnings = Vec::new();
    for i in 0..count {
        let s = seed::derive_indexed(master_seed, "sequence", i as u64);
        let spec = random_scene(cfg, s)?;
        let mut seq = render_sequence(&spec)?;
        seq.events = simulate_events(&seq.frames, &seq.frame_times, spec.epsilon, spec.offset)?;
        let meta = SequenceMeta {
            width: spec.width,
            height: spec.height,
            frame_rate: spec.frame_rate,
            epsilon: spec.epsilon,
            offset: spec.offset,
            seed: s,
            sprites: spec.sprites.len(),
            frame_times: seq.frame_times.clone(),
        };
        let dir = root.join(format!("seq_{i:04}"));
        write_sequence(&dir, &seq, &meta)?;
        warnings.extend(seq.warnings.iter().map(|w| format!("seq_{i:04}: {w}")));
        dirs.push(dir);
    }
    Ok((dirs, warnings))
}
