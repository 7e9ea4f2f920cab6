//! Flat `key = value` run configuration. Every key has a default; a config
//! file overrides defaults, command-line flags override the file. Flags are
//! the keys with `_` spelled `-`.

use anyhow::{anyhow, bail, Context, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Commands that read a key; `*` means every command.
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    pub commands: &'static [&'static str],
    /// Number of values the flag takes; they are joined with `,`.
    pub arity: usize,
}

const ALL: &[&str] = &["*"];
const SIM: &[&str] = &["simulate"];
const TEACH_TRAIN: &[&str] = &["teacher", "train", "ablate"];
const TRAIN: &[&str] = &["train", "ablate"];
const EVAL: &[&str] = &["evaluate", "robustness", "ablate"];
const MODEL: &[&str] = &["teacher", "train", "ablate"];

macro_rules! key {
    ($name:literal, $default:literal, $cmds:expr, $help:literal) => {
        Key { name: $name, default: $default, help: $help, commands: $cmds, arity: 1 }
    };
    ($name:literal, $default:literal, $cmds:expr, $help:literal, $arity:literal) => {
        Key { name: $name, default: $default, help: $help, commands: $cmds, arity: $arity }
    };
}

pub const KEYS: &[Key] = &[
    key!("seed", "0", ALL, "master seed; falls back to E2V_SEED"),
    key!("out", "", ALL, "output directory"),
    key!("jobs", "1", EVAL, "worker threads across sequences"),
    // simulate
    key!("sequences", "20", SIM, "number of sequences"),
    key!("resolution", "64", SIM, "frame width and height"),
    key!("duration", "2.0", SIM, "sequence length in seconds"),
    key!("frame_rate", "50", SIM, "frames per second"),
    key!("epsilon_range", "0.1,1.5", SIM, "contrast threshold range", 2),
    key!("offset", "0.001", SIM, "log offset c"),
    key!("sprites", "2,4", SIM, "min and max sprite count", 2),
    key!("sprite_speed", "30,90", SIM, "sprite speed range in px/s", 2),
    key!("pan_speed", "10,40", SIM, "background pan speed range in px/s", 2),
    // data shared by teacher / train / evaluation
    key!("data", "", &["teacher", "train", "evaluate", "robustness", "ablate"], "dataset directory"),
    key!("n_masks", "10", TEACH_TRAIN, "teacher masks per frame"),
    // model
    key!("base_channels", "16", MODEL, "channels after the head convolution"),
    key!("num_encoders", "2", MODEL, "encoder levels"),
    key!("residual_blocks", "2", MODEL, "residual blocks at the bottleneck"),
    key!("bins", "5", MODEL, "voxel grid temporal bins"),
    key!("use_cfhm", "true", MODEL, "per-sample decoder filters"),
    key!("bottleneck_channels", "64", MODEL, "bottleneck / teacher feature channels"),
    key!("ablation", "full", TRAIN, "full, direct_distill, fuse_add, fuse_mean, fuse_xattn, plain_perceptual"),
    // train
    key!("seq_len", "16", TRAIN, "steps per training window"),
    key!("batch_size", "1", TRAIN, "windows per optimizer step"),
    key!("epochs", "8", TRAIN, "passes over the training windows"),
    key!("learning_rate", "0.001", TRAIN, "Adam step size"),
    key!("lambda", "1.8", TRAIN, "distillation weight"),
    key!("alpha", "50", TRAIN, "occlusion sharpness"),
    key!("clip_norm", "1.0", TRAIN, "gradient norm clip"),
    key!("carry_state", "false", TRAIN, "carry recurrent state across windows"),
    key!("detach_alignment_input", "false", TRAIN, "stop the distillation gradient at the alignment block"),
    key!("windows_per_sequence", "0", TRAIN, "windows drawn per sequence per epoch; 0 = all"),
    key!("checkpoint_every", "0", &["train"], "epochs between checkpoints; 0 = final only"),
    // reconstruct / evaluate
    key!("checkpoint", "", &["reconstruct", "evaluate", "robustness"], "model checkpoint"),
    key!("events", "", &["reconstruct"], "event file (.evb1 or .csv)"),
    key!("grouping", "between", &["reconstruct"], "between, count or duration"),
    key!("dt", "0.02", &["reconstruct"], "window length for duration grouping"),
    key!("count", "1000", &["reconstruct"], "events per group for count grouping"),
    key!("discard_ratio", "0", &["reconstruct"], "frames discarded for between grouping"),
    key!("width", "0", &["reconstruct"], "sensor width for csv events; 0 = from meta.txt beside the events"),
    key!("height", "0", &["reconstruct"], "sensor height for csv events; 0 = from meta.txt beside the events"),
    key!("tolerance", "0.001", EVAL, "frame matching tolerance in seconds"),
    key!("axis", "irregularity", &["robustness"], "sparsity, rate or irregularity"),
    key!("settings", "", &["robustness"], "comma list; empty = default grid"),
    key!("sparsity_scale", "0.1", &["robustness"], "scale of the reference event counts"),
    // ablate
    key!("eval_data", "", &["ablate"], "held-out dataset directory"),
    key!("grid", "ablation=full,direct_distill,fuse_add,fuse_mean,fuse_xattn,plain_perceptual", &["ablate"], "key=v1,v2,..."),
    key!("seeds", "1,2,3,4,5", &["ablate"], "training seeds"),
];

pub fn key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

pub fn keys_for(command: &str) -> impl Iterator<Item = &'static Key> + '_ {
    KEYS.iter().filter(move |k| k.commands.iter().any(|&c| c == "*" || c == command))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    values: BTreeMap<&'static str, String>,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults, then `E2V_SEED`, then the file, then flags.
    pub fn resolve(command: &str, file: Option<&Path>, flags: &[(String, String)], env_seed: Option<String>) -> Result<Self> {
        let mut values: BTreeMap<&'static str, String> = keys_for(command).map(|k| (k.name, k.default.to_string())).collect();
        if let Some(s) = env_seed {
            values.insert("seed", s);
        }
        let mut set = |k: &str, v: String, origin: &str| -> Result<()> {
            let key = key(k).ok_or_else(|| anyhow!("unknown config key {k:?} ({origin})"))?;
            if !values.contains_key(key.name) {
                bail!("key {k:?} does not apply to {command} ({origin})");
            }
            values.insert(key.name, v);
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            for (k, v) in parse_file(&text)? {
                set(&k, v, &path.display().to_string())?;
            }
        }
        for (k, v) in flags {
            set(k, v.clone(), "command line")?;
        }
        let cfg = Self { command: command.to_string(), values };
        cfg.u64("seed").context("seed")?;
        Ok(cfg)
    }

    /// A copy with one more override, checked like a flag.
    pub fn with(&self, k: &str, v: &str) -> Result<Self> {
        let key = key(k).ok_or_else(|| anyhow!("unknown config key {k:?}"))?;
        if !self.values.contains_key(key.name) {
            bail!("key {k:?} does not apply to {}", self.command);
        }
        let mut c = self.clone();
        c.values.insert(key.name, v.to_string());
        Ok(c)
    }

    pub fn str(&self, k: &str) -> &str {
        self.values.get(k).map_or("", String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, k: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.str(k).parse().map_err(|e| anyhow!("{k} = {:?}: {e}", self.str(k)))
    }

    pub fn u64(&self, k: &str) -> Result<u64> {
        self.parse(k)
    }

    pub fn usize(&self, k: &str) -> Result<usize> {
        self.parse(k)
    }

    pub fn f64(&self, k: &str) -> Result<f64> {
        self.parse(k)
    }

    pub fn bool(&self, k: &str) -> Result<bool> {
        self.parse(k)
    }

    pub fn list_f64(&self, k: &str) -> Result<Vec<f64>> {
        let s = self.str(k);
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|v| v.trim().parse().map_err(|e| anyhow!("{k} = {s:?}: {e}")))
            .collect()
    }

    pub fn pair(&self, k: &str) -> Result<(f64, f64)> {
        match self.list_f64(k)?.as_slice() {
            &[a, b] => Ok((a, b)),
            _ => bail!("{k} needs two values, got {:?}", self.str(k)),
        }
    }

    pub fn path(&self, k: &str) -> Result<PathBuf> {
        let s = self.str(k);
        if s.is_empty() {
            bail!("--{} is required for {}", k.replace('_', "-"), self.command);
        }
        Ok(PathBuf::from(s))
    }

    /// The resolved configuration as a config file, keys in declaration order.
    pub fn render(&self) -> String {
        let mut s = format!("# e2v {} resolved configuration\n", self.command);
        for k in keys_for(&self.command) {
            s.push_str(&format!("{} = {}\n", k.name, self.values[k.name]));
        }
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let p = dir.join("resolved.cfg");
        std::fs::write(&p, self.render()).with_context(|| format!("writing {}", p.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn precedence_is_flag_file_env_default() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.cfg");
        std::fs::write(&f, "epochs = 3 # short\nlambda=0.5\n").unwrap();
        let c = RunConfig::resolve("train", Some(&f), &flags(&[("epochs", "4")]), Some("9".into())).unwrap();
        assert_eq!(c.usize("epochs").unwrap(), 4);
        assert_eq!(c.f64("lambda").unwrap(), 0.5);
        assert_eq!(c.u64("seed").unwrap(), 9);
        assert_eq!(c.f64("alpha").unwrap(), 50.0);
        let c = RunConfig::resolve("train", None, &flags(&[("seed", "2")]), Some("9".into())).unwrap();
        assert_eq!(c.u64("seed").unwrap(), 2);
    }

    #[test]
    fn unknown_and_foreign_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.cfg");
        std::fs::write(&f, "epoch = 3\n").unwrap();
        let e = RunConfig::resolve("train", Some(&f), &[], None).unwrap_err();
        assert!(e.to_string().contains("unknown config key \"epoch\""));
        assert!(RunConfig::resolve("simulate", None, &flags(&[("epochs", "2")]), None).is_err());
        std::fs::write(&f, "no equals sign\n").unwrap();
        assert!(RunConfig::resolve("train", Some(&f), &[], None).is_err());
        assert!(RunConfig::resolve("train", None, &[], Some("x".into())).is_err());
    }

    #[test]
    fn rendered_config_resolves_to_itself() {
        let c = RunConfig::resolve("simulate", None, &flags(&[("epsilon_range", "0.2,0.9"), ("out", "/tmp/x")]), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write_resolved(dir.path()).unwrap();
        let again = RunConfig::resolve("simulate", Some(&dir.path().join("resolved.cfg")), &[], Some("5".into())).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.pair("epsilon_range").unwrap(), (0.2, 0.9));
    }
}
