use super::{load_train_set, train_on, TrainConfig, TrainSequence};
use crate::error::{invalid, Error, Result};
use crate::evalkit::{evaluate, EvalConfig, EvalSequence};
use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub label: String,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    /// The first entry is the baseline that deltas are taken against.
    pub entries: Vec<SuiteEntry>,
    /// Each entry is trained once per seed, replacing its config seed.
    pub seeds: Vec<u64>,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub label: String,
    pub seed: u64,
    pub mse: f64,
    pub ssim: f64,
    pub proxy_lpips: f64,
    /// Minus the baseline at the same seed; negative MSE delta is better.
    pub delta_mse: f64,
    pub delta_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub rows: Vec<SuiteRow>,
}

impl SuiteResult {
    pub fn rows_for<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a SuiteRow> + 'a {
        self.rows.iter().filter(move |r| r.label == label)
    }

    pub fn median_mse(&self, label: &str) -> Option<f64> {
        let mut v: Vec<f64> = self.rows_for(label).map(|r| r.mse).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let err = |e: csv::Error| Error::format(path, e.to_string());
        w.write_record(["label", "seed", "mse", "ssim", "proxy_lpips", "delta_mse", "delta_ssim"])
            .map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                r.seed.to_string(),
                r.mse.to_string(),
                r.ssim.to_string(),
                r.proxy_lpips.to_string(),
                r.delta_mse.to_string(),
                r.delta_ssim.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Trains every entry with every seed on `train_root` and scores it on the
/// held-out sequences. Training sets are loaded once per distinct mask count.
pub fn run_ablation_suite(train_root: &Path, held_out: &[EvalSequence], cfg: &SuiteConfig) -> Result<SuiteResult> {
    if cfg.entries.len() < 2 {
        return Err(invalid("an ablation suite needs at least two configurations"));
    }
    if cfg.seeds.is_empty() {
        return Err(invalid("an ablation suite needs at least one seed"));
    }
    let mut sets: HashMap<(usize, usize), Vec<TrainSequence>> = HashMap::new();
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let mut baseline: Option<(f64, f64)> = None;
        for e in &cfg.entries {
            let key = (e.config.model.bins, e.config.n_masks);
            if let Entry::Vacant(slot) = sets.entry(key) {
                let (data, warnings) = load_train_set(train_root, key.0, key.1)?;
                for w in warnings {
                    eprintln!("warning: {w}");
                }
                slot.insert(data);
            }
            let mut tc = e.config.clone();
            tc.seed = seed;
            let out = train_on(&sets[&key], &tc, None)?;
            let report = evaluate(&out.model, held_out, &cfg.eval)?;
            let agg = &report.aggregates[0];
            let (mse, ssim, lp) = match (agg.mse, agg.ssim, agg.proxy_lpips) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => return Err(Error::Data("held-out set produced no matched frames".into())),
            };
            let (bm, bs) = *baseline.get_or_insert((mse, ssim));
            eprintln!("suite: {} seed {seed}: mse {mse:.6} ssim {ssim:.4}", e.label);
            rows.push(SuiteRow {
                label: e.label.clone(),
                seed,
                mse,
                ssim,
                proxy_lpips: lp,
                delta_mse: mse - bm,
                delta_ssim: ssim - bs,
            });
        }
    }
    Ok(SuiteResult { rows })
}
