//! Image-quality metrics, nearest-frame scoring of reconstructions, and the
//! sparsity / rate / irregularity robustness sweeps.

mod infer;
mod metrics;
mod plot;

pub use infer::{make_groups, reconstruct_groups, reconstruct_stream, Grouping, Reconstruction};
pub use metrics::{
    feature_distance, match_nearest_frame, mse, perceptual_distance, perceptual_features, ssim, ssim_with, SsimParams,
    MATCH_TOLERANCE, PROXY_LPIPS,
};
pub use plot::plot_curves;

use crate::error::{invalid, Error, Result};
use crate::losses::PerceptualExtractor;
use crate::net::Model;
use crate::seed;
use crate::synthgen::{list_sequences, load_sequence, SceneSequence};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    /// Fixed event count per group.
    Sparsity,
    /// Fixed time window per group.
    Rate,
    /// Between-frame groups after discarding a fraction of frames.
    Irregularity,
}

/// Reference sparsity grid (events per group) before desk scaling.
pub const REFERENCE_SPARSITY: [f64; 9] = [5000.0, 10000.0, 15000.0, 20000.0, 25000.0, 30000.0, 35000.0, 40000.0, 45000.0];
/// Event counts are scaled by this factor for 64x64 synthetic streams.
pub const DESK_SPARSITY_SCALE: f64 = 0.1;

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Sparsity, Axis::Rate, Axis::Irregularity];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Sparsity => "sparsity",
            Axis::Rate => "rate",
            Axis::Irregularity => "irregularity",
        }
    }

    /// Default grid: 9 event counts, 10 window lengths of 10..100 ms, 10
    /// discard ratios 0.0..0.9.
    pub fn default_settings(self, sparsity_scale: f64) -> Vec<f64> {
        match self {
            Axis::Sparsity => REFERENCE_SPARSITY.iter().map(|n| (n * sparsity_scale).round()).collect(),
            Axis::Rate => (1..=10).map(|i| i as f64 * 0.01).collect(),
            Axis::Irregularity => (0..10).map(|i| i as f64 / 10.0).collect(),
        }
    }

    pub fn grouping(self, setting: f64, discard_seed: u64) -> Result<Grouping> {
        Ok(match self {
            Axis::Sparsity => {
                if !(setting >= 1.0 && setting.fract() == 0.0) {
                    return Err(invalid(format!("event count must be a positive integer, got {setting}")));
                }
                Grouping::FixedCount(setting as usize)
            }
            Axis::Rate => Grouping::FixedDuration(setting),
            Axis::Irregularity => Grouping::BetweenFrames {
                discard_ratio: setting,
                seed: discard_seed,
            },
        })
    }

    pub fn header(self, sparsity_scale: f64) -> Vec<String> {
        match self {
            Axis::Sparsity => vec![format!(
                "sparsity setting = events per group; reference counts 5000..45000 scaled by {sparsity_scale} -> {}",
                self.default_settings(sparsity_scale)
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            )],
            Axis::Rate => vec!["rate setting = window length in seconds".into()],
            Axis::Irregularity => vec!["irregularity setting = fraction of interior frames discarded".into()],
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| invalid(format!("unknown axis {s:?}; expected sparsity, rate or irregularity")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub tolerance: f64,
    /// Worker threads across sequences; results do not depend on it.
    pub jobs: usize,
    /// Seeds frame discarding on the irregularity axis.
    pub seed: u64,
    pub sparsity_scale: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tolerance: MATCH_TOLERANCE,
            jobs: 1,
            seed: 0,
            sparsity_scale: DESK_SPARSITY_SCALE,
        }
    }
}

/// Scores of one sequence at one setting; metrics are `None` when no
/// reconstruction matched a ground-truth frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceScore {
    pub setting: f64,
    pub sequence: String,
    pub matched: usize,
    pub skipped: usize,
    pub mse: Option<f64>,
    pub ssim: Option<f64>,
    pub proxy_lpips: Option<f64>,
}

/// Means over the sequences with at least one match.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub setting: f64,
    pub sequences: usize,
    pub matched: usize,
    pub skipped: usize,
    pub mse: Option<f64>,
    pub ssim: Option<f64>,
    pub proxy_lpips: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub axis: Option<Axis>,
    pub header: Vec<String>,
    pub rows: Vec<SequenceScore>,
    pub aggregates: Vec<Aggregate>,
}

impl EvalReport {
    /// Aggregate of a setting, when it was evaluated.
    pub fn at(&self, setting: f64) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.setting == setting)
    }
}

/// Held-out sequence as loaded for scoring.
pub struct EvalSequence {
    pub name: String,
    pub data: SceneSequence,
}

pub fn load_eval_set(root: &Path) -> Result<Vec<EvalSequence>> {
    let dirs = list_sequences(root)?;
    if dirs.is_empty() {
        return Err(Error::Data(format!("no sequences under {}", root.display())));
    }
    dirs.iter()
        .map(|d| {
            let (_, data) = load_sequence(d)?;
            Ok(EvalSequence {
                name: d.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                data,
            })
        })
        .collect()
}

/// Reconstructs one sequence and scores every reconstruction that falls
/// within tolerance of a ground-truth frame.
pub fn score_sequence(
    model: &Model<f32>,
    phi: &PerceptualExtractor<f32>,
    seq: &EvalSequence,
    grouping: Grouping,
    setting: f64,
    tolerance: f64,
) -> Result<SequenceScore> {
    let d = &seq.data;
    let recs = reconstruct_stream(model, &d.events, grouping, Some(&d.frame_times))?;
    let (mut n, mut skipped) = (0usize, 0usize);
    let (mut m, mut s, mut p) = (0.0, 0.0, 0.0);
    for r in &recs {
        match match_nearest_frame(r.time, &d.frame_times, tolerance) {
            Some(k) => {
                let gt = &d.frames[k];
                m += mse(&r.frame, gt)?;
                s += ssim(&r.frame, gt)?;
                p += perceptual_distance(&r.frame, gt, phi)?;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    let mean = |v: f64| (n > 0).then(|| v / n as f64);
    Ok(SequenceScore {
        setting,
        sequence: seq.name.clone(),
        matched: n,
        skipped,
        mse: mean(m),
        ssim: mean(s),
        proxy_lpips: mean(p),
    })
}

fn score_setting(
    model: &Model<f32>,
    phi: &PerceptualExtractor<f32>,
    data: &[EvalSequence],
    axis: Axis,
    setting: f64,
    cfg: &EvalConfig,
) -> Result<Vec<SequenceScore>> {
    let run = |i: usize| -> Result<SequenceScore> {
        let grouping = axis.grouping(setting, seed::derive_indexed(cfg.seed, "discard", i as u64))?;
        score_sequence(model, phi, &data[i], grouping, setting, cfg.tolerance)
    };
    let jobs = cfg.jobs.max(1).min(data.len());
    if jobs <= 1 {
        return (0..data.len()).map(run).collect();
    }
    let mut slots: Vec<Option<Result<SequenceScore>>> = (0..data.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let run = &run;
        for (w, chunk) in slots.chunks_mut(data.len().div_ceil(jobs)).enumerate() {
            let base = w * data.len().div_ceil(jobs);
            s.spawn(move || {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(run(base + j));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// Means of each setting's rows, in order of first appearance.
pub fn aggregate(rows: &[SequenceScore]) -> Vec<Aggregate> {
    let mut settings: Vec<f64> = Vec::new();
    for r in rows {
        if !settings.contains(&r.setting) {
            settings.push(r.setting);
        }
    }
    settings
        .into_iter()
        .map(|setting| {
            let at: Vec<&SequenceScore> = rows.iter().filter(|r| r.setting == setting).collect();
            let scored: Vec<&&SequenceScore> = at.iter().filter(|r| r.matched > 0).collect();
            let mean = |f: fn(&SequenceScore) -> Option<f64>| {
                (!scored.is_empty()).then(|| scored.iter().map(|r| f(r).unwrap_or(0.0)).sum::<f64>() / scored.len() as f64)
            };
            Aggregate {
                setting,
                sequences: scored.len(),
                matched: at.iter().map(|r| r.matched).sum(),
                skipped: at.iter().map(|r| r.skipped).sum(),
                mse: mean(|r| r.mse),
                ssim: mean(|r| r.ssim),
                proxy_lpips: mean(|r| r.proxy_lpips),
            }
        })
        .collect()
}

/// Standard protocol: one reconstruction per inter-frame interval, scored
/// against the frame closing it.
pub fn evaluate(model: &Model<f32>, data: &[EvalSequence], cfg: &EvalConfig) -> Result<EvalReport> {
    let phi = PerceptualExtractor::standard();
    let rows = score_setting(model, &phi, data, Axis::Irregularity, 0.0, cfg)?;
    Ok(EvalReport {
        axis: None,
        header: vec![format!("standard between-frame evaluation; {PROXY_LPIPS} uses a random frozen extractor")],
        aggregates: aggregate(&rows),
        rows,
    })
}

pub fn robustness_sweep(model: &Model<f32>, data: &[EvalSequence], axis: Axis, settings: &[f64], cfg: &EvalConfig) -> Result<EvalReport> {
    if settings.is_empty() {
        return Err(invalid("no sweep settings"));
    }
    let phi = PerceptualExtractor::standard();
    let mut rows = Vec::new();
    for &s in settings {
        rows.extend(score_setting(model, &phi, data, axis, s, cfg)?);
    }
    let mut header = axis.header(cfg.sparsity_scale);
    header.push(format!("{PROXY_LPIPS} uses a random frozen extractor; empty metric cells are settings with no matched frame"));
    Ok(EvalReport {
        axis: Some(axis),
        header,
        aggregates: aggregate(&rows),
        rows,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_err(path: &Path, e: impl fmt::Display) -> Error {
    Error::format(path, e.to_string())
}

fn write_csv(path: &Path, header: &[String], cols: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut text = String::new();
    for h in header {
        text.push_str(&format!("# {h}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(cols).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    let body = w.into_inner().map_err(|e| csv_err(path, e))?;
    text.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `report.csv` and `aggregate.csv`, plus `curves_<axis>.csv` and
/// `curves_<axis>.png` for sweeps.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metric_cols = ["mse", "ssim", PROXY_LPIPS];
    let mut cols = vec!["setting", "sequence", "matched", "skipped"];
    cols.extend(metric_cols);
    write_csv(
        &dir.join("report.csv"),
        &report.header,
        &cols,
        report.rows.iter().map(|r| {
            vec![
                r.setting.to_string(),
                r.sequence.clone(),
                r.matched.to_string(),
                r.skipped.to_string(),
                opt(r.mse),
                opt(r.ssim),
                opt(r.proxy_lpips),
            ]
        }),
    )?;
    let agg_row = |a: &Aggregate| {
        vec![
            a.setting.to_string(),
            a.sequences.to_string(),
            a.matched.to_string(),
            a.skipped.to_string(),
            opt(a.mse),
            opt(a.ssim),
            opt(a.proxy_lpips),
        ]
    };
    let mut agg_cols = vec!["setting", "sequences", "matched", "skipped"];
    agg_cols.extend(metric_cols);
    write_csv(&dir.join("aggregate.csv"), &report.header, &agg_cols, report.aggregates.iter().map(agg_row))?;
    if let Some(axis) = report.axis {
        write_csv(
            &dir.join(format!("curves_{axis}.csv")),
            &report.header,
            &agg_cols,
            report.aggregates.iter().map(agg_row),
        )?;
        plot_curves(&dir.join(format!("curves_{axis}.png")), &report.aggregates)?;
    }
    Ok(())
}

/// Parses a `report.csv` written by [`write_report`].
pub fn read_report_rows(path: &Path) -> Result<Vec<SequenceScore>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let parse_opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| csv_err(path, e))
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 7 {
            return Err(csv_err(path, format!("expected 7 columns, found {}", rec.len())));
        }
        rows.push(SequenceScore {
            setting: rec[0].parse().map_err(|e| csv_err(path, e))?,
            sequence: rec[1].to_string(),
            matched: rec[2].parse().map_err(|e| csv_err(path, e))?,
            skipped: rec[3].parse().map_err(|e| csv_err(path, e))?,
            mse: parse_opt(&rec[4])?,
            ssim: parse_opt(&rec[5])?,
            proxy_lpips: parse_opt(&rec[6])?,
        });
    }
    Ok(rows)
}
