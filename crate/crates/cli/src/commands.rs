use crate::config::RunConfig;
use anyhow::{anyhow, bail, Context, Result};
use e2v_core::evalkit::{
    evaluate, load_eval_set, reconstruct_stream, robustness_sweep, write_report, Axis, EvalConfig, EvalReport, Grouping,
};
use e2v_core::evstream::read_events;
use e2v_core::losses::LossWeights;
use e2v_core::net::{load_checkpoint, Ablation, ModelConfig};
use e2v_core::semantics::{precompute_teacher, OracleTeacher, TeacherConfig};
use e2v_core::synthgen::{generate_dataset, list_sequences, SceneConfig, SequenceMeta};
use e2v_core::trainer::{run_ablation_suite, train, SuiteConfig, SuiteEntry, SuiteResult, TrainConfig};
use std::fmt::Write as _;
use std::path::Path;

pub fn run(cfg: &RunConfig) -> Result<()> {
    match cfg.command.as_str() {
        "simulate" => simulate(cfg),
        "teacher" => teacher(cfg),
        "train" => train_cmd(cfg),
        "reconstruct" => reconstruct(cfg),
        "evaluate" => evaluate_cmd(cfg),
        "robustness" => robustness(cfg),
        "ablate" => ablate(cfg),
        other => bail!("unknown command {other}"),
    }
}

fn scene_config(cfg: &RunConfig) -> Result<SceneConfig> {
    let res = cfg.usize("resolution")?;
    let (lo, hi) = cfg.pair("sprites")?;
    if lo.fract() != 0.0 || hi.fract() != 0.0 || lo < 0.0 {
        bail!("sprites needs two non-negative integers");
    }
    Ok(SceneConfig {
        width: res,
        height: res,
        duration: cfg.f64("duration")?,
        frame_rate: cfg.f64("frame_rate")?,
        min_sprites: lo as usize,
        max_sprites: hi as usize,
        epsilon_range: cfg.pair("epsilon_range")?,
        offset: cfg.f64("offset")?,
        sprite_speed: cfg.pair("sprite_speed")?,
        pan_speed: cfg.pair("pan_speed")?,
    })
}

fn model_config(cfg: &RunConfig) -> Result<ModelConfig> {
    let variant = if cfg.str("ablation").is_empty() { Ablation::Full } else { cfg.str("ablation").parse()? };
    Ok(ModelConfig {
        base_channels: cfg.usize("base_channels")?,
        num_encoders: cfg.usize("num_encoders")?,
        num_residual_blocks: cfg.usize("residual_blocks")?,
        bins: cfg.usize("bins")?,
        use_cfhm: cfg.bool("use_cfhm")?,
        bottleneck_channels: cfg.usize("bottleneck_channels")?,
        variant,
    })
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let wps = cfg.usize("windows_per_sequence")?;
    let tc = TrainConfig {
        seq_len: cfg.usize("seq_len")?,
        batch_size: cfg.usize("batch_size")?,
        epochs: cfg.usize("epochs")?,
        learning_rate: cfg.f64("learning_rate")?,
        weights: LossWeights {
            lambda: cfg.f64("lambda")?,
            alpha: cfg.f64("alpha")?,
        },
        seed: cfg.u64("seed")?,
        model: model_config(cfg)?,
        n_masks: cfg.usize("n_masks")?,
        clip_norm: cfg.f64("clip_norm")?,
        carry_state: cfg.bool("carry_state")?,
        detach_alignment_input: cfg.bool("detach_alignment_input")?,
        windows_per_sequence: (wps > 0).then_some(wps),
        checkpoint_every: if cfg.str("checkpoint_every").is_empty() { 0 } else { cfg.usize("checkpoint_every")? },
    };
    tc.validate()?;
    Ok(tc)
}

fn eval_config(cfg: &RunConfig) -> Result<EvalConfig> {
    let mut e = EvalConfig {
        tolerance: cfg.f64("tolerance")?,
        jobs: cfg.usize("jobs")?.max(1),
        seed: cfg.u64("seed")?,
        ..EvalConfig::default()
    };
    if !cfg.str("sparsity_scale").is_empty() {
        e.sparsity_scale = cfg.f64("sparsity_scale")?;
    }
    Ok(e)
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn simulate(cfg: &RunConfig) -> Result<()> {
    let out = cfg.path("out")?;
    let scene = scene_config(cfg)?;
    let (dirs, warnings) = generate_dataset(&out, cfg.usize("sequences")?, &scene, cfg.u64("seed")?)?;
    warn_all(&warnings);
    cfg.write_resolved(&out)?;
    println!("wrote {} sequences to {}", dirs.len(), out.display());
    Ok(())
}

/// Sensor size shared by every sequence of a dataset.
fn dataset_size(root: &Path) -> Result<(usize, usize)> {
    let dirs = list_sequences(root)?;
    let first = dirs
        .first()
        .ok_or_else(|| e2v_core::Error::Data(format!("no sequences under {}", root.display())))?;
    let meta = SequenceMeta::read(&first.join("meta.txt"))?;
    Ok((meta.width, meta.height))
}

/// The teacher writes into the dataset it annotates: its output
/// directories are the per-sequence `teacher/` folders.
fn teacher(cfg: &RunConfig) -> Result<()> {
    let data = cfg.path("data")?;
    if !cfg.str("out").is_empty() && Path::new(cfg.str("out")) != data {
        bail!("the teacher cache lives inside the dataset; --out must be omitted or equal --data");
    }
    let (w, h) = dataset_size(&data)?;
    let model = model_config(cfg)?;
    model.check_resolution(w, h)?;
    let provider = OracleTeacher::new(TeacherConfig::for_model(&model, w, h, cfg.usize("n_masks")?));
    let report = precompute_teacher(&data, &provider)?;
    for dir in list_sequences(&data)? {
        let t = dir.join("teacher");
        if t.is_dir() {
            cfg.write_resolved(&t)?;
        }
    }
    warn_all(&report.errors);
    println!(
        "teacher cache: {} sequences, {} frames computed, {} reused, {} errors",
        report.sequences,
        report.computed,
        report.reused,
        report.errors.len()
    );
    if !report.errors.is_empty() {
        return Err(e2v_core::Error::Data(format!("{} sequences could not be cached", report.errors.len())).into());
    }
    Ok(())
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let data = cfg.path("data")?;
    let out = cfg.path("out")?;
    let tc = train_config(cfg)?;
    cfg.write_resolved(&out)?;
    let outcome = train(&data, &tc, Some(&out))?;
    warn_all(&outcome.warnings);
    let last = outcome.log.last().map_or(f64::NAN, |r| r.total);
    println!("trained {} steps; final loss {last:.6}; checkpoint {}", outcome.log.len(), out.join("model.e2v").display());
    Ok(())
}

fn reconstruct(cfg: &RunConfig) -> Result<()> {
    let out = cfg.path("out")?;
    let events = cfg.path("events")?;
    let model = load_checkpoint(&cfg.path("checkpoint")?)?;
    let meta_path = events.parent().unwrap_or(Path::new(".")).join("meta.txt");
    let meta = meta_path.is_file().then(|| SequenceMeta::read(&meta_path)).transpose()?;
    let (mut w, mut h) = (cfg.usize("width")?, cfg.usize("height")?);
    if let Some(m) = &meta {
        if w == 0 {
            w = m.width;
        }
        if h == 0 {
            h = m.height;
        }
    }
    let dim = |v: usize| u16::try_from(v).map_err(|_| anyhow!("sensor size {v} out of range"));
    let stream = read_events(&events, dim(w)?, dim(h)?)?;
    let grouping = match cfg.str("grouping") {
        "between" => Grouping::BetweenFrames {
            discard_ratio: cfg.f64("discard_ratio")?,
            seed: cfg.u64("seed")?,
        },
        "count" => Grouping::FixedCount(cfg.usize("count")?),
        "duration" => Grouping::FixedDuration(cfg.f64("dt")?),
        g => bail!("grouping = {g:?}: expected between, count or duration"),
    };
    let times = meta.as_ref().map(|m| m.frame_times.as_slice());
    let recs = reconstruct_stream(&model, &stream, grouping, times)?;
    let frames = out.join("frames");
    std::fs::create_dir_all(&frames).with_context(|| format!("creating {}", frames.display()))?;
    let mut index = String::from("index,time\n");
    for (i, r) in recs.iter().enumerate() {
        r.frame.write_pgm(&frames.join(format!("{i:06}.pgm")))?;
        writeln!(index, "{i},{}", r.time)?;
    }
    std::fs::write(out.join("times.csv"), index).context("writing times.csv")?;
    cfg.write_resolved(&out)?;
    println!("wrote {} frames to {}", recs.len(), frames.display());
    Ok(())
}

fn print_aggregates(report: &EvalReport) {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    for a in &report.aggregates {
        println!(
            "setting {}: {} sequences, {} matched, mse {}, ssim {}, proxy_lpips {}",
            a.setting,
            a.sequences,
            a.matched,
            f(a.mse),
            f(a.ssim),
            f(a.proxy_lpips)
        );
    }
}

fn evaluate_cmd(cfg: &RunConfig) -> Result<()> {
    let out = cfg.path("out")?;
    let model = load_checkpoint(&cfg.path("checkpoint")?)?;
    let data = load_eval_set(&cfg.path("data")?)?;
    let report = evaluate(&model, &data, &eval_config(cfg)?)?;
    write_report(&out, &report)?;
    cfg.write_resolved(&out)?;
    print_aggregates(&report);
    Ok(())
}

fn robustness(cfg: &RunConfig) -> Result<()> {
    let out = cfg.path("out")?;
    let axis: Axis = cfg.str("axis").parse()?;
    let ecfg = eval_config(cfg)?;
    let mut settings = cfg.list_f64("settings")?;
    if settings.is_empty() {
        settings = axis.default_settings(ecfg.sparsity_scale);
    }
    let model = load_checkpoint(&cfg.path("checkpoint")?)?;
    let data = load_eval_set(&cfg.path("data")?)?;
    let report = robustness_sweep(&model, &data, axis, &settings, &ecfg)?;
    write_report(&out, &report)?;
    cfg.write_resolved(&out)?;
    print_aggregates(&report);
    Ok(())
}

/// `key=v1,v2,...`; the first value is the baseline.
fn parse_grid(grid: &str) -> Result<(String, Vec<String>)> {
    let (k, vs) = grid.split_once('=').ok_or_else(|| anyhow!("grid = {grid:?}: expected key=v1,v2,..."))?;
    let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.len() < 2 {
        bail!("grid = {grid:?}: needs at least two values");
    }
    Ok((k.trim().to_string(), values))
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    let out = cfg.path("out")?;
    let train_root = cfg.path("data")?;
    let held_out = load_eval_set(&cfg.path("eval_data")?)?;
    let (key, values) = parse_grid(cfg.str("grid"))?;
    if matches!(key.as_str(), "seed" | "out" | "data" | "eval_data" | "grid" | "seeds" | "jobs" | "tolerance") {
        bail!("grid key {key:?} is not a training setting");
    }
    let entries = values
        .iter()
        .map(|v| {
            let label = if key == "ablation" { v.clone() } else { format!("{key}={v}") };
            Ok(SuiteEntry {
                label,
                config: train_config(&cfg.with(&key, v)?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = cfg
        .str("seeds")
        .split(',')
        .map(|s| s.trim().parse().map_err(|e| anyhow!("seeds = {:?}: {e}", cfg.str("seeds"))))
        .collect::<Result<_>>()?;
    let suite = SuiteConfig {
        entries,
        seeds,
        eval: eval_config(cfg)?,
    };
    cfg.write_resolved(&out)?;
    let result = run_ablation_suite(&train_root, &held_out, &suite)?;
    result.write_csv(&out.join("ablation.csv"))?;
    let summary = summarize(&result, &suite);
    std::fs::write(out.join("summary.csv"), &summary).context("writing summary.csv")?;
    print!("{summary}");
    Ok(())
}

/// Per label: median MSE and the number of seeds where the baseline's MSE is
/// at most the label's.
fn summarize(result: &SuiteResult, suite: &SuiteConfig) -> String {
    let baseline = &suite.entries[0].label;
    let mut s = String::from("label,median_mse,baseline_wins,seeds\n");
    for e in &suite.entries {
        let wins = result
            .rows_for(&e.label)
            .filter(|r| r.delta_mse >= 0.0 && &e.label != baseline)
            .count();
        let n = result.rows_for(&e.label).count();
        let med = result.median_mse(&e.label).unwrap_or(f64::NAN);
        let _ = writeln!(s, "{},{med},{wins},{n}", e.label);
    }
    s
}
