//! End-to-end desk run: generate data, cache the teacher, train, evaluate.
//! Usage: desk_run <work dir> [epochs] [windows per sequence] [variant] [seed]
//! `E2V_LR` overrides the learning rate; `E2V_CARRY` carries state across windows.

use e2v_core::evalkit::{evaluate, load_eval_set, EvalConfig};
use e2v_core::net::{Ablation, Model};
use e2v_core::semantics::{precompute_teacher, OracleTeacher, TeacherConfig};
use e2v_core::synthgen::{generate_dataset, SceneConfig};
use e2v_core::trainer::{train, TrainConfig};
use std::path::PathBuf;
use std::time::Instant;

fn main() -> e2v_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let work = PathBuf::from(args.get(1).map_or("/tmp/e2v_desk", String::as_str));
    let epochs: usize = args.get(2).map_or(8, |s| s.parse().unwrap());
    let wps: Option<usize> = args.get(3).and_then(|s| s.parse().ok()).filter(|&v| v > 0);
    let variant: Ablation = args.get(4).map_or(Ok(Ablation::Full), |s| s.parse())?;
    let seed: u64 = args.get(5).map_or(1, |s| s.parse().unwrap());
    let scene = SceneConfig::default();
    let (train_root, test_root) = (work.join("train"), work.join("test"));
    if !train_root.exists() {
        generate_dataset(&train_root, 20, &scene, 7)?;
        generate_dataset(&test_root, 5, &scene, 1007)?;
    }
    let cfg = TrainConfig {
        epochs,
        windows_per_sequence: wps,
        seed,
        learning_rate: std::env::var("E2V_LR").map_or(1e-3, |v| v.parse().unwrap()),
        carry_state: std::env::var("E2V_CARRY").is_ok(),
        ..TrainConfig::default()
    }
    .with_ablation(variant);
    let teacher = OracleTeacher::new(TeacherConfig::for_model(&cfg.model, scene.width, scene.height, 10));
    let rep = precompute_teacher(&train_root, &teacher)?;
    println!("teacher: {rep:?}");
    let test = load_eval_set(&test_root)?;
    let ecfg = EvalConfig::default();
    let untrained = Model::<f32>::new(cfg.model.clone(), 0)?;
    let base = evaluate(&untrained, &test, &ecfg)?;
    println!("untrained: {:?}", base.aggregates[0]);
    let t = Instant::now();
    let out = train(&train_root, &cfg, Some(&work.join(format!("run_{variant}_{seed}"))))?;
    println!("trained {} steps in {:.1}s", out.log.len(), t.elapsed().as_secs_f64());
    let n = out.log.len();
    let tenth = (n / 10).max(1);
    let med = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let first = med(&mut out.log[..tenth].iter().map(|r| r.total).collect());
    let last = med(&mut out.log[n - tenth..].iter().map(|r| r.total).collect());
    println!("loss median first {first:.4} last {last:.4} ratio {:.3}", last / first);
    let rep = evaluate(&out.model, &test, &ecfg)?;
    println!("trained: {:?}", rep.aggregates[0]);
    println!("mse gain {:.2}x", base.aggregates[0].mse.unwrap() / rep.aggregates[0].mse.unwrap());
    Ok(())
}
