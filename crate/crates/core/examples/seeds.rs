use std::time::Instant;

use lpt_core::analysis::{evaluate, prompt_match_stats, EvalReport};
use lpt_core::config::RunConfig;
use lpt_core::pipeline::synthesize;
use lpt_core::trainer::{eval_split, init_pretrain_model, prepare_model, train_stage, RunOptions, Stage, StageData};

fn few(r: &EvalReport) -> f64 {
    r.few.accuracy.unwrap_or(f64::NAN)
}

// Probe, phase 1 and phase 2 over several seeds of one profile.
//
//     cargo run --release --example seeds -- configs/desk 3 phase1.epochs=40
fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 2 {
        eprintln!("usage: seeds CONFIG SEEDS [KEY=VALUE ...]");
        std::process::exit(2);
    }
    let mut base = RunConfig::default();
    base.apply_text(&std::fs::read_to_string(&args[0]).unwrap()).unwrap();
    for kv in &args[2..] {
        let (k, v) = kv.split_once('=').unwrap();
        base.set(k, v).unwrap();
    }
    let seeds: u64 = args[1].parse().expect("SEEDS must be a number");
    let t0 = Instant::now();
    let mut sums = [[0.0; 2]; 3];
    for seed in 0..seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let data = synthesize(&cfg).unwrap();
        let split = eval_split(&cfg, &data.train.counts()).unwrap();
        let opts = RunOptions::default();
        let pre = train_stage(Stage::Pretrain, &cfg, init_pretrain_model(&cfg), &StageData { train: &data.pretrain, val: None }, &opts).unwrap();
        let tdata = StageData { train: &data.train, val: Some(&data.val) };
        let mut line = format!("seed {seed}:");
        let probe = train_stage(Stage::Probe, &cfg, prepare_model(Stage::Probe, &cfg, &pre.model).unwrap(), &tdata, &opts).unwrap();
        let rp = evaluate(&probe.best_model, &data.test, &split, cfg.prompt.top_k).unwrap();
        let p1 = train_stage(Stage::Phase1, &cfg, prepare_model(Stage::Phase1, &cfg, &pre.model).unwrap(), &tdata, &opts).unwrap();
        let r1 = evaluate(&p1.best_model, &data.test, &split, cfg.prompt.top_k).unwrap();
        for (i, r) in [&rp, &r1].into_iter().enumerate() {
            sums[i][0] += r.overall;
            sums[i][1] += few(r);
            line += &format!("  {:.1}/{:.1}", r.overall * 100.0, few(r) * 100.0);
        }
        let p2 = train_stage(Stage::Phase2, &cfg, prepare_model(Stage::Phase2, &cfg, &p1.best_model).unwrap(), &tdata, &opts).unwrap();
        let r2 = evaluate(&p2.best_model, &data.test, &split, cfg.prompt.top_k).unwrap();
        sums[2][0] += r2.overall;
        sums[2][1] += few(&r2);
        let ms = prompt_match_stats(&p2.best_model, &data.test, cfg.prompt.top_k).unwrap();
        let good = ms.top2_coverage.iter().filter(|c| c.unwrap_or(0.0) > 0.5).count();
        line += &format!("  {:.1}/{:.1}  cover {good}/{}", r2.overall * 100.0, few(&r2) * 100.0, cfg.classes);
        println!("{line}  [{:.0}s]", t0.elapsed().as_secs_f64());
    }
    let n = seeds as f64;
    let m = |i: usize| format!("{:.2}/{:.2}", sums[i][0] / n * 100.0, sums[i][1] / n * 100.0);
    println!("mean probe {}  phase1 {}  lpt {}  total {:.0}s", m(0), m(1), m(2), t0.elapsed().as_secs_f64());
}
