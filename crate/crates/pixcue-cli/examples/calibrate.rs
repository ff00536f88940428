//! Scratch calibration runs for sizing the acceptance suite. Not part of
//! the deliverable surface; invoked manually during development.

use std::time::Instant;

use pixcue_cli::benchmarks::{run_benchmark, EvalConfig};
use pixcue_core::scenes::NoiseModel;
use pixcue_core::training::{synthetic_dataset, TrainConfig, TrainMode, Trainer};

fn accept_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 4,
        max_steps: 200,
        delta_max: 5,
        crop_output_size: 32,
        context_downsample_factor: 4,
        encoder_patch: 8,
        encoder_width: 8,
        decoder_widths: [8, 10, 12, 16],
        output_dim: 16,
        canvas_size: 40,
        sprite_count: 2,
        scene_count: 6,
        use_pamr: true,
        noise: NoiseModel {
            sigma_flow: 1.0,
            sigma_depth: 0.05,
            boundary_blur_radius: 1,
            dropout_prob: 0.0,
            dropout_patch: 8,
        },
        seed,
        ..TrainConfig::default()
    }
}

fn eval_cfg() -> EvalConfig {
    EvalConfig {
        vos_scenes: 3,
        vos_frames: 5,
        vos_stride: 3,
        knn_radius: 7,
        cue_fit_samples: 4,
        ..EvalConfig::default()
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("steptime");
    match mode {
        "steptime" => {
            let cfg = accept_cfg(0);
            let dataset = synthetic_dataset(&cfg);
            let mut t = Trainer::new(cfg).unwrap();
            let start = Instant::now();
            let n = 10;
            for _ in 0..n {
                t.train_step(&dataset).unwrap();
            }
            println!("step time: {:.1} ms", start.elapsed().as_secs_f64() * 1000.0 / n as f64);
        }
        "noise" => {
            let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(150);
            let seeds: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3);
            for seed in 0..seeds {
                let start = Instant::now();
                let mut results = Vec::new();
                for mode in [TrainMode::InContext, TrainMode::PerFrame] {
                    let mut cfg = accept_cfg(seed);
                    cfg.mode = mode;
                    cfg.max_steps = steps;
                    let dataset = synthetic_dataset(&cfg);
                    let mut t = Trainer::new(cfg.clone()).unwrap();
                    let mut first = 0.0;
                    let mut last = 0.0;
                    for s in 0..steps {
                        let st = t.train_step(&dataset).unwrap();
                        if s == 0 {
                            first = st.loss;
                        }
                        last = st.loss;
                    }
                    let probe = run_benchmark("clean_cue_fit", &t.model, &cfg, &eval_cfg()).unwrap();
                    results.push((mode, first, last, probe.get("clean_cue_l1").unwrap()));
                }
                println!(
                    "seed {seed}: ic first {:.4} last {:.4} clean {:.4} | pf first {:.4} last {:.4} clean {:.4}  ({:.1}s)",
                    results[0].1, results[0].2, results[0].3,
                    results[1].1, results[1].2, results[1].3,
                    start.elapsed().as_secs_f64()
                );
            }
        }
        "sweep" => {
            let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(150);
            let seeds: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3);
            for seed in 0..seeds {
                let start = Instant::now();
                let mut line = format!("seed {seed}:");
                for delta in [1usize, 3, 5, 10] {
                    let mut cfg = accept_cfg(seed);
                    cfg.delta_max = delta;
                    cfg.max_steps = steps;
                    let dataset = synthetic_dataset(&cfg);
                    let mut t = Trainer::new(cfg.clone()).unwrap();
                    for _ in 0..steps {
                        t.train_step(&dataset).unwrap();
                    }
                    let probe = run_benchmark("vos_knn", &t.model, &cfg, &eval_cfg()).unwrap();
                    line.push_str(&format!(" d{delta}={:.4}", probe.get("jf").unwrap()));
                }
                println!("{line}  ({:.1}s)", start.elapsed().as_secs_f64());
            }
        }
        "vosdiag" => {
            let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
            let mut cfg = accept_cfg(0);
            cfg.max_steps = steps;
            let dataset = synthetic_dataset(&cfg);
            let mut t = Trainer::new(cfg.clone()).unwrap();
            let before = run_benchmark("vos_knn", &t.model, &cfg, &eval_cfg()).unwrap();
            println!("untrained jf = {:.4}", before.get("jf").unwrap());
            for _ in 0..steps {
                t.train_step(&dataset).unwrap();
            }
            let after = run_benchmark("vos_knn", &t.model, &cfg, &eval_cfg()).unwrap();
            println!("trained({steps}) jf = {:.4}", after.get("jf").unwrap());
        }
        "diag" => {
            let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
            let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
            let mut cfg = accept_cfg(0);
            cfg.learning_rate = lr;
            let dataset = synthetic_dataset(&cfg);
            let mut t = Trainer::new(cfg.clone()).unwrap();
            let untrained =
                run_benchmark("clean_cue_fit", &t.model, &cfg, &eval_cfg()).unwrap();
            println!("untrained clean = {:.4}", untrained.get("clean_cue_l1").unwrap());
            let mut losses = Vec::new();
            for _ in 0..steps {
                losses.push(t.train_step(&dataset).unwrap().loss);
            }
            let ma = |range: std::ops::Range<usize>| {
                let s: f64 = losses[range.clone()].iter().sum();
                s / range.len() as f64
            };
            println!(
                "loss ma: first50 {:.4} last50 {:.4}",
                ma(0..50.min(steps)),
                ma(steps.saturating_sub(50)..steps)
            );
            let trained = run_benchmark("clean_cue_fit", &t.model, &cfg, &eval_cfg()).unwrap();
            println!("trained clean = {:.4}", trained.get("clean_cue_l1").unwrap());
        }
        other => eprintln!("unknown mode {other}"),
    }
}
