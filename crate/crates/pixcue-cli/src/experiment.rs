//! Experiment specs and the orchestration verbs: single runs, ablation
//! matrices and temporal-gap sweeps. Every reported number is reproducible
//! from `(config, seed)`; sweep and ablation points never share model state.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use pixcue_core::training::{
    checkpoint_save, synthetic_dataset, TrainConfig, TrainMode, Trainer,
};

pub use crate::benchmarks::EvalConfig;
use crate::benchmarks::{run_benchmark, BenchError, BENCHMARKS};
use crate::report::{CurvePoint, MetricRow, ReportBundle, ReportError, RunMeta};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment spec: {0}")]
    BadSpec(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: &'static str, source: anyhow::Error },
    #[error(transparent)]
    Report(#[from] ReportError),
}

fn stage<E: std::error::Error + Send + Sync + 'static>(
    name: &'static str,
) -> impl FnOnce(E) -> ExperimentError {
    move |e| ExperimentError::Stage { stage: name, source: anyhow::Error::new(e) }
}

fn default_benchmarks() -> Vec<String> {
    vec!["vos_knn".into(), "clean_cue_fit".into()]
}

/// One named experiment: a training config, the benchmarks to report, and
/// optional sweep values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub train: TrainConfig,
    #[serde(default = "default_benchmarks")]
    pub benchmarks: Vec<String>,
    pub eval: EvalConfig,
    /// Temporal-gap sweep values for the `sweep` verb.
    pub sweep_delta_max: Vec<usize>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "experiment".into(),
            train: TrainConfig::default(),
            benchmarks: default_benchmarks(),
            eval: EvalConfig::default(),
            sweep_delta_max: vec![1, 3, 5, 10, 15, 20],
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.name.is_empty() {
            return Err(ExperimentError::BadSpec("name must not be empty".into()));
        }
        for b in &self.benchmarks {
            if !BENCHMARKS.contains(&b.as_str()) {
                return Err(ExperimentError::BadSpec(format!(
                    "unknown benchmark `{b}`; known: {BENCHMARKS:?}"
                )));
            }
        }
        if self.sweep_delta_max.iter().any(|&v| v == 0) {
            return Err(ExperimentError::BadSpec("sweep values must be positive".into()));
        }
        self.train.validate().map_err(stage("config"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::BadSpec(format!("{}: {e}", path.display())))?;
        let spec: ExperimentSpec = toml::from_str(&text)
            .map_err(|e| ExperimentError::BadSpec(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }
}

fn run_id(spec: &ExperimentSpec) -> String {
    let hash = spec.train.config_hash();
    format!("{}-{}", spec.name, &hash[..8])
}

/// Trains per the spec (zero steps means a fresh random decoder), runs all
/// listed benchmarks, and returns the bundle. When `out_dir` is given the
/// reports and a checkpoint land there; partial results are flushed if a
/// probe stage fails.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out_dir: Option<&Path>,
) -> Result<ReportBundle, ExperimentError> {
    spec.validate()?;
    let started = Instant::now();
    let id = run_id(spec);
    let hash = spec.train.config_hash();
    let mut bundle = ReportBundle::default();

    let dataset = synthetic_dataset(&spec.train);
    let mut trainer = Trainer::new(spec.train.clone()).map_err(stage("init"))?;
    for _ in 0..spec.train.max_steps {
        let stats = trainer.train_step(&dataset).map_err(stage("train"))?;
        bundle.curves.push(CurvePoint { run_id: id.clone(), step: stats.step, loss: stats.loss });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(stage("emit"))?;
        checkpoint_save(&trainer, &dir.join(format!("{id}.ckpt"))).map_err(stage("checkpoint"))?;
    }

    let bench_result = run_benchmarks_into(&mut bundle, spec, &trainer, &id, &hash);
    bundle.meta.push(RunMeta {
        name: spec.name.clone(),
        seed: spec.train.seed,
        config_hash: hash,
        wall_time_s: started.elapsed().as_secs_f64(),
    });
    if let Some(dir) = out_dir {
        // Flush whatever exists even when a stage failed.
        crate::report::report_emit(&bundle, dir)?;
    }
    bench_result?;
    Ok(bundle)
}

fn run_benchmarks_into(
    bundle: &mut ReportBundle,
    spec: &ExperimentSpec,
    trainer: &Trainer,
    id: &str,
    hash: &str,
) -> Result<(), ExperimentError> {
    for bench in &spec.benchmarks {
        let result: Result<_, BenchError> =
            run_benchmark(bench, &trainer.model, &spec.train, &spec.eval);
        let probe = result.map_err(stage("probe"))?;
        for (metric, value) in &probe.metrics {
            bundle.rows.push(MetricRow {
                run_id: id.to_string(),
                benchmark: bench.clone(),
                metric: metric.clone(),
                value: *value,
                seed: spec.train.seed,
                config_hash: hash.to_string(),
            });
        }
    }
    Ok(())
}

/// Runs a pre-trained (or freshly initialised) model against the spec's
/// benchmark list without training steps.
pub fn probe_only(
    spec: &ExperimentSpec,
    trainer: &Trainer,
    out_dir: Option<&Path>,
) -> Result<ReportBundle, ExperimentError> {
    spec.validate()?;
    let started = Instant::now();
    let id = run_id(spec);
    let hash = spec.train.config_hash();
    let mut bundle = ReportBundle::default();
    let res = run_benchmarks_into(&mut bundle, spec, trainer, &id, &hash);
    bundle.meta.push(RunMeta {
        name: spec.name.clone(),
        seed: spec.train.seed,
        config_hash: hash,
        wall_time_s: started.elapsed().as_secs_f64(),
    });
    if let Some(dir) = out_dir {
        crate::report::report_emit(&bundle, dir)?;
    }
    res?;
    Ok(bundle)
}

/// The ablation rows: every nonempty cue-modality subset, then the
/// component toggles (per-frame objective, refinement off, cropping off,
/// temporal sampling off, edge loss off) against the full reference.
pub fn ablation_rows(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut rows = Vec::new();
    for mask in 1u8..8 {
        let (sd, depth, flow) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
        let mut cfg = base.clone();
        cfg.use_sd_cue = sd;
        cfg.use_depth_cue = depth;
        cfg.use_flow_cue = flow;
        let name = if sd && depth && flow {
            "cues_full".to_string()
        } else {
            let mut parts = Vec::new();
            if sd {
                parts.push("sd");
            }
            if depth {
                parts.push("depth");
            }
            if flow {
                parts.push("flow");
            }
            format!("cues_{}", parts.join("_"))
        };
        rows.push((name, cfg));
    }
    rows.push(("comp_per_frame".into(), TrainConfig { mode: TrainMode::PerFrame, ..base.clone() }));
    rows.push(("comp_no_refine".into(), TrainConfig { use_pamr: false, ..base.clone() }));
    rows.push(("comp_no_crop".into(), TrainConfig { use_cropping: false, ..base.clone() }));
    rows.push((
        "comp_no_temporal".into(),
        TrainConfig { use_temporal_sampling: false, ..base.clone() },
    ));
    rows.push(("comp_no_edge_loss".into(), TrainConfig { gamma: 0.0, ..base.clone() }));
    rows
}

/// Runs the whole ablation matrix; one full run per row, fresh state each.
pub fn ablation_matrix(
    spec: &ExperimentSpec,
    out_dir: Option<&Path>,
) -> Result<ReportBundle, ExperimentError> {
    spec.validate()?;
    let mut bundle = ReportBundle::default();
    for (row_name, cfg) in ablation_rows(&spec.train) {
        let row_spec = ExperimentSpec {
            name: format!("{}-{row_name}", spec.name),
            train: cfg,
            benchmarks: spec.benchmarks.clone(),
            eval: spec.eval.clone(),
            sweep_delta_max: vec![],
        };
        // Rows with every cue off cannot exist: the config validator
        // rejects them before launch, and the row builder never emits one.
        let sub = run_experiment(&row_spec, None)?;
        bundle.merge(sub);
    }
    if let Some(dir) = out_dir {
        crate::report::report_emit(&bundle, dir)?;
    }
    Ok(bundle)
}

/// Temporal-gap sweep: one fresh run per `delta_max` value, reporting the
/// propagation score per point and a static plot.
pub fn sweep(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<ReportBundle, ExperimentError> {
    spec.validate()?;
    if spec.sweep_delta_max.is_empty() {
        return Err(ExperimentError::BadSpec("sweep needs at least one value".into()));
    }
    let mut bundle = ReportBundle::default();
    let mut points = Vec::new();
    for &delta in &spec.sweep_delta_max {
        let row_spec = ExperimentSpec {
            name: format!("{}-d{delta}", spec.name),
            train: TrainConfig { delta_max: delta, ..spec.train.clone() },
            benchmarks: spec.benchmarks.clone(),
            eval: spec.eval.clone(),
            sweep_delta_max: vec![],
        };
        let sub = run_experiment(&row_spec, None)?;
        let id = run_id(&row_spec);
        if let Some(jf) = sub.value(&id, "vos_knn", "jf") {
            points.push((delta as f64, jf));
        }
        bundle.merge(sub);
    }
    if let Some(dir) = out_dir {
        crate::report::report_emit(&bundle, dir)?;
        if !points.is_empty() {
            let svg = crate::plot::line_chart(
                "propagation score vs temporal window",
                "delta_max",
                "jf",
                &[("vos_knn jf".to_string(), points)],
            );
            std::fs::write(dir.join("sweep_jf.svg"), svg).map_err(stage("emit"))?;
        }
    }
    Ok(bundle)
}
