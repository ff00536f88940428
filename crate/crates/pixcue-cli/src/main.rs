//! `pixcue` command line: train runs, probing, ablation matrices,
//! temporal-gap sweeps, synthetic cue export and external cue ingestion.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pixcue_cli::experiment::probe_only;
use pixcue_cli::{ablation_matrix, run_experiment, sweep, ExperimentSpec};
use pixcue_core::scenes::{self, Manifest, NoiseModel, SceneConfig};
use pixcue_core::training::{checkpoint_load, Trainer};

#[derive(Parser)]
#[command(name = "pixcue", about = "In-context pixel feature learning on cue rasters", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment spec (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for reports, plots and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Bit-reproducible mode. All computation is 64-bit with fixed
    /// reduction order already; the flag additionally pins the rayon pool
    /// to one thread as a belt-and-braces guarantee.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train per the spec and run its benchmark list.
    Train(RunArgs),
    /// Evaluate a checkpoint (or a fresh model) on the benchmark list.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint produced by `train`; omitted = fresh random decoder.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the full ablation matrix (cue subsets and component toggles).
    Ablate(RunArgs),
    /// Sweep the temporal window and plot the propagation score.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated delta_max values; defaults to the spec's list.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
    /// Render synthetic pairs and export them as LGRD rasters + manifest.
    ExportCues {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 48)]
        canvas: usize,
        #[arg(long, default_value_t = 3)]
        sprites: usize,
        /// Apply the default estimator-noise model to the cues.
        #[arg(long)]
        noisy: bool,
    },
    /// Validate an external cue manifest and summarise its pairs.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn load_spec(args: &RunArgs) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        spec.train.seed = seed;
    }
    if args.deterministic {
        // Results are bit-identical either way (fixed reduction order); one
        // worker thread removes even scheduling variance.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    Ok(spec)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => {
            let spec = load_spec(&args)?;
            let bundle = run_experiment(&spec, args.out.as_deref())?;
            println!(
                "run complete: {} metric rows, {} curve points",
                bundle.rows.len(),
                bundle.curves.len()
            );
            for r in &bundle.rows {
                println!("  {} {} {} = {:.6}", r.run_id, r.benchmark, r.metric, r.value);
            }
        }
        Command::Probe { run, checkpoint } => {
            let spec = load_spec(&run)?;
            let trainer = match &checkpoint {
                Some(path) => checkpoint_load(path, spec.train.clone())
                    .with_context(|| format!("loading checkpoint {}", path.display()))?,
                None => Trainer::new(spec.train.clone())?,
            };
            let bundle = probe_only(&spec, &trainer, run.out.as_deref())?;
            for r in &bundle.rows {
                println!("  {} {} {} = {:.6}", r.run_id, r.benchmark, r.metric, r.value);
            }
        }
        Command::Ablate(args) => {
            let spec = load_spec(&args)?;
            let bundle = ablation_matrix(&spec, args.out.as_deref())?;
            println!("ablation matrix: {} metric rows", bundle.rows.len());
        }
        Command::Sweep { run, values } => {
            let mut spec = load_spec(&run)?;
            if let Some(v) = values {
                spec.sweep_delta_max = v;
            }
            let bundle = sweep(&spec, run.out.as_deref())?;
            println!("sweep: {} metric rows", bundle.rows.len());
        }
        Command::ExportCues { out, count, seed, canvas, sprites, noisy } => {
            std::fs::create_dir_all(&out)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pairs = Vec::new();
            for i in 0..count {
                let scene = SceneConfig::sample(&mut rng, canvas, canvas, sprites);
                use rand::Rng;
                let delta = rng.gen_range(1..=5);
                let t = rng.gen_range(0..scene.clip_len.saturating_sub(delta).max(1));
                let mut sample = scenes::render_pair(&scene, t, delta)?;
                if noisy {
                    let nm = NoiseModel {
                        sigma_flow: 1.0,
                        sigma_depth: 0.05,
                        boundary_blur_radius: 1,
                        dropout_prob: 0.05,
                        dropout_patch: 8,
                    };
                    sample = scenes::inject_noise(&sample, &nm, &mut rng)?;
                }
                pairs.push(scenes::export_sample(&sample, &out, &format!("pair{i:04}"))?);
            }
            let manifest = Manifest { pairs };
            std::fs::write(out.join("manifest.toml"), toml::to_string(&manifest)?)?;
            println!("exported {count} pairs to {}", out.display());
        }
        Command::Ingest { manifest } => {
            let base = manifest.parent().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
            let m = scenes::load_manifest(&manifest)?;
            if m.pairs.is_empty() {
                bail!("manifest has no pairs");
            }
            for (i, rec) in m.pairs.iter().enumerate() {
                let sample = scenes::ingest_external_cues(&rec.paths(&base))?;
                let fb = sample.flow_fwd.channel_bounds();
                println!(
                    "pair {i}: {}x{} delta {} flow-x range [{:.3}, {:.3}]",
                    sample.height(),
                    sample.width(),
                    sample.delta,
                    fb[0].0,
                    fb[0].1
                );
            }
            println!("ingested {} pairs OK", m.pairs.len());
        }
    }
    Ok(())
}
