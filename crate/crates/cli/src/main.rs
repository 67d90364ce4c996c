use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use tdd_cli::cache::StageCount;
use tdd_cli::config::PipelineConfig;
use tdd_cli::error::{CliError, Result};
use tdd_cli::pipeline::Pipeline;
use tdd_cli::synth;

#[derive(Parser)]
#[command(name = "tdd", version, about = "Trajectory-pooled deep-convolutional descriptors for video")]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true, default_value = "configs/desk.json")]
    config: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the configured dataset directory.
    Synth {
        /// Write here instead of the configured dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optical flow and dense trajectories.
    Trajectories {
        #[arg(long)]
        video: Option<String>,
    },
    /// Convolutional feature maps for both streams at every scale.
    Featmaps {
        #[arg(long)]
        video: Option<String>,
    },
    /// Trajectory-pooled descriptors.
    Pool {
        #[arg(long)]
        video: Option<String>,
    },
    /// PCA, GMM and Fisher vectors per split.
    Encode,
    /// Linear SVMs per split.
    Train,
    /// Accuracy report over all splits.
    Eval,
    /// Every stage in order; with `--video`, only the per-video ones.
    Run {
        #[arg(long)]
        video: Option<String>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Stage {
    Flow,
    Trajectories,
    Featmaps,
    Pool,
    Encode,
    Train,
    Eval,
}

impl Stage {
    const ALL: [Stage; 7] = [
        Stage::Flow,
        Stage::Trajectories,
        Stage::Featmaps,
        Stage::Pool,
        Stage::Encode,
        Stage::Train,
        Stage::Eval,
    ];

    fn name(self) -> &'static str {
        match self {
            Stage::Flow => "flow",
            Stage::Trajectories => "trajectories",
            Stage::Featmaps => "featmaps",
            Stage::Pool => "pool",
            Stage::Encode => "encode",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }

    fn run(self, p: &Pipeline) -> Result<StageCount> {
        match self {
            Stage::Flow => p.flows(),
            Stage::Trajectories => p.trajectories(),
            Stage::Featmaps => p.featmaps(),
            Stage::Pool => p.pool(),
            Stage::Encode => p.encode(),
            Stage::Train => p.train(),
            Stage::Eval => p.eval(),
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build_global()
        .map_err(|e| CliError::internal(format!("thread pool: {e}")))?;
    Ok(cfg)
}

/// Runs the stages `from..=to`; each reads what earlier ones wrote.
fn run_stages(cfg: PipelineConfig, from: Stage, to: Stage, video: Option<String>) -> Result<()> {
    let p = Pipeline::new(cfg, video)?;
    for stage in Stage::ALL.into_iter().filter(|s| (from..=to).contains(s)) {
        let start = Instant::now();
        let count = stage.run(&p).map_err(|e| e.context(stage.name()))?;
        p.record_timing(stage.name(), start.elapsed().as_secs_f64())?;
        println!("{}: computed {}, cached {}", stage.name(), count.computed, count.cached);
    }
    if to == Stage::Eval {
        let report = p.read_report()?;
        for s in &report.splits {
            println!("split {}: accuracy {:.4} ({}/{})", s.split_id, s.accuracy, s.n_correct, s.n_test);
        }
        println!("mean accuracy {:.4}", report.mean_accuracy);
        println!("report: {}", p.report_path().display());
    }
    Ok(())
}

fn real_main(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth { out } => {
            let dir = out.unwrap_or_else(|| cfg.dataset.clone());
            let (index, splits) = synth::generate(&cfg.synth, &dir)?;
            println!(
                "synth: {} videos in {} classes, {} splits -> {}",
                index.videos.len(),
                index.classes.len(),
                splits.len(),
                dir.display()
            );
            Ok(())
        }
        Command::Trajectories { video } => run_stages(cfg, Stage::Flow, Stage::Trajectories, video),
        Command::Featmaps { video } => run_stages(cfg, Stage::Featmaps, Stage::Featmaps, video),
        Command::Pool { video } => run_stages(cfg, Stage::Pool, Stage::Pool, video),
        Command::Encode => run_stages(cfg, Stage::Encode, Stage::Encode, None),
        Command::Train => run_stages(cfg, Stage::Train, Stage::Train, None),
        Command::Eval => run_stages(cfg, Stage::Eval, Stage::Eval, None),
        Command::Run { video } => {
            let last = if video.is_some() { Stage::Pool } else { Stage::Eval };
            run_stages(cfg, Stage::Flow, last, video)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.code() as u8)
        }
    }
}
