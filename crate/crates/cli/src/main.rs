use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stratgeo::geostruct::Reduction;
use stratgeo::intervene::LossKind;
use stratgeo_cli::{fixture, run, CliError, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "stratgeo", version = stratgeo_cli::GIT_DESCRIBE, about = "Geometry analyses of SAE representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Noise sweep: rank triplets and average Bures distance.
    Case1(RunArgs),
    /// Clustering, intrinsic dimension, persistence, MST weight, Procrustes.
    Case2(RunArgs),
    /// Cluster-centre interventions (needs case2 labels).
    Case3(RunArgs),
    /// All three cases in order.
    All(RunArgs),
    /// Write the synthetic fixture bundle, its ground truth and a config.
    Fixture {
        #[arg(long, default_value = "fixture")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Gw,
    InvAedp,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReduceArg {
    Pca,
    Neighbor,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated noise levels, e.g. 0,0.1,1.
    #[arg(long, value_delimiter = ',')]
    noise: Option<Vec<f64>>,
    /// Comma-separated intervention steps.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long, value_enum)]
    reduce: Option<ReduceArg>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(levels) = &self.noise {
            cfg.noise.levels = levels.clone();
        }
        if let Some(alphas) = &self.alphas {
            cfg.case3.alphas = alphas.clone();
        }
        if let Some(loss) = self.loss {
            cfg.case3.loss_kinds = vec![match loss {
                LossArg::Gw => LossKind::Gw,
                LossArg::InvAedp => LossKind::InvAedp,
            }];
        }
        if let Some(reduce) = self.reduce {
            cfg.case2.reduction = match reduce {
                ReduceArg::Pca => Reduction::Pca,
                ReduceArg::Neighbor => Reduction::Neighbor,
            };
        }
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let (args, stages) = match &cli.command {
        Command::Fixture { out, seed } => {
            let files = fixture::write_fixture(out, *seed)?;
            println!("{}", files.config.display());
            return Ok(());
        }
        Command::Case1(a) => (a, vec![Stage::Case1]),
        Command::Case2(a) => (a, vec![Stage::Case2]),
        Command::Case3(a) => (a, vec![Stage::Case3]),
        Command::All(a) => (a, Stage::ALL.to_vec()),
    };
    let cfg = args.config()?;
    let report = run(&cfg, &stages)?;
    for t in &report.summary.wall_clock {
        log::info!("{} took {:.2}s", t.stage.name(), t.seconds);
    }
    println!("{}", cfg.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
