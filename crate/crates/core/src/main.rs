use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stylecl::commands;
use stylecl::config::ExperimentConfig;
use stylecl::Result;

#[derive(Parser)]
#[command(
    name = "stylecl",
    version,
    about = "Exemplar-free continual segmentation with Fourier style replay"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Replace existing outputs.
    #[arg(long)]
    overwrite: bool,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Experiment seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the incremental protocol, the oracle and the evaluation.
    Run {
        #[command(flatten)]
        common: Common,
        /// Method variant (overrides the config).
        #[arg(long)]
        variant: Option<String>,
    },
    /// Render images in a stored style.
    Stylize {
        /// Directory of .ppm images.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        step: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on sample directories.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "eval-dir", required = true)]
        eval_dirs: Vec<PathBuf>,
        /// Oracle report for gaps.
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Print the reports of a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several variants (and optionally betas) on identical data.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "ft,ft_selfstyle,mask:1010,mask:1110,full"
        )]
        variants: Vec<String>,
        /// Comma-separated stylization window fractions.
        #[arg(long, value_delimiter = ',')]
        betas: Vec<f64>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    commands::init_threads()?;
    match cli.command {
        Command::Generate { common } => {
            let cfg = load(&common)?;
            let data = commands::cmd_generate(&cfg, common.overwrite)?;
            println!(
                "dataset {} at {}",
                data.content_hash,
                data.store.root().display()
            );
        }
        Command::Run { common, variant } => {
            let cfg = load(&common)?;
            let out = commands::cmd_run(&cfg, variant.as_deref(), common.overwrite)?;
            print!("{}", commands::format_report(&out.report)?);
            println!("outputs in {}", out.dir.display());
        }
        Command::Stylize {
            images,
            bank,
            step,
            out,
        } => {
            let n = commands::cmd_stylize(&images, &bank, step, &out)?;
            println!("stylized {n} images into {}", out.display());
        }
        Command::Eval {
            checkpoint,
            eval_dirs,
            oracle,
        } => {
            println!("dir,miou,delta");
            for l in commands::cmd_eval(&checkpoint, &eval_dirs, oracle.as_deref())? {
                let d = l.delta.map(|d| format!("{d:.2}")).unwrap_or_default();
                println!("{},{:.2},{}", l.dir, l.miou * 100.0, d);
            }
        }
        Command::Report { out } => {
            for (dir, r) in commands::cmd_report(&out)? {
                println!("# {}", dir.display());
                print!("{}", commands::format_report(&r)?);
            }
        }
        Command::Ablate {
            common,
            variants,
            betas,
        } => {
            let cfg = load(&common)?;
            println!("beta,variant,final_delta_bar,final_gamma_gen");
            for r in commands::cmd_ablate(&cfg, &variants, &betas, common.overwrite)? {
                println!(
                    "{},{},{:.2},{:.2}",
                    r.beta,
                    r.variant,
                    r.final_delta_bar,
                    r.final_gamma_gen * 100.0
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
