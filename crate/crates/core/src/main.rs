use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nearfocus::harness::{
    eval, export_codebooks, flops_report, gen_datasets, run_experiment, train_all, Experiment, RunConfig, Scale,
};

#[derive(Parser)]
#[command(name = "nearfocus", version, about = "Near-field beamfocusing simulator and beam-training toolkit")]
struct Cli {
    /// Base seed; overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    scale: ScaleArg,
    /// Output directory for datasets, weights and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// `key = value` configuration file applied over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single `key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the stage-1 and stage-2 datasets.
    GenDataset,
    /// Train the per-SNR networks.
    Train {
        /// Also train detectors on half maps.
        #[arg(long)]
        half: bool,
    },
    /// Score trained networks on the test split.
    Eval,
    /// Run one experiment and write its report.
    Experiment {
        #[arg(value_enum)]
        kind: ExperimentArg,
    },
    /// Print the per-layer FLOPs table of the configured detector.
    Flops,
    /// Write the fine codebooks as JSON manifests and complex64 blobs.
    CodebookExport,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentArg {
    Focal,
    Interference,
    Rate,
    Density,
    Accuracy,
    Halfmap,
}

impl From<ExperimentArg> for Experiment {
    fn from(e: ExperimentArg) -> Self {
        match e {
            ExperimentArg::Focal => Experiment::Focal,
            ExperimentArg::Interference => Experiment::Interference,
            ExperimentArg::Rate => Experiment::Rate,
            ExperimentArg::Density => Experiment::Density,
            ExperimentArg::Accuracy => Experiment::Accuracy,
            ExperimentArg::Halfmap => Experiment::Halfmap,
        }
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("NEARFOCUS_THREADS") else { return Ok(()) };
    let n: usize = raw.trim().parse().map_err(|_| format!("NEARFOCUS_THREADS must be a positive integer, got `{raw}`"))?;
    if n == 0 {
        return Err("NEARFOCUS_THREADS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn run(cli: Cli) -> nearfocus::Result<()> {
    let scale = match cli.scale {
        ScaleArg::Desk => Scale::Desk,
        ScaleArg::Paper => Scale::Paper,
    };
    let cfg = RunConfig::resolve(scale, cli.config.as_deref(), &cli.set, cli.seed, cli.out)?;
    match cli.command {
        Command::GenDataset => {
            let (fine, coarse) = gen_datasets(&cfg)?;
            println!(
                "wrote {} stage-2 and {} stage-1 samples to {}",
                fine.samples.len(),
                coarse.samples.len(),
                cfg.out.display()
            );
        }
        Command::Train { half } => {
            for (name, record) in train_all(&cfg, half)? {
                if let Some(last) = record.epochs.last() {
                    println!(
                        "{name}: {} epochs, train loss {:.5}, val loss {:.5}, val accuracy {:.4}",
                        record.epochs.len(),
                        last.train_loss,
                        last.val_loss,
                        last.val_accuracy
                    );
                }
            }
        }
        Command::Eval => {
            let rep = eval(&cfg)?;
            rep.write(&cfg.out)?;
            print!("{}", rep.text());
        }
        Command::Experiment { kind } => {
            let rep = run_experiment(kind.into(), &cfg)?;
            rep.write(&cfg.out)?;
            print!("{}", rep.text());
        }
        Command::Flops => {
            let rep = flops_report(&cfg);
            rep.write(&cfg.out)?;
            println!("{:<16} {:<5} {:<28} {:>6} {:>12} {:>14}", "layer", "kind", "detail", "repeat", "unit", "flops");
            for row in &rep.rows {
                println!("{:<16} {:<5} {:<28} {:>6} {:>12} {:>14}", row[0], row[1], row[2], row[3], row[4], row[5]);
            }
            print!("{}", rep.summary.join("\n"));
            println!();
        }
        Command::CodebookExport => {
            export_codebooks(&cfg)?;
            println!("wrote codebook_bs and codebook_ris to {}", cfg.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
