use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nest_lab::app::{self, exit_code};
use nest_lab::report::{ABLATION_FILE, RESULTS_FILE};
use nest_lab::verify::Implementations;
use nest_lab::LabError;

/// Class-incremental segmentation experiments with pre-tuned new classifiers.
#[derive(Parser)]
#[command(name = "nest-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic world of a config and save it.
    GenData {
        config: PathBuf,
        #[arg(short, long, default_value = "world.jsonl")]
        out: PathBuf,
    },
    /// Run one experiment; writes results.csv, curves.csv and config.echo.json.
    Run {
        config: PathBuf,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the strategy x seed sweep of the config's `ablation` section.
    Ablate {
        config: PathBuf,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the gradient, oracle and invariant self-checks.
    Verify,
    /// Merge the CSVs of several run directories.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long, default_value = "report")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("nest-lab: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn execute(command: Command) -> Result<u8, LabError> {
    match command {
        Command::GenData { config, out } => {
            let world = app::cmd_gen_data(&config, &out)?;
            println!(
                "wrote {}: {} classes, {} train and {} test images",
                out.display(),
                world.spec.num_classes,
                world.train.len(),
                world.test.len()
            );
        }
        Command::Run { config, out } => {
            let run = app::cmd_run(&config, &out)?;
            let last = run.final_step();
            println!(
                "{} ({}): step {} mIoU all {}, wrote {}",
                run.run_id,
                run.strategy,
                last.step,
                fmt_opt(last.miou_all),
                out.join(RESULTS_FILE).display()
            );
        }
        Command::Ablate { config, out } => {
            let runs = app::cmd_ablate(&config, &out)?;
            println!("{} runs, wrote {}", runs.len(), out.join(ABLATION_FILE).display());
        }
        Command::Verify => {
            let (passed, _) = app::cmd_verify(&Implementations::default(), &mut std::io::stdout())?;
            if !passed {
                return Ok(app::EXIT_FAILURE as u8);
            }
        }
        Command::Report { inputs, out } => {
            let rows = app::cmd_report(&inputs, &out)?;
            println!("merged {} rows into {}", rows.len(), out.display());
        }
    }
    Ok(0)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}
