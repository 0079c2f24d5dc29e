use std::process::ExitCode;

use clap::Parser;
use hoi_cli::cli::{Cli, Command};
use hoi_cli::commands::{self, UsageError};

fn run(cli: Cli) -> anyhow::Result<bool> {
    commands::threads()?;
    match cli.command {
        Command::Train(args) => {
            let s = commands::train(&args)?;
            println!(
                "trained {} steps over {} epochs on {} images ({} without pairs); final loss {:.6}",
                s.steps, s.epochs, s.images, s.skipped, s.final_loss
            );
            println!("checkpoint: {}", args.out.join(commands::CHECKPOINT_FILE).display());
        }
        Command::Predict(args) => {
            let n = commands::predict(&args)?;
            println!("wrote {n} triplets to {}", args.out.display());
        }
        Command::Eval(args) => {
            let out = commands::eval(&args)?;
            print!("{}", commands::format_reports(&out.reports));
        }
        Command::Split(args) => {
            let s = commands::split(&args)?;
            println!(
                "{}: {} unseen, {} seen -> {}",
                s.kind,
                s.unseen.len(),
                s.seen.len(),
                args.out.display()
            );
        }
        Command::Selfcheck(args) => {
            let lines = commands::selfcheck(&args)?;
            for l in &lines {
                println!("{} {}: {}", if l.passed { "ok  " } else { "FAIL" }, l.name, l.detail);
            }
            return Ok(lines.iter().all(|l| l.passed));
        }
        Command::Synth(args) => {
            commands::synth(&args)?;
            println!("wrote synthetic data to {}", args.out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
