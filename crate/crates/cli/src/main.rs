use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use tomolab::circuits::CircuitSchedule;
use tomolab::experiments::{self, Config};
use tomolab::hilbert::unitarity_deviation;

/// Random-circuit tomography experiments.
#[derive(Parser)]
#[command(name = "tomolab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Output root; a relative `output` key in the config is resolved against it.
        #[arg(long, env = "TOMOLAB_OUT", default_value = "tomolab-out")]
        out: PathBuf,
    },
    /// List experiments with their config keys and artifacts.
    List,
    /// Rebuild circuits from schedule descriptors, one per line, and fingerprint their unitaries.
    Replay { schedules: PathBuf },
}

const EXIT_USAGE: u8 = 1;
const EXIT_METRIC: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = match cli.command {
        Command::Run { config, out } => run(&config, &out),
        Command::List => {
            print!("{}", experiments::descriptor_table());
            Ok(true)
        }
        Command::Replay { schedules } => replay(&schedules).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_METRIC),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn run(path: &Path, root: &Path) -> anyhow::Result<bool> {
    let config = Config::from_file(path).with_context(|| format!("reading {}", path.display()))?;
    let outcome = experiments::run(&config)?;
    let dir = experiments::output_dir(&config, root)?;
    let report = experiments::write_artifacts(&outcome, &config, &dir)
        .with_context(|| format!("writing artifacts to {}", dir.display()))?;
    for c in &outcome.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("report: {}", report.display());
    Ok(outcome.passed())
}

fn fingerprint(m: &tomolab::CMat) -> String {
    let mut h = Sha256::new();
    for z in m.iter() {
        h.update(z.re.to_le_bytes());
        h.update(z.im.to_le_bytes());
    }
    hex::encode(h.finalize())[..16].to_string()
}

fn replay(path: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let schedule = CircuitSchedule::from_descriptor(line).with_context(|| format!("line {}", n + 1))?;
        let u = schedule.run_circuit()?;
        let parities: String = (0..schedule.depth())
            .map(|t| match schedule.parity(t) {
                tomolab::circuits::Parity::Even => 'e',
                tomolab::circuits::Parity::Odd => 'o',
            })
            .collect();
        println!(
            "{} | parities={} unitarity={:.1e} sha256={}",
            schedule.descriptor(),
            if parities.is_empty() { "-" } else { &parities },
            unitarity_deviation(u.matrix()),
            fingerprint(u.matrix())
        );
    }
    Ok(())
}
