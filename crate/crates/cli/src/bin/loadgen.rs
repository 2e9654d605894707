use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use spancity_core::loadgen::{self, Generator, Scenario, SendOptions, MAX_BATCH_SPANS};

#[derive(Parser)]
#[command(version, about = "Synthetic OTLP trace workloads with ground truth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the span stream as OTLP/JSON lines and the ground truth document.
    Generate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Posts the span stream to an OTLP/HTTP receiver.
    Send {
        #[arg(long)]
        scenario: PathBuf,
        /// Receiver base URL, e.g. http://localhost:4318
        #[arg(long)]
        target: String,
        /// Spans per second. Unlimited when omitted.
        #[arg(long)]
        rate: Option<u64>,
        #[arg(long, default_value_t = 8)]
        concurrency: usize,
    },
}

async fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate {
            scenario,
            out,
            truth,
        } => {
            let scenario = Scenario::load(&scenario)?;
            let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            let spans = loadgen::write_stream(&scenario, BufWriter::new(file))?;
            let doc = loadgen::ground_truth(&scenario);
            let file = File::create(&truth).with_context(|| format!("creating {}", truth.display()))?;
            serde_json::to_writer_pretty(BufWriter::new(file), &doc)?;
            eprintln!("wrote {spans} spans to {}", out.display());
        }
        Command::Send {
            scenario,
            target,
            rate,
            concurrency,
        } => {
            let scenario = Scenario::load(&scenario)?;
            let mut options = SendOptions::new(target);
            options.rate = rate;
            options.concurrency = concurrency;
            let batches = Generator::new(&scenario).batches(MAX_BATCH_SPANS);
            let report = loadgen::send(batches, &options).await;
            println!("{}", serde_json::to_string(&report)?);
            if report.unacknowledged > 0 {
                anyhow::bail!("{} spans were not acknowledged", report.unacknowledged);
            }
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
