use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use spancity_core::api::{self, build_pipeline};
use spancity_core::config::Config;

#[derive(Parser)]
#[command(version, about = "Reconstructs software landscapes from OTLP traces")]
struct Cli {
    /// TOML configuration file. Defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the OTLP receiver and the query API until interrupted.
    Serve {
        /// Address to bind, as four dotted octets.
        #[arg(long, default_value = "0.0.0.0")]
        host: std::net::Ipv4Addr,
    },
    /// Replays files of OTLP/JSON export requests, one per line, into the store.
    Import {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>) -> anyhow::Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(Config::default()),
    }
}

async fn serve(config: Config, host: std::net::Ipv4Addr) -> anyhow::Result<()> {
    let server = api::start(&config, host.octets()).await?;
    if !server.load_report.skipped.is_empty() {
        eprintln!("skipped {} unreadable window files", server.load_report.skipped.len());
    }
    eprintln!(
        "api on http://{}, otlp receiver on http://{}/v1/traces",
        server.api_addr, server.ingest_addr
    );
    tokio::signal::ctrl_c().await?;
    eprintln!("shutting down");
    server.shutdown().await?;
    Ok(())
}

fn import(config: Config, files: &[PathBuf]) -> anyhow::Result<()> {
    let (pipeline, _) = build_pipeline(&config)?;
    for file in files {
        let summary = pipeline.buffer().import_file(file)?;
        println!("{}: {}", file.display(), serde_json::to_string(&summary)?);
        pipeline.settle()?;
    }
    println!("{}", serde_json::to_string(&pipeline.counters())?);
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match load_config(cli.config.as_ref()) {
        Ok(config) => match cli.command {
            Command::Serve { host } => serve(config, host).await,
            Command::Import { files } => import(config, &files),
        },
        Err(e) => Err(e),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
