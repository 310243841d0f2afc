use anyhow::Result;
use bimflow_cli::commands::{self, Cli, Command};
use clap::Parser;

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Track(a) => commands::track(a),
        Command::Align(a) => commands::align(a),
        Command::Dedupe(a) => commands::dedupe(a),
        Command::Bpe(a) => commands::bpe(a),
        Command::Augment(a) => commands::augment(a),
        Command::Dataset(a) => commands::dataset(a),
        Command::Bundle(a) => commands::bundle(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::Serve(a) => commands::serve(a).await,
    }
}
