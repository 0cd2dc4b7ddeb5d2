use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use caspi_hitl::{port_from_env, router, AppState};
use clap::Parser;

/// Serves exported preference pairs for labeling on the port named by
/// CASPI_HITL_PORT (default 8723).
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Task pool exported by `caspi export-pairs`.
    #[arg(long)]
    tasks: PathBuf,
    /// Append-only label journal; replayed on start.
    #[arg(long)]
    journal: PathBuf,
    /// Directory of static client files.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    /// Seed for candidate display order; drawn from the clock when absent.
    #[arg(long)]
    seed: Option<u64>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let seed = args.seed.unwrap_or_else(|| {
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0)
    });
    let state = AppState::load(&args.tasks, &args.journal, seed)?;
    let port = port_from_env().map_err(anyhow::Error::msg)?;
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    eprintln!("listening on http://{addr}");
    axum::serve(listener, router(state, args.static_dir)).await?;
    Ok(())
}
