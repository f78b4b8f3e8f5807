use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Parser;
use sketchmesh_server::{router, AppState, DEFAULT_PORT};

#[derive(Debug, Parser)]
#[command(name = "sketchmesh-server", version, about = "Serve sketch-to-mesh inference over HTTP")]
struct Args {
    /// SKF1 checkpoint to serve.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let state = AppState::new();
    let addr = SocketAddr::new(args.host, args.port);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {addr}");
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match loader.load(&args.ckpt) {
        Ok(()) => log::info!("loaded {}", args.ckpt.display()),
        Err(e) => {
            log::error!("cannot load {}: {e}", args.ckpt.display());
            std::process::exit(3);
        }
    });
    axum::serve(listener, router(state)).await?;
    Ok(())
}
