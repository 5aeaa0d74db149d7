use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand};
use viraal_core::config::RunConfig;
use viraal_core::corpus::{self, Dataset, Example};
use viraal_service::service::{train_checkpoint, DEFAULT_LEASE_MS, DEFAULT_SNAPSHOT_EVERY};
use viraal_service::{api, Service, ServiceConfig};

#[derive(Parser)]
#[command(name = "viraal-service", version, about = "Annotation backend for active-learning rounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an initial model on a labeled subset and create a data directory.
    Init(InitArgs),
    /// Serve the HTTP API over an existing data directory.
    Serve(ServeArgs),
}

#[derive(Args)]
struct Shared {
    #[arg(long, env = "VIRAAL_SERVICE_DATA")]
    data_dir: PathBuf,
    /// Pretrained vectors used for every training run.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    shared: Shared,
    /// Dataset directory with train/, test/ and dev/ (or valid/).
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    name: Option<String>,
    /// Percent of train that starts labeled; the rest is the pool.
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML run-config overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dev_carve: Option<usize>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long, env = "VIRAAL_SERVICE_ADDR", default_value = "127.0.0.1:8080")]
    bind: String,
    /// Require `Authorization: Bearer <token>` on every request.
    #[arg(long, env = "VIRAAL_SERVICE_TOKEN", hide_env_values = true)]
    token: Option<String>,
    #[arg(long, default_value_t = DEFAULT_LEASE_MS / 1000)]
    lease_secs: u64,
    #[arg(long, default_value_t = DEFAULT_SNAPSHOT_EVERY)]
    snapshot_every: usize,
}

fn init(a: InitArgs) -> Result<()> {
    let name = a.name.clone().unwrap_or_else(|| {
        a.dataset
            .file_name()
            .map(|s| s.to_string_lossy().to_lowercase())
            .unwrap_or_else(|| "dataset".into())
    });
    let mut config = RunConfig::load(&name, a.config.as_deref())?;
    config.seed = a.seed;
    let ds = Dataset::load(&a.dataset, &name, a.dev_carve, a.seed)?;
    let regime = corpus::sample_regime(&ds.train, a.fraction, a.seed)?;
    let labeled = viraal_core::active::as_set(&regime.labeled);
    let train: Vec<Example> = ds
        .train
        .iter()
        .map(|e| if labeled.contains(&e.id()) { e.clone() } else { e.unlabeled() })
        .collect();
    log::info!("training the initial model on {} labeled examples", regime.labeled.len());
    let (checkpoint, metrics) = train_checkpoint(&train, &ds.dev, &config, a.shared.embeddings.as_deref())?;
    if let Some(m) = metrics {
        log::info!("dev intent accuracy {:.4}, slot F1 {:.2}", m.intent_accuracy, m.slot_f1);
    }
    let mut svc_config = ServiceConfig::new(&a.shared.data_dir);
    svc_config.embeddings = a.shared.embeddings;
    Service::init(svc_config, train, ds.dev, checkpoint)?;
    println!("initialised {}", a.shared.data_dir.display());
    Ok(())
}

async fn serve(a: ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        data_dir: a.shared.data_dir.clone(),
        lease_ms: a.lease_secs * 1000,
        snapshot_every: a.snapshot_every,
        embeddings: a.shared.embeddings,
    };
    let service = Arc::new(Service::open(config).with_context(|| format!("opening {}", a.shared.data_dir.display()))?);
    let app = api::router(service.clone(), a.token);
    let listener = tokio::net::TcpListener::bind(&a.bind).await.with_context(|| format!("binding {}", a.bind))?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    service.snapshot()?;
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Init(a) => tokio::task::spawn_blocking(move || init(a)).await?,
        Command::Serve(a) => serve(a).await,
    }
}
