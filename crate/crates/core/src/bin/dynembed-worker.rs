//! Serves one shard of every table.

use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;
use dynembed::service::{BackendOverride, Server, Worker, WorkerOptions};
use dynembed::store::{FileKv, MemoryKv, RemoteKv, StorageRoot};

#[derive(Parser)]
#[command(about = "Embedding worker: owns one shard of every table")]
struct Args {
    #[arg(long)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long)]
    shard_id: u32,
    /// memory, file:DIR, remote:NAME, or config (use each table's own backend)
    #[arg(long, default_value = "config")]
    backend: BackendOverride,
    /// Reject every mutation; tables can only be attached read-only.
    #[arg(long)]
    sandbox: bool,
    /// Load this checkpoint's shard before serving.
    #[arg(long, requires = "n_workers")]
    checkpoint: Option<PathBuf>,
    /// Total workers, needed to pick this shard's keys out of a checkpoint.
    #[arg(long)]
    n_workers: Option<u32>,
    /// Root for relative file-backend and snapshot paths.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args = Args::parse();
    let storage = StorageRoot {
        data_dir: args.data_dir.clone(),
        ..Default::default()
    };
    if let BackendOverride::Remote(name) = &args.backend {
        // Remote stores live under DYNEMBED_REMOTE_ROOT when set, else in memory.
        let kv: Arc<dyn RemoteKv> = match std::env::var_os("DYNEMBED_REMOTE_ROOT") {
            Some(root) => Arc::new(FileKv::open(&PathBuf::from(root).join(name))?),
            None => Arc::new(MemoryKv::new()),
        };
        storage.remotes.register(name.clone(), kv);
    }
    let worker = Arc::new(Worker::new(WorkerOptions {
        shard_id: args.shard_id,
        sandbox: args.sandbox,
        backend: args.backend,
        storage,
    }));
    if let (Some(dir), Some(n)) = (&args.checkpoint, args.n_workers) {
        let records = worker.preload_checkpoint(dir, n)?;
        log::info!("loaded {records} records from {}", dir.display());
    }
    let server = Server::bind((args.host.as_str(), args.port), worker)?;
    println!(
        "dynembed-worker shard {} listening on {}",
        args.shard_id,
        server.local_addr()
    );
    server.wait();
    Ok(())
}
