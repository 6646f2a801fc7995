//! Routes client requests to the workers.

use std::sync::Arc;

use clap::Parser;
use dynembed::service::{Handler, Master, RemoteHandler, Server, ShardMap};

#[derive(Parser)]
#[command(about = "Embedding master: routes requests to workers")]
struct Args {
    #[arg(long)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Comma-separated worker addresses; position = shard id.
    #[arg(long)]
    workers: String,
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args = Args::parse();
    let map = ShardMap::parse(&args.workers);
    if map.n_workers() == 0 {
        return Err("--workers lists no addresses".into());
    }
    let handlers: Vec<Arc<dyn Handler>> = map
        .worker_addresses
        .iter()
        .enumerate()
        .map(|(i, a)| Arc::new(RemoteHandler::worker(a.clone(), i as u32)) as Arc<dyn Handler>)
        .collect();
    let server = Server::bind((args.host.as_str(), args.port), Arc::new(Master::new(handlers)))?;
    println!(
        "dynembed-master with {} workers listening on {}",
        map.n_workers(),
        server.local_addr()
    );
    server.wait();
    Ok(())
}
