//! Checkpoint and inspection commands against a running master.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use dynembed::client::DynEmbedClient;

#[derive(Parser)]
#[command(about = "Save, restore and inspect a running embedding service")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7070")]
    master: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Checkpoint every table into PATH.
    Save {
        path: PathBuf,
        #[arg(long, default_value_t = 0)]
        step: u64,
    },
    /// Load the checkpoint in PATH.
    Restore { path: PathBuf },
    /// Print per-table resident counts and digests.
    Stats,
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args = Args::parse();
    let client = DynEmbedClient::connect(&args.master)?;
    match args.cmd {
        Cmd::Save { path, step } => {
            let m = client.save(&path, step)?;
            for t in &m.tables {
                println!("saved {} ({} records)", t.name, t.counts.iter().sum::<u64>());
            }
        }
        Cmd::Restore { path } => {
            let m = client.restore(&path)?;
            for t in &m.tables {
                println!("restored {} ({} records)", t.name, t.counts.iter().sum::<u64>());
            }
        }
        Cmd::Stats => {
            for t in client.stats()? {
                println!(
                    "{} resident={} config_digest={:016x} content_digest={:016x}",
                    t.name, t.resident, t.config_digest, t.content_digest
                );
            }
        }
    }
    Ok(())
}
