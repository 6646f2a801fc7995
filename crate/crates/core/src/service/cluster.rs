//! Whole clusters in one process, for tests and local experiments.

use std::sync::Arc;

use super::master::Master;
use super::transport::{RemoteHandler, Server};
use super::worker::{Worker, WorkerOptions};
use super::Handler;
use crate::error::Result;

pub struct Cluster {
    pub master: Arc<Master>,
    pub workers: Vec<Arc<Worker>>,
    worker_servers: Vec<Server>,
    master_server: Option<Server>,
}

impl Cluster {
    /// `n` workers called directly, without sockets. `opts(i)` configures worker `i`.
    pub fn in_process(n: u32, opts: impl Fn(u32) -> WorkerOptions) -> Self {
        let workers: Vec<Arc<Worker>> = (0..n)
            .map(|i| Arc::new(Worker::new(WorkerOptions { shard_id: i, ..opts(i) })))
            .collect();
        let handlers = workers.iter().map(|w| w.clone() as Arc<dyn Handler>).collect();
        Self {
            master: Arc::new(Master::new(handlers)),
            workers,
            worker_servers: Vec::new(),
            master_server: None,
        }
    }

    /// `n` workers and a master, each listening on a loopback port; the
    /// master reaches the workers over TCP.
    pub fn tcp(n: u32, opts: impl Fn(u32) -> WorkerOptions) -> Result<Self> {
        let mut workers = Vec::new();
        let mut worker_servers = Vec::new();
        let mut handlers: Vec<Arc<dyn Handler>> = Vec::new();
        for i in 0..n {
            let w = Arc::new(Worker::new(WorkerOptions { shard_id: i, ..opts(i) }));
            let server = Server::bind("127.0.0.1:0", w.clone())?;
            handlers.push(Arc::new(RemoteHandler::worker(server.local_addr().to_string(), i)));
            workers.push(w);
            worker_servers.push(server);
        }
        let master = Arc::new(Master::new(handlers));
        let master_server = Server::bind("127.0.0.1:0", master.clone())?;
        Ok(Self {
            master,
            workers,
            worker_servers,
            master_server: Some(master_server),
        })
    }

    /// Address of the master's listener (TCP clusters only).
    pub fn master_addr(&self) -> Option<String> {
        self.master_server.as_ref().map(|s| s.local_addr().to_string())
    }

    pub fn worker_addrs(&self) -> Vec<String> {
        self.worker_servers.iter().map(|s| s.local_addr().to_string()).collect()
    }
}
