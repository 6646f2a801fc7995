//! Master and worker processes, their wire protocol and checkpoints.
//!
//! Every node implements [`Handler`]. A [`Master`] holds one handler per
//! shard, which is a [`Worker`] in the same process or a
//! [`transport::RemoteHandler`] for a worker behind a socket. The routing
//! logic cannot tell the two apart.

pub mod checkpoint;
pub mod cluster;
pub mod master;
pub mod protocol;
pub mod shard_map;
pub mod transport;
pub mod worker;

pub use checkpoint::CheckpointManifest;
pub use cluster::Cluster;
pub use master::Master;
pub use protocol::{Request, Response, UpdateMode};
pub use shard_map::{shard_of, ShardMap};
pub use transport::{RemoteHandler, Server};
pub use worker::{BackendOverride, Worker, WorkerOptions};

use crate::error::Result;

pub trait Handler: Send + Sync {
    fn handle(&self, req: Request) -> Result<Response>;
}

impl<T: Handler + ?Sized> Handler for std::sync::Arc<T> {
    fn handle(&self, req: Request) -> Result<Response> {
        (**self).handle(req)
    }
}
