//! Request and response messages and their wire encoding.
//!
//! A frame is `{u32 length, u16 type, u64 request_id, body}`, little-endian,
//! where `length` counts the bytes after the length field. A response reuses
//! the request's type with the high bit set; an error uses [`ERROR_TYPE`].
//! `docs/PROTOCOL.md` describes every body byte by byte.

use crate::codec::{Decoder, Encoder};
use crate::config::TableConfig;
use crate::entry::EmbeddingEntry;
use crate::error::{Error, Result};
use crate::key::EmbeddingKey;
use crate::retrieval::ScoredKey;
use crate::sampler::{Draw, PositiveWeight, SampledLogits, SampledResult, ShardSample};
use crate::service::checkpoint::CheckpointManifest;

pub const PROTOCOL_VERSION: u16 = 1;
pub const RESPONSE_BIT: u16 = 0x8000;
pub const ERROR_TYPE: u16 = 0xFFFF;
/// Upper bound on a frame body; larger frames are rejected before allocation.
pub const MAX_FRAME: u32 = 1 << 30;

pub mod msg {
    pub const PING: u16 = 0x0001;
    pub const CREATE_TABLE: u16 = 0x0002;
    pub const LOOKUP: u16 = 0x0003;
    pub const UPDATE: u16 = 0x0004;
    pub const SAMPLE: u16 = 0x0005;
    pub const SAMPLED_LOGITS: u16 = 0x0006;
    pub const TOP_K: u16 = 0x0007;
    pub const SAVE: u16 = 0x0008;
    pub const RESTORE: u16 = 0x0009;
    pub const STATS: u16 = 0x000A;
    pub const SAMPLE_SHARD: u16 = 0x0010;
    pub const EXPORT_SHARD: u16 = 0x0011;
    pub const IMPORT_SHARD: u16 = 0x0012;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    /// Apply the table optimizer to the given gradients.
    Gradient,
    /// Overwrite stored vectors with the given values.
    Assign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Master,
    Worker,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Ping {
        version: u16,
    },
    /// `n_workers` is filled in by the master; clients send 0.
    CreateTable {
        config: TableConfig,
        n_workers: u32,
    },
    Lookup {
        table: String,
        keys: Vec<EmbeddingKey>,
        create_if_missing: bool,
    },
    Update {
        table: String,
        mode: UpdateMode,
        pairs: Vec<(EmbeddingKey, Vec<f32>)>,
        learning_rate: f32,
        global_step: u64,
        update_frequency: bool,
    },
    Sample {
        table: String,
        positives: Vec<EmbeddingKey>,
        num_sampled: u32,
        seed: u64,
        range: u32,
    },
    SampledLogits {
        table: String,
        activations: Vec<Vec<f32>>,
        positives: Vec<Vec<EmbeddingKey>>,
        num_sampled: u32,
        seed: u64,
    },
    TopK {
        table: String,
        activation: Vec<f32>,
        k: u32,
    },
    /// Writes a checkpoint of the named tables (all tables if empty).
    Save {
        path: String,
        tables: Vec<String>,
        global_step: u64,
    },
    Restore {
        path: String,
    },
    Stats,
    SampleShard {
        table: String,
        positives: Vec<EmbeddingKey>,
        count: u32,
        seed: u64,
        range: u32,
    },
    ExportShard {
        table: String,
        path: String,
    },
    /// Imports the records of every listed file that this worker owns.
    ImportShard {
        table: String,
        paths: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableStats {
    pub name: String,
    pub config_digest: u64,
    pub resident: u64,
    pub content_digest: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Pong {
        version: u16,
        role: Role,
        shard_id: u32,
        n_workers: u32,
        sandbox: bool,
    },
    Created,
    Entries(Vec<Option<EmbeddingEntry>>),
    Updated(u64),
    Sampled(Vec<SampledResult>),
    Logits(SampledLogits),
    TopK(Vec<ScoredKey>),
    Saved(CheckpointManifest),
    Restored {
        tables: u32,
        records: u64,
    },
    Stats(Vec<TableStats>),
    ShardSample(ShardSample),
    Exported(u64),
    Imported(u64),
}

impl Request {
    pub fn msg_type(&self) -> u16 {
        match self {
            Request::Ping { .. } => msg::PING,
            Request::CreateTable { .. } => msg::CREATE_TABLE,
            Request::Lookup { .. } => msg::LOOKUP,
            Request::Update { .. } => msg::UPDATE,
            Request::Sample { .. } => msg::SAMPLE,
            Request::SampledLogits { .. } => msg::SAMPLED_LOGITS,
            Request::TopK { .. } => msg::TOP_K,
            Request::Save { .. } => msg::SAVE,
            Request::Restore { .. } => msg::RESTORE,
            Request::Stats => msg::STATS,
            Request::SampleShard { .. } => msg::SAMPLE_SHARD,
            Request::ExportShard { .. } => msg::EXPORT_SHARD,
            Request::ImportShard { .. } => msg::IMPORT_SHARD,
        }
    }

    /// True for requests that may change stored state.
    pub fn is_mutation(&self) -> bool {
        matches!(
            self,
            Request::CreateTable { .. }
                | Request::Update { .. }
                | Request::Restore { .. }
                | Request::ImportShard { .. }
        )
    }

    pub fn encode_body(&self, e: &mut Encoder) {
        match self {
            Request::Ping { version } => {
                e.u16(*version);
            }
            Request::CreateTable { config, n_workers } => {
                config.encode(e);
                e.u32(*n_workers);
            }
            Request::Lookup {
                table,
                keys,
                create_if_missing,
            } => {
                e.str32(table);
                put_keys(e, keys);
                e.bool(*create_if_missing);
            }
            Request::Update {
                table,
                mode,
                pairs,
                learning_rate,
                global_step,
                update_frequency,
            } => {
                e.str32(table);
                e.u8(match mode {
                    UpdateMode::Gradient => 0,
                    UpdateMode::Assign => 1,
                });
                e.f32(*learning_rate).u64(*global_step).bool(*update_frequency);
                e.count(pairs.len());
                for (k, v) in pairs {
                    e.bytes32(k.as_bytes());
                    e.f32_vec(v);
                }
            }
            Request::Sample {
                table,
                positives,
                num_sampled,
                seed,
                range,
            }
            | Request::SampleShard {
                table,
                positives,
                count: num_sampled,
                seed,
                range,
            } => {
                e.str32(table);
                put_keys(e, positives);
                e.u32(*num_sampled).u64(*seed).u32(*range);
            }
            Request::SampledLogits {
                table,
                activations,
                positives,
                num_sampled,
                seed,
            } => {
                e.str32(table);
                e.count(activations.len());
                for a in activations {
                    e.f32_vec(a);
                }
                e.count(positives.len());
                for p in positives {
                    put_keys(e, p);
                }
                e.u32(*num_sampled).u64(*seed);
            }
            Request::TopK { table, activation, k } => {
                e.str32(table);
                e.f32_vec(activation);
                e.u32(*k);
            }
            Request::Save {
                path,
                tables,
                global_step,
            } => {
                e.str32(path);
                e.count(tables.len());
                for t in tables {
                    e.str32(t);
                }
                e.u64(*global_step);
            }
            Request::Restore { path } => {
                e.str32(path);
            }
            Request::Stats => {}
            Request::ExportShard { table, path } => {
                e.str32(table).str32(path);
            }
            Request::ImportShard { table, paths } => {
                e.str32(table);
                e.count(paths.len());
                for p in paths {
                    e.str32(p);
                }
            }
        }
    }

    pub fn decode_body(msg_type: u16, d: &mut Decoder<'_>) -> Result<Self> {
        let req = match msg_type {
            msg::PING => Request::Ping { version: d.u16()? },
            msg::CREATE_TABLE => Request::CreateTable {
                config: TableConfig::decode(d)?,
                n_workers: d.u32()?,
            },
            msg::LOOKUP => Request::Lookup {
                table: d.str32()?,
                keys: get_keys(d)?,
                create_if_missing: d.bool()?,
            },
            msg::UPDATE => {
                let table = d.str32()?;
                let mode = match d.u8()? {
                    0 => UpdateMode::Gradient,
                    1 => UpdateMode::Assign,
                    m => return Err(Error::Protocol(format!("unknown update mode {m}"))),
                };
                let learning_rate = d.f32()?;
                let global_step = d.u64()?;
                let update_frequency = d.bool()?;
                let n = d.u32()? as usize;
                let mut pairs = Vec::with_capacity(n.min(d.remaining()));
                for _ in 0..n {
                    let k = get_key(d)?;
                    pairs.push((k, d.f32_vec()?));
                }
                Request::Update {
                    table,
                    mode,
                    pairs,
                    learning_rate,
                    global_step,
                    update_frequency,
                }
            }
            msg::SAMPLE | msg::SAMPLE_SHARD => {
                let table = d.str32()?;
                let positives = get_keys(d)?;
                let (n, seed, range) = (d.u32()?, d.u64()?, d.u32()?);
                if msg_type == msg::SAMPLE {
                    Request::Sample {
                        table,
                        positives,
                        num_sampled: n,
                        seed,
                        range,
                    }
                } else {
                    Request::SampleShard {
                        table,
                        positives,
                        count: n,
                        seed,
                        range,
                    }
                }
            }
            msg::SAMPLED_LOGITS => {
                let table = d.str32()?;
                let n = d.u32()? as usize;
                let mut activations = Vec::with_capacity(n.min(d.remaining()));
                for _ in 0..n {
                    activations.push(d.f32_vec()?);
                }
                let n = d.u32()? as usize;
                let mut positives = Vec::with_capacity(n.min(d.remaining()));
                for _ in 0..n {
                    positives.push(get_keys(d)?);
                }
                Request::SampledLogits {
                    table,
                    activations,
                    positives,
                    num_sampled: d.u32()?,
                    seed: d.u64()?,
                }
            }
            msg::TOP_K => Request::TopK {
                table: d.str32()?,
                activation: d.f32_vec()?,
                k: d.u32()?,
            },
            msg::SAVE => {
                let path = d.str32()?;
                let n = d.u32()? as usize;
                let mut tables = Vec::with_capacity(n.min(d.remaining()));
                for _ in 0..n {
                    tables.push(d.str32()?);
                }
                Request::Save {
                    path,
                    tables,
                    global_step: d.u64()?,
                }
            }
            msg::RESTORE => Request::Restore { path: d.str32()? },
            msg::STATS => Request::Stats,
            msg::EXPORT_SHARD => Request::ExportShard {
                table: d.str32()?,
                path: d.str32()?,
            },
            msg::IMPORT_SHARD => {
                let table = d.str32()?;
                let n = d.u32()? as usize;
                let mut paths = Vec::with_capacity(n.min(d.remaining()));
                for _ in 0..n {
                    paths.push(d.str32()?);
                }
                Request::ImportShard { table, paths }
            }
            t => return Err(Error::Protocol(format!("unknown request type {t:#06x}"))),
        };
        d.expect_end()?;
        Ok(req)
    }
}

impl Response {
    /// The request type this response answers.
    pub fn request_type(&self) -> u16 {
        match self {
            Response::Pong { .. } => msg::PING,
            Response::Created => msg::CREATE_TABLE,
            Response::Entries(_) => msg::LOOKUP,
            Response::Updated(_) => msg::UPDATE,
            Response::Sampled(_) => msg::SAMPLE,
            Response::Logits(_) => msg::SAMPLED_LOGITS,
            Response::TopK(_) => msg::TOP_K,
            Response::Saved(_) => msg::SAVE,
            Response::Restored { .. } => msg::RESTORE,
            Response::Stats(_) => msg::STATS,
            Response::ShardSample(_) => msg::SAMPLE_SHARD,
            Response::Exported(_) => msg::EXPORT_SHARD,
            Response::Imported(_) => msg::IMPORT_SHARD,
        }
    }

    pub fn encode_body(&self, e: &mut Encoder) {
        match self {
            Response::Pong {
                version,
                role,
                shard_id,
                n_workers,
                sandbox,
            } => {
                e.u16(*version);
                e.u8(match role {
                    Role::Master => 0,
                    Role::Worker => 1,
                });
                e.u32(*shard_id).u32(*n_workers).bool(*sandbox);
            }
            Response::Created => {}
            Response::Entries(entries) => {
                e.count(entries.len());
                for entry in entries {
                    match entry {
                        None => {
                            e.u8(0);
                        }
                        Some(x) => {
                            e.u8(1);
                            put_entry(e, x);
                        }
                    }
                }
            }
            Response::Updated(n) | Response::Exported(n) | Response::Imported(n) => {
                e.u64(*n);
            }
            Response::Sampled(results) => put_results(e, results),
            Response::Logits(l) => {
                put_results(e, &l.results);
                e.count(l.vectors.len());
                for v in &l.vectors {
                    e.f32_vec(v);
                }
                e.count(l.logits.len());
                for (row, labels) in l.logits.iter().zip(&l.labels) {
                    e.f32_vec(row);
                    e.count(labels.len());
                    for &b in labels {
                        e.bool(b);
                    }
                }
            }
            Response::TopK(list) => {
                e.count(list.len());
                for s in list {
                    e.bytes32(s.id.as_bytes());
                    e.f32(s.score);
                }
            }
            Response::Saved(m) => {
                e.str32(&m.to_json());
            }
            Response::Restored { tables, records } => {
                e.u32(*tables).u64(*records);
            }
            Response::Stats(stats) => {
                e.count(stats.len());
                for s in stats {
                    e.str32(&s.name)
                        .u64(s.config_digest)
                        .u64(s.resident)
                        .u64(s.content_digest);
                }
            }
            Response::ShardSample(s) => {
                e.u64((s.total_weight >> 64) as u64)
                    .u64(s.total_weight as u64)
                    .u64(s.resident);
                e.count(s.positives.len());
                for p in &s.positives {
                    match p {
                        None => {
                            e.u8(0);
                        }
                        Some(p) => {
                            e.u8(1).f64(p.weight).bool(p.in_universe);
                        }
                    }
                }
                e.count(s.drawn.len());
                for d in &s.drawn {
                    e.bytes32(d.key.as_bytes());
                    e.f64(d.weight).f64(d.rank);
                }
            }
        }
    }

    pub fn decode_body(request_type: u16, d: &mut Decoder<'_>) -> Result<Self> {
        let resp = match request_type {
            msg::PING => {
                let version = d.u16()?;
                let role = match d.u8()? {
                    0 => Role::Master,
                    1 => Role::Worker,
                    r => return Err(Error::Protocol(format!("unknown role {r}"))),
                };
                Response::Pong {
                    version,
                    role,
                    shard_id: d.u32()?,
                    n_workers: d.u32()?,
                    sandbox: d.bool()?,
                }
            }
            msg::CREATE_TABLE => Response::Created,
            msg::LOOKUP => {
                let n = d.u32()? as usize;
                let mut out = Vec::with_capacity(n.min(d.remaining()));
                for _ in 0..n {
                    out.push(match d.u8()? {
                        0 => None,
                        1 => Some(get_entry(d)?),
                        f => return Err(Error::Protocol(format!("bad entry flag {f}"))),
                    });
                }
                Response::Entries(out)
            }
            msg::UPDATE => Response::Updated(d.u64()?),
            msg::EXPORT_SHARD => Response::Exported(d.u64()?),
            msg::IMPORT_SHARD => Response::Imported(d.u64()?),
            msg::SAMPLE => Response::Sampled(get_results(d)?),
            msg::SAMPLED_LOGITS => {
                let results = get_results(d)?;
                let n = d.u32()? as usize;
                let mut vectors = Vec::with_capacity(n.min(d.remaining()));
                for _ in 0..n {
                    vectors.push(d.f32_vec()?);
                }
                let n = d.u32()? as usize;
                let mut logits = Vec::with_capacity(n.min(d.remaining()));
                let mut labels = Vec::with_capacity(n.min(d.remaining()));
                for _ in 0..n {
                    logits.push(d.f32_vec()?);
                    let m = d.u32()? as usize;
                    let mut row = Vec::with_capacity(m.min(d.remaining()));
                    for _ in 0..m {
                        row.push(d.bool()?);
                    }
                    labels.push(row);
                }
                Response::Logits(SampledLogits {
                    results,
                    vectors,
                    logits,
                    labels,
                })
            }
            msg::TOP_K => {
                let n = d.u32()? as usize;
                let mut out = Vec::with_capacity(n.min(d.remaining()));
                for _ in 0..n {
                    out.push(ScoredKey {
                        id: get_key(d)?,
                        score: d.f32()?,
                    });
                }
                Response::TopK(out)
            }
            msg::SAVE => Response::Saved(CheckpointManifest::from_json(&d.str32()?)?),
            msg::RESTORE => Response::Restored {
                tables: d.u32()?,
                records: d.u64()?,
            },
            msg::STATS => {
                let n = d.u32()? as usize;
                let mut out = Vec::with_capacity(n.min(d.remaining()));
                for _ in 0..n {
                    out.push(TableStats {
                        name: d.str32()?,
                        config_digest: d.u64()?,
                        resident: d.u64()?,
                        content_digest: d.u64()?,
                    });
                }
                Response::Stats(out)
            }
            msg::SAMPLE_SHARD => {
                let total_weight = ((d.u64()? as u128) << 64) | d.u64()? as u128;
                let resident = d.u64()?;
                let n = d.u32()? as usize;
                let mut positives = Vec::with_capacity(n.min(d.remaining()));
                for _ in 0..n {
                    positives.push(match d.u8()? {
                        0 => None,
                        1 => Some(PositiveWeight {
                            weight: d.f64()?,
                            in_universe: d.bool()?,
                        }),
                        f => return Err(Error::Protocol(format!("bad positive flag {f}"))),
                    });
                }
                let n = d.u32()? as usize;
                let mut drawn = Vec::with_capacity(n.min(d.remaining()));
                for _ in 0..n {
                    drawn.push(Draw {
                        key: get_key(d)?,
                        weight: d.f64()?,
                        rank: d.f64()?,
                    });
                }
                Response::ShardSample(ShardSample {
                    total_weight,
                    resident,
                    positives,
                    drawn,
                })
            }
            t => return Err(Error::Protocol(format!("unknown response type {t:#06x}"))),
        };
        d.expect_end()?;
        Ok(resp)
    }
}

pub fn encode_error(e: &mut Encoder, err: &Error) {
    let (code, a, b, x, y) = err.to_parts();
    e.u16(code).str32(&a).str32(&b).u64(x).u64(y);
}

pub fn decode_error(d: &mut Decoder<'_>) -> Result<Error> {
    let code = d.u16()?;
    let a = d.str32()?;
    let b = d.str32()?;
    let x = d.u64()?;
    let y = d.u64()?;
    Ok(Error::from_parts(code, a, b, x, y))
}

fn get_key(d: &mut Decoder<'_>) -> Result<EmbeddingKey> {
    EmbeddingKey::new(d.bytes32()?)
}

fn put_keys(e: &mut Encoder, keys: &[EmbeddingKey]) {
    e.count(keys.len());
    for k in keys {
        e.bytes32(k.as_bytes());
    }
}

fn get_keys(d: &mut Decoder<'_>) -> Result<Vec<EmbeddingKey>> {
    let n = d.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(d.remaining()));
    for _ in 0..n {
        out.push(get_key(d)?);
    }
    Ok(out)
}

fn put_entry(e: &mut Encoder, x: &EmbeddingEntry) {
    e.f32_vec(&x.vector).u64(x.frequency).u64(x.last_update_step);
    e.u16(x.slots.len() as u16);
    for (name, v) in &x.slots {
        e.bytes16(name.as_bytes());
        e.f32_vec(v);
    }
}

fn get_entry(d: &mut Decoder<'_>) -> Result<EmbeddingEntry> {
    let vector = d.f32_vec()?;
    let frequency = d.u64()?;
    let last_update_step = d.u64()?;
    let n = d.u16()?;
    let mut slots = std::collections::BTreeMap::new();
    for _ in 0..n {
        let name = String::from_utf8(d.bytes16()?.to_vec()).map_err(|e| Error::Protocol(e.to_string()))?;
        slots.insert(name, d.f32_vec()?);
    }
    Ok(EmbeddingEntry {
        vector,
        frequency,
        slots,
        last_update_step,
    })
}

fn put_results(e: &mut Encoder, results: &[SampledResult]) {
    e.count(results.len());
    for r in results {
        e.bytes32(r.id.as_bytes()).bool(r.is_positive).f64(r.prob);
    }
}

fn get_results(d: &mut Decoder<'_>) -> Result<Vec<SampledResult>> {
    let n = d.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(d.remaining()));
    for _ in 0..n {
        out.push(SampledResult {
            id: get_key(d)?,
            is_positive: d.bool()?,
            prob: d.f64()?,
        });
    }
    Ok(out)
}

/// Encodes a whole frame: length, type, request id, body.
pub fn frame(msg_type: u16, request_id: u64, body: impl FnOnce(&mut Encoder)) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u32(0).u16(msg_type).u64(request_id);
    body(&mut e);
    let mut bytes = e.finish();
    let len = (bytes.len() - 4) as u32;
    bytes[..4].copy_from_slice(&len.to_le_bytes());
    bytes
}

pub fn request_frame(request_id: u64, req: &Request) -> Vec<u8> {
    frame(req.msg_type(), request_id, |e| req.encode_body(e))
}

pub fn response_frame(request_id: u64, resp: &Result<Response>) -> Vec<u8> {
    match resp {
        Ok(r) => frame(RESPONSE_BIT | r.request_type(), request_id, |e| r.encode_body(e)),
        Err(err) => frame(ERROR_TYPE, request_id, |e| encode_error(e, err)),
    }
}
