//! Embedded persistence engines.
//!
//! [`DocumentStore`] holds schemaless JSON documents grouped in collections
//! with conjunctive field-equality queries. [`TxnStore`] is a versioned
//! key-value map with optimistic transactions: reads are validated at commit
//! time and the whole write set lands atomically or not at all.

mod document;
mod txn;

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use document::DocumentStore;
pub use txn::{CommitRecord, Txn, TxnStore, DEFAULT_TXN_RETRIES};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("document rejected: {0}")]
    Rejected(String),
    #[error("transaction {0} conflicted with a concurrent commit")]
    Conflict(u64),
    #[error("store unavailable")]
    Unavailable,
}

/// SHA-256 over sorted canonical lines, hex encoded. Insertion order does
/// not matter because callers hand lines over in key order.
pub(crate) fn digest_lines<I, S>(lines: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    let mut h = Sha256::new();
    for line in lines {
        h.update(line.as_ref());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub(crate) fn write_lines<I, S>(path: &Path, lines: I) -> std::io::Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in lines {
        out.write_all(line.as_ref())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Digest of a store with no content.
pub const EMPTY_DIGEST: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";
