//! Versioned JSON snapshots for trained models and stage outputs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("cannot access snapshot {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed snapshot {path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("snapshot {path} has kind {found:?}, expected {expected:?}")]
    Kind {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("snapshot {path} has version {found}, this build reads version {expected}")]
    Version {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
}

/// Header written ahead of every model payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub version: u32,
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    header: Header,
    payload: T,
}

/// Implemented by everything persisted through [`save`] / [`load`].
pub trait Snapshot: Serialize + DeserializeOwned {
    const KIND: &'static str;
    const VERSION: u32;
}

pub fn save<T: Snapshot>(value: &T, path: &Path) -> Result<(), SnapshotError> {
    let io = |source| SnapshotError::Io {
        path: path.to_path_buf(),
        source,
    };
    let envelope = Envelope {
        header: Header {
            kind: T::KIND.to_owned(),
            version: T::VERSION,
        },
        payload: value,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer(&mut out, &envelope).map_err(|source| SnapshotError::Format {
        path: path.to_path_buf(),
        source,
    })?;
    out.write_all(b"\n").map_err(io)?;
    out.flush().map_err(io)
}

pub fn load<T: Snapshot>(path: &Path) -> Result<T, SnapshotError> {
    let format = |source| SnapshotError::Format {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(|source| SnapshotError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let raw: Envelope<serde_json::Value> =
        serde_json::from_reader(BufReader::new(file)).map_err(format)?;
    if raw.header.kind != T::KIND {
        return Err(SnapshotError::Kind {
            path: path.to_path_buf(),
            expected: T::KIND.to_owned(),
            found: raw.header.kind,
        });
    }
    if raw.header.version != T::VERSION {
        return Err(SnapshotError::Version {
            path: path.to_path_buf(),
            expected: T::VERSION,
            found: raw.header.version,
        });
    }
    serde_json::from_value(raw.payload).map_err(format)
}
