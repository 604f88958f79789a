//! Files written by the experiments and the manifest that lists them.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::Ensemble;
use crate::error::{Error, Result};

/// Leading bytes of every snapshot file.
pub const SNAPSHOT_MAGIC: &[u8; 8] = b"PEDSNAP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
    /// Primary CSVs must be byte-identical across thread counts.
    pub primary: bool,
}

/// Header of a snapshot file. The body is `records` frames of
/// `1 + 4 n` little-endian f64: `t`, then `x[n][2]`, then `v[n][2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub format: String,
    pub flow: String,
    pub n: usize,
    pub records: usize,
    pub layout: String,
    pub config_hash: String,
}

/// Owns one output directory for the lifetime of an experiment.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Vec<FileRecord>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[FileRecord] {
        &self.files
    }

    fn put(&mut self, name: &str, bytes: &[u8], primary: bool) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileRecord {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(bytes)),
            primary,
        });
        Ok(())
    }

    /// RFC-4180 CSV with a header row taken from the field names.
    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T], primary: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(self.root.join(name), e.into_error()))?;
        self.put(name, &bytes, primary)
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.put(name, &bytes, false)
    }

    pub fn write_snapshots(&mut self, name: &str, flow: &str, frames: &[&Ensemble], config_hash: &str) -> Result<()> {
        let n = frames.first().map(|e| e.len()).unwrap_or(0);
        if frames.iter().any(|e| e.len() != n) {
            return Err(Error::Contract("snapshot frames differ in particle count".into()));
        }
        let header = SnapshotHeader {
            format: "pedflow-snapshot-1".into(),
            flow: flow.into(),
            n,
            records: frames.len(),
            layout: "per record: t, x[n][2], v[n][2] as f64 little-endian".into(),
            config_hash: config_hash.into(),
        };
        let head = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(16 + head.len() + frames.len() * (1 + 4 * n) * 8);
        bytes.extend_from_slice(SNAPSHOT_MAGIC);
        bytes.extend_from_slice(&(head.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&head);
        for e in frames {
            bytes.extend_from_slice(&e.t.to_le_bytes());
            for p in e.x.iter().chain(&e.v) {
                bytes.extend_from_slice(&p.x.to_le_bytes());
                bytes.extend_from_slice(&p.y.to_le_bytes());
            }
        }
        self.put(name, &bytes, false)
    }
}

/// Reads a snapshot file back into its header and frames.
pub fn read_snapshots(path: &Path) -> Result<(SnapshotHeader, Vec<Ensemble>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = || Error::Contract(format!("{} is not a snapshot file", path.display()));
    if bytes.len() < 16 || &bytes[..8] != SNAPSHOT_MAGIC {
        return Err(bad());
    }
    let head_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_at = 16 + head_len;
    let header: SnapshotHeader = serde_json::from_slice(bytes.get(16..body_at).ok_or_else(bad)?)?;
    let floats: Vec<f64> = bytes[body_at..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let stride = 1 + 4 * header.n;
    if floats.len() != stride * header.records {
        return Err(bad());
    }
    let frames = floats
        .chunks_exact(stride)
        .map(|r| {
            let pts = |k: usize| {
                (0..header.n)
                    .map(|i| glam::DVec2::new(r[1 + k + 2 * i], r[2 + k + 2 * i]))
                    .collect()
            };
            Ensemble {
                t: r[0],
                x: pts(0),
                v: pts(2 * header.n),
            }
        })
        .collect();
    Ok((header, frames))
}

/// Writes `value` as JSON to `path` outside any [`OutputDir`] bookkeeping.
pub fn write_json_file<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}
