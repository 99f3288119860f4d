use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Index of one run: enough to re-run it and to check its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub master_seed: u64,
    /// How per-replicate streams derive from the master seed.
    pub streams: String,
    pub k_list: Vec<u64>,
    pub replicates: usize,
    pub stages: Vec<String>,
    pub verdicts: Vec<VerdictEntry>,
    pub passed: bool,
    pub files: Vec<FileEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictEntry {
    pub stage: String,
    pub file: String,
    pub passed: bool,
}

pub const MANIFEST: &str = "manifest.json";

/// Single writer for every output file of a run; files are hashed as they
/// are written, in stage order.
pub struct Emitter {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Emitter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Emitter {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push(FileEntry {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn write_csv(&mut self, name: &str, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Serde(e.to_string());
        w.write_record(header).map_err(csv_err)?;
        for row in rows {
            if row.len() != header.len() {
                return Err(Error::contract(format!("{name}: row width {} != header width {}", row.len(), header.len())));
            }
            w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        self.write_bytes(name, &bytes)
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    /// Writes the manifest itself; it is not listed in its own index.
    pub fn finish(self, manifest: &RunManifest) -> Result<PathBuf> {
        let path = self.dir.join(MANIFEST);
        let mut bytes = serde_json::to_vec_pretty(manifest).map_err(|e| Error::Serde(e.to_string()))?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config {
        path,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trips_floats_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut em = Emitter::create(dir.path()).unwrap();
        let x = [0.1 + 0.2, 1e-300, -3.0, f64::MIN_POSITIVE];
        em.write_csv("a.csv", &["time".into(), "x,y".into(), "z".into(), "w".into()], &[x.to_vec()])
            .unwrap();
        let text = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
        let mut r = csv::Reader::from_reader(text.as_bytes());
        assert_eq!(r.headers().unwrap().get(1), Some("x,y"));
        let row: Vec<f64> = r.records().next().unwrap().unwrap().iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(row, x.to_vec());
        assert_eq!(em.files()[0].sha256, sha256_hex(text.as_bytes()));
    }
}
