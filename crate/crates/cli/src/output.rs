//! Output directory bookkeeping: CSV tables and the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fracbayes_core::experiment::Seeds;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Failure, StageResult};

pub const MANIFEST: &str = "manifest.toml";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Shortest representation that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    format!("{x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub stage: String,
    pub sha256: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config_path: String,
    pub seeds: Seeds,
    #[serde(default)]
    pub files: BTreeMap<String, FileEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> StageResult<Option<Manifest>> {
        match std::fs::read_to_string(path) {
            Ok(text) => toml::from_str(&text)
                .map(Some)
                .map_err(|e| Failure::Manifest(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(Failure::Io {
                path: path.to_path_buf(),
                source,
            }),
        }
    }
}

/// The output directory of one configuration.
///
/// A manifest left by a different configuration is kept untouched until this
/// run writes its first file, then replaced.
pub struct OutputDir {
    dir: PathBuf,
    manifest: Manifest,
    previous: Option<Manifest>,
}

impl OutputDir {
    pub fn open(dir: &Path, config_hash: &str, config_path: &Path, seeds: Seeds) -> StageResult<Self> {
        std::fs::create_dir_all(dir).map_err(|source| Failure::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let fresh = Manifest {
            config_hash: config_hash.to_string(),
            config_path: config_path.display().to_string(),
            seeds,
            files: BTreeMap::new(),
        };
        let (manifest, previous) = match Manifest::load(&dir.join(MANIFEST))? {
            Some(m) if m.config_hash == config_hash => (m, None),
            other => (fresh, other),
        };
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            manifest,
            previous,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    #[cfg(test)]
    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Path of an artifact of the current configuration whose content still
    /// matches its recorded hash.
    pub fn require(&self, name: &str, needs: &'static str) -> StageResult<PathBuf> {
        let path = self.path(name);
        let Some(entry) = self.manifest.files.get(name) else {
            let stale = self.previous.as_ref().is_some_and(|m| m.files.contains_key(name));
            return Err(if stale {
                Failure::Stale {
                    file: name.to_string(),
                    dir: self.dir.clone(),
                    needs,
                }
            } else {
                Failure::Missing {
                    file: name.to_string(),
                    dir: self.dir.clone(),
                    needs,
                }
            });
        };
        let bytes = std::fs::read(&path).map_err(|_| Failure::Missing {
            file: name.to_string(),
            dir: self.dir.clone(),
            needs,
        })?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Failure::Modified {
                file: name.to_string(),
                needs,
            });
        }
        Ok(path)
    }

    /// Like [`OutputDir::require`] but `None` when the artifact was never produced.
    pub fn optional(&self, name: &str, needs: &'static str) -> StageResult<Option<PathBuf>> {
        match self.require(name, needs) {
            Ok(p) => Ok(Some(p)),
            Err(Failure::Missing { .. } | Failure::Stale { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Write a CSV table, record its hash and rewrite the manifest.
    pub fn write_table<I>(&mut self, name: &str, stage: &str, header: &[String], rows: I) -> StageResult<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let path = self.path(name);
        let csv_err = |source| Failure::Csv {
            path: path.clone(),
            source,
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(csv_err)?;
        let mut count = 0;
        for row in rows {
            w.write_record(&row).map_err(csv_err)?;
            count += 1;
        }
        let bytes = w.into_inner().map_err(|e| Failure::Io {
            path: path.clone(),
            source: e.into_error(),
        })?;
        self.record_bytes(name, stage, &bytes, count)
    }

    /// Register a file written by other means.
    pub fn record_file(&mut self, name: &str, stage: &str, rows: usize) -> StageResult<()> {
        let path = self.path(name);
        let bytes = std::fs::read(&path).map_err(|source| Failure::Io { path, source })?;
        self.record(name, stage, &bytes, rows)
    }

    fn record_bytes(&mut self, name: &str, stage: &str, bytes: &[u8], rows: usize) -> StageResult<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|source| Failure::Io { path, source })?;
        self.record(name, stage, bytes, rows)
    }

    fn record(&mut self, name: &str, stage: &str, bytes: &[u8], rows: usize) -> StageResult<()> {
        self.manifest.files.insert(
            name.to_string(),
            FileEntry {
                stage: stage.to_string(),
                sha256: sha256_hex(bytes),
                rows,
            },
        );
        let text = toml::to_string(&self.manifest).map_err(|e| Failure::Manifest(e.to_string()))?;
        let path = self.path(MANIFEST);
        std::fs::write(&path, text).map_err(|source| Failure::Io { path, source })
    }
}

/// Header and records of a CSV file.
pub fn read_table(path: &Path) -> StageResult<(Vec<String>, Vec<csv::StringRecord>)> {
    let csv_err = |source| Failure::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let rows = r.records().collect::<Result<Vec<_>, _>>().map_err(csv_err)?;
    Ok((header, rows))
}

pub fn parse_f64(path: &Path, field: Option<&str>) -> StageResult<f64> {
    let text = field.ok_or_else(|| Failure::Malformed {
        path: path.to_path_buf(),
        reason: "short row".into(),
    })?;
    text.trim().parse().map_err(|_| Failure::Malformed {
        path: path.to_path_buf(),
        reason: format!("`{text}` is not a number"),
    })
}

/// Rows of a two-column `key,value` summary table.
pub fn read_summary(path: &Path) -> StageResult<BTreeMap<String, String>> {
    let (_, rows) = read_table(path)?;
    Ok(rows
        .iter()
        .filter_map(|r| Some((r.get(0)?.to_string(), r.get(1)?.to_string())))
        .collect())
}

pub fn summary_value(path: &Path, summary: &BTreeMap<String, String>, key: &str) -> StageResult<f64> {
    parse_f64(path, summary.get(key).map(String::as_str))
}
