//! Output files and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lpk_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, Result};

pub const MANIFEST: &str = "manifest.json";
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// A named output produced in memory by a runner.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn new(name: impl Into<String>, bytes: impl Into<Vec<u8>>) -> Self {
        Artifact {
            name: name.into(),
            bytes: bytes.into(),
        }
    }

    pub fn json<T: Serialize>(name: impl Into<String>, value: &T) -> Self {
        let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
        bytes.push(b'\n');
        Artifact::new(name, bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifact_version: String,
    /// Seconds of wall-clock time; the only field that varies between identical runs.
    pub wall_clock_s: f64,
    pub files: Vec<FileEntry>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    /// The manifest with its timing field zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> RunManifest {
        RunManifest {
            wall_clock_s: 0.0,
            ..self.clone()
        }
    }

    pub fn read(dir: &Path) -> Result<RunManifest> {
        let p = dir.join(MANIFEST);
        let text = fs::read_to_string(&p).map_err(|e| io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            offset: 0,
            msg: format!("{}: {e}", p.display()),
        })
    }
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Writes `bytes` to a sibling temporary file, syncs it and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_name(path);
    let mut f = fs::File::create(&tmp).map_err(|e| io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io(&tmp, e))?;
    f.sync_all().map_err(|e| io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io(path, e))
}

fn tmp_name(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Removes a stale manifest so a crash mid-run cannot leave one behind.
pub fn begin(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let m = out.join(MANIFEST);
    match fs::remove_file(&m) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(io(&m, e)),
    }
}

/// Writes every artifact, then the manifest listing them.
#[allow(clippy::too_many_arguments)]
pub fn finish(
    out: &Path,
    experiment: &str,
    config_hash: &str,
    seed: u64,
    artifacts: &[Artifact],
    warnings: Vec<String>,
    wall_clock_s: f64,
) -> Result<RunManifest> {
    let mut files = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        if a.name == MANIFEST || a.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("artifact name `{}` is not allowed", a.name)));
        }
        write_atomic(&out.join(&a.name), &a.bytes)?;
        files.push(FileEntry {
            name: a.name.clone(),
            sha256: hex(&Sha256::digest(&a.bytes)),
            bytes: a.bytes.len() as u64,
        });
    }
    let manifest = RunManifest {
        experiment: experiment.to_string(),
        config_hash: config_hash.to_string(),
        seed,
        artifact_version: ARTIFACT_VERSION.to_string(),
        wall_clock_s,
        files,
        warnings,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    write_atomic(&out.join(MANIFEST), &bytes)?;
    Ok(manifest)
}

/// Checks that every listed file exists with the recorded digest.
pub fn verify(out: &Path, manifest: &RunManifest) -> Result<()> {
    for f in &manifest.files {
        let p = out.join(&f.name);
        let bytes = fs::read(&p).map_err(|e| io(&p, e))?;
        if hex(&Sha256::digest(&bytes)) != f.sha256 {
            return Err(Error::Format {
                offset: 0,
                msg: format!("{} does not match its manifest digest", p.display()),
            });
        }
    }
    Ok(())
}
