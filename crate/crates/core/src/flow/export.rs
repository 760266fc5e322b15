use std::fs;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Columns `step,time,train_loss,grad_norm_sq_sum,checkpoint_id`; the last
/// grid point has no step gradient and leaves that column empty.
pub fn trajectory_csv(rec: &TrajectoryRecord) -> String {
    let mut out = String::from("step,time,train_loss,grad_norm_sq_sum,checkpoint_id\n");
    for s in 0..=rec.steps {
        let g = rec.norm_sq_sum.get(s).map_or(String::new(), |v| format!("{v:?}"));
        let ck = rec
            .checkpoint_steps
            .iter()
            .position(|&c| c == s)
            .map_or(String::new(), |i| i.to_string());
        let _ = writeln!(out, "{s},{:?},{:?},{g},{ck}", rec.time(s), rec.train_loss[s]);
    }
    out
}

pub fn write_trajectory_csv(rec: &TrajectoryRecord, path: &Path) -> Result<()> {
    fs::write(path, trajectory_csv(rec)).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct Sidecar {
    spec_hash: String,
    step: usize,
    time: f64,
    len: usize,
}

/// Hex SHA-256 of the model spec's JSON form.
pub fn spec_hash(spec: &ModelSpec) -> String {
    let json = serde_json::to_vec(spec).expect("spec serializes");
    hex(&Sha256::digest(json))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `<dir>/ckpt_<step>.f64` (little-endian) and a `.json` sidecar.
pub fn write_checkpoint(dir: &Path, spec: &ModelSpec, step: usize, time: f64, w: &[f64]) -> Result<PathBuf> {
    let bin = dir.join(format!("ckpt_{step:08}.f64"));
    let mut bytes = Vec::with_capacity(8 * w.len());
    for v in w {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let side = bin.with_extension("json");
    let meta = Sidecar {
        spec_hash: spec_hash(spec),
        step,
        time,
        len: w.len(),
    };
    let mut f = fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
    f.write_all(serde_json::to_string_pretty(&meta).expect("sidecar").as_bytes())
        .map_err(|e| Error::io(&side, e))?;
    Ok(bin)
}

/// Reads a checkpoint back, checking the sidecar against `spec`.
pub fn read_checkpoint(bin: &Path, spec: &ModelSpec) -> Result<(usize, f64, Vec<f64>)> {
    let side = bin.with_extension("json");
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Format {
        offset: e.column() as u64,
        msg: format!("checkpoint sidecar: {e}"),
    })?;
    if meta.spec_hash != spec_hash(spec) {
        return Err(Error::config("checkpoint was written for a different model"));
    }
    let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
    if bytes.len() != 8 * meta.len {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("expected {} values", meta.len),
        });
    }
    let w = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((meta.step, meta.time, w))
}
