//! Dataset manifests: one JSON record per line describing a pair, with the
//! ground-truth transform as 12 row-major `[R | t]` numbers and file paths
//! relative to the manifest location.

use super::{PairMode, RegistrationPair};
use crate::data::io::{load_pointset, save_pointset};
use crate::error::{Error, Result};
use crate::rigid::RigidTransform;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: usize,
    pub mode: PairMode,
    pub seed: u64,
    pub source: String,
    pub target: String,
    pub t_gt: [f64; 12],
    pub source_centroid_gt: [f64; 3],
    pub target_centroid_gt: [f64; 3],
}

pub fn write_manifest(path: &Path, records: &[PairRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<PairRecord>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let display = path.display().to_string();
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: display.clone(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes the point files for a pair and returns its manifest record.
pub fn store_pair(
    dir: &Path,
    pair_id: usize,
    mode: PairMode,
    seed: u64,
    pair: &RegistrationPair,
) -> Result<PairRecord> {
    let src_rel = format!("pairs/{pair_id:05}_src.xyz");
    let tgt_rel = format!("pairs/{pair_id:05}_tgt.xyz");
    std::fs::create_dir_all(dir.join("pairs"))?;
    save_pointset(&dir.join(&src_rel), &pair.source)?;
    save_pointset(&dir.join(&tgt_rel), &pair.target)?;
    Ok(PairRecord {
        pair_id,
        mode,
        seed,
        source: src_rel,
        target: tgt_rel,
        t_gt: pair.t_gt.to_row_major(),
        source_centroid_gt: pair.source_centroid_gt.into(),
        target_centroid_gt: pair.target_centroid_gt.into(),
    })
}

/// Reads a pair's point files back; `base` is the manifest's directory.
pub fn load_pair(base: &Path, rec: &PairRecord) -> Result<RegistrationPair> {
    Ok(RegistrationPair {
        source: load_pointset(&base.join(&rec.source))?,
        target: load_pointset(&base.join(&rec.target))?,
        t_gt: RigidTransform::from_row_major(&rec.t_gt)?,
        source_centroid_gt: Vector3::from(rec.source_centroid_gt),
        target_centroid_gt: Vector3::from(rec.target_centroid_gt),
    })
}
