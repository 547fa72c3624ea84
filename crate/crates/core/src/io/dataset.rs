//! `SDV1` voxel dataset files.
//!
//! Header: version, voxel count, b0 count, normalization flag, seed, then
//! each shell's b-value and unit gradient directions. The payload holds the
//! `V × n_samples` signal matrix row-major, followed when present by one
//! 16-value truth record per voxel: fiber count, three zero-padded
//! directions, three zero-padded fiber fractions and the WM/GM/CSF
//! fractions.

use std::path::Path;

use nalgebra::Vector3;

use super::container::{read_bytes, write_bytes, HeaderReader, HeaderWriter};
use crate::error::Result;
use crate::signal_model::{GradientTable, Shell, VoxelBatch, VoxelTruth};

pub const DATASET_MAGIC: &str = "SDV1";
const VERSION: u32 = 1;
const TRUTH_RECORD: usize = 16;

/// A voxel batch together with the seed that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub batch: VoxelBatch,
    pub seed: u64,
}

fn encode_truth(t: &VoxelTruth) -> [f64; TRUTH_RECORD] {
    let mut r = [0.0; TRUTH_RECORD];
    r[0] = t.n_fibers() as f64;
    for (k, d) in t.directions.iter().enumerate() {
        r[1 + 3 * k..4 + 3 * k].copy_from_slice(d.as_slice());
    }
    r[10..10 + t.fractions.len()].copy_from_slice(&t.fractions);
    r[13..16].copy_from_slice(&t.tissue_fractions);
    r
}

fn decode_truth(r: &[f64]) -> Option<VoxelTruth> {
    let n = r[0];
    if !(n == 0.0 || n == 1.0 || n == 2.0 || n == 3.0) {
        return None;
    }
    let n = n as usize;
    Some(VoxelTruth {
        directions: (0..n).map(|k| Vector3::new(r[1 + 3 * k], r[2 + 3 * k], r[3 + 3 * k])).collect(),
        fractions: r[10..10 + n].to_vec(),
        tissue_fractions: [r[13], r[14], r[15]],
    })
}

pub fn encode_dataset(file: &DatasetFile) -> Vec<u8> {
    let batch = &file.batch;
    let table = batch.table();
    let mut h = HeaderWriter::new(DATASET_MAGIC);
    h.field("version", VERSION)
        .field("voxels", batch.n_voxels())
        .field("b0_count", table.b0_count())
        .field("normalized", batch.is_normalized())
        .field("seed", file.seed)
        .field("shells", table.shells().len());
    for s in table.shells() {
        h.line("shell", [s.bval, s.directions.len() as f64]);
        for d in &s.directions {
            h.line("g", d.iter());
        }
    }
    h.field("truth", batch.truth().is_some());
    let mut payload = batch.signals().to_vec();
    if let Some(truth) = batch.truth() {
        payload.reserve(truth.len() * TRUTH_RECORD);
        for t in truth {
            payload.extend_from_slice(&encode_truth(t));
        }
    }
    h.finish(&payload)
}

pub fn decode_dataset(path: &Path, bytes: &[u8]) -> Result<DatasetFile> {
    let mut r = HeaderReader::parse(path, DATASET_MAGIC, bytes)?;
    r.version(VERSION)?;
    let voxels: usize = r.field("voxels")?;
    let b0_count: usize = r.field("b0_count")?;
    let normalized: bool = r.field("normalized")?;
    let seed: u64 = r.field("seed")?;
    let n_shells: usize = r.field("shells")?;
    let mut shells = Vec::with_capacity(n_shells);
    for _ in 0..n_shells {
        let [bval, n]: [f64; 2] = r.values("shell", 2)?.try_into().expect("two values");
        if n.fract() != 0.0 || n < 0.0 {
            return Err(r.error(format!("shell gradient count {n} is not a whole number")));
        }
        let directions = (0..n as usize)
            .map(|_| r.values::<f64>("g", 3).map(|g| Vector3::new(g[0], g[1], g[2])))
            .collect::<Result<Vec<_>>>()?;
        shells.push(Shell { bval, directions });
    }
    let has_truth: bool = r.field("truth")?;
    let table = GradientTable::new(shells, b0_count).map_err(|e| r.error(e.to_string()))?;
    let signals = r.take(voxels * table.n_samples())?;
    let truth = if has_truth {
        let raw = r.take(voxels * TRUTH_RECORD)?;
        let records = raw
            .chunks_exact(TRUTH_RECORD)
            .enumerate()
            .map(|(v, rec)| decode_truth(rec).ok_or_else(|| r.error(format!("voxel {v}: invalid fiber count {}", rec[0]))))
            .collect::<Result<Vec<_>>>()?;
        Some(records)
    } else {
        None
    };
    r.finish()?;
    let batch = VoxelBatch::new(table, signals, truth)
        .map_err(|e| crate::error::Error::format(path, e.to_string()))?
        .with_normalized_flag(normalized);
    Ok(DatasetFile { batch, seed })
}

pub fn write_dataset(path: &Path, file: &DatasetFile) -> Result<()> {
    write_bytes(path, &encode_dataset(file))
}

pub fn read_dataset(path: &Path) -> Result<DatasetFile> {
    decode_dataset(path, &read_bytes(path)?)
}
