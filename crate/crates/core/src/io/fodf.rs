//! `SDF1` fODF coefficient files and `SDP1` peak files.

use std::path::Path;

use nalgebra::Vector3;

use super::container::{read_bytes, write_bytes, HeaderReader, HeaderWriter};
use crate::error::{Error, Result};
use crate::harmonics::ShBasis;
use crate::peaks::{Peak, PeakSet};
use crate::signal_model::{FodfField, Tissue, TissueFodf};

pub const FODF_MAGIC: &str = "SDF1";
pub const PEAKS_MAGIC: &str = "SDP1";
const VERSION: u32 = 1;

fn parse_tissue(r: &HeaderReader, name: &str) -> Result<Tissue> {
    Tissue::ALL
        .into_iter()
        .find(|t| t.name() == name)
        .ok_or_else(|| r.error(format!("unknown tissue {name:?}")))
}

/// Header lists each tissue with its SH degree and coefficient count; the
/// payload holds each tissue's `V × L` block in header order.
pub fn encode_fodf(field: &FodfField) -> Vec<u8> {
    let mut h = HeaderWriter::new(FODF_MAGIC);
    h.field("version", VERSION)
        .field("voxels", field.n_voxels())
        .field("tissues", field.parts().len());
    let mut payload = Vec::new();
    for p in field.parts() {
        h.line(
            "tissue",
            [p.tissue.name().to_string(), p.basis.l_max().to_string(), p.basis.len().to_string()],
        );
        payload.extend_from_slice(&p.coeffs);
    }
    h.finish(&payload)
}

pub fn decode_fodf(path: &Path, bytes: &[u8]) -> Result<FodfField> {
    let mut r = HeaderReader::parse(path, FODF_MAGIC, bytes)?;
    r.version(VERSION)?;
    let voxels: usize = r.field("voxels")?;
    let n: usize = r.field("tissues")?;
    let mut specs = Vec::with_capacity(n);
    for _ in 0..n {
        let v = r.values::<String>("tissue", 3)?;
        let tissue = parse_tissue(&r, &v[0])?;
        let degree: usize = v[1].parse().map_err(|_| r.error(format!("bad degree {:?}", v[1])))?;
        let basis = ShBasis::new(degree).map_err(|e| r.error(e.to_string()))?;
        if v[2] != basis.len().to_string() {
            return Err(r.error(format!("{} degree {degree} has {} coefficients, header says {}", v[0], basis.len(), v[2])));
        }
        specs.push((tissue, basis));
    }
    let parts = specs
        .into_iter()
        .map(|(tissue, basis)| {
            Ok(TissueFodf {
                tissue,
                basis,
                coeffs: r.take(voxels * basis.len())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    FodfField::from_parts(voxels, parts).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_fodf(path: &Path, field: &FodfField) -> Result<()> {
    write_bytes(path, &encode_fodf(field))
}

pub fn read_fodf(path: &Path) -> Result<FodfField> {
    decode_fodf(path, &read_bytes(path)?)
}

/// Per-voxel peaks and the relative threshold used to extract them.
#[derive(Debug, Clone, PartialEq)]
pub struct PeaksFile {
    pub rel_threshold: f64,
    pub min_separation_deg: f64,
    pub voxels: Vec<PeakSet>,
}

/// Each voxel is stored as a count followed by `max_peaks` zero-padded
/// `(x, y, z, amplitude)` records.
pub fn encode_peaks(file: &PeaksFile) -> Vec<u8> {
    let k = file.voxels.iter().map(PeakSet::len).max().unwrap_or(0);
    let mut h = HeaderWriter::new(PEAKS_MAGIC);
    h.field("version", VERSION)
        .field("voxels", file.voxels.len())
        .field("max_peaks", k)
        .field("rel_threshold", file.rel_threshold)
        .field("min_separation_deg", file.min_separation_deg);
    let mut payload = Vec::with_capacity(file.voxels.len() * (1 + 4 * k));
    for set in &file.voxels {
        payload.push(set.len() as f64);
        for p in &set.peaks {
            payload.extend_from_slice(p.direction.as_slice());
            payload.push(p.amplitude);
        }
        payload.resize(payload.len() + 4 * (k - set.len()), 0.0);
    }
    h.finish(&payload)
}

pub fn decode_peaks(path: &Path, bytes: &[u8]) -> Result<PeaksFile> {
    let mut r = HeaderReader::parse(path, PEAKS_MAGIC, bytes)?;
    r.version(VERSION)?;
    let voxels: usize = r.field("voxels")?;
    let k: usize = r.field("max_peaks")?;
    let rel_threshold: f64 = r.field("rel_threshold")?;
    let min_separation_deg: f64 = r.field("min_separation_deg")?;
    let raw = r.take(voxels * (1 + 4 * k))?;
    r.finish()?;
    let sets = raw
        .chunks_exact(1 + 4 * k)
        .enumerate()
        .map(|(v, rec)| {
            let n = rec[0];
            if n.fract() != 0.0 || n < 0.0 || n as usize > k {
                return Err(Error::format(path, format!("voxel {v}: invalid peak count {n}")));
            }
            let peaks = rec[1..]
                .chunks_exact(4)
                .take(n as usize)
                .map(|p| Peak {
                    direction: Vector3::new(p[0], p[1], p[2]),
                    amplitude: p[3],
                })
                .collect();
            Ok(PeakSet { peaks })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PeaksFile {
        rel_threshold,
        min_separation_deg,
        voxels: sets,
    })
}

pub fn write_peaks(path: &Path, file: &PeaksFile) -> Result<()> {
    write_bytes(path, &encode_peaks(file))
}

pub fn read_peaks(path: &Path) -> Result<PeaksFile> {
    decode_peaks(path, &read_bytes(path)?)
}
