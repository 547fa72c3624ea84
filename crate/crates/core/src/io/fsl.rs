//! FSL-style `bvals` / `bvecs` text pairs.
//!
//! `bvals` is one line of whitespace-separated b-values; `bvecs` is three
//! lines holding the x, y and z components, one column per volume.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::signal_model::{GradientTable, Shell, B0_THRESHOLD, BVAL_TOL};

/// A gradient table read from an acquisition-ordered text pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FslTable {
    pub table: GradientTable,
    /// `order[j]` is the text column that becomes sample `j` of the table.
    pub order: Vec<usize>,
}

fn parse_row(path: &Path, line: &str, what: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::format(path, format!("{what}: cannot parse {s:?}")))
        })
        .collect()
}

/// Parses the pair. Columns with `b < 50` become b0 volumes; the remaining
/// columns are grouped into shells by b-value (within 1 s/mm²) in order of
/// first appearance, and each shell takes the b-value of its first column.
pub fn parse_fsl(path: &Path, bvals: &str, bvecs: &str) -> Result<FslTable> {
    let rows: Vec<&str> = bvals.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != 1 {
        return Err(Error::format(path, format!("bvals must be a single line, found {}", rows.len())));
    }
    let b = parse_row(path, rows[0], "bvals")?;
    let vec_rows: Vec<&str> = bvecs.lines().filter(|l| !l.trim().is_empty()).collect();
    if vec_rows.len() != 3 {
        return Err(Error::format(path, format!("bvecs must have 3 lines, found {}", vec_rows.len())));
    }
    let comps = vec_rows
        .iter()
        .zip(["x", "y", "z"])
        .map(|(l, c)| parse_row(path, l, &format!("bvecs {c}")))
        .collect::<Result<Vec<_>>>()?;
    if comps.iter().any(|c| c.len() != b.len()) {
        return Err(Error::format(
            path,
            format!(
                "column counts differ: {} b-values, bvecs rows of {}, {}, {}",
                b.len(),
                comps[0].len(),
                comps[1].len(),
                comps[2].len()
            ),
        ));
    }
    let mut b0 = Vec::new();
    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    for (j, &bv) in b.iter().enumerate() {
        if !bv.is_finite() || bv < 0.0 {
            return Err(Error::format(path, format!("column {j}: invalid b-value {bv}")));
        }
        if bv < B0_THRESHOLD {
            b0.push(j);
        } else if let Some(g) = groups.iter_mut().find(|g| (g.0 - bv).abs() <= BVAL_TOL) {
            g.1.push(j);
        } else {
            groups.push((bv, vec![j]));
        }
    }
    let mut shells = Vec::with_capacity(groups.len());
    for (bval, cols) in &groups {
        let directions = cols
            .iter()
            .map(|&j| {
                let v = Vector3::new(comps[0][j], comps[1][j], comps[2][j]);
                let n = v.norm();
                if n < 1e-3 {
                    Err(Error::format(path, format!("column {j}: zero gradient direction at b={bval}")))
                } else if (n - 1.0).abs() > 1e-6 {
                    Ok(v / n)
                } else {
                    Ok(v)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        shells.push(Shell { bval: *bval, directions });
    }
    let order = b0.iter().chain(groups.iter().flat_map(|g| g.1.iter())).copied().collect();
    let table = GradientTable::new(shells, b0.len()).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(FslTable { table, order })
}

/// Renders a table as `(bvals, bvecs)` text in sample order; b0 columns get
/// a zero vector.
pub fn format_fsl(table: &GradientTable) -> (String, String) {
    let mut b = vec![0.0; table.b0_count()];
    let mut cols = vec![Vector3::zeros(); table.b0_count()];
    for s in table.shells() {
        for d in &s.directions {
            b.push(s.bval);
            cols.push(*d);
        }
    }
    let line = |vals: Vec<f64>| vals.iter().map(f64::to_string).collect::<Vec<_>>().join(" ") + "\n";
    let bvecs = (0..3).map(|c| line(cols.iter().map(|v| v[c]).collect())).collect();
    (line(b), bvecs)
}

pub fn read_fsl(bvals: &Path, bvecs: &Path) -> Result<FslTable> {
    let a = std::fs::read_to_string(bvals).map_err(|e| Error::io(bvals, e))?;
    let v = std::fs::read_to_string(bvecs).map_err(|e| Error::io(bvecs, e))?;
    parse_fsl(bvals, &a, &v)
}

pub fn write_fsl(table: &GradientTable, bvals: &Path, bvecs: &Path) -> Result<()> {
    let (a, v) = format_fsl(table);
    std::fs::write(bvals, a).map_err(|e| Error::io(bvals, e))?;
    std::fs::write(bvecs, v).map_err(|e| Error::io(bvecs, e))
}
