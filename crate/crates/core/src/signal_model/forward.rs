//! The linear map from per-tissue fODF coefficients to shell samples.

use nalgebra::{DMatrix, DVector};

use super::{rf_diagonal, FodfField, GradientTable, ResponseSet, Tissue};
use crate::error::{Error, Result};
use crate::harmonics::{DesignMatrix, ShBasis};

/// Precomputed `S = Σ_t F_t R_t^b Y_t^b` over all diffusion-weighted shells.
///
/// Unknowns are stacked per voxel as `[WM coefficients, GM, CSF]` for the
/// tissues present; [`ForwardModel::matrix`] maps that vector to the
/// diffusion-weighted samples in table order, optionally preceded by the
/// b0 columns (see [`ForwardModel::with_b0`]).
#[derive(Debug, Clone)]
pub struct ForwardModel {
    tissues: Vec<Tissue>,
    bases: Vec<ShBasis>,
    offsets: Vec<usize>,
    b0_scale: Vec<f64>,
    b0_rows: usize,
    // rows × n_unknowns
    matrix: DMatrix<f64>,
}

impl ForwardModel {
    /// Model of the diffusion-weighted samples only.
    pub fn new(responses: &ResponseSet, tissues: &[Tissue], wm_degree: usize, table: &GradientTable) -> Result<Self> {
        Self::build(responses, tissues, wm_degree, table, false)
    }

    /// Model of the full sample vector, b0 columns included. Each b0 row is
    /// `Σ_t √(4π)·c₀,t·b0_t`, which separates isotropic tissues that a single
    /// shell cannot tell apart.
    pub fn with_b0(responses: &ResponseSet, tissues: &[Tissue], wm_degree: usize, table: &GradientTable) -> Result<Self> {
        Self::build(responses, tissues, wm_degree, table, true)
    }

    fn build(
        responses: &ResponseSet,
        tissues: &[Tissue],
        wm_degree: usize,
        table: &GradientTable,
        include_b0: bool,
    ) -> Result<Self> {
        if tissues.first() != Some(&Tissue::Wm) {
            return Err(Error::invalid("forward model needs white matter as its first tissue"));
        }
        let bases = tissues
            .iter()
            .map(|t| ShBasis::new(if t.is_isotropic() { 0 } else { wm_degree }))
            .collect::<Result<Vec<_>>>()?;
        let mut offsets = vec![0];
        for b in &bases {
            offsets.push(offsets.last().unwrap() + b.len());
        }
        let n_unknowns = *offsets.last().unwrap();
        let b0_rows = if include_b0 { table.b0_count() } else { 0 };
        let mut matrix = DMatrix::zeros(b0_rows + table.n_weighted(), n_unknowns);
        let s4pi = (4.0 * std::f64::consts::PI).sqrt();
        let mut b0_scale = Vec::with_capacity(tissues.len());
        for (ti, &t) in tissues.iter().enumerate() {
            let rf = responses
                .get(t)
                .ok_or_else(|| Error::invalid(format!("no {} response supplied", t.name())))?;
            b0_scale.push(rf.b0_signal);
            for r in 0..b0_rows {
                matrix[(r, offsets[ti])] = s4pi * rf.b0_signal;
            }
            let mut row0 = b0_rows;
            for shell in table.shells() {
                let diag = rf_diagonal(rf, bases[ti], shell.bval)?;
                let y = DesignMatrix::new(bases[ti], &shell.directions)?;
                for (g, _) in shell.directions.iter().enumerate() {
                    for c in 0..bases[ti].len() {
                        matrix[(row0 + g, offsets[ti] + c)] = diag.values()[c] * y.matrix()[(c, g)];
                    }
                }
                row0 += shell.directions.len();
            }
        }
        Ok(ForwardModel {
            tissues: tissues.to_vec(),
            bases,
            offsets,
            b0_scale,
            b0_rows,
            matrix,
        })
    }

    pub fn tissues(&self) -> &[Tissue] {
        &self.tissues
    }

    pub fn basis(&self, tissue_index: usize) -> ShBasis {
        self.bases[tissue_index]
    }

    /// Range of tissue `tissue_index` inside the stacked unknown vector.
    pub fn block(&self, tissue_index: usize) -> std::ops::Range<usize> {
        self.offsets[tissue_index]..self.offsets[tissue_index + 1]
    }

    pub fn n_unknowns(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Number of modelled samples (rows of [`ForwardModel::matrix`]).
    pub fn n_rows(&self) -> usize {
        self.matrix.nrows()
    }

    /// Leading b0 rows in the model (0 unless built with b0).
    pub fn b0_rows(&self) -> usize {
        self.b0_rows
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Predicted b0 signal of a stacked coefficient vector: each tissue's
    /// degree-0 mass `√(4π)·c₀` times its response b0 signal.
    pub fn predict_b0(&self, x: &[f64]) -> f64 {
        let s4pi = (4.0 * std::f64::consts::PI).sqrt();
        (0..self.tissues.len())
            .map(|ti| s4pi * x[self.offsets[ti]] * self.b0_scale[ti])
            .sum()
    }

    /// Modelled samples for one stacked coefficient vector.
    pub fn predict_stacked(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_unknowns());
        (&self.matrix * DVector::from_column_slice(x)).as_slice().to_vec()
    }

    /// Stacked unknown vector of voxel `v`.
    pub fn stack(&self, field: &FodfField, v: usize) -> Result<Vec<f64>> {
        let mut x = vec![0.0; self.n_unknowns()];
        for (ti, &t) in self.tissues.iter().enumerate() {
            let part = field
                .tissue(t)
                .ok_or_else(|| Error::invalid(format!("fODF field has no {} part", t.name())))?;
            let block = self.block(ti);
            let row = part.row(v);
            // Lower-degree fields are zero-padded, higher degrees truncated.
            let n = row.len().min(block.len());
            x[block.start..block.start + n].copy_from_slice(&row[..n]);
        }
        Ok(x)
    }

    /// Modelled samples `V × n_rows`, row-major.
    pub fn predict(&self, field: &FodfField) -> Result<Vec<f64>> {
        let n = field.n_voxels();
        let mut out = Vec::with_capacity(n * self.n_rows());
        for v in 0..n {
            out.extend(self.predict_stacked(&self.stack(field, v)?));
        }
        Ok(out)
    }
}

/// Diffusion-weighted signal predicted from `field` with the given responses.
pub fn forward(field: &FodfField, responses: &ResponseSet, table: &GradientTable) -> Result<Vec<f64>> {
    let tissues = field.tissue_list();
    ForwardModel::new(responses, &tissues, field.wm().basis.l_max(), table)?.predict(field)
}
