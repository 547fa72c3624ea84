//! Multi-tissue forward model `S^b = Σ_t F_t R_t^b Y_t^b`, response
//! functions, and the multi-tensor simulator used for the synthetic benchmark.
//!
//! Response functions are zonal (m = 0) about the +z axis. Every rotation
//! that aligns a fiber with the response axis targets +z.

mod forward;
pub mod gradients;
mod response;
mod simulate;

pub use forward::{forward, ForwardModel};
pub use gradients::{electrostatic_directions, electrostatic_table};
pub use response::{
    align_to_z, estimate_isotropic_responses, estimate_response, rf_diagonal, zonal_projection, RfDiagonal,
    MIN_RESPONSE_VOXELS,
};
pub use simulate::{
    add_rician_noise, add_rician_noise_with, axial_angle_deg, make_dataset, simulate_voxel, SimulatedDataset, SimulationConfig,
    TensorParams,
};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonics::ShBasis;

/// Columns with a b-value below this are treated as b = 0.
pub const B0_THRESHOLD: f64 = 50.0;

/// Tolerance used when matching b-values between tables and responses.
pub const BVAL_TOL: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Tissue {
    Wm,
    Gm,
    Csf,
}

impl Tissue {
    pub const ALL: [Tissue; 3] = [Tissue::Wm, Tissue::Gm, Tissue::Csf];

    /// The first `n` tissues in canonical order (WM, GM, CSF).
    pub fn first(n: usize) -> Result<Vec<Tissue>> {
        if !(1..=3).contains(&n) {
            return Err(Error::invalid(format!("tissue count must be 1, 2 or 3, got {n}")));
        }
        Ok(Self::ALL[..n].to_vec())
    }

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Wm => "wm",
            Tissue::Gm => "gm",
            Tissue::Csf => "csf",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_isotropic(self) -> bool {
        self != Tissue::Wm
    }
}

/// One diffusion-weighted shell.
#[derive(Debug, Clone, PartialEq)]
pub struct Shell {
    pub bval: f64,
    pub directions: Vec<Vector3<f64>>,
}

/// Acquisition scheme: `b0_count` unweighted volumes followed by the shells.
///
/// Sample vectors are laid out as `[b0 × b0_count, shell 0, shell 1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTable {
    shells: Vec<Shell>,
    b0_count: usize,
}

impl GradientTable {
    pub fn new(shells: Vec<Shell>, b0_count: usize) -> Result<Self> {
        if shells.is_empty() {
            return Err(Error::invalid("gradient table needs at least one shell"));
        }
        for s in &shells {
            if !(s.bval >= 0.0 && s.bval.is_finite()) {
                return Err(Error::invalid(format!("b-value must be nonnegative, got {}", s.bval)));
            }
            if s.directions.is_empty() {
                return Err(Error::invalid(format!("shell b={} has no directions", s.bval)));
            }
            for d in &s.directions {
                if (d.norm() - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!("direction {d:?} in shell b={} is not unit norm", s.bval)));
                }
            }
        }
        Ok(GradientTable { shells, b0_count })
    }

    pub fn shells(&self) -> &[Shell] {
        &self.shells
    }

    pub fn b0_count(&self) -> usize {
        self.b0_count
    }

    pub fn bvals(&self) -> Vec<f64> {
        self.shells.iter().map(|s| s.bval).collect()
    }

    /// Diffusion-weighted sample count `Σ_b n[b]`.
    pub fn n_weighted(&self) -> usize {
        self.shells.iter().map(|s| s.directions.len()).sum()
    }

    /// Total columns including b0.
    pub fn n_samples(&self) -> usize {
        self.b0_count + self.n_weighted()
    }

    /// Column range of shell `k` inside a full sample vector.
    pub fn shell_columns(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.b0_count + self.shells[..k].iter().map(|s| s.directions.len()).sum::<usize>();
        start..start + self.shells[k].directions.len()
    }

    /// Whether both tables have the same shell b-values (directions may differ).
    pub fn same_shells(&self, other: &GradientTable) -> bool {
        self.shells.len() == other.shells.len()
            && self
                .shells
                .iter()
                .zip(&other.shells)
                .all(|(a, b)| (a.bval - b.bval).abs() <= BVAL_TOL)
    }
}

/// Zonal coefficients `r_l` (even `l`, index `l/2`) of one tissue at one shell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellResponse {
    pub bval: f64,
    pub zonal: Vec<f64>,
}

/// Voxel-independent, shell-dependent tissue response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseFunction {
    pub tissue: Tissue,
    /// Unweighted (b = 0) signal of one unit of this tissue.
    pub b0_signal: f64,
    pub shells: Vec<ShellResponse>,
}

impl ResponseFunction {
    pub fn shell(&self, bval: f64) -> Result<&ShellResponse> {
        self.shells
            .iter()
            .find(|s| (s.bval - bval).abs() <= BVAL_TOL)
            .ok_or_else(|| Error::invalid(format!("{} response has no shell at b={bval}", self.tissue.name())))
    }

    /// Maximum degree stored for any shell.
    pub fn l_max(&self) -> usize {
        self.shells.iter().map(|s| 2 * (s.zonal.len().max(1) - 1)).max().unwrap_or(0)
    }

    /// Response signal at polar cosine `t` (angle to the symmetry axis).
    pub fn signal_at(&self, bval: f64, t: f64) -> Result<f64> {
        let s = self.shell(bval)?;
        let l_max = 2 * (s.zonal.len().max(1) - 1);
        let y = crate::harmonics::zonal_values(l_max, t);
        Ok(s.zonal.iter().zip(&y).map(|(r, y)| r * y).sum())
    }
}

/// Per-tissue responses in canonical tissue order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSet {
    pub responses: Vec<ResponseFunction>,
}

impl ResponseSet {
    pub fn new(mut responses: Vec<ResponseFunction>) -> Result<Self> {
        responses.sort_by_key(|r| r.tissue);
        for w in responses.windows(2) {
            if w[0].tissue == w[1].tissue {
                return Err(Error::invalid(format!("duplicate {} response", w[0].tissue.name())));
            }
        }
        if responses.first().map(|r| r.tissue) != Some(Tissue::Wm) {
            return Err(Error::invalid("a white-matter response is required"));
        }
        Ok(ResponseSet { responses })
    }

    pub fn get(&self, tissue: Tissue) -> Option<&ResponseFunction> {
        self.responses.iter().find(|r| r.tissue == tissue)
    }

    pub fn tissues(&self) -> Vec<Tissue> {
        self.responses.iter().map(|r| r.tissue).collect()
    }

    /// Restricts to the first `n` tissues.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let want = Tissue::first(n)?;
        let picked = want
            .iter()
            .map(|t| {
                self.get(*t)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("missing {} response", t.name())))
            })
            .collect::<Result<Vec<_>>>()?;
        ResponseSet::new(picked)
    }

    /// Checks every response covers every shell of the table.
    pub fn check_covers(&self, table: &GradientTable) -> Result<()> {
        for r in &self.responses {
            for s in table.shells() {
                r.shell(s.bval)?;
            }
        }
        Ok(())
    }
}

/// SH coefficients of one tissue for every voxel, row-major `V × L`.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueFodf {
    pub tissue: Tissue,
    pub basis: ShBasis,
    pub coeffs: Vec<f64>,
}

impl TissueFodf {
    pub fn row(&self, v: usize) -> &[f64] {
        let l = self.basis.len();
        &self.coeffs[v * l..(v + 1) * l]
    }

    pub fn row_mut(&mut self, v: usize) -> &mut [f64] {
        let l = self.basis.len();
        &mut self.coeffs[v * l..(v + 1) * l]
    }
}

/// Per-voxel, per-tissue fODF coefficients. WM is even-degree; isotropic
/// tissues carry a single degree-0 coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct FodfField {
    n_voxels: usize,
    tissues: Vec<TissueFodf>,
}

impl FodfField {
    pub fn zeros(n_voxels: usize, wm_degree: usize, tissues: &[Tissue]) -> Result<Self> {
        let parts = tissues
            .iter()
            .map(|&t| {
                let basis = ShBasis::new(if t.is_isotropic() { 0 } else { wm_degree })?;
                Ok(TissueFodf {
                    tissue: t,
                    basis,
                    coeffs: vec![0.0; n_voxels * basis.len()],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(n_voxels, parts)
    }

    pub fn from_parts(n_voxels: usize, tissues: Vec<TissueFodf>) -> Result<Self> {
        if tissues.is_empty() || tissues[0].tissue != Tissue::Wm {
            return Err(Error::invalid("fODF field must start with a white-matter part"));
        }
        for t in &tissues {
            if t.coeffs.len() != n_voxels * t.basis.len() {
                return Err(Error::invalid(format!(
                    "{} coefficients: expected {} values, got {}",
                    t.tissue.name(),
                    n_voxels * t.basis.len(),
                    t.coeffs.len()
                )));
            }
            if t.tissue.is_isotropic() && t.basis.l_max() != 0 {
                return Err(Error::invalid(format!("{} must have degree 0", t.tissue.name())));
            }
        }
        Ok(FodfField { n_voxels, tissues })
    }

    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    pub fn parts(&self) -> &[TissueFodf] {
        &self.tissues
    }

    pub fn parts_mut(&mut self) -> &mut [TissueFodf] {
        &mut self.tissues
    }

    pub fn tissue(&self, t: Tissue) -> Option<&TissueFodf> {
        self.tissues.iter().find(|p| p.tissue == t)
    }

    pub fn wm(&self) -> &TissueFodf {
        &self.tissues[0]
    }

    pub fn tissue_list(&self) -> Vec<Tissue> {
        self.tissues.iter().map(|p| p.tissue).collect()
    }

    /// WM coefficients of voxel `v` as an [`crate::harmonics::ShCoeffs`].
    pub fn wm_coeffs(&self, v: usize) -> crate::harmonics::ShCoeffs {
        let wm = self.wm();
        crate::harmonics::ShCoeffs::new(wm.basis, wm.row(v).to_vec()).expect("row length matches basis")
    }
}

/// Ground truth attached to simulated voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelTruth {
    pub directions: Vec<Vector3<f64>>,
    pub fractions: Vec<f64>,
    /// `(wm, gm, csf)`, summing to 1.
    pub tissue_fractions: [f64; 3],
}

impl VoxelTruth {
    pub fn n_fibers(&self) -> usize {
        self.directions.len()
    }
}

/// Signal samples for `V` voxels over one gradient table, row-major
/// `V × n_samples`, with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelBatch {
    table: GradientTable,
    signals: Vec<f64>,
    truth: Option<Vec<VoxelTruth>>,
    normalized: bool,
}

impl VoxelBatch {
    pub fn new(table: GradientTable, signals: Vec<f64>, truth: Option<Vec<VoxelTruth>>) -> Result<Self> {
        let n = table.n_samples();
        if signals.len() % n != 0 {
            return Err(Error::invalid(format!(
                "signal buffer of {} values is not a multiple of {n} samples",
                signals.len()
            )));
        }
        let v = signals.len() / n;
        if let Some(t) = &truth {
            if t.len() != v {
                return Err(Error::invalid(format!("{} truth records for {v} voxels", t.len())));
            }
            for (i, r) in t.iter().enumerate() {
                let sum: f64 = r.tissue_fractions.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!("voxel {i}: tissue fractions sum to {sum}")));
                }
                if r.directions.len() != r.fractions.len() || r.directions.len() > 3 {
                    return Err(Error::invalid(format!("voxel {i}: inconsistent fiber truth")));
                }
            }
        }
        Ok(VoxelBatch {
            table,
            signals,
            truth,
            normalized: false,
        })
    }

    pub fn with_normalized_flag(mut self, normalized: bool) -> Self {
        self.normalized = normalized;
        self
    }

    pub fn table(&self) -> &GradientTable {
        &self.table
    }

    pub fn n_voxels(&self) -> usize {
        self.signals.len() / self.table.n_samples()
    }

    pub fn signals(&self) -> &[f64] {
        &self.signals
    }

    pub fn truth(&self) -> Option<&[VoxelTruth]> {
        self.truth.as_deref()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, v: usize) -> &[f64] {
        let n = self.table.n_samples();
        &self.signals[v * n..(v + 1) * n]
    }

    /// Diffusion-weighted part of row `v` (b0 columns dropped).
    pub fn weighted_row(&self, v: usize) -> &[f64] {
        &self.row(v)[self.table.b0_count()..]
    }

    pub fn shell_samples(&self, v: usize, k: usize) -> &[f64] {
        &self.row(v)[self.table.shell_columns(k)]
    }

    pub fn b0_mean(&self, v: usize) -> Option<f64> {
        let b0 = self.table.b0_count();
        (b0 > 0).then(|| self.row(v)[..b0].iter().sum::<f64>() / b0 as f64)
    }

    /// Divides each voxel by its mean b0 signal. Voxels with a non-positive
    /// b0 mean, and tables without b0, are left unchanged.
    pub fn normalized_by_b0(&self) -> VoxelBatch {
        let n = self.table.n_samples();
        let mut signals = self.signals.clone();
        if self.table.b0_count() > 0 {
            for (v, row) in signals.chunks_mut(n).enumerate() {
                if let Some(m) = self.b0_mean(v) {
                    if m > f64::EPSILON {
                        row.iter_mut().for_each(|s| *s /= m);
                    }
                }
            }
        }
        VoxelBatch {
            table: self.table.clone(),
            signals,
            truth: self.truth.clone(),
            normalized: true,
        }
    }

    /// Sub-batch of the given voxels, in order.
    pub fn select(&self, voxels: &[usize]) -> VoxelBatch {
        let mut signals = Vec::with_capacity(voxels.len() * self.table.n_samples());
        for &v in voxels {
            signals.extend_from_slice(self.row(v));
        }
        VoxelBatch {
            table: self.table.clone(),
            signals,
            truth: self.truth.as_ref().map(|t| voxels.iter().map(|&v| t[v].clone()).collect()),
            normalized: self.normalized,
        }
    }
}
