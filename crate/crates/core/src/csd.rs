//! Constrained spherical deconvolution baseline.
//!
//! Each voxel minimizes `‖S - F R Y‖² + w Σ min(0, F Y(p) - τ)²` over the
//! constraint grid `p` (plus `F_gm, F_csf ≥ 0` rows), with `τ` the
//! non-negativity threshold. The piecewise-quadratic objective is minimized
//! by the active-set iteration: solve the least-squares problem with penalty
//! rows for the points currently below `τ`, recompute the active set, repeat
//! until it is stable. A backtracking step keeps the objective monotone.
//! When a stable active set still leaves values below `τ - 1e-6`, the weight
//! `w` is raised tenfold and the iteration resumes, so converged voxels
//! satisfy the constraint to that tolerance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonics::{DesignMatrix, ShBasis};
use crate::signal_model::{FodfField, ForwardModel, ResponseSet, Tissue, TissueFodf, VoxelBatch};
use crate::sphere_grid::healpix;

/// Constraint violation tolerated at convergence.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Largest accepted condition number of the data normal matrix.
pub const MAX_NORMAL_CONDITION: f64 = 1e12;

const MAX_WEIGHT_STAGES: usize = 8;
const INIT_DEGREE: usize = 4;

fn default_lambda() -> f64 {
    1.0
}
fn default_max_iters() -> usize {
    50
}
fn default_tol() -> f64 {
    1e-8
}
fn default_grid() -> usize {
    16
}
fn default_wm_degree() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsdConfig {
    /// Initial weight of the penalty rows relative to data rows.
    #[serde(default = "default_lambda")]
    pub lambda_sparsity: f64,
    #[serde(default)]
    pub nonneg_threshold: f64,
    /// Active-set iterations allowed per penalty weight.
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Stop when the coefficient update norm falls below this.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_grid")]
    pub constraint_grid_nside: usize,
    #[serde(default = "default_wm_degree")]
    pub wm_degree: usize,
    /// Ridge added to the normal matrix; needed when the WM degree has more
    /// coefficients than there are samples.
    #[serde(default)]
    pub ridge: f64,
}

impl Default for CsdConfig {
    fn default() -> Self {
        CsdConfig {
            lambda_sparsity: default_lambda(),
            nonneg_threshold: 0.0,
            max_iters: default_max_iters(),
            tol: default_tol(),
            constraint_grid_nside: default_grid(),
            wm_degree: default_wm_degree(),
            ridge: 0.0,
        }
    }
}

impl CsdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda_sparsity > 0.0 && self.lambda_sparsity.is_finite()) {
            return bad(format!("csd.lambda_sparsity must be positive, got {}", self.lambda_sparsity));
        }
        if !self.nonneg_threshold.is_finite() {
            return bad("csd.nonneg_threshold must be finite".into());
        }
        if self.max_iters == 0 {
            return bad("csd.max_iters must be positive".into());
        }
        if !(self.tol > 0.0) {
            return bad(format!("csd.tol must be positive, got {}", self.tol));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad(format!("csd.ridge must be nonnegative, got {}", self.ridge));
        }
        if self.wm_degree % 2 != 0 || self.wm_degree > 20 {
            return bad(format!("csd.wm_degree must be even and at most 20, got {}", self.wm_degree));
        }
        if !self.constraint_grid_nside.is_power_of_two() || self.constraint_grid_nside > 64 {
            return bad(format!(
                "csd.constraint_grid_nside must be a power of two up to 64, got {}",
                self.constraint_grid_nside
            ));
        }
        Ok(())
    }
}

/// Per-voxel solver report.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSolve {
    pub coeffs: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Objective after each accepted step, one list per penalty weight.
    pub objective_history: Vec<Vec<f64>>,
    pub final_weight: f64,
}

#[derive(Debug, Clone)]
pub struct CsdResult {
    pub field: FodfField,
    pub converged: Vec<bool>,
    pub iterations: Vec<usize>,
}

impl CsdResult {
    pub fn n_unconverged(&self) -> usize {
        self.converged.iter().filter(|c| !**c).count()
    }
}

/// Shared, voxel-independent solver state.
#[derive(Debug, Clone)]
pub struct CsdSolver {
    model: ForwardModel,
    config: CsdConfig,
    ata: DMatrix<f64>,
    // Constraint rows (WM SH at grid points), row-major n_points × L_wm.
    constraints: Vec<f64>,
    n_points: usize,
    init_cols: Vec<usize>,
}

impl CsdSolver {
    pub fn new(batch_table: &crate::signal_model::GradientTable, responses: &ResponseSet, tissues: &[Tissue], config: &CsdConfig) -> Result<Self> {
        config.validate()?;
        let model = if tissues.len() > 1 {
            ForwardModel::with_b0(responses, tissues, config.wm_degree, batch_table)?
        } else {
            ForwardModel::new(responses, tissues, config.wm_degree, batch_table)?
        };
        let a = model.matrix();
        let mut ata = a.transpose() * a;
        if config.ridge == 0.0 {
            let eig = SymmetricEigen::new(ata.clone());
            let (max, min) = (eig.eigenvalues.max(), eig.eigenvalues.min());
            let condition = if min > 0.0 { max / min } else { f64::INFINITY };
            if condition > MAX_NORMAL_CONDITION {
                return Err(Error::IllConditioned {
                    context: format!(
                        "CSD normal matrix for {} unknowns from {} samples; enable csd.ridge or lower csd.wm_degree",
                        model.n_unknowns(),
                        model.n_rows()
                    ),
                    condition,
                });
            }
        } else {
            for i in 0..ata.nrows() {
                ata[(i, i)] += config.ridge;
            }
        }
        let basis = model.basis(0);
        let nside = config.constraint_grid_nside;
        let points: Vec<_> = (0..healpix::npix(nside)).map(|p| healpix::pixel_center(p, nside)).collect();
        let mut constraints = Vec::with_capacity(points.len() * basis.len());
        for p in &points {
            constraints.extend(basis.eval(p));
        }
        let init_degree = INIT_DEGREE.min(config.wm_degree);
        let mut init_cols: Vec<usize> = (0..ShBasis::new(init_degree)?.len()).collect();
        for ti in 1..model.tissues().len() {
            init_cols.extend(model.block(ti));
        }
        Ok(CsdSolver {
            model,
            config: config.clone(),
            ata,
            constraints,
            n_points: points.len(),
            init_cols,
        })
    }

    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    fn wm_len(&self) -> usize {
        self.model.basis(0).len()
    }

    fn constraint_row(&self, i: usize) -> &[f64] {
        let l = self.wm_len();
        &self.constraints[i * l..(i + 1) * l]
    }

    /// Constraint values: WM fODF at grid points, then isotropic coefficients.
    fn constraint_values(&self, x: &[f64]) -> Vec<f64> {
        let l = self.wm_len();
        let mut out: Vec<f64> = (0..self.n_points)
            .map(|i| self.constraint_row(i).iter().zip(&x[..l]).map(|(c, v)| c * v).sum())
            .collect();
        out.extend_from_slice(&x[l..]);
        out
    }

    fn threshold_of(&self, i: usize) -> f64 {
        if i < self.n_points {
            self.config.nonneg_threshold
        } else {
            0.0
        }
    }

    fn objective(&self, x: &[f64], aty: &DVector<f64>, yty: f64, weight: f64) -> f64 {
        let xv = DVector::from_column_slice(x);
        let data = (xv.transpose() * &self.ata * &xv)[0] - 2.0 * xv.dot(aty) + yty;
        let pen: f64 = self
            .constraint_values(x)
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.threshold_of(i)).min(0.0).powi(2))
            .sum();
        data.max(0.0) + weight * pen
    }

    fn active_set(&self, x: &[f64]) -> Vec<usize> {
        self.constraint_values(x)
            .iter()
            .enumerate()
            .filter(|(i, v)| **v < self.threshold_of(*i))
            .map(|(i, _)| i)
            .collect()
    }

    fn penalized_solve(&self, aty: &DVector<f64>, active: &[usize], weight: f64) -> Result<Vec<f64>> {
        let k = self.model.n_unknowns();
        let l = self.wm_len();
        let mut n = self.ata.clone();
        let mut rhs = aty.clone();
        for &i in active {
            if i < self.n_points {
                let c = self.constraint_row(i);
                let tau = self.config.nonneg_threshold;
                for a in 0..l {
                    let ca = weight * c[a];
                    if ca == 0.0 {
                        continue;
                    }
                    rhs[a] += ca * tau;
                    for b in 0..l {
                        n[(a, b)] += ca * c[b];
                    }
                }
            } else {
                let j = l + (i - self.n_points);
                n[(j, j)] += weight;
            }
        }
        debug_assert_eq!(n.nrows(), k);
        let chol = n.cholesky().ok_or_else(|| Error::IllConditioned {
            context: "CSD penalized normal matrix is not positive definite".into(),
            condition: f64::INFINITY,
        })?;
        Ok(chol.solve(&rhs).as_slice().to_vec())
    }

    fn initial_guess(&self, aty: &DVector<f64>) -> Result<Vec<f64>> {
        let m = self.init_cols.len();
        let sub = DMatrix::from_fn(m, m, |i, j| self.ata[(self.init_cols[i], self.init_cols[j])]);
        let rhs = DVector::from_fn(m, |i, _| aty[self.init_cols[i]]);
        let mut x = vec![0.0; self.model.n_unknowns()];
        if let Some(chol) = sub.cholesky() {
            for (i, v) in chol.solve(&rhs).iter().enumerate() {
                x[self.init_cols[i]] = *v;
            }
        }
        Ok(x)
    }

    /// Solves one voxel given its modelled samples (b0-normalized).
    pub fn solve_voxel(&self, samples: &[f64]) -> Result<VoxelSolve> {
        if samples.len() != self.model.n_rows() {
            return Err(Error::invalid(format!(
                "voxel has {} samples, model expects {}",
                samples.len(),
                self.model.n_rows()
            )));
        }
        let y = DVector::from_column_slice(samples);
        let aty = self.model.matrix().transpose() * &y;
        let yty = y.norm_squared();
        let mut x = self.initial_guess(&aty)?;
        let mut weight = self.config.lambda_sparsity;
        let mut history = Vec::new();
        let mut iterations = 0;
        let mut converged = false;
        for _stage in 0..MAX_WEIGHT_STAGES {
            let mut stage_hist = vec![self.objective(&x, &aty, yty, weight)];
            let mut active = self.active_set(&x);
            let mut stable = false;
            for _ in 0..self.config.max_iters {
                iterations += 1;
                let target = self.penalized_solve(&aty, &active, weight)?;
                let current = *stage_hist.last().unwrap();
                let dir: Vec<f64> = target.iter().zip(&x).map(|(t, v)| t - v).collect();
                let mut step = 1.0;
                let mut accepted = None;
                while step > 1e-6 {
                    let trial: Vec<f64> = x.iter().zip(&dir).map(|(v, d)| v + step * d).collect();
                    let f = self.objective(&trial, &aty, yty, weight);
                    if f <= current {
                        accepted = Some((trial, f));
                        break;
                    }
                    step *= 0.5;
                }
                let Some((trial, f)) = accepted else {
                    stable = true;
                    break;
                };
                let change = dir.iter().map(|d| d * d).sum::<f64>().sqrt() * step;
                x = trial;
                stage_hist.push(f);
                let next = self.active_set(&x);
                if (next == active && step == 1.0) || change < self.config.tol {
                    stable = true;
                    break;
                }
                active = next;
            }
            history.push(stage_hist);
            let min_slack = self
                .constraint_values(&x)
                .iter()
                .enumerate()
                .map(|(i, v)| v - self.threshold_of(i))
                .fold(f64::INFINITY, f64::min);
            if stable && min_slack >= -FEASIBILITY_TOL {
                converged = true;
                break;
            }
            weight *= 10.0;
        }
        Ok(VoxelSolve {
            coeffs: x,
            converged,
            iterations,
            objective_history: history,
            final_weight: weight,
        })
    }

    /// Rows of the batch arranged as the model's samples.
    pub fn model_samples<'a>(&self, batch: &'a VoxelBatch, v: usize) -> &'a [f64] {
        let row = batch.row(v);
        &row[batch.table().b0_count() - self.model.b0_rows()..]
    }
}

/// Deconvolves every voxel of `batch` (normalized by its b0 mean first).
pub fn csd_solve(batch: &VoxelBatch, responses: &ResponseSet, tissues: &[Tissue], config: &CsdConfig) -> Result<CsdResult> {
    let normalized;
    let batch = if batch.is_normalized() || batch.table().b0_count() == 0 {
        batch
    } else {
        normalized = batch.normalized_by_b0();
        &normalized
    };
    responses.check_covers(batch.table())?;
    let solver = CsdSolver::new(batch.table(), responses, tissues, config)?;
    let solves = (0..batch.n_voxels())
        .into_par_iter()
        .map(|v| solver.solve_voxel(solver.model_samples(batch, v)))
        .collect::<Result<Vec<_>>>()?;
    let n = batch.n_voxels();
    let model = solver.model();
    let parts = tissues
        .iter()
        .enumerate()
        .map(|(ti, &t)| {
            let block = model.block(ti);
            let mut coeffs = Vec::with_capacity(n * block.len());
            for s in &solves {
                coeffs.extend_from_slice(&s.coeffs[block.clone()]);
            }
            TissueFodf {
                tissue: t,
                basis: model.basis(ti),
                coeffs,
            }
        })
        .collect();
    Ok(CsdResult {
        field: FodfField::from_parts(n, parts)?,
        converged: solves.iter().map(|s| s.converged).collect(),
        iterations: solves.iter().map(|s| s.iterations).collect(),
    })
}

/// WM fODF values of every voxel on `points`, row-major `V × points`.
pub fn fodf_values(field: &FodfField, points: &[nalgebra::Vector3<f64>]) -> Result<Vec<f64>> {
    let wm = field.wm();
    let design = DesignMatrix::new(wm.basis, points)?;
    let l = wm.basis.len();
    let coeffs = DMatrix::from_row_slice(field.n_voxels(), l, &wm.coeffs);
    let values = coeffs * design.matrix();
    let mut out = Vec::with_capacity(field.n_voxels() * points.len());
    for v in 0..field.n_voxels() {
        out.extend(values.row(v).iter());
    }
    Ok(out)
}
