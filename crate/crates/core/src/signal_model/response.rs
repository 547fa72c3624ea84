//! Response functions: tensor-derived kernels, the diagonal `R^b`, and
//! estimation from single-fiber voxels.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Rotation3, Vector3};

use super::{ResponseFunction, ShellResponse, Tissue, TensorParams, VoxelBatch};
use crate::error::{Error, Result};
use crate::harmonics::{zonal_values, ShBasis, ShFitter};

/// Minimum voxel count for response estimation.
pub const MIN_RESPONSE_VOXELS: usize = 10;

const QUADRATURE_NODES: usize = 64;

/// Diagonal of `R^b`: `√(4π/(2l+1))·r_l` repeated over the `2l+1` orders of
/// each even degree `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct RfDiagonal {
    basis: ShBasis,
    values: Vec<f64>,
}

impl RfDiagonal {
    pub fn basis(&self) -> ShBasis {
        self.basis
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn rf_diagonal(rf: &ResponseFunction, basis: ShBasis, bval: f64) -> Result<RfDiagonal> {
    let zonal = &rf.shell(bval)?.zonal;
    let values = basis
        .degrees()
        .map(|(l, _)| {
            let r = zonal.get(l / 2).copied().unwrap_or(0.0);
            (4.0 * PI / (2 * l + 1) as f64).sqrt() * r
        })
        .collect();
    Ok(RfDiagonal { basis, values })
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = x;
        nodes[n - 1 - i] = -x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Zonal coefficients `r_l = 2π ∫ S(t) Y_l^0(t) dt` of an axially symmetric
/// profile `S(t)`, `t = cos θ`.
pub fn zonal_projection(l_max: usize, profile: impl Fn(f64) -> f64) -> Vec<f64> {
    let (nodes, weights) = gauss_legendre(QUADRATURE_NODES);
    let mut r = vec![0.0; l_max / 2 + 1];
    for (t, w) in nodes.iter().zip(&weights) {
        let s = profile(*t);
        for (ri, y) in r.iter_mut().zip(zonal_values(l_max, *t)) {
            *ri += 2.0 * PI * w * s * y;
        }
    }
    r
}

impl ResponseFunction {
    /// Kernel of the simulator's tissue model, exact up to degree `l_max`.
    ///
    /// WM is the axially symmetric tensor signal `exp(-b(λ⊥ + (λ∥-λ⊥)t²))`;
    /// GM/CSF are isotropic `exp(-b d)` with one coefficient `√(4π)·exp(-b d)`.
    pub fn from_tensor(tissue: Tissue, params: &TensorParams, bvals: &[f64], l_max: usize) -> Result<Self> {
        if l_max % 2 != 0 {
            return Err(Error::invalid(format!("response degree must be even, got {l_max}")));
        }
        let shells = bvals
            .iter()
            .map(|&b| {
                let zonal = match tissue {
                    Tissue::Wm => {
                        let (par, perp) = (params.lambda_par, params.lambda_perp);
                        zonal_projection(l_max, |t| (-b * (perp + (par - perp) * t * t)).exp())
                    }
                    Tissue::Gm => vec![(4.0 * PI).sqrt() * (-b * params.d_gm).exp()],
                    Tissue::Csf => vec![(4.0 * PI).sqrt() * (-b * params.d_csf).exp()],
                };
                ShellResponse { bval: b, zonal }
            })
            .collect();
        Ok(ResponseFunction {
            tissue,
            b0_signal: 1.0,
            shells,
        })
    }
}

/// Rotation taking `u` onto +z (identity when `u` already is ±z).
pub fn align_to_z(u: &Vector3<f64>) -> Rotation3<f64> {
    let u = if u.z < 0.0 { -u } else { *u };
    Rotation3::rotation_between(&u, &Vector3::z()).unwrap_or_else(Rotation3::identity)
}

/// WM response from single-fiber voxels with known fiber directions.
///
/// Each voxel's shell samples are refit in SH of degree `basis.l_max()` on
/// gradients rotated so the fiber lies along +z; the `m = 0` coefficients are
/// averaged over voxels.
pub fn estimate_response(batch: &VoxelBatch, basis: ShBasis) -> Result<ResponseFunction> {
    let truth = batch
        .truth()
        .ok_or_else(|| Error::invalid("response estimation needs ground-truth fiber directions"))?;
    if batch.n_voxels() < MIN_RESPONSE_VOXELS {
        return Err(Error::invalid(format!(
            "response estimation needs at least {MIN_RESPONSE_VOXELS} voxels, got {}",
            batch.n_voxels()
        )));
    }
    if let Some(v) = truth.iter().position(|t| t.n_fibers() != 1) {
        return Err(Error::invalid(format!(
            "voxel {v} has {} fibers; response estimation needs single-fiber voxels",
            truth[v].n_fibers()
        )));
    }
    let table = batch.table();
    let n_deg = basis.l_max() / 2 + 1;
    let mut shells = Vec::with_capacity(table.shells().len());
    for (k, shell) in table.shells().iter().enumerate() {
        let mut zonal = vec![0.0; n_deg];
        for (v, t) in truth.iter().enumerate() {
            let rot = align_to_z(&t.directions[0]);
            let rotated: Vec<Vector3<f64>> = shell.directions.iter().map(|g| rot * g).collect();
            let c = ShFitter::new(basis, &rotated, 0.0)?.fit(batch.shell_samples(v, k))?;
            for (d, z) in zonal.iter_mut().enumerate() {
                *z += c.values()[basis.index(2 * d, 0)];
            }
        }
        zonal.iter_mut().for_each(|z| *z /= batch.n_voxels() as f64);
        shells.push(ShellResponse {
            bval: shell.bval,
            zonal,
        });
    }
    let b0_signal = (0..batch.n_voxels())
        .filter_map(|v| batch.b0_mean(v))
        .sum::<f64>()
        / batch.n_voxels() as f64;
    Ok(ResponseFunction {
        tissue: Tissue::Wm,
        b0_signal: if table.b0_count() > 0 { b0_signal } else { 1.0 },
        shells,
    })
}

/// Isotropic (GM/CSF) responses by least squares over voxels with known
/// tissue fractions.
///
/// Per shell, each voxel's degree-0 signal coefficient is modelled as
/// `Σ_t f_t r_t`; the same regression on the b0 mean gives each tissue's
/// b0 signal.
pub fn estimate_isotropic_responses(batch: &VoxelBatch, tissues: &[Tissue]) -> Result<Vec<ResponseFunction>> {
    let truth = batch
        .truth()
        .ok_or_else(|| Error::invalid("isotropic response estimation needs ground-truth tissue fractions"))?;
    if batch.n_voxels() < MIN_RESPONSE_VOXELS {
        return Err(Error::invalid(format!(
            "response estimation needs at least {MIN_RESPONSE_VOXELS} voxels, got {}",
            batch.n_voxels()
        )));
    }
    let n = batch.n_voxels();
    let design = DMatrix::from_fn(n, 3, |v, t| truth[v].tissue_fractions[t]);
    let gram = design.transpose() * &design;
    let chol = gram.cholesky().ok_or_else(|| Error::IllConditioned {
        context: "tissue fractions do not separate the three tissues".into(),
        condition: f64::INFINITY,
    })?;
    let solve = |rhs: DVector<f64>| chol.solve(&(design.transpose() * rhs));

    let table = batch.table();
    let mut per_shell = Vec::new();
    for (k, shell) in table.shells().iter().enumerate() {
        let fitter = ShFitter::new(ShBasis::new(0)?, &shell.directions, 0.0)?;
        let s0 = (0..n)
            .map(|v| fitter.fit(batch.shell_samples(v, k)).map(|c| c.values()[0]))
            .collect::<Result<Vec<_>>>()?;
        per_shell.push((shell.bval, solve(DVector::from_vec(s0))));
    }
    let b0 = if table.b0_count() > 0 {
        let m: Vec<f64> = (0..n).map(|v| batch.b0_mean(v).unwrap_or(1.0)).collect();
        solve(DVector::from_vec(m))
    } else {
        DVector::from_element(3, 1.0)
    };
    Ok(tissues
        .iter()
        .filter(|t| t.is_isotropic())
        .map(|&t| ResponseFunction {
            tissue: t,
            b0_signal: b0[t.index()],
            shells: per_shell
                .iter()
                .map(|(bval, r)| ShellResponse {
                    bval: *bval,
                    zonal: vec![r[t.index()]],
                })
                .collect(),
        })
        .collect())
}
