//! Hierarchical Healpix discretization of the sphere and its weighted graph.
//!
//! Vertices are Healpix pixel centres in NESTED order. Two vertices are
//! joined when their pixels touch (edge or corner), with weight
//! `exp(-‖xᵢ - xⱼ‖² / ρ²)` where `ρ` is the mean chord length over all
//! neighbour pairs. The Laplacian is the unnormalized combinatorial one,
//! `L = D - A`.

pub mod healpix;

use nalgebra::{Rotation3, Vector3};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Largest supported resolution (49 152 vertices).
pub const MAX_NSIDE: usize = 64;

/// Number of power iterations used to estimate the largest Laplacian eigenvalue.
pub const POWER_ITERATIONS: usize = 20;

#[derive(Debug, Clone)]
pub struct SphericalGrid {
    nside: usize,
    vertices: Vec<Vector3<f64>>,
    adjacency: CsrMatrix,
    laplacian: CsrMatrix,
    rho: f64,
}

/// Fine → coarse vertex map between consecutive resolutions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolingMap {
    parent_of: Vec<usize>,
    n_coarse: usize,
}

fn check_nside(nside: usize) -> Result<()> {
    if nside == 0 || !nside.is_power_of_two() {
        return Err(Error::invalid(format!("nside must be a positive power of two, got {nside}")));
    }
    if nside > MAX_NSIDE {
        return Err(Error::invalid(format!("nside {nside} exceeds the supported maximum {MAX_NSIDE}")));
    }
    Ok(())
}

impl SphericalGrid {
    pub fn new(nside: usize) -> Result<Self> {
        check_nside(nside)?;
        let n = healpix::npix(nside);
        let vertices: Vec<_> = (0..n).map(|p| healpix::pixel_center(p, nside)).collect();
        let nbrs: Vec<Vec<usize>> = (0..n).map(|p| healpix::neighbours(p, nside)).collect();

        let mut total = 0.0;
        let mut pairs = 0usize;
        for (i, list) in nbrs.iter().enumerate() {
            for &j in list.iter().filter(|&&j| j > i) {
                total += (vertices[i] - vertices[j]).norm();
                pairs += 1;
            }
        }
        let rho = total / pairs as f64;
        let rho2 = rho * rho;

        let adj_rows: Vec<Vec<(usize, f64)>> = nbrs
            .iter()
            .enumerate()
            .map(|(i, list)| {
                list.iter()
                    .map(|&j| (j, (-(vertices[i] - vertices[j]).norm_squared() / rho2).exp()))
                    .collect()
            })
            .collect();
        let lap_rows: Vec<Vec<(usize, f64)>> = adj_rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let degree: f64 = row.iter().map(|&(_, w)| w).sum();
                let mut r: Vec<(usize, f64)> = row.iter().map(|&(j, w)| (j, -w)).collect();
                r.push((i, degree));
                r
            })
            .collect();

        Ok(SphericalGrid {
            nside,
            vertices,
            adjacency: CsrMatrix::from_rows(n, adj_rows),
            laplacian: CsrMatrix::from_rows(n, lap_rows),
            rho,
        })
    }

    pub fn nside(&self) -> usize {
        self.nside
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    pub fn laplacian(&self) -> &CsrMatrix {
        &self.laplacian
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn neighbours(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency.row(i).map(|(j, _)| j)
    }

    /// Power-iteration estimate of the largest Laplacian eigenvalue.
    ///
    /// The start vector alternates sign with the NESTED index so it is
    /// orthogonal-ish to the constant null vector; the estimate is a
    /// deterministic function of `nside`.
    pub fn lambda_max_estimate(&self) -> f64 {
        let n = self.len();
        let mut x: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } + (i % 7) as f64 * 0.1).collect();
        let mut y = vec![0.0; n];
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERATIONS {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter_mut().for_each(|v| *v /= norm);
            self.laplacian.matvec_into(&x, &mut y);
            lambda = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            std::mem::swap(&mut x, &mut y);
        }
        lambda
    }

    /// `(2 / λ_max) L - I`, the spectrum-centred operator used by graph convolutions.
    pub fn scaled_laplacian(&self, lambda_max: f64) -> CsrMatrix {
        self.laplacian.scaled_shifted(2.0 / lambda_max, -1.0)
    }

    /// Permutation `π` with `R_z(k·90°) x_{π(i)} = x_i`.
    ///
    /// `π` is a graph automorphism, so permuting a signal by it commutes with
    /// every operator built from the Laplacian.
    pub fn z_rotation_permutation(&self, quarter_turns: u8) -> Result<Vec<usize>> {
        if quarter_turns > 3 {
            return Err(Error::invalid(format!("quarter_turns must be in 0..=3, got {quarter_turns}")));
        }
        let k = quarter_turns as i64;
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), k as f64 * std::f64::consts::FRAC_PI_2);
        (0..self.len())
            .map(|i| {
                let j = healpix::rotate_quarter_turns(i, self.nside, -k);
                let err = (rot * self.vertices[j] - self.vertices[i]).norm();
                if err < 1e-9 {
                    Ok(j)
                } else {
                    Err(Error::Internal(format!(
                        "no vertex matches rotated vertex {i} (residual {err:.3e})"
                    )))
                }
            })
            .collect()
    }
}

impl PoolingMap {
    pub fn new(fine: &SphericalGrid, coarse: &SphericalGrid) -> Result<Self> {
        if fine.nside() != 2 * coarse.nside() {
            return Err(Error::invalid(format!(
                "pooling needs fine nside = 2 x coarse nside, got {} and {}",
                fine.nside(),
                coarse.nside()
            )));
        }
        Ok(PoolingMap {
            parent_of: (0..fine.len()).map(|i| i / 4).collect(),
            n_coarse: coarse.len(),
        })
    }

    pub fn parent_of(&self) -> &[usize] {
        &self.parent_of
    }

    pub fn n_fine(&self) -> usize {
        self.parent_of.len()
    }

    pub fn n_coarse(&self) -> usize {
        self.n_coarse
    }

    /// Children of coarse vertex `k`, ascending.
    pub fn children(&self, k: usize) -> std::ops::Range<usize> {
        4 * k..4 * k + 4
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;

    #[test]
    fn vertex_counts() {
        assert_eq!(SphericalGrid::new(1).unwrap().len(), 12);
        assert_eq!(SphericalGrid::new(4).unwrap().len(), 192);
    }

    #[test]
    fn rejects_bad_nside() {
        for bad in [0, 3, 6, 128] {
            assert!(matches!(SphericalGrid::new(bad), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn laplacian_rows_sum_to_zero() {
        let g = SphericalGrid::new(4).unwrap();
        for i in 0..g.len() {
            assert!(g.laplacian().row_sum(i).abs() < 1e-12);
        }
        assert!(g.laplacian().is_symmetric(0.0));
        assert!(g.adjacency().is_symmetric(0.0));
    }

    #[test]
    fn neighbour_counts_are_seven_or_eight() {
        for nside in [2, 4, 8] {
            let g = SphericalGrid::new(nside).unwrap();
            let counts: Vec<usize> = (0..g.len()).map(|i| g.neighbours(i).count()).collect();
            assert!(counts.iter().all(|&c| c == 7 || c == 8));
            assert_eq!(counts.iter().filter(|&&c| c == 7).count(), 24);
            for i in 0..g.len() {
                assert_eq!(g.adjacency().get(i, i), 0.0);
            }
        }
    }

    #[test]
    fn weights_in_unit_interval() {
        let g = SphericalGrid::new(8).unwrap();
        assert!(g.rho() > 0.0);
        for i in 0..g.len() {
            for (_, w) in g.adjacency().row(i) {
                assert!(w > 0.0 && w <= 1.0);
            }
        }
    }

    #[test]
    fn laplacian_spectrum_nside2() {
        let g = SphericalGrid::new(2).unwrap();
        let eig = SymmetricEigen::new(g.laplacian().to_dense());
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(ev[0].abs() < 1e-10);
        assert!(ev[1..].iter().all(|&v| v > 1e-6));
        let lmax = g.lambda_max_estimate();
        assert!(lmax > 0.5 * ev[47] && lmax <= ev[47] + 1e-9);
    }

    #[test]
    fn pooling_nests_by_index() {
        let (g1, g2, g4) = (
            SphericalGrid::new(1).unwrap(),
            SphericalGrid::new(2).unwrap(),
            SphericalGrid::new(4).unwrap(),
        );
        let p = PoolingMap::new(&g2, &g1).unwrap();
        assert_eq!(&p.parent_of()[0..8], &[0, 0, 0, 0, 1, 1, 1, 1]);
        let p = PoolingMap::new(&g4, &g2).unwrap();
        let mut counts = vec![0; g2.len()];
        p.parent_of().iter().for_each(|&k| counts[k] += 1);
        assert!(counts.iter().all(|&c| c == 4));
        assert!(PoolingMap::new(&g4, &g1).is_err());
    }

    #[test]
    fn rotation_permutations() {
        let g1 = SphericalGrid::new(1).unwrap();
        let id = g1.z_rotation_permutation(0).unwrap();
        assert_eq!(id, (0..12).collect::<Vec<_>>());
        let p = g1.z_rotation_permutation(1).unwrap();
        let mut q: Vec<usize> = (0..12).collect();
        for _ in 0..4 {
            q = q.iter().map(|&i| p[i]).collect();
        }
        assert_eq!(q, (0..12).collect::<Vec<_>>());
        assert_ne!(p, id);
        assert!(g1.z_rotation_permutation(4).is_err());

        let g2 = SphericalGrid::new(2).unwrap();
        for k in 1..4 {
            let p = g2.z_rotation_permutation(k).unwrap();
            for i in 0..g2.len() {
                for j in 0..g2.len() {
                    assert_eq!(g2.adjacency().get(p[i], p[j]), g2.adjacency().get(i, j));
                }
            }
        }
    }
}
