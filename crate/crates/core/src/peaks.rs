//! Fiber peak extraction and voxel-level scores.
//!
//! Peaks are local maxima of the WM fODF over the 8-neighbourhood of a
//! dense Healpix grid, refined by a quadratic fit in the tangent plane,
//! folded onto one hemisphere and thinned by greedy angular suppression.
//! Scores compare peaks with ground-truth fibers inside a 25° cone.

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonics::{DesignMatrix, ShBasis, ShCoeffs};
use crate::signal_model::{axial_angle_deg, FodfField, ResponseSet, Tissue, VoxelTruth};
use crate::sphere_grid::SphericalGrid;

/// Matching cone half-angle.
pub const MATCH_CONE_DEG: f64 = 25.0;

/// Default minimum angle between two reported peaks.
pub const MIN_SEPARATION_DEG: f64 = 15.0;

/// Lower clamp applied to predicted tissue fractions.
pub const FRACTION_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub direction: Vector3<f64>,
    pub amplitude: f64,
}

/// Peaks sorted by descending amplitude.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PeakSet {
    pub peaks: Vec<Peak>,
}

impl PeakSet {
    pub fn len(&self) -> usize {
        self.peaks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peaks.is_empty()
    }

    pub fn directions(&self) -> Vec<Vector3<f64>> {
        self.peaks.iter().map(|p| p.direction).collect()
    }
}

/// Representative of `±u` on the upper hemisphere.
fn fold(u: Vector3<f64>) -> Vector3<f64> {
    let flip = u.z < 0.0 || (u.z == 0.0 && (u.y < 0.0 || (u.y == 0.0 && u.x < 0.0)));
    if flip {
        -u
    } else {
        u
    }
}

fn tangent_basis(p: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if p.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = (helper - p * p.dot(&helper)).normalize();
    (e1, p.cross(&e1))
}

/// Precomputed SH evaluation on a dense grid.
#[derive(Debug, Clone)]
pub struct PeakDetector {
    grid: SphericalGrid,
    basis: ShBasis,
    // L × N
    design: DMatrix<f64>,
    neighbours: Vec<Vec<usize>>,
}

impl PeakDetector {
    pub fn new(grid: SphericalGrid, basis: ShBasis) -> Result<Self> {
        if grid.nside() < 16 {
            return Err(Error::invalid(format!("peak detection needs nside ≥ 16, got {}", grid.nside())));
        }
        let design = DesignMatrix::new(basis, grid.vertices())?.matrix().clone();
        let neighbours = (0..grid.len()).map(|i| grid.neighbours(i).collect()).collect();
        Ok(PeakDetector {
            grid,
            basis,
            design,
            neighbours,
        })
    }

    pub fn grid(&self) -> &SphericalGrid {
        &self.grid
    }

    pub fn basis(&self) -> ShBasis {
        self.basis
    }

    /// fODF values on the grid vertices.
    pub fn values(&self, coeffs: &[f64]) -> Vec<f64> {
        self.design.tr_mul(&DVector::from_column_slice(coeffs)).as_slice().to_vec()
    }

    /// Not below any neighbour (values within `tol` tie, lowest index wins)
    /// and strictly above at least one, so flat regions yield nothing.
    fn is_local_max(&self, f: &[f64], i: usize, tol: f64) -> bool {
        let nb = &self.neighbours[i];
        nb.iter().all(|&j| f[i] > f[j] + tol || ((f[i] - f[j]).abs() <= tol && i < j))
            && nb.iter().any(|&j| f[i] > f[j] + tol)
    }

    /// One Newton step of a least-squares quadratic through the vertex and
    /// its neighbours, in gnomonic tangent coordinates.
    fn refine(&self, f: &[f64], i: usize, coeffs: &ShCoeffs) -> Peak {
        let v = &self.grid.vertices()[i];
        let here = Peak {
            direction: *v,
            amplitude: f[i],
        };
        let (e1, e2) = tangent_basis(v);
        let nb = &self.neighbours[i];
        let mut a = DMatrix::zeros(nb.len() + 1, 6);
        let mut b = DVector::zeros(nb.len() + 1);
        let mut radius: f64 = 0.0;
        for (r, &j) in std::iter::once(&i).chain(nb).enumerate() {
            let q = self.grid.vertices()[j];
            let g = q / q.dot(v) - v;
            let (x, y) = (g.dot(&e1), g.dot(&e2));
            radius = radius.max((x * x + y * y).sqrt());
            a.row_mut(r).copy_from_slice(&[1.0, x, y, x * x, x * y, y * y]);
            b[r] = f[j];
        }
        let Some(c) = a.svd(true, true).solve(&b, 1e-12).ok() else {
            return here;
        };
        let h = nalgebra::Matrix2::new(2.0 * c[3], c[4], c[4], 2.0 * c[5]);
        let Some(step) = h.try_inverse().map(|hi| -(hi * nalgebra::Vector2::new(c[1], c[2]))) else {
            return here;
        };
        if !(step.norm() <= radius) {
            return here;
        }
        let dir = (v + e1 * step.x + e2 * step.y).normalize();
        let amp = coeffs.evaluate(&dir);
        if amp > here.amplitude {
            Peak {
                direction: dir,
                amplitude: amp,
            }
        } else {
            here
        }
    }

    /// Peaks of one fODF. An fODF without positive values yields none.
    pub fn detect(&self, coeffs: &ShCoeffs, rel_threshold: f64, min_separation_deg: f64) -> Result<PeakSet> {
        if coeffs.basis() != self.basis {
            return Err(Error::invalid(format!(
                "fODF of degree {} given to a degree-{} detector",
                coeffs.basis().l_max(),
                self.basis.l_max()
            )));
        }
        if !(0.0..=1.0).contains(&rel_threshold) {
            return Err(Error::invalid(format!("rel_threshold must be in [0, 1], got {rel_threshold}")));
        }
        let f = self.values(coeffs.values());
        let tol = 1e-12 * f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut cands: Vec<Peak> = (0..f.len())
            .filter(|&i| f[i] > 0.0 && self.is_local_max(&f, i, tol))
            .map(|i| self.refine(&f, i, coeffs))
            .map(|p| Peak {
                direction: fold(p.direction),
                amplitude: p.amplitude,
            })
            .collect();
        cands.sort_by(|a, b| b.amplitude.total_cmp(&a.amplitude));
        let Some(top) = cands.first().map(|p| p.amplitude) else {
            return Ok(PeakSet::default());
        };
        let mut kept: Vec<Peak> = Vec::new();
        for p in cands {
            if p.amplitude < rel_threshold * top {
                break;
            }
            if kept
                .iter()
                .all(|k| axial_angle_deg(&k.direction, &p.direction) >= min_separation_deg)
            {
                kept.push(p);
            }
        }
        Ok(PeakSet { peaks: kept })
    }

    /// Peaks of every WM fODF in `field`.
    pub fn detect_field(&self, field: &FodfField, rel_threshold: f64, min_separation_deg: f64) -> Result<Vec<PeakSet>> {
        (0..field.n_voxels())
            .into_par_iter()
            .map(|v| self.detect(&field.wm_coeffs(v), rel_threshold, min_separation_deg))
            .collect()
    }
}

/// Peaks of one fODF on a dense grid of side `nside`.
pub fn detect_peaks(coeffs: &ShCoeffs, nside: usize, rel_threshold: f64, min_separation_deg: f64) -> Result<PeakSet> {
    PeakDetector::new(SphericalGrid::new(nside)?, coeffs.basis())?.detect(coeffs, rel_threshold, min_separation_deg)
}

/// Match of ground truth `gt` to prediction `pred` at `angle_deg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiberMatch {
    pub gt: usize,
    pub pred: usize,
    pub angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelScore {
    pub matched: Vec<FiberMatch>,
    pub n_over: usize,
    pub n_under: usize,
    pub success: bool,
}

fn best_assignment(
    angles: &[Vec<f64>],
    cone: f64,
    g: usize,
    used: &mut Vec<bool>,
    current: &mut Vec<Option<usize>>,
    best: &mut (usize, f64, Vec<Option<usize>>),
) {
    if g == angles.len() {
        let count = current.iter().flatten().count();
        let total: f64 = current
            .iter()
            .enumerate()
            .filter_map(|(gi, p)| p.map(|p| angles[gi][p]))
            .sum();
        if count > best.0 || (count == best.0 && total < best.1) {
            *best = (count, total, current.clone());
        }
        return;
    }
    current.push(None);
    best_assignment(angles, cone, g + 1, used, current, best);
    current.pop();
    for p in 0..used.len() {
        if !used[p] && angles[g][p] <= cone {
            used[p] = true;
            current.push(Some(p));
            best_assignment(angles, cone, g + 1, used, current, best);
            current.pop();
            used[p] = false;
        }
    }
}

/// One-to-one matching inside `cone_deg` with the most pairs, ties broken
/// by the smallest total angle. Angles are axial, `arccos|u·v|`.
pub fn match_fibers(gt: &[Vector3<f64>], pred: &[Vector3<f64>], cone_deg: f64) -> VoxelScore {
    let angles: Vec<Vec<f64>> = gt
        .iter()
        .map(|g| pred.iter().map(|p| axial_angle_deg(g, p)).collect())
        .collect();
    let mut best = (0, f64::INFINITY, vec![None; gt.len()]);
    best_assignment(&angles, cone_deg, 0, &mut vec![false; pred.len()], &mut Vec::new(), &mut best);
    let matched: Vec<FiberMatch> = best
        .2
        .iter()
        .enumerate()
        .filter_map(|(g, p)| {
            p.map(|p| FiberMatch {
                gt: g,
                pred: p,
                angle_deg: angles[g][p],
            })
        })
        .collect();
    let n_under = gt.len() - matched.len();
    let n_over = pred.len() - matched.len();
    VoxelScore {
        success: n_under == 0 && n_over == 0,
        matched,
        n_over,
        n_under,
    }
}

/// Mean voxel scores. `mean_angular_error_deg` averages matched pairs only
/// and is NaN when nothing matched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub n_voxels: usize,
    pub success_rate: f64,
    pub mean_angular_error_deg: f64,
    pub over: f64,
    pub under: f64,
}

pub fn aggregate_scores(scores: &[VoxelScore]) -> Result<ScoreSummary> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty score list"));
    }
    let n = scores.len() as f64;
    let pairs: Vec<f64> = scores.iter().flat_map(|s| s.matched.iter().map(|m| m.angle_deg)).collect();
    Ok(ScoreSummary {
        n_voxels: scores.len(),
        success_rate: scores.iter().filter(|s| s.success).count() as f64 / n,
        mean_angular_error_deg: if pairs.is_empty() {
            f64::NAN
        } else {
            pairs.iter().sum::<f64>() / pairs.len() as f64
        },
        over: scores.iter().map(|s| s.n_over as f64).sum::<f64>() / n,
        under: scores.iter().map(|s| s.n_under as f64).sum::<f64>() / n,
    })
}

/// Scores every voxel's peaks against its ground truth.
pub fn score_peaks(peaks: &[PeakSet], truth: &[VoxelTruth]) -> Result<Vec<VoxelScore>> {
    if peaks.len() != truth.len() {
        return Err(Error::invalid(format!("{} peak sets for {} truth records", peaks.len(), truth.len())));
    }
    Ok(peaks
        .iter()
        .zip(truth)
        .map(|(p, t)| match_fibers(&t.directions, &p.directions(), MATCH_CONE_DEG))
        .collect())
}

/// Relative threshold from `candidates` with the highest success rate on
/// `(field, truth)`; ties keep the smaller threshold.
pub fn select_threshold(
    detector: &PeakDetector,
    field: &FodfField,
    truth: &[VoxelTruth],
    candidates: &[f64],
    min_separation_deg: f64,
) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &t in candidates {
        let peaks = detector.detect_field(field, t, min_separation_deg)?;
        let rate = aggregate_scores(&score_peaks(&peaks, truth)?)?.success_rate;
        if best.map_or(true, |(_, r)| rate > r) {
            best = Some((t, rate));
        }
    }
    best.ok_or_else(|| Error::invalid("no threshold candidates"))
}

/// How predicted tissue fractions are read from an fODF field.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FractionConvention {
    /// `c₀,t · b0_t`: each tissue's share of the unweighted signal.
    #[default]
    Signal,
    /// `c₀,t`: the fODF integral alone.
    FodfIntegral,
}

/// Predicted `(wm, gm, csf)` fractions of voxel `v`, clamped at
/// [`FRACTION_EPS`] and renormalized. Tissues absent from the field get the
/// clamp value.
pub fn predicted_fractions(
    field: &FodfField,
    responses: &ResponseSet,
    v: usize,
    convention: FractionConvention,
) -> Result<[f64; 3]> {
    let mut raw = [0.0; 3];
    for part in field.parts() {
        let scale = match convention {
            FractionConvention::Signal => {
                responses
                    .get(part.tissue)
                    .ok_or_else(|| Error::invalid(format!("no {} response", part.tissue.name())))?
                    .b0_signal
            }
            FractionConvention::FodfIntegral => 1.0,
        };
        raw[part.tissue.index()] = part.row(v)[0] * scale;
    }
    let clamped = raw.map(|x| x.max(FRACTION_EPS));
    let s: f64 = clamped.iter().sum();
    Ok(clamped.map(|x| x / s))
}

/// `Σ p ln(p/q)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// Mean KL divergence of predicted from ground-truth tissue fractions.
pub fn volume_fraction_kl(
    gt: &[[f64; 3]],
    field: &FodfField,
    responses: &ResponseSet,
    convention: FractionConvention,
) -> Result<f64> {
    if gt.len() != field.n_voxels() || gt.is_empty() {
        return Err(Error::invalid(format!("{} fraction records for {} voxels", gt.len(), field.n_voxels())));
    }
    for (i, g) in gt.iter().enumerate() {
        if (g.iter().sum::<f64>() - 1.0).abs() > 1e-9 || g.iter().any(|x| *x < 0.0) {
            return Err(Error::invalid(format!("voxel {i}: ground-truth fractions {g:?} are not a distribution")));
        }
    }
    let mut total = 0.0;
    for (v, g) in gt.iter().enumerate() {
        total += kl_divergence(g, &predicted_fractions(field, responses, v, convention)?);
    }
    Ok(total / gt.len() as f64)
}

/// Tissue list of a fraction triple, for reporting.
pub fn fraction_labels() -> [&'static str; 3] {
    Tissue::ALL.map(Tissue::name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmonics::fit_shc;
    use itertools::Itertools;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lobe_fodf(dirs: &[Vector3<f64>], cap_deg: f64) -> ShCoeffs {
        let grid = SphericalGrid::new(32).unwrap();
        let cos = cap_deg.to_radians().cos();
        let vals: Vec<f64> = grid
            .vertices()
            .iter()
            .map(|p| dirs.iter().filter(|d| p.dot(d).abs() >= cos).count() as f64)
            .collect();
        fit_shc(&vals, grid.vertices(), 20, 1e-8).unwrap()
    }

    /// Direction of the largest value over a dense grid.
    fn dense_argmax(c: &ShCoeffs, region: impl Fn(&Vector3<f64>) -> bool) -> Vector3<f64> {
        let grid = SphericalGrid::new(64).unwrap();
        *grid
            .vertices()
            .iter()
            .filter(|p| region(p))
            .max_by(|a, b| c.evaluate(a).total_cmp(&c.evaluate(b)))
            .unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if v.norm() > 0.1 && v.norm() <= 1.0 {
                return v.normalize();
            }
        }
    }

    #[test]
    fn single_cap_gives_one_peak_near_axis() {
        let c = lobe_fodf(&[Vector3::z()], 5.0);
        let oracle = dense_argmax(&c, |_| true);
        let ps = detect_peaks(&c, 16, 0.1, MIN_SEPARATION_DEG).unwrap();
        assert_eq!(ps.len(), 1);
        assert!(axial_angle_deg(&ps.peaks[0].direction, &oracle) < 1.0);
        assert!(axial_angle_deg(&ps.peaks[0].direction, &Vector3::z()) < 1.0);
        assert!(ps.peaks[0].direction.z >= 0.0);
    }

    #[test]
    fn two_orthogonal_lobes() {
        let a = Vector3::new(1.0, 0.2, 0.1).normalize();
        let b = a.cross(&Vector3::z()).normalize();
        let c = lobe_fodf(&[a, b], 8.0);
        let oa = dense_argmax(&c, |p| p.dot(&a).abs() > 0.9);
        let ob = dense_argmax(&c, |p| p.dot(&b).abs() > 0.9);
        let ps = detect_peaks(&c, 16, 0.1, MIN_SEPARATION_DEG).unwrap();
        assert_eq!(ps.len(), 2);
        let ang = axial_angle_deg(&ps.peaks[0].direction, &ps.peaks[1].direction);
        assert!((ang - 90.0).abs() < 2.0, "{ang}");
        let score = match_fibers(&[oa, ob], &ps.directions(), 2.0);
        assert!(score.success, "{score:?}");
    }

    #[test]
    fn constant_and_zero_fodf() {
        let basis = ShBasis::new(8).unwrap();
        let mut v = vec![0.0; basis.len()];
        v[0] = 1.0;
        let ps = detect_peaks(&ShCoeffs::new(basis, v).unwrap(), 16, 0.5, MIN_SEPARATION_DEG).unwrap();
        assert!(ps.len() <= 1);
        let zero = detect_peaks(&ShCoeffs::zeros(basis), 16, 0.5, MIN_SEPARATION_DEG).unwrap();
        assert!(zero.is_empty());
        assert!(detect_peaks(&ShCoeffs::zeros(basis), 8, 0.5, 15.0).is_err());
    }

    #[test]
    fn peaks_rotate_with_quarter_turns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dirs = [random_unit(&mut rng), random_unit(&mut rng)];
        let det = PeakDetector::new(SphericalGrid::new(16).unwrap(), ShBasis::new(20).unwrap()).unwrap();
        let c = lobe_fodf(&dirs, 10.0);
        let base = det.detect(&c, 0.2, 15.0).unwrap();
        // Rotating the coefficients exactly: refit the rotated function.
        for k in 1..4 {
            let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), k as f64 * std::f64::consts::FRAC_PI_2);
            let grid = SphericalGrid::new(32).unwrap();
            let vals: Vec<f64> = grid.vertices().iter().map(|p| c.evaluate(&(rot.inverse() * p))).collect();
            let rc = fit_shc(&vals, grid.vertices(), 20, 0.0).unwrap();
            let rotated = det.detect(&rc, 0.2, 15.0).unwrap();
            assert_eq!(rotated.len(), base.len());
            for (a, b) in base.peaks.iter().zip(&rotated.peaks) {
                let want = rot * a.direction;
                let err = (want - b.direction).norm().min((want + b.direction).norm());
                assert!(err < 1e-6, "k={k}: {want:?} vs {:?}", b.direction);
            }
        }
    }

    #[test]
    fn match_examples() {
        let z = Vector3::z();
        let tilt = Vector3::new(10f64.to_radians().sin(), 0.0, 10f64.to_radians().cos());
        let s = match_fibers(&[z], &[tilt], MATCH_CONE_DEG);
        assert!(s.success && (s.matched[0].angle_deg - 10.0).abs() < 1e-9);
        let s = match_fibers(&[z], &[z, Vector3::x()], MATCH_CONE_DEG);
        assert_eq!((s.n_over, s.n_under, s.success), (1, 0, false));
        let s = match_fibers(&[z], &[-tilt], MATCH_CONE_DEG);
        assert!(s.success);
        let s = match_fibers(&[z, Vector3::x()], &[], MATCH_CONE_DEG);
        assert_eq!((s.n_under, s.success), (2, false));
    }

    /// Exhaustive oracle: every injective partial map gt → pred.
    fn brute_force(gt: &[Vector3<f64>], pred: &[Vector3<f64>], cone: f64) -> (usize, f64) {
        let mut best = (0usize, 0.0f64);
        let k = gt.len().min(pred.len());
        for r in 0..=k {
            for gsel in (0..gt.len()).combinations(r) {
                for psel in (0..pred.len()).permutations(r) {
                    let angles: Vec<f64> = gsel.iter().zip(&psel).map(|(&g, &p)| axial_angle_deg(&gt[g], &pred[p])).collect();
                    if angles.iter().all(|a| *a <= cone) {
                        let total = angles.iter().sum();
                        if r > best.0 || (r == best.0 && total < best.1) {
                            best = (r, total);
                        }
                    }
                }
            }
        }
        best
    }

    #[test]
    fn matching_agrees_with_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let gt: Vec<_> = (0..rng.gen_range(0..=3)).map(|_| random_unit(&mut rng)).collect();
            let pred: Vec<_> = (0..rng.gen_range(0..=3)).map(|_| random_unit(&mut rng)).collect();
            let s = match_fibers(&gt, &pred, 60.0);
            let (count, total) = brute_force(&gt, &pred, 60.0);
            assert_eq!(s.matched.len(), count);
            let got: f64 = s.matched.iter().map(|m| m.angle_deg).sum();
            assert!((got - total).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregates() {
        let z = Vector3::z();
        let perfect = match_fibers(&[z], &[z], MATCH_CONE_DEG);
        let s = aggregate_scores(&[perfect.clone(), perfect.clone()]).unwrap();
        assert_eq!((s.success_rate, s.mean_angular_error_deg, s.over, s.under), (1.0, 0.0, 0.0, 0.0));
        let missed = match_fibers(&[z, Vector3::x()], &[z], MATCH_CONE_DEG);
        let s = aggregate_scores(&[perfect, missed]).unwrap();
        assert_eq!(s.under, 0.5);
        assert!(s.success_rate <= 0.5);
        assert!(aggregate_scores(&[]).is_err());
    }

    fn field_with(fr: &[[f64; 3]]) -> FodfField {
        let mut f = FodfField::zeros(fr.len(), 8, &Tissue::ALL).unwrap();
        for (v, x) in fr.iter().enumerate() {
            for (t, part) in f.parts_mut().iter_mut().enumerate() {
                part.row_mut(v)[0] = x[t];
            }
        }
        f
    }

    #[test]
    fn kl_examples() {
        let rfs = ResponseSet::new(
            Tissue::ALL
                .iter()
                .map(|&t| crate::signal_model::ResponseFunction {
                    tissue: t,
                    b0_signal: 1.0,
                    shells: vec![],
                })
                .collect(),
        )
        .unwrap();
        let g = [[0.2, 0.3, 0.5]];
        let kl = volume_fraction_kl(&g, &field_with(&g), &rfs, FractionConvention::Signal).unwrap();
        assert!(kl.abs() < 1e-12);
        let kl = volume_fraction_kl(&[[1.0, 0.0, 0.0]], &field_with(&[[0.5, 0.5, 0.0]]), &rfs, FractionConvention::Signal)
            .unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-7, "{kl}");
        assert!(volume_fraction_kl(&[[0.5, 0.4, 0.0]], &field_with(&g), &rfs, FractionConvention::Signal).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kl_nonnegative_and_zero_on_equal(a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0, d in 0.0f64..1.0, e in 0.0f64..1.0, f in 0.0f64..1.0) {
                let n1 = a + b + c + 1e-3;
                let n2 = d + e + f + 1e-3;
                let p = [(a + 1e-3) / n1, b / n1, c / n1];
                let q = [(d + 1e-3) / n2, e / n2, f / n2];
                prop_assert!(kl_divergence(&p, &q.map(|x| x.max(FRACTION_EPS))) >= -1e-12);
                prop_assert!(kl_divergence(&p, &p).abs() < 1e-15);
            }

            #[test]
            fn matching_symmetric_under_flips(seed in 0u64..500, flips in 0u8..64) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let gt: Vec<_> = (0..3).map(|_| random_unit(&mut rng)).collect();
                let pred: Vec<_> = (0..3).map(|_| random_unit(&mut rng)).collect();
                let flip = |v: &Vec<Vector3<f64>>, bits: u8| -> Vec<Vector3<f64>> {
                    v.iter().enumerate().map(|(i, u)| if bits >> i & 1 == 1 { -u } else { *u }).collect()
                };
                let a = match_fibers(&gt, &pred, MATCH_CONE_DEG);
                let b = match_fibers(&flip(&gt, flips & 7), &flip(&pred, flips >> 3), MATCH_CONE_DEG);
                prop_assert_eq!(a.matched.len(), b.matched.len());
                prop_assert_eq!(a.success, b.success);
                for (x, y) in a.matched.iter().zip(&b.matched) {
                    prop_assert!((x.angle_deg - y.angle_deg).abs() < 1e-9);
                }
            }
        }
    }
}
