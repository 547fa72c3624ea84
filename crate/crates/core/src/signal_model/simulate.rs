//! Multi-tensor, multi-tissue signal simulator and dataset generator.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gradients::electrostatic_table;
use super::{GradientTable, ResponseFunction, ResponseSet, Tissue, VoxelBatch, VoxelTruth};
use crate::error::{Error, Result};
use crate::harmonics::FODF_DEGREE;
use crate::rng::substream;

/// Gradient counts per shell accepted by the generator.
pub const ALLOWED_GRADIENT_COUNTS: [usize; 5] = [8, 16, 32, 64, 128];

/// Shell b-values accepted by the generator (s/mm²).
pub const ALLOWED_SHELLS: [f64; 3] = [1000.0, 2000.0, 3000.0];

const MAX_DIRECTION_DRAWS: usize = 10_000;

/// Diffusivities in mm²/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TensorParams {
    pub lambda_par: f64,
    pub lambda_perp: f64,
    pub d_gm: f64,
    pub d_csf: f64,
}

impl Default for TensorParams {
    fn default() -> Self {
        TensorParams {
            lambda_par: 1.7e-3,
            lambda_perp: 0.2e-3,
            d_gm: 0.8e-3,
            d_csf: 3.0e-3,
        }
    }
}

impl TensorParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_par", self.lambda_par),
            ("lambda_perp", self.lambda_perp),
            ("d_gm", self.d_gm),
            ("d_csf", self.d_csf),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("tensor.{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }

    /// Responses of the first `n_tissues` tissues for the given shells.
    pub fn responses(&self, bvals: &[f64], n_tissues: usize) -> Result<ResponseSet> {
        ResponseSet::new(
            Tissue::first(n_tissues)?
                .into_iter()
                .map(|t| ResponseFunction::from_tensor(t, self, bvals, FODF_DEGREE))
                .collect::<Result<Vec<_>>>()?,
        )
    }
}

/// Noiseless signal over the full sample layout of `table` (b0 columns first).
///
/// `S(g; b) = wm·Σ_k v_k·exp(-b·gᵀD_k g) + gm·exp(-b·d_gm) + csf·exp(-b·d_csf)`
/// with `D_k` axially symmetric about fiber `k`.
pub fn simulate_voxel(
    fibers: &[(Vector3<f64>, f64)],
    tissue_fractions: [f64; 3],
    table: &GradientTable,
    params: &TensorParams,
) -> Result<Vec<f64>> {
    if fibers.len() > 3 {
        return Err(Error::invalid(format!("at most 3 fibers are supported, got {}", fibers.len())));
    }
    if tissue_fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
        return Err(Error::invalid(format!("tissue fractions {tissue_fractions:?} out of [0, 1]")));
    }
    let sum: f64 = tissue_fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("tissue fractions sum to {sum}, expected 1")));
    }
    for (u, v) in fibers {
        if !(0.0..=1.0).contains(v) {
            return Err(Error::invalid(format!("fiber fraction {v} out of [0, 1]")));
        }
        if (u.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("fiber direction {u:?} is not unit norm")));
        }
    }
    if tissue_fractions[0] > 0.0 && fibers.is_empty() {
        return Err(Error::invalid("a nonzero WM fraction needs at least one fiber"));
    }
    let [wm, gm, csf] = tissue_fractions;
    let value = |g: &Vector3<f64>, b: f64| {
        let fib: f64 = fibers
            .iter()
            .map(|(u, v)| {
                let c = u.dot(g);
                let adc = params.lambda_perp + (params.lambda_par - params.lambda_perp) * c * c;
                v * (-b * adc).exp()
            })
            .sum();
        wm * fib + gm * (-b * params.d_gm).exp() + csf * (-b * params.d_csf).exp()
    };
    // Each fiber's b=0 contribution is its fraction; with fractions summing
    // to one the WM b0 part is exactly `wm`.
    let fiber_mass: f64 = fibers.iter().map(|(_, v)| v).sum();
    let b0 = wm * fiber_mass + gm + csf;
    let mut out = vec![b0; table.b0_count()];
    for shell in table.shells() {
        out.extend(shell.directions.iter().map(|g| value(g, shell.bval)));
    }
    Ok(out)
}

/// `√((s+ε₁)² + ε₂²)` with `ε₁, ε₂ ~ N(0, σ²)`, drawn from `rng` in sample order.
pub fn add_rician_noise_with(samples: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("noise sigma must be nonnegative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(samples.iter().map(|s| s.abs()).collect());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma checked positive");
    Ok(samples
        .iter()
        .map(|s| {
            let e1 = normal.sample(rng);
            let e2 = normal.sample(rng);
            ((s + e1).powi(2) + e2 * e2).sqrt()
        })
        .collect())
}

/// Rician noise from a seed; deterministic.
pub fn add_rician_noise(samples: &[f64], sigma: f64, seed: u64) -> Result<Vec<f64>> {
    add_rician_noise_with(samples, sigma, &mut substream(seed, "noise", 0))
}

fn default_gradients() -> usize {
    64
}
fn default_b0() -> usize {
    1
}
fn default_snr() -> f64 {
    30.0
}
fn default_split() -> [f64; 3] {
    [70.0, 10.0, 20.0]
}
fn default_probs() -> [f64; 3] {
    [0.3, 0.5, 0.2]
}
fn default_min_angle() -> f64 {
    20.0
}
fn default_tissues() -> usize {
    1
}
fn default_fiber_weight_range() -> [f64; 2] {
    [0.3, 1.0]
}
fn default_n_voxels() -> usize {
    100_000
}

/// Synthetic benchmark configuration. `snr = inf` gives noiseless data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub shells: Vec<f64>,
    #[serde(default = "default_gradients")]
    pub gradients_per_shell: usize,
    #[serde(default = "default_b0")]
    pub b0_count: usize,
    #[serde(default = "default_snr")]
    pub snr: f64,
    #[serde(default = "default_n_voxels")]
    pub n_voxels: usize,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default = "default_probs")]
    pub fiber_count_probs: [f64; 3],
    #[serde(default = "default_min_angle")]
    pub min_crossing_angle_deg: f64,
    #[serde(default = "default_tissues")]
    pub tissues: usize,
    /// Unnormalized fiber weights are drawn uniformly from this range.
    #[serde(default = "default_fiber_weight_range")]
    pub fiber_weight_range: [f64; 2],
    #[serde(default)]
    pub tensor: TensorParams,
    #[serde(default)]
    pub seed: u64,
}

impl SimulationConfig {
    pub fn new(shells: Vec<f64>) -> Self {
        SimulationConfig {
            shells,
            gradients_per_shell: default_gradients(),
            b0_count: default_b0(),
            snr: default_snr(),
            n_voxels: default_n_voxels(),
            split: default_split(),
            fiber_count_probs: default_probs(),
            min_crossing_angle_deg: default_min_angle(),
            tissues: default_tissues(),
            fiber_weight_range: default_fiber_weight_range(),
            tensor: TensorParams::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.shells.is_empty() {
            return cfg("shells must list at least one b-value".into());
        }
        for &b in &self.shells {
            if !ALLOWED_SHELLS.contains(&b) {
                return cfg(format!("shells: b-value {b} not in {ALLOWED_SHELLS:?}"));
            }
        }
        if !ALLOWED_GRADIENT_COUNTS.contains(&self.gradients_per_shell) {
            return cfg(format!(
                "gradients_per_shell: {} not in {ALLOWED_GRADIENT_COUNTS:?}",
                self.gradients_per_shell
            ));
        }
        if !(self.snr > 0.0) {
            return cfg(format!("snr must be positive, got {}", self.snr));
        }
        if self.n_voxels == 0 {
            return cfg("n_voxels must be positive".into());
        }
        if self.split.iter().any(|&w| !(w >= 0.0 && w.is_finite())) || self.split.iter().sum::<f64>() <= 0.0 {
            return cfg(format!("split weights must be nonnegative with a positive sum, got {:?}", self.split));
        }
        let p = self.fiber_count_probs;
        if p.iter().any(|&x| !(x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return cfg(format!("fiber_count_probs must be nonnegative and sum to 1, got {p:?}"));
        }
        if !(0.0..=90.0).contains(&self.min_crossing_angle_deg) {
            return cfg(format!(
                "min_crossing_angle_deg must be in [0, 90], got {}",
                self.min_crossing_angle_deg
            ));
        }
        // Three mutually ≥ 60° apart axes always exist; beyond that sampling may stall.
        if p[2] > 0.0 && self.min_crossing_angle_deg > 60.0 {
            return cfg("min_crossing_angle_deg above 60 cannot host three fibers".into());
        }
        if !(1..=3).contains(&self.tissues) {
            return cfg(format!("tissues must be 1, 2 or 3, got {}", self.tissues));
        }
        let [lo, hi] = self.fiber_weight_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return cfg(format!("fiber_weight_range must satisfy 0 < lo <= hi, got {:?}", self.fiber_weight_range));
        }
        self.tensor.validate()
    }

    pub fn noise_sigma(&self) -> f64 {
        if self.snr.is_infinite() {
            0.0
        } else {
            1.0 / self.snr
        }
    }

    /// Voxel counts of the train/val/test splits.
    pub fn split_counts(&self) -> [usize; 3] {
        let total: f64 = self.split.iter().sum();
        let n = self.n_voxels as f64;
        let train = (n * self.split[0] / total).round() as usize;
        let val = ((n * self.split[1] / total).round() as usize).min(self.n_voxels - train.min(self.n_voxels));
        let train = train.min(self.n_voxels);
        [train, val, self.n_voxels - train - val]
    }

    pub fn gradient_table(&self) -> Result<GradientTable> {
        electrostatic_table(&self.shells, self.gradients_per_shell, self.b0_count, self.seed)
    }
}

/// Generated splits and the exact responses of the generating model.
#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub train: VoxelBatch,
    pub val: VoxelBatch,
    pub test: VoxelBatch,
    pub responses: ResponseSet,
}

fn random_direction(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-8 {
            let u = v / n;
            return if u.z < 0.0 { -u } else { u };
        }
    }
}

/// Axial angle in degrees, `arccos|u·v|`.
pub fn axial_angle_deg(u: &Vector3<f64>, v: &Vector3<f64>) -> f64 {
    u.dot(v).abs().min(1.0).acos().to_degrees()
}

fn sample_truth(cfg: &SimulationConfig, rng: &mut ChaCha8Rng) -> Result<VoxelTruth> {
    let r: f64 = rng.gen();
    let p = cfg.fiber_count_probs;
    let n_fibers = if r < p[0] {
        1
    } else if r < p[0] + p[1] {
        2
    } else {
        3
    };
    let mut directions: Vec<Vector3<f64>> = Vec::with_capacity(n_fibers);
    let mut draws = 0;
    while directions.len() < n_fibers {
        let u = random_direction(rng);
        draws += 1;
        if draws > MAX_DIRECTION_DRAWS {
            return Err(Error::Numerical(format!(
                "could not place {n_fibers} fibers {}° apart",
                cfg.min_crossing_angle_deg
            )));
        }
        if directions.iter().all(|d| axial_angle_deg(d, &u) >= cfg.min_crossing_angle_deg) {
            directions.push(u);
        }
    }
    let [lo, hi] = cfg.fiber_weight_range;
    let weights: Vec<f64> = (0..n_fibers).map(|_| if lo < hi { rng.gen_range(lo..hi) } else { lo }).collect();
    let total: f64 = weights.iter().sum();
    let fractions = weights.iter().map(|w| w / total).collect();
    let tissue_fractions = match cfg.tissues {
        1 => [1.0, 0.0, 0.0],
        2 => {
            let u: f64 = rng.gen();
            [u, 1.0 - u, 0.0]
        }
        _ => {
            let e: Vec<f64> = (0..3).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
            let s: f64 = e.iter().sum();
            let (a, b) = (e[0] / s, e[1] / s);
            [a, b, 1.0 - a - b]
        }
    };
    Ok(VoxelTruth {
        directions,
        fractions,
        tissue_fractions,
    })
}

/// Generates the train/val/test splits. Each voxel draws from its own
/// substream of `seed`, so output does not depend on thread count.
pub fn make_dataset(cfg: &SimulationConfig) -> Result<SimulatedDataset> {
    cfg.validate()?;
    let table = cfg.gradient_table()?;
    let sigma = cfg.noise_sigma();
    let voxels = (0..cfg.n_voxels)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(cfg.seed, "voxel", i as u64);
            let truth = sample_truth(cfg, &mut rng)?;
            let fibers: Vec<(Vector3<f64>, f64)> =
                truth.directions.iter().copied().zip(truth.fractions.iter().copied()).collect();
            let clean = simulate_voxel(&fibers, truth.tissue_fractions, &table, &cfg.tensor)?;
            let noisy = add_rician_noise_with(&clean, sigma, &mut rng)?;
            Ok((noisy, truth))
        })
        .collect::<Result<Vec<_>>>()?;

    let [n_train, n_val, _] = cfg.split_counts();
    let make = |range: std::ops::Range<usize>| {
        let signals = voxels[range.clone()].iter().flat_map(|(s, _)| s.iter().copied()).collect();
        let truth = voxels[range].iter().map(|(_, t)| t.clone()).collect();
        VoxelBatch::new(table.clone(), signals, Some(truth))
    };
    Ok(SimulatedDataset {
        train: make(0..n_train)?,
        val: make(n_train..n_train + n_val)?,
        test: make(n_train + n_val..cfg.n_voxels)?,
        responses: cfg.tensor.responses(&cfg.shells, cfg.tissues)?,
    })
}

#[cfg(test)]
mod tests {
    use super::super::Shell;
    use super::*;

    fn z_table(bval: f64) -> GradientTable {
        GradientTable::new(
            vec![Shell {
                bval,
                directions: vec![Vector3::z(), Vector3::x()],
            }],
            1,
        )
        .unwrap()
    }

    #[test]
    fn b0_is_one_for_unit_fractions() {
        let s = simulate_voxel(
            &[(Vector3::z(), 0.4), (Vector3::x(), 0.6)],
            [0.5, 0.3, 0.2],
            &z_table(1000.0),
            &TensorParams::default(),
        )
        .unwrap();
        assert_eq!(s[0], 1.0);
        let s0 = simulate_voxel(&[(Vector3::z(), 1.0)], [1.0, 0.0, 0.0], &z_table(0.0), &TensorParams::default()).unwrap();
        assert!(s0.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_fiber_along_gradient() {
        let s = simulate_voxel(&[(Vector3::z(), 1.0)], [0.5, 0.5, 0.0], &z_table(3000.0), &TensorParams::default())
            .unwrap();
        let gm = 0.5 * (-3000.0 * 0.8e-3f64).exp();
        assert!((s[1] - (0.5 * (-5.1f64).exp() + gm)).abs() < 1e-15);
        assert!(((-5.1f64).exp() - 0.0061).abs() < 1e-4);
    }

    #[test]
    fn swapping_equal_fibers_is_symmetric() {
        let t = GradientTable::new(
            vec![Shell {
                bval: 3000.0,
                directions: super::super::electrostatic_directions(32, 2, 0).unwrap(),
            }],
            1,
        )
        .unwrap();
        let a = Vector3::new(1.0, 1.0, 0.3).normalize();
        let b = Vector3::new(-1.0, 1.0, 0.0).normalize();
        let b = (b - a * a.dot(&b)).normalize();
        let p = TensorParams::default();
        let s1 = simulate_voxel(&[(a, 0.5), (b, 0.5)], [1.0, 0.0, 0.0], &t, &p).unwrap();
        let s2 = simulate_voxel(&[(b, 0.5), (a, 0.5)], [1.0, 0.0, 0.0], &t, &p).unwrap();
        let diff = s1.iter().zip(&s2).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn rejects_bad_fractions() {
        let t = z_table(1000.0);
        let p = TensorParams::default();
        assert!(simulate_voxel(&[(Vector3::z(), 1.0)], [0.5, 0.3, 0.3], &t, &p).is_err());
        assert!(simulate_voxel(&[(Vector3::z(), 1.5)], [1.0, 0.0, 0.0], &t, &p).is_err());
        assert!(simulate_voxel(&[(Vector3::z(), -0.1)], [1.0, 0.0, 0.0], &t, &p).is_err());
    }

    #[test]
    fn rician_zero_sigma_is_abs() {
        let s = [0.3, -0.2, 0.0];
        assert_eq!(add_rician_noise(&s, 0.0, 1).unwrap(), vec![0.3, 0.2, 0.0]);
        assert!(add_rician_noise(&s, -1.0, 1).is_err());
    }

    #[test]
    fn rician_of_zero_has_rayleigh_mean() {
        let sigma = 0.05;
        let n = 100_000;
        let out = add_rician_noise(&vec![0.0; n], sigma, 42).unwrap();
        let mean = out.iter().sum::<f64>() / n as f64;
        let expected = sigma * (std::f64::consts::PI / 2.0).sqrt();
        assert!((mean / expected - 1.0).abs() < 0.02, "{mean} vs {expected}");
    }

    #[test]
    fn rician_is_deterministic() {
        let s = vec![0.5; 100];
        let a = add_rician_noise(&s, 0.1, 9).unwrap();
        let b = add_rician_noise(&s, 0.1, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, add_rician_noise(&s, 0.1, 10).unwrap());
    }

    fn small_config() -> SimulationConfig {
        let mut c = SimulationConfig::new(vec![3000.0]);
        c.gradients_per_shell = 16;
        c.n_voxels = 100;
        c.seed = 3;
        c
    }

    #[test]
    fn split_sizes() {
        let d = make_dataset(&small_config()).unwrap();
        assert_eq!((d.train.n_voxels(), d.val.n_voxels(), d.test.n_voxels()), (70, 10, 20));
        let mut c = small_config();
        c.n_voxels = 7;
        assert_eq!(c.split_counts().iter().sum::<usize>(), 7);
    }

    #[test]
    fn crossing_angles_respect_minimum() {
        let c = small_config();
        let d = make_dataset(&c).unwrap();
        let mut counts = [0; 3];
        for batch in [&d.train, &d.val, &d.test] {
            for t in batch.truth().unwrap() {
                counts[t.n_fibers() - 1] += 1;
                for i in 0..t.n_fibers() {
                    for j in i + 1..t.n_fibers() {
                        assert!(axial_angle_deg(&t.directions[i], &t.directions[j]) >= c.min_crossing_angle_deg);
                    }
                }
                assert!((t.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = make_dataset(&small_config()).unwrap();
        let b = make_dataset(&small_config()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn three_tissue_fractions_sum_to_one() {
        let mut c = small_config();
        c.tissues = 3;
        c.shells = vec![1000.0, 2000.0, 3000.0];
        let d = make_dataset(&c).unwrap();
        for t in d.train.truth().unwrap() {
            assert!((t.tissue_fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(t.tissue_fractions.iter().all(|&f| f >= 0.0));
        }
        assert_eq!(d.responses.tissues(), Tissue::ALL.to_vec());
    }

    #[test]
    fn config_validation_names_keys() {
        let mut c = small_config();
        c.gradients_per_shell = 10;
        assert!(c.validate().unwrap_err().to_string().contains("gradients_per_shell"));
        let mut c = small_config();
        c.shells = vec![1500.0];
        assert!(c.validate().unwrap_err().to_string().contains("shells"));
        let err = toml::from_str::<SimulationConfig>("n_voxels = 10").unwrap_err();
        assert!(err.to_string().contains("shells"));
        assert!(toml::from_str::<SimulationConfig>("shells = [3000.0]\nsnrr = 3").is_err());
    }
}
