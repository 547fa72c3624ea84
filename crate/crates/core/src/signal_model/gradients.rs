//! Gradient direction schemes by antipodal electrostatic repulsion.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{GradientTable, Shell};
use crate::error::{Error, Result};
use crate::rng::substream;

const REPULSION_ITERS: usize = 400;

/// `n` unit directions spread by minimizing `Σ 1/‖xᵢ−xⱼ‖ + 1/‖xᵢ+xⱼ‖`.
///
/// Directions are flipped into the upper hemisphere (`z ≥ 0`). Output is a
/// deterministic function of `(n, seed, stream)`.
pub fn electrostatic_directions(n: usize, seed: u64, stream: u64) -> Result<Vec<Vector3<f64>>> {
    if n == 0 {
        return Err(Error::invalid("gradient count must be positive"));
    }
    let mut rng = substream(seed, "gradients", stream);
    let mut pts: Vec<Vector3<f64>> = (0..n)
        .map(|_| {
            let v = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            v.normalize()
        })
        .collect();
    if n == 1 {
        return Ok(vec![Vector3::z()]);
    }
    let mut step = 0.1 / (n as f64).sqrt();
    let mut energy = repulsion_energy(&pts);
    let mut force = vec![Vector3::zeros(); n];
    for _ in 0..REPULSION_ITERS {
        for (i, f) in force.iter_mut().enumerate() {
            let mut acc = Vector3::zeros();
            for (j, q) in pts.iter().enumerate() {
                if i == j {
                    continue;
                }
                for d in [pts[i] - q, pts[i] + q] {
                    let r2 = d.norm_squared().max(1e-12);
                    acc += d / (r2 * r2.sqrt());
                }
            }
            // Keep only the tangential component.
            *f = acc - pts[i] * acc.dot(&pts[i]);
        }
        let fmax = force.iter().map(|f| f.norm()).fold(0.0, f64::max).max(1e-300);
        let trial: Vec<Vector3<f64>> = pts
            .iter()
            .zip(&force)
            .map(|(p, f)| (p + f * (step / fmax)).normalize())
            .collect();
        let e = repulsion_energy(&trial);
        if e < energy {
            pts = trial;
            energy = e;
            step *= 1.1;
        } else {
            step *= 0.5;
            if step < 1e-10 {
                break;
            }
        }
    }
    Ok(pts.into_iter().map(|p| if p.z < 0.0 { -p } else { p }).collect())
}

fn repulsion_energy(pts: &[Vector3<f64>]) -> f64 {
    let mut e = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            e += 1.0 / (pts[i] - pts[j]).norm().max(1e-12) + 1.0 / (pts[i] + pts[j]).norm().max(1e-12);
        }
    }
    e
}

/// Multi-shell table with an independent electrostatic scheme per shell.
pub fn electrostatic_table(bvals: &[f64], per_shell: usize, b0_count: usize, seed: u64) -> Result<GradientTable> {
    let shells = bvals
        .iter()
        .enumerate()
        .map(|(k, &bval)| {
            Ok(Shell {
                bval,
                directions: electrostatic_directions(per_shell, seed, k as u64)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    GradientTable::new(shells, b0_count)
}
