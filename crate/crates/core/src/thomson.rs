//! Spreading class means over the unit sphere by minimizing the Thomson energy
//! `Σ_{i≠j} 1 / (1 - μ_i·μ_j)` with projected gradient descent.

use crate::error::{HleError, Result};
use crate::grid::{dot, normalize};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThomsonConfig {
    pub k: usize,
    pub d: usize,
    pub steps: usize,
    pub step_size: f64,
    pub rng_seed: u64,
    /// Floor on the cosine distance in the energy denominator.
    pub epsilon: f64,
}

impl ThomsonConfig {
    pub fn new(k: usize, d: usize) -> Self {
        Self { k, d, steps: 2000, step_size: 0.05, rng_seed: 0, epsilon: 1e-6 }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d < 2 {
            return Err(HleError::InvalidConfig(format!("thomson needs k >= 1 and d >= 2, got k={} d={}", self.k, self.d)));
        }
        if !(self.step_size > 0.0) || !(self.epsilon > 0.0) {
            return Err(HleError::InvalidConfig("thomson step size and epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Energy over ordered pairs. Fails on (numerically) coincident points.
pub fn thomson_energy(points: &[Vec<f64>]) -> Result<f64> {
    let eps = 1e-6;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if 1.0 - dot(&points[i], &points[j]) < eps {
                return Err(HleError::CoincidentPoints(i, j));
            }
        }
    }
    Ok(clamped_energy(points, eps))
}

fn clamped_energy(points: &[Vec<f64>], eps: f64) -> f64 {
    let mut e = 0.0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            e += 2.0 / (1.0 - dot(&points[i], &points[j])).max(eps);
        }
    }
    e
}

/// Euclidean gradient of the clamped energy with respect to each point.
fn gradient(points: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>> {
    let d = points.first().map_or(0, |p| p.len());
    let mut g = vec![vec![0.0; d]; points.len()];
    for i in 0..points.len() {
        for j in 0..points.len() {
            if i == j {
                continue;
            }
            let dc = 1.0 - dot(&points[i], &points[j]);
            if dc <= eps {
                continue;
            }
            let c = 2.0 / (dc * dc);
            g[i].iter_mut().zip(&points[j]).for_each(|(a, b)| *a += c * b);
        }
    }
    g
}

/// Random start plus projected gradient descent with backtracking.
/// Returns the points and the energy after every accepted step (the first
/// entry is the starting energy).
pub fn thomson_run(cfg: &ThomsonConfig) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.rng_seed);
    let mut points: Vec<Vec<f64>> = (0..cfg.k).map(|_| rng.unit_vector(cfg.d)).collect();
    let mut energy = clamped_energy(&points, cfg.epsilon);
    let mut trace = vec![energy];
    if cfg.k < 2 {
        return Ok((points, trace));
    }
    let mut eta = cfg.step_size;
    for _ in 0..cfg.steps {
        let grad = gradient(&points, cfg.epsilon);
        let tangent: Vec<Vec<f64>> = points
            .iter()
            .zip(&grad)
            .map(|(p, g)| {
                let r = dot(g, p);
                g.iter().zip(p).map(|(gi, pi)| gi - r * pi).collect()
            })
            .collect();
        let scale = tangent.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if scale < 1e-14 {
            break;
        }
        let mut accepted = false;
        while eta > 1e-16 {
            let trial: Vec<Vec<f64>> = points
                .iter()
                .zip(&tangent)
                .map(|(p, t)| {
                    let mut q: Vec<f64> = p.iter().zip(t).map(|(a, b)| a - eta * b / scale).collect();
                    normalize(&mut q);
                    q
                })
                .collect();
            let e = clamped_energy(&trial, cfg.epsilon);
            if e <= energy {
                points = trial;
                energy = e;
                trace.push(e);
                accepted = true;
                eta *= 1.5;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok((points, trace))
}

pub fn thomson_init(cfg: &ThomsonConfig) -> Result<Vec<Vec<f64>>> {
    Ok(thomson_run(cfg)?.0)
}

/// Largest and smallest pairwise dot products.
pub fn dot_range(points: &[Vec<f64>]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let v = dot(&points[i], &points[j]);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}
