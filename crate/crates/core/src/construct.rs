//! Fields built directly from ground truth, for decoder and metric oracles.
//!
//! Class means come from the Thomson initializer. Stuff pixels sit on their
//! class mean. Each instance gets its own direction `v`, orthogonal to every
//! class mean and to the other instance directions, and its pixels sit at
//! `normalize(mu_k + offset * v)`. Seeds fall off from the instance pixel
//! nearest the centroid and are zero elsewhere.

use crate::embed::{PixelFields, SemanticState};
use crate::error::{HleError, Result};
use crate::grid::{dot, extract_instances, normalize, position, ClassCatalog, FieldGrid, InstanceMap, LabelMap, VOID_CLASS};
use crate::thomson::{thomson_init, ThomsonConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstructConfig {
    pub dim: usize,
    pub offset: f64,
    pub sigma: f64,
    pub sigma_spatial: f64,
    pub sigma_sem: f64,
    /// Width of the seed bump, in normalized image units.
    pub seed_width: f64,
    pub rng_seed: u64,
}

impl Default for ConstructConfig {
    fn default() -> Self {
        Self { dim: 12, offset: 0.4, sigma: 0.1, sigma_spatial: 1.0, sigma_sem: 0.5, seed_width: 0.25, rng_seed: 0 }
    }
}

/// Gram-Schmidt step (two passes); returns the normalized residual unless it vanishes.
fn residual(v: &[f64], basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    let mut v = v.to_vec();
    for _ in 0..2 {
        for b in basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
    }
    if dot(&v, &v) < 1e-20 {
        return None;
    }
    normalize(&mut v);
    Some(v)
}

/// Orthonormal directions orthogonal to the span of `means`, drawn from the standard basis.
fn free_directions(means: &[Vec<f64>], dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for m in means {
        if let Some(v) = residual(m, &basis) {
            basis.push(v);
        }
    }
    let mut out = Vec::new();
    for j in 0..dim {
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        if let Some(v) = residual(&e, &basis) {
            basis.push(v.clone());
            out.push(v);
        }
    }
    out
}

pub fn construct_fields(
    labels: &LabelMap,
    instances: &InstanceMap,
    catalog: &ClassCatalog,
    cfg: &ConstructConfig,
) -> Result<(PixelFields, SemanticState)> {
    let (h, w, d) = (labels.height, labels.width, cfg.dim);
    let k = catalog.len();
    let means = thomson_init(&ThomsonConfig { rng_seed: cfg.rng_seed, ..ThomsonConfig::new(k, d) })?;
    let state = SemanticState::from_means(&means, cfg.sigma_sem)?;
    let insts = extract_instances(labels, instances)?;
    let dirs = free_directions(&means, d);
    // each direction serves two instances, once per sign
    if insts.len() > 2 * dirs.len() {
        return Err(HleError::InvalidConfig(format!(
            "{} instances need more than {} free embedding directions; raise dim",
            insts.len(),
            dirs.len()
        )));
    }

    let mut e = FieldGrid::filled(h, w, d, 0.0);
    let mut seed = FieldGrid::filled(h, w, 1, 0.0);
    for p in 0..h * w {
        let c = labels.data[p];
        let k = if c == VOID_CLASS { 0 } else { c as usize };
        e.pixel_mut(p).copy_from_slice(&means[k]);
    }
    for (l, inst) in insts.iter().enumerate() {
        let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
        let v = &dirs[l / 2];
        let mu = &means[inst.class_id as usize];
        let mut x: Vec<f64> = mu.iter().zip(v).map(|(m, v)| m + sign * cfg.offset * v).collect();
        normalize(&mut x);

        let n = inst.pixels.len() as f64;
        let (mut cr, mut cc) = (0.0, 0.0);
        for &p in &inst.pixels {
            let r = position(p, h, w);
            cr += r[0];
            cc += r[1];
        }
        let centroid = [cr / n, cc / n];
        let d2 = |p: usize| {
            let r = position(p, h, w);
            (r[0] - centroid[0]).powi(2) + (r[1] - centroid[1]).powi(2)
        };
        let center = inst.pixels.iter().copied().min_by(|&a, &b| d2(a).total_cmp(&d2(b))).unwrap_or(0);
        let rc = position(center, h, w);
        for &p in &inst.pixels {
            e.pixel_mut(p).copy_from_slice(&x);
            let rp = position(p, h, w);
            let dist2 = (rp[0] - rc[0]).powi(2) + (rp[1] - rc[1]).powi(2);
            seed.data[p] = (-dist2 / (2.0 * cfg.seed_width * cfg.seed_width)).exp();
        }
    }
    let fields = PixelFields::new(
        e,
        FieldGrid::filled(h, w, 1, cfg.sigma),
        FieldGrid::filled(h, w, 1, cfg.sigma_spatial),
        seed,
    )?;
    Ok((fields, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbeddingLayout;
    use crate::synth::{generate, standard_catalog, suite_scene};

    #[test]
    fn directions_are_orthonormal_and_free() {
        let means = thomson_init(&ThomsonConfig::new(5, 12)).unwrap();
        let dirs = free_directions(&means, 12);
        // five near-simplex vertices span four or five dimensions
        assert!(dirs.len() == 7 || dirs.len() == 8, "{}", dirs.len());
        for (i, a) in dirs.iter().enumerate() {
            assert!(means.iter().all(|m| dot(a, m).abs() < 1e-9));
            for (j, b) in dirs.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(a, b) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constructed_fields_are_valid() {
        let cat = standard_catalog();
        let scene = generate(&suite_scene("small").unwrap(), &cat).unwrap();
        let (f, s) = construct_fields(&scene.labels, &scene.instances, &cat, &ConstructConfig::default()).unwrap();
        f.validate(EmbeddingLayout::Joint).unwrap();
        assert_eq!(s.num_classes(), cat.len());
        assert!(f.seed.data.iter().zip(&scene.instances.data).all(|(&s, &i)| (i == 0) == (s == 0.0)));
    }

    #[test]
    fn too_few_directions_is_an_error() {
        let cat = standard_catalog();
        let scene = generate(&suite_scene("dense").unwrap(), &cat).unwrap();
        let cfg = ConstructConfig { dim: 9, ..Default::default() };
        assert!(construct_fields(&scene.labels, &scene.instances, &cat, &cfg).is_err());
    }
}
