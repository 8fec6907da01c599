use crate::error::{HleError, Result};
use crate::grid::dot;

use super::SemanticState;

/// Gaussian kernel on cosine distance: `exp(-(1 - e·mu) / (2 sigma^2))`.
pub fn p_kernel(e: &[f64], mu: &[f64], sigma: f64) -> Result<f64> {
    check_bandwidth(sigma)?;
    Ok(p_unchecked(e, mu, sigma))
}

/// Instance kernel: [`p_kernel`] times a spatial Gaussian around `rho_center`.
pub fn phi_kernel(
    e: &[f64],
    rho: [f64; 2],
    mu: &[f64],
    rho_center: [f64; 2],
    sigma: f64,
    sigma_spatial: f64,
) -> Result<f64> {
    check_bandwidth(sigma)?;
    check_bandwidth(sigma_spatial)?;
    Ok(phi_unchecked(e, rho, mu, rho_center, sigma, sigma_spatial))
}

/// Class-membership probabilities: the `p` kernels of all classes, normalized.
pub fn psi_scores(e: &[f64], state: &SemanticState) -> Vec<f64> {
    let mut z = semantic_logits(e, state);
    softmax_in_place(&mut z);
    z
}

/// `log p_k(e) = -(1 - e·mu_k) / (2 sigma_k^2)` for every class.
pub fn semantic_logits(e: &[f64], state: &SemanticState) -> Vec<f64> {
    (0..state.num_classes())
        .map(|k| {
            let s = state.sigma_sem[k];
            -(1.0 - dot(e, state.mean(k))) / (2.0 * s * s)
        })
        .collect()
}

/// Numerically stable softmax; equals `p_k / Σ p_c` for `z_k = log p_k`.
pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

#[inline]
pub(crate) fn p_unchecked(e: &[f64], mu: &[f64], sigma: f64) -> f64 {
    (-(1.0 - dot(e, mu)) / (2.0 * sigma * sigma)).exp()
}

#[inline]
pub(crate) fn sq_dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[inline]
pub(crate) fn phi_unchecked(e: &[f64], rho: [f64; 2], mu: &[f64], rho_center: [f64; 2], sigma: f64, sigma_spatial: f64) -> f64 {
    let d = 1.0 - dot(e, mu);
    let r = sq_dist2(rho, rho_center);
    (-d / (2.0 * sigma * sigma) - r / (2.0 * sigma_spatial * sigma_spatial)).exp()
}

fn check_bandwidth(s: f64) -> Result<()> {
    if s.is_nan() || s <= 0.0 {
        return Err(HleError::NonPositiveBandwidth(s));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn p_examples() {
        let mu = [0.0, 1.0, 0.0];
        assert_eq!(p_kernel(&mu, &mu, 0.3).unwrap(), 1.0);
        let ortho = [1.0, 0.0, 0.0];
        assert!((p_kernel(&ortho, &mu, 0.5f64.sqrt()).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        let anti = [0.0, -1.0, 0.0];
        assert!((p_kernel(&anti, &mu, 1.0).unwrap() - 0.367879441171).abs() < 1e-12);
        assert!(matches!(p_kernel(&mu, &mu, 0.0), Err(HleError::NonPositiveBandwidth(_))));
    }

    #[test]
    fn phi_examples() {
        let e = [0.6, 0.8];
        assert_eq!(phi_kernel(&e, [0.2, 0.3], &e, [0.2, 0.3], 0.4, 0.1).unwrap(), 1.0);
        let ss: f64 = 0.05;
        let off = ss * 2f64.sqrt();
        let v = phi_kernel(&e, [0.5 + off, 0.5], &e, [0.5, 0.5], 0.4, ss).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-14);
        let mu = [0.0, 1.0];
        let p = p_kernel(&e, &mu, 0.7).unwrap();
        let spatial = (-sq_dist2([0.1, 0.9], [0.4, 0.2]) / (2.0 * 0.3 * 0.3)).exp();
        let phi = phi_kernel(&e, [0.1, 0.9], &mu, [0.4, 0.2], 0.7, 0.3).unwrap();
        assert!((phi - p * spatial).abs() < 1e-15);
        assert!(phi_kernel(&e, [0.0; 2], &e, [0.0; 2], 0.4, -1.0).is_err());
    }

    #[test]
    fn psi_examples() {
        // equidistant means -> uniform
        let s = SemanticState::new(3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![0.5; 3]).unwrap();
        let e = [1.0 / 3f64.sqrt(); 3];
        for v in psi_scores(&e, &s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // p values exp(0) and exp(-1)
        let s2 = SemanticState::new(2, vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.5f64.sqrt()]).unwrap();
        let psi = psi_scores(&[1.0, 0.0], &s2);
        assert!((psi[0] - E / (E + 1.0)).abs() < 1e-15);
        assert!((psi[1] - 1.0 / (E + 1.0)).abs() < 1e-15);
        assert!((psi[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn psi_survives_tiny_bandwidths() {
        let s = SemanticState::new(2, vec![1.0, 0.0, 0.0, 1.0], vec![1e-4, 1e-4]).unwrap();
        let psi = psi_scores(&[0.0, -1.0], &s);
        assert!(psi.iter().all(|v| v.is_finite()));
        assert!((psi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use crate::rng::SeededRng;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kernels_in_unit_interval_and_psi_normalized(seed in any::<u64>(), k in 1usize..6) {
                let mut rng = SeededRng::new(seed);
                let d = 4;
                let means: Vec<Vec<f64>> = (0..k).map(|_| rng.unit_vector(d)).collect();
                let sig: Vec<f64> = (0..k).map(|_| rng.range(0.1, 2.0)).collect();
                let state = SemanticState::new(d, means.concat(), sig).unwrap();
                let e = rng.unit_vector(d);
                let psi = psi_scores(&e, &state);
                prop_assert!((psi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let p = p_kernel(&e, state.mean(0), 0.3).unwrap();
                prop_assert!(p > 0.0 && p <= 1.0 + 1e-12);
                let phi = phi_kernel(&e, [rng.uniform(), rng.uniform()], state.mean(0), [0.5, 0.5], 0.3, 0.2).unwrap();
                prop_assert!(phi > 0.0 && phi <= p);
            }
        }
    }
}
