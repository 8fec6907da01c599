//! Central finite-difference checks of every analytic gradient.
//!
//! Each check draws random inputs, rejects points that sit within `tie_gap`
//! of a kink of the piecewise-smooth losses (ties in the Lovász sort order,
//! zero crossings of an L1 coordinate or of a hinge), and compares every
//! checked coordinate of the analytic gradient against
//! `(f(x + h) - f(x - h)) / 2h`.

use crate::embed::{
    ae_group_loss, ins_var_loss, instance_loss, instance_stats, phi_kernel, psi_scores, seed_loss, seg_mean_loss, semantic_loss, EmbeddingLayout,
    InstanceSupport, PixelFields, SemanticState, Targets,
};
use crate::error::{HleError, Result};
use crate::grid::{ClassCatalog, ClassKind, FieldGrid, InstanceMap, LabelMap, VOID_CLASS};
use crate::lovasz::{lovasz_binary, lovasz_softmax, ClassAveraging};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTerm {
    LovaszBinary,
    LovaszSoftmax,
    Semantic,
    SegMean,
    Instance,
    InsVar,
    Seed,
    AeBaseline,
}

impl GradTerm {
    pub const ALL: [GradTerm; 8] = [
        GradTerm::LovaszBinary,
        GradTerm::LovaszSoftmax,
        GradTerm::Semantic,
        GradTerm::SegMean,
        GradTerm::Instance,
        GradTerm::InsVar,
        GradTerm::Seed,
        GradTerm::AeBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTerm::LovaszBinary => "lovasz_binary",
            GradTerm::LovaszSoftmax => "lovasz_softmax",
            GradTerm::Semantic => "seg",
            GradTerm::SegMean => "seg_mean",
            GradTerm::Instance => "ins",
            GradTerm::InsVar => "ins_var",
            GradTerm::Seed => "seed",
            GradTerm::AeBaseline => "ae",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| HleError::InvalidConfig(format!("unknown loss term {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub points: usize,
    pub h: f64,
    pub seed: u64,
    /// Minimum distance to a kink for a point to be accepted.
    pub tie_gap: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { points: 100, h: 1e-5, seed: 0, tie_gap: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TermReport {
    pub term: GradTerm,
    pub points: usize,
    pub coordinates: usize,
    pub rejected: usize,
    pub max_rel_error: f64,
}

/// Per-coordinate relative error `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// A flat parameter vector, the loss as a function of it, and the analytic gradient.
struct Problem {
    x: Vec<f64>,
    f: Box<dyn Fn(&[f64]) -> f64>,
    grad: Vec<f64>,
}

pub fn check_term(term: GradTerm, cfg: &GradCheckConfig) -> Result<TermReport> {
    let mut rng = SeededRng::new(cfg.seed ^ (term as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut report = TermReport { term, points: 0, coordinates: 0, rejected: 0, max_rel_error: 0.0 };
    while report.points < cfg.points {
        if report.rejected > 1000 * cfg.points.max(1) {
            return Err(HleError::InvalidConfig(format!("could not draw tie-free points for {}", term.name())));
        }
        let Some(problem) = draw(term, &mut rng, cfg.tie_gap)? else {
            report.rejected += 1;
            continue;
        };
        let mut x = problem.x.clone();
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + cfg.h;
            let plus = (problem.f)(&x);
            x[i] = orig - cfg.h;
            let minus = (problem.f)(&x);
            x[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            report.max_rel_error = report.max_rel_error.max(relative_error(problem.grad[i], numeric));
        }
        report.coordinates += x.len();
        report.points += 1;
    }
    Ok(report)
}

fn min_gap(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

fn binary_errors(p: &[f64], t: &[bool]) -> Vec<f64> {
    p.iter().zip(t).map(|(&p, &t)| if t { 1.0 - p } else { p }).collect()
}

/// A small random scene: 4x5 pixels, one stuff and two thing classes, a few
/// instances, some crowd and void pixels.
pub fn random_scene(rng: &mut SeededRng) -> Result<(PixelFields, SemanticState, Targets)> {
    let (h, w, d) = (4, 5, 3);
    let catalog = ClassCatalog::from_kinds([
        ("ground", ClassKind::Stuff),
        ("car", ClassKind::Thing),
        ("person", ClassKind::Thing),
    ])?;
    let mut labels = LabelMap::filled(h, w, 0);
    let mut inst = InstanceMap::zeros(h, w);
    for p in 0..h * w {
        let u = rng.uniform();
        let c = if u < 0.05 { VOID_CLASS } else { rng.int_inclusive(0, 2) };
        labels.data[p] = c;
        if c == 1 || c == 2 {
            let crowd = rng.uniform() < 0.1;
            inst.data[p] = if crowd { 0 } else { 2 * c - 1 + rng.int_inclusive(0, 1) };
        }
    }
    let targets = Targets::new(&labels, &inst, &catalog)?;
    let mut e = FieldGrid::filled(h, w, d, 0.0);
    for p in 0..h * w {
        e.pixel_mut(p).copy_from_slice(&rng.unit_vector(d));
    }
    let mut grid = |lo: f64, hi: f64| {
        let mut g = FieldGrid::filled(h, w, 1, 0.0);
        g.data.iter_mut().for_each(|v| *v = rng.range(lo, hi));
        g
    };
    let sigma = grid(0.4, 1.0);
    let sigma_spatial = grid(0.2, 0.8);
    let seed = grid(0.0, 1.0);
    let fields = PixelFields::new(e, sigma, sigma_spatial, seed)?;
    let means: Vec<Vec<f64>> = (0..3).map(|_| rng.unit_vector(d)).collect();
    let mut state = SemanticState::from_means(&means, 1.0)?;
    state.sigma_sem.iter_mut().for_each(|s| *s = rng.range(0.4, 1.0));
    Ok((fields, state, targets))
}

fn semantic_tie_gap(fields: &PixelFields, state: &SemanticState, targets: &Targets) -> f64 {
    let labeled: Vec<usize> = (0..fields.pixels()).filter(|&p| targets.labels.data[p] != VOID_CLASS).collect();
    let psi: Vec<Vec<f64>> = labeled.iter().map(|&p| psi_scores(fields.embedding.pixel(p), state)).collect();
    (0..state.num_classes())
        .map(|c| {
            let mut xi: Vec<f64> = labeled
                .iter()
                .zip(&psi)
                .map(|(&p, s)| if targets.labels.data[p] == c as u32 { 1.0 - s[c] } else { s[c] })
                .collect();
            min_gap(&mut xi)
        })
        .fold(f64::INFINITY, f64::min)
}

fn instance_tie_gap(fields: &PixelFields, targets: &Targets) -> f64 {
    let range = 0..fields.dim();
    let mut gap = f64::INFINITY;
    for (k, inst) in targets.instances.iter().enumerate() {
        let st = instance_stats(fields, inst, &range);
        let mut xi: Vec<f64> = targets
            .instance_support
            .iter()
            .map(|&p| {
                let phi = phi_kernel(fields.embedding.pixel(p), fields.position(p), &st.mu, st.rho, st.sigma, st.sigma_spatial)
                    .unwrap_or(0.0);
                if targets.instance_of[p] == Some(k) {
                    1.0 - phi
                } else {
                    phi
                }
            })
            .collect();
        gap = gap.min(min_gap(&mut xi));
    }
    gap
}

fn with_embedding(fields: &PixelFields, x: &[f64]) -> PixelFields {
    let mut f = fields.clone();
    f.embedding.data.copy_from_slice(x);
    f
}

fn draw(term: GradTerm, rng: &mut SeededRng, tie_gap: f64) -> Result<Option<Problem>> {
    match term {
        GradTerm::LovaszBinary => {
            let n = rng.int_inclusive(2, 12) as usize;
            let p: Vec<f64> = (0..n).map(|_| rng.range(0.02, 0.98)).collect();
            let t: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.5).collect();
            if min_gap(&mut binary_errors(&p, &t)) < tie_gap {
                return Ok(None);
            }
            let grad = lovasz_binary(&p, &t)?.1;
            Ok(Some(Problem { x: p, grad, f: Box::new(move |x| lovasz_binary(x, &t).map_or(f64::NAN, |r| r.0)) }))
        }
        GradTerm::LovaszSoftmax => {
            let n = rng.int_inclusive(2, 10) as usize;
            let c = rng.int_inclusive(2, 4) as usize;
            let mut probs = Vec::with_capacity(n * c);
            for _ in 0..n {
                let row: Vec<f64> = (0..c).map(|_| rng.range(0.05, 1.0)).collect();
                let s: f64 = row.iter().sum();
                probs.extend(row.iter().map(|v| v / s));
            }
            let labels: Vec<u32> =
                (0..n).map(|_| if rng.uniform() < 0.1 { VOID_CLASS } else { rng.int_inclusive(0, c as u32 - 1) }).collect();
            for k in 0..c {
                let mut xi: Vec<f64> = (0..n)
                    .filter(|&i| labels[i] != VOID_CLASS)
                    .map(|i| if labels[i] == k as u32 { 1.0 - probs[i * c + k] } else { probs[i * c + k] })
                    .collect();
                if min_gap(&mut xi) < tie_gap {
                    return Ok(None);
                }
            }
            let grad = lovasz_softmax(&probs, &labels, c, ClassAveraging::All)?.1;
            Ok(Some(Problem {
                x: probs,
                grad,
                f: Box::new(move |x| lovasz_softmax(x, &labels, c, ClassAveraging::All).map_or(f64::NAN, |r| r.0)),
            }))
        }
        GradTerm::Semantic => {
            let (fields, state, targets) = random_scene(rng)?;
            if semantic_tie_gap(&fields, &state, &targets) < tie_gap {
                return Ok(None);
            }
            let out = semantic_loss(&fields, &targets, &state, ClassAveraging::All)?;
            let ne = fields.embedding.data.len();
            let mut x = fields.embedding.data.clone();
            x.extend_from_slice(&state.sigma_sem);
            let mut grad = out.grad_embedding;
            grad.extend_from_slice(&out.grad_sigma_sem);
            Ok(Some(Problem {
                x,
                grad,
                f: Box::new(move |x| {
                    let f = with_embedding(&fields, &x[..ne]);
                    let mut s = state.clone();
                    s.sigma_sem.copy_from_slice(&x[ne..]);
                    semantic_loss(&f, &targets, &s, ClassAveraging::All).map_or(f64::NAN, |o| o.loss)
                }),
            }))
        }
        GradTerm::SegMean => {
            let (fields, state, targets) = random_scene(rng)?;
            let (_, grad, _) = seg_mean_loss(&fields, &targets, &state)?;
            Ok(Some(Problem {
                x: state.mu_hat.clone(),
                grad,
                f: Box::new(move |x| {
                    // raw coordinates: bypass the unit-row constructor check
                    let mut s = state.clone();
                    s.mu_hat.copy_from_slice(x);
                    seg_mean_loss(&fields, &targets, &s).map_or(f64::NAN, |r| r.0)
                }),
            }))
        }
        GradTerm::Instance => {
            let (fields, _, targets) = random_scene(rng)?;
            if targets.instances.is_empty() || instance_tie_gap(&fields, &targets) < tie_gap {
                return Ok(None);
            }
            let out = instance_loss(&fields, &targets, EmbeddingLayout::Joint, InstanceSupport::Image);
            let (ne, n) = (fields.embedding.data.len(), fields.pixels());
            let x = [fields.embedding.data.clone(), fields.sigma.data.clone(), fields.sigma_spatial.data.clone()].concat();
            let grad = [out.grad_embedding, out.grad_sigma, out.grad_sigma_spatial].concat();
            Ok(Some(Problem {
                x,
                grad,
                f: Box::new(move |x| {
                    let mut f = with_embedding(&fields, &x[..ne]);
                    f.sigma.data.copy_from_slice(&x[ne..ne + n]);
                    f.sigma_spatial.data.copy_from_slice(&x[ne + n..]);
                    instance_loss(&f, &targets, EmbeddingLayout::Joint, InstanceSupport::Image).loss
                }),
            }))
        }
        GradTerm::InsVar => {
            let (fields, _, targets) = random_scene(rng)?;
            let n = fields.pixels();
            let (_, gs, gss) = ins_var_loss(&fields, &targets, crate::embed::DEFAULT_GAMMA);
            Ok(Some(Problem {
                x: [fields.sigma.data.clone(), fields.sigma_spatial.data.clone()].concat(),
                grad: [gs, gss].concat(),
                f: Box::new(move |x| {
                    let mut f = fields.clone();
                    f.sigma.data.copy_from_slice(&x[..n]);
                    f.sigma_spatial.data.copy_from_slice(&x[n..]);
                    ins_var_loss(&f, &targets, crate::embed::DEFAULT_GAMMA).0
                }),
            }))
        }
        GradTerm::Seed => {
            let (fields, _, targets) = random_scene(rng)?;
            let (_, grad, _) = seed_loss(&fields, &targets, EmbeddingLayout::Joint);
            Ok(Some(Problem {
                x: fields.seed.data.clone(),
                grad,
                f: Box::new(move |x| {
                    let mut f = fields.clone();
                    f.seed.data.copy_from_slice(x);
                    seed_loss(&f, &targets, EmbeddingLayout::Joint).0
                }),
            }))
        }
        GradTerm::AeBaseline => {
            let (fields, _, targets) = random_scene(rng)?;
            let groups: Vec<Vec<usize>> = targets.instances.iter().map(|i| i.pixels.clone()).collect();
            let (dp, dq) = (0.3, 1.5);
            if !ae_kink_free(&fields.embedding, &groups, dp, dq, tie_gap) {
                return Ok(None);
            }
            let refs: Vec<&[usize]> = groups.iter().map(|g| g.as_slice()).collect();
            let d = fields.dim();
            let grad = ae_group_loss(&fields.embedding, 0..d, &refs, dp, dq).grad;
            let embedding = fields.embedding.clone();
            Ok(Some(Problem {
                x: fields.embedding.data.clone(),
                grad,
                f: Box::new(move |x| {
                    let mut e = embedding.clone();
                    e.data.copy_from_slice(x);
                    let refs: Vec<&[usize]> = groups.iter().map(|g| g.as_slice()).collect();
                    ae_group_loss(&e, 0..d, &refs, dp, dq).loss()
                }),
            }))
        }
    }
}

fn ae_kink_free(e: &FieldGrid, groups: &[Vec<usize>], dp: f64, dq: f64, gap: f64) -> bool {
    let means: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut m = vec![0.0; e.channels];
            for &p in g {
                m.iter_mut().zip(e.pixel(p)).for_each(|(a, v)| *a += v / g.len() as f64);
            }
            m
        })
        .collect();
    for (g, m) in groups.iter().zip(&means) {
        for &p in g {
            let diffs: Vec<f64> = m.iter().zip(e.pixel(p)).map(|(a, b)| a - b).collect();
            // single-pixel groups sit exactly on their mean: no pull, no kink crossing
            if g.len() > 1 && (diffs.iter().any(|v| v.abs() < gap) || (diffs.iter().map(|v| v.abs()).sum::<f64>() - dp).abs() < gap) {
                return false;
            }
        }
    }
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            let diffs: Vec<f64> = means[a].iter().zip(&means[b]).map(|(x, y)| x - y).collect();
            if diffs.iter().any(|v| v.abs() < gap) || (diffs.iter().map(|v| v.abs()).sum::<f64>() - dq).abs() < gap {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_term_passes_a_short_check() {
        let cfg = GradCheckConfig { points: 8, seed: 3, ..Default::default() };
        for term in GradTerm::ALL {
            let r = check_term(term, &cfg).unwrap();
            assert!(r.max_rel_error < 1e-4, "{}: {}", term.name(), r.max_rel_error);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relative error of a sign flip is 2
        assert_eq!(relative_error(1.0, -1.0), 2.0);
        assert!(relative_error(1e-9, 2e-9) < 1e-2);
    }

    #[test]
    fn term_names_round_trip() {
        for t in GradTerm::ALL {
            assert_eq!(GradTerm::parse(t.name()).unwrap(), t);
        }
        assert!(GradTerm::parse("nope").is_err());
    }
}
