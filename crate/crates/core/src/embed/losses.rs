//! Loss terms and analytic gradients.
//!
//! Gradients are taken with respect to the raw embedding coordinates and the
//! positive bandwidth values. Stop-gradient targets (the seed regression
//! target, the instance-variance mean and the batch class mean) are treated as
//! constants.

use std::ops::Range;

use rayon::prelude::*;

use super::ae::ae_group_loss;
use super::kernels::{phi_unchecked, semantic_logits, softmax_in_place, sq_dist2};
use super::{EmbeddingLayout, Gradients, InstanceSupport, LossConfig, LossReport, Objective, PixelFields, SemanticState, Targets};
use crate::error::{HleError, Result};
use crate::grid::{dot, Instance, VOID_CLASS};
use crate::lovasz::{lovasz_binary_unchecked, lovasz_softmax, ClassAveraging};

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceLossOutput {
    pub loss: f64,
    pub grad_embedding: Vec<f64>,
    pub grad_sigma: Vec<f64>,
    pub grad_sigma_spatial: Vec<f64>,
    pub instances: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticLossOutput {
    pub loss: f64,
    pub grad_embedding: Vec<f64>,
    pub grad_sigma_sem: Vec<f64>,
    pub pixels: usize,
}

/// Mean embedding, centroid and mean bandwidths of one ground-truth instance.
pub(crate) struct InstanceStats {
    pub mu: Vec<f64>,
    pub rho: [f64; 2],
    pub sigma: f64,
    pub sigma_spatial: f64,
}

pub(crate) fn instance_stats(fields: &PixelFields, inst: &Instance, range: &Range<usize>) -> InstanceStats {
    let n = inst.pixels.len() as f64;
    let mut mu = vec![0.0; range.len()];
    let mut rho = [0.0; 2];
    let mut sigma = 0.0;
    let mut sigma_spatial = 0.0;
    for &p in &inst.pixels {
        let e = &fields.embedding.pixel(p)[range.clone()];
        mu.iter_mut().zip(e).for_each(|(m, v)| *m += v);
        let pos = fields.position(p);
        rho[0] += pos[0];
        rho[1] += pos[1];
        sigma += fields.sigma.data[p];
        sigma_spatial += fields.sigma_spatial.data[p];
    }
    mu.iter_mut().for_each(|m| *m /= n);
    InstanceStats { mu, rho: [rho[0] / n, rho[1] / n], sigma: sigma / n, sigma_spatial: sigma_spatial / n }
}

fn support_for(targets: &Targets, inst: &Instance, support: InstanceSupport) -> Vec<usize> {
    match support {
        InstanceSupport::Image => targets.instance_support.clone(),
        InstanceSupport::BoxMargin(m) => {
            let w = targets.width();
            let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
            for &p in &inst.pixels {
                r0 = r0.min(p / w);
                r1 = r1.max(p / w);
                c0 = c0.min(p % w);
                c1 = c1.max(p % w);
            }
            let (r0, c0) = (r0.saturating_sub(m), c0.saturating_sub(m));
            let (r1, c1) = (r1 + m, c1 + m);
            targets
                .instance_support
                .iter()
                .copied()
                .filter(|&p| (r0..=r1).contains(&(p / w)) && (c0..=c1).contains(&(p % w)))
                .collect()
        }
    }
}

/// Lovász hinge on the instance kernel, averaged over instances.
///
/// For each instance the kernel is centred on the instance's mean embedding
/// and centroid, with the member-averaged bandwidths, and scored against
/// membership over the support pixels. Gradients flow through the mean and
/// the averaged bandwidths back to the member pixels.
pub fn instance_loss(
    fields: &PixelFields,
    targets: &Targets,
    layout: EmbeddingLayout,
    support: InstanceSupport,
) -> InstanceLossOutput {
    let n = fields.pixels();
    let d = fields.dim();
    let range = layout.instance_range(d);
    let mut out = InstanceLossOutput {
        loss: 0.0,
        grad_embedding: vec![0.0; n * d],
        grad_sigma: vec![0.0; n],
        grad_sigma_spatial: vec![0.0; n],
        instances: targets.instances.len(),
    };
    if targets.instances.is_empty() {
        return out;
    }

    struct Partial {
        loss: f64,
        // (pixel, dL/de_pixel) for support pixels
        direct: Vec<(usize, Vec<f64>)>,
        grad_mu: Vec<f64>,
        grad_sigma: f64,
        grad_sigma_spatial: f64,
    }

    let partials: Vec<Partial> = targets
        .instances
        .par_iter()
        .enumerate()
        .map(|(k, inst)| {
            let stats = instance_stats(fields, inst, &range);
            let pixels = support_for(targets, inst, support);
            let s2 = stats.sigma * stats.sigma;
            let ss2 = stats.sigma_spatial * stats.sigma_spatial;
            let mut phi = Vec::with_capacity(pixels.len());
            let mut dist = Vec::with_capacity(pixels.len());
            let mut rdist = Vec::with_capacity(pixels.len());
            let mut truth = Vec::with_capacity(pixels.len());
            for &p in &pixels {
                let e = &fields.embedding.pixel(p)[range.clone()];
                let dc = 1.0 - dot(e, &stats.mu);
                let r = sq_dist2(fields.position(p), stats.rho);
                phi.push((-dc / (2.0 * s2) - r / (2.0 * ss2)).exp());
                dist.push(dc);
                rdist.push(r);
                truth.push(targets.instance_of[p] == Some(k));
            }
            let (loss, g) = lovasz_binary_unchecked(&phi, &truth);
            let mut grad_mu = vec![0.0; range.len()];
            let mut grad_sigma = 0.0;
            let mut grad_sigma_spatial = 0.0;
            let mut direct = Vec::with_capacity(pixels.len());
            for (j, &p) in pixels.iter().enumerate() {
                let a = g[j] * phi[j];
                if a == 0.0 {
                    continue;
                }
                let e = &fields.embedding.pixel(p)[range.clone()];
                let c = a / (2.0 * s2);
                direct.push((p, stats.mu.iter().map(|m| c * m).collect()));
                grad_mu.iter_mut().zip(e).for_each(|(gm, v)| *gm += c * v);
                grad_sigma += a * dist[j] / (s2 * stats.sigma);
                grad_sigma_spatial += a * rdist[j] / (ss2 * stats.sigma_spatial);
            }
            Partial { loss, direct, grad_mu, grad_sigma, grad_sigma_spatial }
        })
        .collect();

    let scale = 1.0 / targets.instances.len() as f64;
    for (inst, part) in targets.instances.iter().zip(&partials) {
        out.loss += part.loss;
        for (p, ge) in &part.direct {
            let dst = &mut out.grad_embedding[p * d..(p + 1) * d][range.clone()];
            dst.iter_mut().zip(ge).for_each(|(o, v)| *o += scale * v);
        }
        let share = scale / inst.pixels.len() as f64;
        for &p in &inst.pixels {
            let dst = &mut out.grad_embedding[p * d..(p + 1) * d][range.clone()];
            dst.iter_mut().zip(&part.grad_mu).for_each(|(o, v)| *o += share * v);
            out.grad_sigma[p] += share * part.grad_sigma;
            out.grad_sigma_spatial[p] += share * part.grad_sigma_spatial;
        }
    }
    out.loss *= scale;
    out
}

fn semantic_probs(fields: &PixelFields, state: &SemanticState, range: &Range<usize>) -> Vec<f64> {
    let k = state.num_classes();
    let mut probs = vec![0.0; fields.pixels() * k];
    probs.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let z = semantic_logits(&fields.embedding.pixel(i)[range.clone()], state);
        row.copy_from_slice(&z);
        softmax_in_place(row);
    });
    probs
}

/// Back-propagates `dL/dz` (per pixel and class) into embeddings and class bandwidths.
fn backprop_logits(
    fields: &PixelFields,
    state: &SemanticState,
    range: &Range<usize>,
    dz: &[f64],
    grad_embedding: &mut [f64],
    grad_sigma_sem: &mut [f64],
) {
    let k = state.num_classes();
    let d = fields.dim();
    for i in 0..fields.pixels() {
        let row = &dz[i * k..(i + 1) * k];
        if row.iter().all(|&v| v == 0.0) {
            continue;
        }
        let e = &fields.embedding.pixel(i)[range.clone()];
        let ge = &mut grad_embedding[i * d..(i + 1) * d][range.clone()];
        for c in 0..k {
            let s = state.sigma_sem[c];
            let mu = state.mean(c);
            let coef = row[c] / (2.0 * s * s);
            ge.iter_mut().zip(mu).for_each(|(g, m)| *g += coef * m);
            grad_sigma_sem[c] += row[c] * (1.0 - dot(e, mu)) / (s * s * s);
        }
    }
}

/// Lovász softmax on the class probabilities ψ of all labeled pixels.
/// The persistent means receive no gradient from this term.
pub fn semantic_loss(
    fields: &PixelFields,
    targets: &Targets,
    state: &SemanticState,
    averaging: ClassAveraging,
) -> Result<SemanticLossOutput> {
    let layout = EmbeddingLayout::infer(fields.dim(), state.dim())?;
    let range = layout.semantic_range(fields.dim());
    let k = state.num_classes();
    let probs = semantic_probs(fields, state, &range);
    let (loss, g) = lovasz_softmax(&probs, &targets.labels.data, k, averaging)?;
    let mut dz = vec![0.0; probs.len()];
    for i in 0..fields.pixels() {
        let p = &probs[i * k..(i + 1) * k];
        let gi = &g[i * k..(i + 1) * k];
        let inner: f64 = p.iter().zip(gi).map(|(a, b)| a * b).sum();
        for c in 0..k {
            dz[i * k + c] = p[c] * (gi[c] - inner);
        }
    }
    let mut out = SemanticLossOutput {
        loss,
        grad_embedding: vec![0.0; fields.pixels() * fields.dim()],
        grad_sigma_sem: vec![0.0; k],
        pixels: targets.labels.data.iter().filter(|&&c| c != VOID_CLASS).count(),
    };
    backprop_logits(fields, state, &range, &dz, &mut out.grad_embedding, &mut out.grad_sigma_sem);
    Ok(out)
}

/// Mean cross-entropy of ψ against the labels (ablation replacement for the
/// Lovász semantic term).
pub fn semantic_ce_loss(fields: &PixelFields, targets: &Targets, state: &SemanticState) -> Result<SemanticLossOutput> {
    let layout = EmbeddingLayout::infer(fields.dim(), state.dim())?;
    let range = layout.semantic_range(fields.dim());
    let k = state.num_classes();
    let labeled: Vec<usize> = (0..fields.pixels()).filter(|&i| targets.labels.data[i] != VOID_CLASS).collect();
    let mut out = SemanticLossOutput {
        loss: 0.0,
        grad_embedding: vec![0.0; fields.pixels() * fields.dim()],
        grad_sigma_sem: vec![0.0; k],
        pixels: labeled.len(),
    };
    if labeled.is_empty() {
        return Ok(out);
    }
    let n = labeled.len() as f64;
    let mut dz = vec![0.0; fields.pixels() * k];
    for &i in &labeled {
        let t = targets.labels.data[i] as usize;
        let z = semantic_logits(&fields.embedding.pixel(i)[range.clone()], state);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.loss -= (z[t] - lse) / n;
        for c in 0..k {
            let psi = (z[c] - lse).exp();
            dz[i * k + c] = (psi - if c == t { 1.0 } else { 0.0 }) / n;
        }
    }
    backprop_logits(fields, state, &range, &dz, &mut out.grad_embedding, &mut out.grad_sigma_sem);
    Ok(out)
}

/// Seed regression: instance pixels toward the (constant) instance kernel
/// value, stuff pixels toward 0; crowd and void pixels are skipped.
/// Returns `(loss, dL/dseed, included pixel count)`.
pub fn seed_loss(fields: &PixelFields, targets: &Targets, layout: EmbeddingLayout) -> (f64, Vec<f64>, usize) {
    let n = fields.pixels();
    let range = layout.instance_range(fields.dim());
    let mut target: Vec<Option<f64>> = vec![None; n];
    for inst in &targets.instances {
        let st = instance_stats(fields, inst, &range);
        for &p in &inst.pixels {
            let e = &fields.embedding.pixel(p)[range.clone()];
            target[p] = Some(phi_unchecked(e, fields.position(p), &st.mu, st.rho, st.sigma, st.sigma_spatial));
        }
    }
    for (p, &c) in targets.labels.data.iter().enumerate() {
        if targets.catalog.is_stuff(c) {
            target[p] = Some(0.0);
        }
    }
    let count = target.iter().filter(|t| t.is_some()).count();
    let mut grad = vec![0.0; n];
    if count == 0 {
        return (0.0, grad, 0);
    }
    let m = count as f64;
    let mut loss = 0.0;
    for (p, t) in target.iter().enumerate() {
        if let Some(t) = t {
            let r = fields.seed.data[p] - t;
            loss += r * r;
            grad[p] = 2.0 * r / m;
        }
    }
    (loss / m, grad, count)
}

/// `gamma * mean (sigma_i - mean_instance(sigma))^2` over instance pixels,
/// applied to both bandwidth channels. Returns `(loss, dL/dsigma, dL/dsigma_spatial)`.
pub fn ins_var_loss(fields: &PixelFields, targets: &Targets, gamma: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let n = fields.pixels();
    let mut gs = vec![0.0; n];
    let mut gss = vec![0.0; n];
    let total: usize = targets.instances.iter().map(|i| i.pixels.len()).sum();
    if total == 0 {
        return (0.0, gs, gss);
    }
    let m = total as f64;
    let mut loss = 0.0;
    for inst in &targets.instances {
        let k = inst.pixels.len() as f64;
        let mean_s = inst.pixels.iter().map(|&p| fields.sigma.data[p]).sum::<f64>() / k;
        let mean_ss = inst.pixels.iter().map(|&p| fields.sigma_spatial.data[p]).sum::<f64>() / k;
        for &p in &inst.pixels {
            let a = fields.sigma.data[p] - mean_s;
            let b = fields.sigma_spatial.data[p] - mean_ss;
            loss += a * a + b * b;
            gs[p] = 2.0 * gamma * a / m;
            gss[p] = 2.0 * gamma * b / m;
        }
    }
    (gamma * loss / m, gs, gss)
}

/// Squared distance of each present class's persistent mean to the (constant)
/// batch mean of its labeled embeddings, averaged over present classes.
/// Returns `(loss, dL/dmu_hat, present class count)`.
pub fn seg_mean_loss(fields: &PixelFields, targets: &Targets, state: &SemanticState) -> Result<(f64, Vec<f64>, usize)> {
    let layout = EmbeddingLayout::infer(fields.dim(), state.dim())?;
    let range = layout.semantic_range(fields.dim());
    let k = state.num_classes();
    let dim = state.dim();
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &c) in targets.labels.data.iter().enumerate() {
        if c == VOID_CLASS {
            continue;
        }
        let c = c as usize;
        if c >= k {
            return Err(HleError::DimensionMismatch(format!("label {c} outside {k} classes")));
        }
        counts[c] += 1;
        let e = &fields.embedding.pixel(p)[range.clone()];
        sums[c * dim..(c + 1) * dim].iter_mut().zip(e).for_each(|(s, v)| *s += v);
    }
    let present = counts.iter().filter(|&&n| n > 0).count();
    let mut grad = vec![0.0; k * dim];
    if present == 0 {
        return Ok((0.0, grad, 0));
    }
    let mut loss = 0.0;
    for c in (0..k).filter(|&c| counts[c] > 0) {
        let mu = state.mean(c);
        for j in 0..dim {
            let r = mu[j] - sums[c * dim + j] / counts[c] as f64;
            loss += r * r;
            grad[c * dim + j] = 2.0 * r / present as f64;
        }
    }
    Ok((loss / present as f64, grad, present))
}

fn add(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Sum of the five terms with the full gradient set.
pub fn total_loss(
    fields: &PixelFields,
    state: &SemanticState,
    targets: &Targets,
    cfg: &LossConfig,
) -> Result<(LossReport, Gradients)> {
    if fields.height() != targets.height() || fields.width() != targets.width() {
        return Err(HleError::DimensionMismatch("fields and ground truth differ in size".into()));
    }
    if state.num_classes() != targets.catalog.len() {
        return Err(HleError::DimensionMismatch(format!(
            "state has {} classes, catalog {}",
            state.num_classes(),
            targets.catalog.len()
        )));
    }
    let layout = EmbeddingLayout::infer(fields.dim(), state.dim())?;
    let mut grads = Gradients::zeros(fields, state);
    let mut report = LossReport::default();

    match cfg.objective {
        Objective::Lovasz | Objective::CrossEntropySemantic => {
            let sem = if cfg.objective == Objective::Lovasz {
                semantic_loss(fields, targets, state, cfg.class_averaging)?
            } else {
                semantic_ce_loss(fields, targets, state)?
            };
            report.seg = sem.loss;
            report.semantic_pixels = sem.pixels;
            add(&mut grads.embedding, &sem.grad_embedding);
            add(&mut grads.sigma_sem, &sem.grad_sigma_sem);

            let ins = instance_loss(fields, targets, layout, cfg.instance_support);
            report.ins = ins.loss;
            add(&mut grads.embedding, &ins.grad_embedding);
            add(&mut grads.sigma, &ins.grad_sigma);
            add(&mut grads.sigma_spatial, &ins.grad_sigma_spatial);
        }
        Objective::Associative(ae) => {
            let d = fields.dim();
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); state.num_classes()];
            for (p, &c) in targets.labels.data.iter().enumerate() {
                if c != VOID_CLASS {
                    by_class[c as usize].push(p);
                }
            }
            let class_groups: Vec<&[usize]> = by_class.iter().filter(|g| !g.is_empty()).map(|g| g.as_slice()).collect();
            let sem = ae_group_loss(&fields.embedding, layout.semantic_range(d), &class_groups, ae.sem_pull, ae.sem_push);
            report.seg = sem.loss();
            report.semantic_pixels = class_groups.iter().map(|g| g.len()).sum();
            add(&mut grads.embedding, &sem.grad);

            let inst_groups: Vec<&[usize]> = targets.instances.iter().map(|i| i.pixels.as_slice()).collect();
            let ins = ae_group_loss(&fields.embedding, layout.instance_range(d), &inst_groups, ae.ins_pull, ae.ins_push);
            report.ins = ins.loss();
            add(&mut grads.embedding, &ins.grad);
        }
    }
    report.instances = targets.instances.len();

    let (seg_mean, g_mu, present) = seg_mean_loss(fields, targets, state)?;
    report.seg_mean = seg_mean;
    report.present_classes = present;
    grads.mu_hat = g_mu;

    let (ins_var, gs, gss) = ins_var_loss(fields, targets, cfg.gamma);
    report.ins_var = ins_var;
    add(&mut grads.sigma, &gs);
    add(&mut grads.sigma_spatial, &gss);

    let (seed, g_seed, seed_pixels) = seed_loss(fields, targets, layout);
    report.seed = seed;
    report.seed_pixels = seed_pixels;
    grads.seed = g_seed;

    report.total = report.seg + report.seg_mean + report.ins + report.ins_var + report.seed;
    Ok((report, grads))
}
