//! Lovász hinge for the Jaccard loss on `[0, 1]` predictions.
//!
//! For a binary problem with prediction `p` and ground truth `t`, the
//! per-pixel error is `1 - p` on foreground and `p` on background. Errors
//! are sorted in descending order (ties by ascending index) and weighted by
//! the drop in IoU obtained by mispredicting one more pixel. The result is
//! the Lovász extension of `1 - IoU`, which is convex and piecewise linear.

use rayon::prelude::*;

use crate::error::{HleError, Result};
use crate::grid::VOID_CLASS;

/// Largest input accepted by [`lovasz_bruteforce`].
pub const BRUTEFORCE_MAX: usize = 12;

/// Which classes the multi-class loss averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClassAveraging {
    /// Every catalog class, including ones absent from the image.
    #[default]
    All,
    /// Only classes with at least one ground-truth pixel.
    Present,
}

/// Validated binary problem; predictions are clamped into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryProblem {
    pub p: Vec<f64>,
    pub t: Vec<bool>,
}

impl BinaryProblem {
    pub fn new(p: Vec<f64>, t: Vec<bool>) -> Result<Self> {
        check_len(p.len(), t.len())?;
        let p = p.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self { p, t })
    }

    pub fn loss(&self) -> (f64, Vec<f64>) {
        lovasz_binary_unchecked(&self.p, &self.t)
    }
}

/// `|y ∩ t| / |y ∪ t|`, with IoU 1 when both are empty.
pub fn jaccard(y: &[bool], t: &[bool]) -> Result<f64> {
    check_len(y.len(), t.len())?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in y.iter().zip(t) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// IoU drop per additionally mispredicted pixel, for ground truth already
/// permuted into descending-error order.
pub fn lovasz_increments(t_sorted: &[bool]) -> Vec<f64> {
    let gts = t_sorted.iter().filter(|&&t| t).count() as f64;
    let mut out = Vec::with_capacity(t_sorted.len());
    let mut missed_fg = 0.0;
    let mut false_fg = 0.0;
    let mut prev_iou = 1.0;
    for &t in t_sorted {
        if t {
            missed_fg += 1.0;
        } else {
            false_fg += 1.0;
        }
        let inter = gts - missed_fg;
        let union = gts + false_fg;
        // union > 0 here: either gts > 0 or at least one false positive
        let iou = inter / union;
        out.push(prev_iou - iou);
        prev_iou = iou;
    }
    out
}

/// Lovász hinge loss and its subgradient with respect to `p`.
pub fn lovasz_binary(p: &[f64], t: &[bool]) -> Result<(f64, Vec<f64>)> {
    check_len(p.len(), t.len())?;
    Ok(lovasz_binary_unchecked(p, t))
}

fn errors(p: &[f64], t: &[bool]) -> Vec<f64> {
    p.iter().zip(t).map(|(&p, &t)| if t { 1.0 - p } else { p }).collect()
}

/// Indices sorting `xi` descending, ties by ascending index.
fn descending_order(xi: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..xi.len()).collect();
    order.sort_by(|&a, &b| xi[b].total_cmp(&xi[a]));
    order
}

pub(crate) fn lovasz_binary_unchecked(p: &[f64], t: &[bool]) -> (f64, Vec<f64>) {
    let n = p.len();
    let mut grad = vec![0.0; n];
    if n == 0 {
        return (0.0, grad);
    }
    let xi = errors(p, t);
    let order = descending_order(&xi);
    let t_sorted: Vec<bool> = order.iter().map(|&i| t[i]).collect();
    let delta = lovasz_increments(&t_sorted);
    let mut loss = 0.0;
    for (k, &i) in order.iter().enumerate() {
        loss += xi[i] * delta[k];
        grad[i] = if t[i] { -delta[k] } else { delta[k] };
    }
    (loss, grad)
}

/// Multi-class Lovász loss: one-vs-rest binary problems over the class
/// scores, averaged per [`ClassAveraging`]. `probs` is `N x classes`
/// row-major; pixels labeled [`VOID_CLASS`] are left out of every problem.
/// The gradient has the shape of `probs` (zero on void rows).
pub fn lovasz_softmax(
    probs: &[f64],
    labels: &[u32],
    classes: usize,
    averaging: ClassAveraging,
) -> Result<(f64, Vec<f64>)> {
    check_len(probs.len(), labels.len() * classes)?;
    let valid: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != VOID_CLASS).collect();
    let present: Vec<bool> = {
        let mut seen = vec![false; classes];
        for &i in &valid {
            if let Some(s) = seen.get_mut(labels[i] as usize) {
                *s = true;
            }
        }
        seen
    };
    let active: Vec<usize> = match averaging {
        ClassAveraging::All => (0..classes).collect(),
        ClassAveraging::Present => (0..classes).filter(|&c| present[c]).collect(),
    };
    let mut grad = vec![0.0; probs.len()];
    if active.is_empty() || valid.is_empty() {
        return Ok((0.0, grad));
    }
    let per_class: Vec<(f64, Vec<f64>)> = active
        .par_iter()
        .map(|&c| {
            let p: Vec<f64> = valid.iter().map(|&i| probs[i * classes + c]).collect();
            let t: Vec<bool> = valid.iter().map(|&i| labels[i] as usize == c).collect();
            lovasz_binary_unchecked(&p, &t)
        })
        .collect();
    let scale = 1.0 / active.len() as f64;
    let mut loss = 0.0;
    for (&c, (l, g)) in active.iter().zip(&per_class) {
        loss += l;
        for (&i, gi) in valid.iter().zip(g) {
            grad[i * classes + c] = gi * scale;
        }
    }
    Ok((loss * scale, grad))
}

/// Reference evaluation of the Lovász extension for small `N`.
///
/// Tabulates the Jaccard loss `1 - IoU` of every mispredicted set by direct
/// counting, then evaluates the extension as the level-set integral
/// `Σ_k (ξ_(k) - ξ_(k+1)) · loss(S_k)` over the nested sets of the `k`
/// largest errors. Shares no code with [`lovasz_binary`].
pub fn lovasz_bruteforce(p: &[f64], t: &[bool]) -> Result<f64> {
    check_len(p.len(), t.len())?;
    let n = p.len();
    if n > BRUTEFORCE_MAX {
        return Err(HleError::ProblemTooLarge { got: n, max: BRUTEFORCE_MAX });
    }
    let table: Vec<f64> = (0u32..1 << n)
        .map(|mask| {
            let y: Vec<bool> = (0..n).map(|i| t[i] ^ (mask >> i & 1 == 1)).collect();
            1.0 - jaccard(&y, t).expect("equal lengths")
        })
        .collect();
    let xi: Vec<f64> = (0..n).map(|i| if t[i] { 1.0 - p[i] } else { p[i] }).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xi[b].partial_cmp(&xi[a]).unwrap().then(a.cmp(&b)));
    let mut mask = 0u32;
    let mut total = 0.0;
    for (k, &i) in order.iter().enumerate() {
        mask |= 1 << i;
        let next = order.get(k + 1).map_or(0.0, |&j| xi[j]);
        total += (xi[i] - next) * table[mask as usize];
    }
    Ok(total)
}

fn check_len(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(HleError::LengthMismatch { left, right });
    }
    Ok(())
}
