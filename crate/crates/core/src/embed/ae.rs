//! Associative-embedding push/pull losses (the baseline objective).

use std::ops::Range;

use super::PixelFields;
use crate::grid::{FieldGrid, Instance};

/// Hinge margins for the instance-level and class-level push/pull terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AeParams {
    pub ins_pull: f64,
    pub ins_push: f64,
    pub sem_pull: f64,
    pub sem_push: f64,
}

impl Default for AeParams {
    fn default() -> Self {
        Self { ins_pull: 0.05, ins_push: 0.6, sem_pull: 0.5, sem_push: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeOutput {
    pub pull: f64,
    pub push: f64,
    /// Gradient over the full embedding grid (zero outside `range`).
    pub grad: Vec<f64>,
}

impl AeOutput {
    pub fn loss(&self) -> f64 {
        self.pull + self.push
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Pull each pixel toward its group mean (L1 distance, squared hinge at
/// `delta_pull`) and push group means apart (squared hinge at `delta_push`,
/// averaged over ordered pairs). Empty groups must not be passed.
pub fn ae_group_loss(
    embedding: &FieldGrid,
    range: Range<usize>,
    groups: &[&[usize]],
    delta_pull: f64,
    delta_push: f64,
) -> AeOutput {
    let d = embedding.channels;
    let k = range.len();
    let mut out = AeOutput { pull: 0.0, push: 0.0, grad: vec![0.0; embedding.data.len()] };
    let g = groups.len();
    if g == 0 {
        return out;
    }
    let means: Vec<Vec<f64>> = groups
        .iter()
        .map(|members| {
            let mut m = vec![0.0; k];
            for &p in *members {
                m.iter_mut().zip(&embedding.pixel(p)[range.clone()]).for_each(|(a, v)| *a += v);
            }
            m.iter_mut().for_each(|a| *a /= members.len() as f64);
            m
        })
        .collect();
    let mut grad_means = vec![vec![0.0; k]; g];

    for (gi, members) in groups.iter().enumerate() {
        let n = members.len() as f64;
        for &p in *members {
            let e = &embedding.pixel(p)[range.clone()];
            let r = l1(&means[gi], e) - delta_pull;
            if r <= 0.0 {
                continue;
            }
            out.pull += r * r / (g as f64 * n);
            let coef = 2.0 * r / (g as f64 * n);
            let ge = &mut out.grad[p * d..(p + 1) * d][range.clone()];
            for j in 0..k {
                let s = sign(means[gi][j] - e[j]);
                ge[j] -= coef * s;
                grad_means[gi][j] += coef * s;
            }
        }
    }

    if g > 1 {
        let pairs = (g * (g - 1)) as f64;
        for a in 0..g {
            for b in 0..g {
                if a == b {
                    continue;
                }
                let r = delta_push - l1(&means[a], &means[b]);
                if r <= 0.0 {
                    continue;
                }
                out.push += r * r / pairs;
                let coef = 2.0 * r / pairs;
                for j in 0..k {
                    let s = sign(means[a][j] - means[b][j]);
                    grad_means[a][j] -= coef * s;
                    grad_means[b][j] += coef * s;
                }
            }
        }
    }

    for (gi, members) in groups.iter().enumerate() {
        let share = 1.0 / members.len() as f64;
        for &p in *members {
            let ge = &mut out.grad[p * d..(p + 1) * d][range.clone()];
            ge.iter_mut().zip(&grad_means[gi]).for_each(|(o, v)| *o += share * v);
        }
    }
    out
}

/// Instance-level push/pull over the whole embedding.
pub fn ae_baseline_loss(fields: &PixelFields, instances: &[Instance], delta_pull: f64, delta_push: f64) -> AeOutput {
    let groups: Vec<&[usize]> = instances.iter().map(|i| i.pixels.as_slice()).collect();
    ae_group_loss(&fields.embedding, 0..fields.dim(), &groups, delta_pull, delta_push)
}
