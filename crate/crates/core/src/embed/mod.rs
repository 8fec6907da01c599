//! Hierarchical embedding model: per-pixel fields, persistent class means,
//! the instance/semantic kernels and every loss term with its gradient.

mod ae;
mod kernels;
mod losses;

use std::ops::Range;

pub use ae::{ae_baseline_loss, ae_group_loss, AeOutput, AeParams};
pub use kernels::{p_kernel, phi_kernel, psi_scores, semantic_logits};
pub use losses::{
    ins_var_loss, instance_loss, seed_loss, seg_mean_loss, semantic_ce_loss, semantic_loss, total_loss,
    InstanceLossOutput, SemanticLossOutput,
};
pub(crate) use losses::instance_stats;

use crate::error::{HleError, Result};
use crate::grid::{self, ClassCatalog, FieldGrid, Instance, InstanceMap, LabelMap, VOID_CLASS};
use crate::lovasz::ClassAveraging;

/// Loss weight on the instance-variance term.
pub const DEFAULT_GAMMA: f64 = 10.0;

/// How the embedding channels are shared between semantics and instances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingLayout {
    /// One space for both (the hierarchical model).
    Joint,
    /// First half semantic, second half instance; each half is a unit vector.
    Split,
}

impl EmbeddingLayout {
    /// Joint when the class means span the full embedding, split when they
    /// span exactly half of it.
    pub fn infer(field_dim: usize, state_dim: usize) -> Result<Self> {
        if field_dim == state_dim {
            Ok(EmbeddingLayout::Joint)
        } else if field_dim == 2 * state_dim {
            Ok(EmbeddingLayout::Split)
        } else {
            Err(HleError::DimensionMismatch(format!(
                "embedding dim {field_dim} is neither equal to nor twice the class-mean dim {state_dim}"
            )))
        }
    }

    pub fn semantic_range(self, dim: usize) -> Range<usize> {
        match self {
            EmbeddingLayout::Joint => 0..dim,
            EmbeddingLayout::Split => 0..dim / 2,
        }
    }

    pub fn instance_range(self, dim: usize) -> Range<usize> {
        match self {
            EmbeddingLayout::Joint => 0..dim,
            EmbeddingLayout::Split => dim / 2..dim,
        }
    }

    /// Channel ranges that must each be unit-norm.
    pub fn unit_blocks(self, dim: usize) -> Vec<Range<usize>> {
        match self {
            EmbeddingLayout::Joint => vec![0..dim],
            EmbeddingLayout::Split => vec![0..dim / 2, dim / 2..dim],
        }
    }
}

/// Everything predicted per pixel. Bandwidths are the positive values
/// (the trainer keeps their logarithms).
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFields {
    pub embedding: FieldGrid,
    pub sigma: FieldGrid,
    pub sigma_spatial: FieldGrid,
    pub seed: FieldGrid,
}

impl PixelFields {
    pub fn new(embedding: FieldGrid, sigma: FieldGrid, sigma_spatial: FieldGrid, seed: FieldGrid) -> Result<Self> {
        for (name, g) in [("sigma", &sigma), ("sigma_spatial", &sigma_spatial), ("seed", &seed)] {
            if g.height != embedding.height || g.width != embedding.width || g.channels != 1 {
                return Err(HleError::DimensionMismatch(format!(
                    "{name} must be a {}x{} single-channel grid",
                    embedding.height, embedding.width
                )));
            }
        }
        Ok(Self { embedding, sigma, sigma_spatial, seed })
    }

    /// Uniform fields: every pixel gets `embedding`, the given bandwidths and seed.
    pub fn constant(height: usize, width: usize, embedding: &[f64], sigma: f64, sigma_spatial: f64, seed: f64) -> Self {
        let d = embedding.len();
        let mut e = FieldGrid::filled(height, width, d, 0.0);
        for i in 0..height * width {
            e.pixel_mut(i).copy_from_slice(embedding);
        }
        Self {
            embedding: e,
            sigma: FieldGrid::filled(height, width, 1, sigma),
            sigma_spatial: FieldGrid::filled(height, width, 1, sigma_spatial),
            seed: FieldGrid::filled(height, width, 1, seed),
        }
    }

    pub fn height(&self) -> usize {
        self.embedding.height
    }

    pub fn width(&self) -> usize {
        self.embedding.width
    }

    pub fn dim(&self) -> usize {
        self.embedding.channels
    }

    pub fn pixels(&self) -> usize {
        self.embedding.pixels()
    }

    #[inline]
    pub fn position(&self, i: usize) -> [f64; 2] {
        grid::position(i, self.height(), self.width())
    }

    pub fn validate(&self, layout: EmbeddingLayout) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.embedding.is_finite() && self.sigma.is_finite() && self.sigma_spatial.is_finite() && self.seed.is_finite()) {
            problems.push("non-finite field value".to_string());
        }
        let d = self.dim();
        for i in 0..self.pixels() {
            let e = self.embedding.pixel(i);
            if layout.unit_blocks(d).into_iter().any(|r| (grid::norm(&e[r]) - 1.0).abs() > 1e-6) {
                problems.push(format!("embedding at pixel {i} is not unit norm"));
                break;
            }
        }
        if self.sigma.data.iter().chain(&self.sigma_spatial.data).any(|&s| s <= 0.0) {
            problems.push("non-positive bandwidth".to_string());
        }
        if self.seed.data.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
            problems.push("seed outside [0, 1]".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(HleError::Validation(problems))
        }
    }

    /// Packs into one `D + 3` channel grid: embedding, sigma, spatial sigma, seed.
    pub fn to_packed(&self) -> FieldGrid {
        let d = self.dim();
        let mut out = FieldGrid::filled(self.height(), self.width(), d + 3, 0.0);
        for i in 0..self.pixels() {
            let px = out.pixel_mut(i);
            px[..d].copy_from_slice(self.embedding.pixel(i));
            px[d] = self.sigma.scalar(i);
            px[d + 1] = self.sigma_spatial.scalar(i);
            px[d + 2] = self.seed.scalar(i);
        }
        out
    }

    pub fn from_packed(packed: &FieldGrid) -> Result<Self> {
        if packed.channels < 4 {
            return Err(HleError::Format(format!("packed fields need >= 4 channels, got {}", packed.channels)));
        }
        let d = packed.channels - 3;
        let (h, w) = (packed.height, packed.width);
        let mut e = FieldGrid::filled(h, w, d, 0.0);
        let mut s = FieldGrid::filled(h, w, 1, 0.0);
        let mut ss = FieldGrid::filled(h, w, 1, 0.0);
        let mut seed = FieldGrid::filled(h, w, 1, 0.0);
        for i in 0..h * w {
            let px = packed.pixel(i);
            e.pixel_mut(i).copy_from_slice(&px[..d]);
            s.data[i] = px[d];
            ss.data[i] = px[d + 1];
            seed.data[i] = px[d + 2];
        }
        Self::new(e, s, ss, seed)
    }

    /// Strided subsample keeping the top-left pixel of each `factor x factor` block.
    pub fn subsample(&self, factor: usize) -> Self {
        let sub = |g: &FieldGrid| {
            let h = g.height.div_ceil(factor);
            let w = g.width.div_ceil(factor);
            let mut out = FieldGrid::filled(h, w, g.channels, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let src = (r * factor) * g.width + c * factor;
                    out.pixel_mut(r * w + c).copy_from_slice(g.pixel(src));
                }
            }
            out
        };
        Self {
            embedding: sub(&self.embedding),
            sigma: sub(&self.sigma),
            sigma_spatial: sub(&self.sigma_spatial),
            seed: sub(&self.seed),
        }
    }
}

/// Persistent per-class means (unit rows) and semantic bandwidths.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticState {
    dim: usize,
    pub mu_hat: Vec<f64>,
    pub sigma_sem: Vec<f64>,
}

impl SemanticState {
    pub fn new(dim: usize, mu_hat: Vec<f64>, sigma_sem: Vec<f64>) -> Result<Self> {
        if dim == 0 || mu_hat.len() != dim * sigma_sem.len() {
            return Err(HleError::DimensionMismatch(format!(
                "means of length {} do not match {} classes of dim {dim}",
                mu_hat.len(),
                sigma_sem.len()
            )));
        }
        if let Some(&s) = sigma_sem.iter().find(|&&s| s.is_nan() || s <= 0.0) {
            return Err(HleError::NonPositiveBandwidth(s));
        }
        let state = Self { dim, mu_hat, sigma_sem };
        for k in 0..state.num_classes() {
            if (grid::norm(state.mean(k)) - 1.0).abs() > 1e-6 {
                return Err(HleError::Validation(vec![format!("class mean {k} is not unit norm")]));
            }
        }
        Ok(state)
    }

    /// Builds a state from unit means and one shared bandwidth.
    pub fn from_means(means: &[Vec<f64>], sigma: f64) -> Result<Self> {
        let dim = means.first().map_or(0, |m| m.len());
        let flat = means.concat();
        Self::new(dim, flat, vec![sigma; means.len()])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.sigma_sem.len()
    }

    #[inline]
    pub fn mean(&self, k: usize) -> &[f64] {
        &self.mu_hat[k * self.dim..(k + 1) * self.dim]
    }

    /// Projects every mean back onto the unit sphere.
    pub fn reproject(&mut self) {
        for row in self.mu_hat.chunks_mut(self.dim) {
            grid::normalize(row);
        }
    }
}

/// Where the instance kernel is evaluated for each instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InstanceSupport {
    /// Every non-void, non-crowd pixel of the image.
    #[default]
    Image,
    /// Only pixels inside the instance bounding box grown by this many pixels.
    BoxMargin(usize),
}

/// Which objective drives the semantic and instance structure.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Objective {
    /// Lovász softmax on ψ and Lovász hinge on φ.
    #[default]
    Lovasz,
    /// Cross-entropy on ψ, Lovász hinge on φ.
    CrossEntropySemantic,
    /// Push/pull hinge losses at instance and class level.
    Associative(AeParams),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub class_averaging: ClassAveraging,
    pub instance_support: InstanceSupport,
    pub objective: Objective,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            class_averaging: ClassAveraging::All,
            instance_support: InstanceSupport::Image,
            objective: Objective::Lovasz,
        }
    }
}

/// Per-term losses, each already averaged over its own support.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub seg: f64,
    pub seg_mean: f64,
    pub ins: f64,
    pub ins_var: f64,
    pub seed: f64,
    pub total: f64,
    pub semantic_pixels: usize,
    pub instances: usize,
    pub present_classes: usize,
    pub seed_pixels: usize,
}

/// Gradient of a loss with respect to every free quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub embedding: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma_spatial: Vec<f64>,
    pub seed: Vec<f64>,
    pub mu_hat: Vec<f64>,
    pub sigma_sem: Vec<f64>,
}

impl Gradients {
    pub fn zeros(fields: &PixelFields, state: &SemanticState) -> Self {
        let n = fields.pixels();
        Self {
            embedding: vec![0.0; n * fields.dim()],
            sigma: vec![0.0; n],
            sigma_spatial: vec![0.0; n],
            seed: vec![0.0; n],
            mu_hat: vec![0.0; state.mu_hat.len()],
            sigma_sem: vec![0.0; state.num_classes()],
        }
    }
}

/// Ground truth prepared once per scene for the loss terms.
#[derive(Clone, Debug)]
pub struct Targets {
    pub labels: LabelMap,
    pub instances: Vec<Instance>,
    pub catalog: ClassCatalog,
    /// Index into `instances` for each pixel.
    pub instance_of: Vec<Option<usize>>,
    /// Pixels that take part in the instance losses: labeled and not crowd.
    pub instance_support: Vec<usize>,
}

impl Targets {
    pub fn new(labels: &LabelMap, instance_map: &InstanceMap, catalog: &ClassCatalog) -> Result<Self> {
        grid::ensure_valid(labels, instance_map, catalog)?;
        let instances = grid::extract_instances(labels, instance_map)?;
        Ok(Self::from_instances(labels.clone(), instances, catalog.clone()))
    }

    pub fn from_instances(labels: LabelMap, instances: Vec<Instance>, catalog: ClassCatalog) -> Self {
        let mut instance_of = vec![None; labels.len()];
        for (k, inst) in instances.iter().enumerate() {
            for &p in &inst.pixels {
                instance_of[p] = Some(k);
            }
        }
        let instance_support = (0..labels.len())
            .filter(|&p| {
                let c = labels.data[p];
                c != VOID_CLASS && !(catalog.is_thing(c) && instance_of[p].is_none())
            })
            .collect();
        Self { labels, instances, catalog, instance_of, instance_support }
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ClassKind;

    #[test]
    fn layout_inference() {
        assert_eq!(EmbeddingLayout::infer(12, 12).unwrap(), EmbeddingLayout::Joint);
        assert_eq!(EmbeddingLayout::infer(12, 6).unwrap(), EmbeddingLayout::Split);
        assert!(EmbeddingLayout::infer(12, 5).is_err());
        assert_eq!(EmbeddingLayout::Split.instance_range(12), 6..12);
    }

    #[test]
    fn packed_round_trip_and_subsample() {
        let mut f = PixelFields::constant(3, 5, &[1.0, 0.0], 0.3, 0.7, 0.2);
        f.seed.data[10] = 0.9;
        let back = PixelFields::from_packed(&f.to_packed()).unwrap();
        assert_eq!(back, f);
        let sub = f.subsample(2);
        assert_eq!((sub.height(), sub.width()), (2, 3));
        // pixel (2, 0) of the original is the top-left of block (1, 0)
        assert_eq!(sub.seed.data[3], 0.9);
    }

    #[test]
    fn state_checks() {
        assert!(SemanticState::new(2, vec![1.0, 0.0], vec![0.0]).is_err());
        assert!(SemanticState::new(2, vec![2.0, 0.0], vec![1.0]).is_err());
        let mut s = SemanticState::new(2, vec![0.6, 0.8, 0.0, 1.0], vec![0.5, 0.5]).unwrap();
        s.mu_hat[0] = 3.0;
        s.reproject();
        assert!((grid::norm(s.mean(0)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn targets_skip_void_and_crowd() {
        let cat = ClassCatalog::from_kinds([("ground", ClassKind::Stuff), ("car", ClassKind::Thing)]).unwrap();
        let labels = LabelMap::new(1, 4, vec![0, 1, 1, VOID_CLASS]).unwrap();
        let inst = InstanceMap::new(1, 4, vec![0, 1, 0, 0]).unwrap();
        let t = Targets::new(&labels, &inst, &cat).unwrap();
        assert_eq!(t.instance_support, vec![0, 1]);
        assert_eq!(t.instance_of, vec![None, Some(0), None, None]);
    }

    #[test]
    fn fields_validation() {
        let f = PixelFields::constant(2, 2, &[0.0, 1.0], 0.5, 0.5, 0.5);
        assert!(f.validate(EmbeddingLayout::Joint).is_ok());
        let mut bad = f.clone();
        bad.sigma.data[0] = -1.0;
        bad.seed.data[1] = 1.5;
        match bad.validate(EmbeddingLayout::Joint) {
            Err(HleError::Validation(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
