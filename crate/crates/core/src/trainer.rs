//! Direct optimization of per-pixel fields against one synthetic scene.
//!
//! Free parameters are the raw embedding coordinates (re-normalized after
//! every step), the logarithms of both bandwidth fields and of the class
//! bandwidths, the seed field (clamped to `[0, 1]`) and the class means
//! (re-projected to the sphere). Updates use Adam with a polynomially
//! decaying step size.

use crate::decoder::{decode, DecoderConfig};
use crate::embed::{
    total_loss, AeParams, EmbeddingLayout, InstanceSupport, LossConfig, LossReport, Objective, PixelFields,
    SemanticState, Targets, DEFAULT_GAMMA,
};
use crate::error::{HleError, Result};
use crate::grid::{dot, normalize, ClassCatalog, FieldGrid, PanopticMap};
use crate::lovasz::ClassAveraging;
use crate::metrics::{panoptic_quality, PqResult};
use crate::rng::SeededRng;
use crate::synth::Scene;
use crate::thomson::{thomson_init, ThomsonConfig};

/// Which model is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// One embedding space for semantics and instances.
    Hierarchical,
    /// Semantic and instance halves of the embedding are separate unit vectors.
    SplitEmbedding,
    /// Push/pull hinge losses instead of the Lovász terms.
    AeBaseline,
    /// Cross-entropy instead of the Lovász softmax on ψ.
    CrossEntropySemantic,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::Hierarchical, Variant::SplitEmbedding, Variant::AeBaseline, Variant::CrossEntropySemantic];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Hierarchical => "hierarchical",
            Variant::SplitEmbedding => "split",
            Variant::AeBaseline => "ae",
            Variant::CrossEntropySemantic => "ce",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| HleError::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeanInit {
    Thomson,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Exponent of the polynomial step-size decay (0 keeps it constant).
    pub decay_power: f64,
    pub mean_init: MeanInit,
    pub embedding_dim: usize,
    pub sigma_init: f64,
    pub sigma_spatial_init: f64,
    pub sigma_sem_init: f64,
    pub seed_init: f64,
    /// Spread of the initial embeddings around a shared random direction.
    pub init_noise: f64,
    pub rng_seed: u64,
    pub variant: Variant,
    pub gamma: f64,
    pub class_averaging: ClassAveraging,
    pub instance_support: InstanceSupport,
    pub ae: AeParams,
    /// Abort when the total loss exceeds this multiple of its initial value.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            step_size: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            decay_power: 0.9,
            mean_init: MeanInit::Thomson,
            embedding_dim: 12,
            sigma_init: 0.5,
            sigma_spatial_init: 0.2,
            sigma_sem_init: 0.5,
            seed_init: 0.5,
            init_noise: 0.5,
            rng_seed: 0,
            variant: Variant::Hierarchical,
            gamma: DEFAULT_GAMMA,
            class_averaging: ClassAveraging::All,
            instance_support: InstanceSupport::Image,
            ae: AeParams::default(),
            divergence_factor: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HleError::InvalidConfig(m));
        if !(self.step_size > 0.0) {
            return bad(format!("step_size must be positive, got {}", self.step_size));
        }
        if self.embedding_dim < 2 {
            return bad(format!("embedding_dim must be at least 2, got {}", self.embedding_dim));
        }
        if self.variant == Variant::SplitEmbedding && (self.embedding_dim % 2 != 0 || self.embedding_dim < 4) {
            return bad(format!("split embedding needs an even dim >= 4, got {}", self.embedding_dim));
        }
        for (name, v) in [
            ("sigma_init", self.sigma_init),
            ("sigma_spatial_init", self.sigma_spatial_init),
            ("sigma_sem_init", self.sigma_sem_init),
            ("divergence_factor", self.divergence_factor),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decay rates must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.seed_init) {
            return bad("seed_init must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> EmbeddingLayout {
        match self.variant {
            Variant::SplitEmbedding => EmbeddingLayout::Split,
            _ => EmbeddingLayout::Joint,
        }
    }

    fn state_dim(&self) -> usize {
        match self.layout() {
            EmbeddingLayout::Joint => self.embedding_dim,
            EmbeddingLayout::Split => self.embedding_dim / 2,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        let objective = match self.variant {
            Variant::Hierarchical | Variant::SplitEmbedding => Objective::Lovasz,
            Variant::CrossEntropySemantic => Objective::CrossEntropySemantic,
            Variant::AeBaseline => Objective::Associative(self.ae),
        };
        LossConfig {
            gamma: self.gamma,
            class_averaging: self.class_averaging,
            instance_support: self.instance_support,
            objective,
        }
    }
}

/// Initial fields and class means for a scene.
pub fn init_fields(scene: &Scene, catalog: &ClassCatalog, cfg: &TrainConfig) -> Result<(PixelFields, SemanticState)> {
    cfg.validate()?;
    let (h, w, d) = (scene.labels.height, scene.labels.width, cfg.embedding_dim);
    let mut rng = SeededRng::new(cfg.rng_seed);
    let k = catalog.len();
    let means = match cfg.mean_init {
        MeanInit::Thomson => {
            let tc = ThomsonConfig { rng_seed: rng.next_u64(), ..ThomsonConfig::new(k, cfg.state_dim()) };
            thomson_init(&tc)?
        }
        MeanInit::Random => (0..k).map(|_| rng.unit_vector(cfg.state_dim())).collect(),
    };
    let state = SemanticState::from_means(&means, cfg.sigma_sem_init)?;

    let layout = cfg.layout();
    let blocks = layout.unit_blocks(d);
    let bases: Vec<Vec<f64>> = blocks.iter().map(|r| rng.unit_vector(r.len())).collect();
    let mut e = FieldGrid::filled(h, w, d, 0.0);
    for i in 0..h * w {
        let px = e.pixel_mut(i);
        for (r, base) in blocks.iter().zip(&bases) {
            let block = &mut px[r.clone()];
            for (x, b) in block.iter_mut().zip(base) {
                *x = b + cfg.init_noise * rng.normal();
            }
            normalize(block);
        }
    }
    let fields = PixelFields::new(
        e,
        FieldGrid::filled(h, w, 1, cfg.sigma_init),
        FieldGrid::filled(h, w, 1, cfg.sigma_spatial_init),
        FieldGrid::filled(h, w, 1, cfg.seed_init),
    )?;
    Ok((fields, state))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64, t: usize, cfg: &TrainConfig) {
        let c1 = 1.0 - cfg.beta1.powi(t as i32);
        let c2 = 1.0 - cfg.beta2.powi(t as i32);
        for i in 0..x.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= lr * mh / (vh.sqrt() + cfg.adam_epsilon);
        }
    }
}

/// Optimizer state over every free parameter, kept in unconstrained form.
struct Params {
    embedding: Vec<f64>,
    log_sigma: Vec<f64>,
    log_sigma_spatial: Vec<f64>,
    seed: Vec<f64>,
    mu_hat: Vec<f64>,
    log_sigma_sem: Vec<f64>,
}

fn ln_all(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.ln()).collect()
}

fn exp_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d = s.exp());
}

/// Gradient with respect to `log x` from the gradient with respect to `x`.
fn log_grad(g: &[f64], x: &[f64]) -> Vec<f64> {
    g.iter().zip(x).map(|(g, x)| g * x).collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub fields: PixelFields,
    pub state: SemanticState,
    /// Loss report before every step, plus one after the last step.
    pub curve: Vec<LossReport>,
}

pub fn train(scene: &Scene, catalog: &ClassCatalog, cfg: &TrainConfig) -> Result<TrainOutput> {
    let (fields, state) = init_fields(scene, catalog, cfg)?;
    let targets = Targets::new(&scene.labels, &scene.instances, catalog)?;
    train_from(fields, state, &targets, cfg)
}

/// Optimizes the given starting point.
pub fn train_from(
    mut fields: PixelFields,
    mut state: SemanticState,
    targets: &Targets,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let layout = EmbeddingLayout::infer(fields.dim(), state.dim())?;
    let loss_cfg = cfg.loss_config();
    let mut p = Params {
        embedding: fields.embedding.data.clone(),
        log_sigma: ln_all(&fields.sigma.data),
        log_sigma_spatial: ln_all(&fields.sigma_spatial.data),
        seed: fields.seed.data.clone(),
        mu_hat: state.mu_hat.clone(),
        log_sigma_sem: ln_all(&state.sigma_sem),
    };
    let mut opt = [
        Adam::new(p.embedding.len()),
        Adam::new(p.log_sigma.len()),
        Adam::new(p.log_sigma_spatial.len()),
        Adam::new(p.seed.len()),
        Adam::new(p.mu_hat.len()),
        Adam::new(p.log_sigma_sem.len()),
    ];
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    let d = fields.dim();
    let blocks = layout.unit_blocks(d);
    for t in 0..cfg.steps {
        let (report, g) = total_loss(&fields, &state, targets, &loss_cfg)?;
        if !report.total.is_finite() {
            return Err(HleError::Diverged { step: t, total: report.total, initial: curve.first().map_or(f64::NAN, |r: &LossReport| r.total) });
        }
        if let Some(first) = curve.first() {
            if report.total > cfg.divergence_factor * first.total {
                return Err(HleError::Diverged { step: t, total: report.total, initial: first.total });
            }
        }
        curve.push(report);
        let lr = cfg.step_size * (1.0 - t as f64 / cfg.steps as f64).powf(cfg.decay_power);
        let step = t + 1;
        opt[0].step(&mut p.embedding, &g.embedding, lr, step, cfg);
        opt[1].step(&mut p.log_sigma, &log_grad(&g.sigma, &fields.sigma.data), lr, step, cfg);
        opt[2].step(&mut p.log_sigma_spatial, &log_grad(&g.sigma_spatial, &fields.sigma_spatial.data), lr, step, cfg);
        opt[3].step(&mut p.seed, &g.seed, lr, step, cfg);
        opt[4].step(&mut p.mu_hat, &g.mu_hat, lr, step, cfg);
        opt[5].step(&mut p.log_sigma_sem, &log_grad(&g.sigma_sem, &state.sigma_sem), lr, step, cfg);

        for px in p.embedding.chunks_mut(d) {
            for r in &blocks {
                normalize(&mut px[r.clone()]);
            }
        }
        p.seed.iter_mut().for_each(|s| *s = s.clamp(0.0, 1.0));
        fields.embedding.data.copy_from_slice(&p.embedding);
        exp_into(&mut fields.sigma.data, &p.log_sigma);
        exp_into(&mut fields.sigma_spatial.data, &p.log_sigma_spatial);
        fields.seed.data.copy_from_slice(&p.seed);
        state.mu_hat.copy_from_slice(&p.mu_hat);
        state.reproject();
        p.mu_hat.copy_from_slice(&state.mu_hat);
        exp_into(&mut state.sigma_sem, &p.log_sigma_sem);
    }
    curve.push(total_loss(&fields, &state, targets, &loss_cfg)?.0);
    Ok(TrainOutput { fields, state, curve })
}

/// Decodes the fields and scores them against the scene's ground truth.
pub fn evaluate_toy(
    fields: &PixelFields,
    state: &SemanticState,
    scene: &Scene,
    catalog: &ClassCatalog,
    decoder: &DecoderConfig,
) -> Result<PqResult> {
    let pred = decode(fields, state, catalog, decoder)?;
    let gt = PanopticMap::from_ground_truth(&scene.labels, &scene.instances, catalog)?;
    panoptic_quality(&pred.map, &gt, catalog)
}

/// Mean cosine distances from one instance's pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceSpread {
    pub instance_id: u32,
    /// Between pixels of the instance.
    pub intra_instance: f64,
    /// To pixels of other instances of the same class (NaN when there are none).
    pub intra_class: f64,
    /// To labeled pixels of other classes.
    pub inter_class: f64,
}

impl InstanceSpread {
    /// `intra_instance < intra_class < inter_class`, skipping the middle
    /// comparison for instances that are alone in their class.
    pub fn is_ordered(&self) -> bool {
        if self.intra_class.is_nan() {
            self.intra_instance < self.inter_class
        } else {
            self.intra_instance < self.intra_class && self.intra_class < self.inter_class
        }
    }
}

/// Embedding distance statistics per ground-truth instance.
pub fn hierarchy_spread(fields: &PixelFields, targets: &Targets) -> Vec<InstanceSpread> {
    let mean_dist = |a: &[usize], b: &[usize], skip_self: bool| -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &i in a {
            for &j in b {
                if skip_self && i == j {
                    continue;
                }
                sum += 1.0 - dot(fields.embedding.pixel(i), fields.embedding.pixel(j));
                n += 1;
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    };
    targets
        .instances
        .iter()
        .map(|inst| {
            let same_class: Vec<usize> = targets
                .instances
                .iter()
                .filter(|o| o.class_id == inst.class_id && o.id != inst.id)
                .flat_map(|o| o.pixels.iter().copied())
                .collect();
            let other: Vec<usize> = (0..fields.pixels())
                .filter(|&p| {
                    let c = targets.labels.data[p];
                    c != inst.class_id && targets.catalog.contains(c)
                })
                .collect();
            InstanceSpread {
                instance_id: inst.id,
                intra_instance: mean_dist(&inst.pixels, &inst.pixels, true),
                intra_class: mean_dist(&inst.pixels, &same_class, false),
                inter_class: mean_dist(&inst.pixels, &other, false),
            }
        })
        .collect()
}
