use std::collections::{BTreeMap, BTreeSet, VecDeque};

use proptest::prelude::*;

use hle_core::decoder::{decode, merge_seeds, seed_nms, semantic_argmax, DecoderConfig, SeedCandidate};
use hle_core::embed::{seed_loss, seg_mean_loss, total_loss, EmbeddingLayout, LossConfig, PixelFields, SemanticState, Targets};
use hle_core::gradcheck::random_scene;
use hle_core::grid::{normalize, FieldGrid, InstanceMap, LabelMap, PanopticMap, VOID_CLASS, VOID_SEGMENT};
use hle_core::metrics::{panoptic_quality, parsing_covering, pq_dagger, mean_iou};
use hle_core::rng::SeededRng;
use hle_core::synth::{generate, standard_catalog, suite_scene};
use hle_core::thomson::{thomson_run, ThomsonConfig};
use hle_core::trainer::{train, TrainConfig, Variant};

fn random_fields(rng: &mut SeededRng, h: usize, w: usize, d: usize) -> PixelFields {
    let mut e = FieldGrid::filled(h, w, d, 0.0);
    for i in 0..h * w {
        e.pixel_mut(i).copy_from_slice(&rng.unit_vector(d));
    }
    let mut scalar = |lo: f64, hi: f64| {
        let mut g = FieldGrid::filled(h, w, 1, 0.0);
        g.data.iter_mut().for_each(|v| *v = rng.range(lo, hi));
        g
    };
    let sigma = scalar(0.2, 1.0);
    let ss = scalar(0.1, 0.6);
    let seed = scalar(0.0, 1.0);
    PixelFields::new(e, sigma, ss, seed).unwrap()
}

fn random_state(rng: &mut SeededRng, k: usize, d: usize) -> SemanticState {
    let means: Vec<Vec<f64>> = (0..k).map(|_| rng.unit_vector(d)).collect();
    let mut s = SemanticState::from_means(&means, 0.5).unwrap();
    s.sigma_sem.iter_mut().for_each(|v| *v = rng.range(0.2, 1.0));
    s
}

/// A valid ground-truth panoptic map over the standard catalog.
fn random_gt(rng: &mut SeededRng, h: usize, w: usize) -> PanopticMap {
    let cat = standard_catalog();
    let mut labels = LabelMap::filled(h, w, 0);
    let mut inst = InstanceMap::zeros(h, w);
    for p in 0..h * w {
        let c = if rng.uniform() < 0.1 { VOID_CLASS } else { rng.int_inclusive(0, 4) };
        labels.data[p] = c;
        if c != VOID_CLASS && cat.is_thing(c) {
            inst.data[p] = c * 4 + rng.int_inclusive(1, 3);
        }
    }
    PanopticMap::from_ground_truth(&labels, &inst, &cat).unwrap()
}

fn candidates(fields: &PixelFields, state: &SemanticState, threshold: f64) -> Vec<SeedCandidate> {
    let sem = semantic_argmax(fields, state).unwrap();
    seed_nms(&fields.seed)
        .into_iter()
        .filter(|&p| fields.seed.data[p] >= threshold)
        .map(|p| SeedCandidate { pixel: p, score: fields.seed.data[p], class_id: sem.data[p] })
        .collect()
}

fn connected(pixels: &[usize], w: usize) -> bool {
    let set: BTreeSet<usize> = pixels.iter().copied().collect();
    let mut seen = BTreeSet::from([pixels[0]]);
    let mut queue = VecDeque::from([pixels[0]]);
    while let Some(p) = queue.pop_front() {
        let (r, c) = (p / w, p % w);
        let mut nb = vec![p + w];
        if r > 0 {
            nb.push(p - w);
        }
        if c > 0 {
            nb.push(p - 1);
        }
        if c + 1 < w {
            nb.push(p + 1);
        }
        for q in nb {
            if set.contains(&q) && seen.insert(q) {
                queue.push_back(q);
            }
        }
    }
    seen.len() == set.len()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn thomson_descends_and_is_reproducible(k in 2usize..7, d in 2usize..6, seed in any::<u64>()) {
        let cfg = ThomsonConfig { steps: 200, rng_seed: seed, ..ThomsonConfig::new(k, d) };
        let (pts, trace) = thomson_run(&cfg).unwrap();
        prop_assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(trace.last().unwrap() <= &trace[0]);
        prop_assert_eq!(thomson_run(&cfg).unwrap().0, pts);
    }

    #[test]
    fn decoder_output_is_a_consistent_partition(seed in any::<u64>(), h in 1usize..9, w in 1usize..9,
                                               t in 0.0f64..1.0, m in 0.05f64..1.0, mask in 0.05f64..0.95) {
        let mut rng = SeededRng::new(seed);
        let cat = standard_catalog();
        let fields = random_fields(&mut rng, h, w, 3);
        let state = random_state(&mut rng, cat.len(), 3);
        let cfg = DecoderConfig { seed_threshold: t, merge_threshold: m, mask_threshold: mask, ..Default::default() };
        let out = decode(&fields, &state, &cat, &cfg).unwrap();
        out.map.check().unwrap();
        prop_assert_eq!(out.map.data.len(), h * w);
        let mut area: BTreeMap<u32, usize> = BTreeMap::new();
        out.map.data.iter().filter(|&&id| id != VOID_SEGMENT).for_each(|&id| *area.entry(id).or_default() += 1);
        for s in &out.map.segments {
            prop_assert!(area.get(&s.id).copied().unwrap_or(0) > 0, "segment {} is empty", s.id);
        }
        // every surviving seed keeps its own pixel
        let layout = EmbeddingLayout::Joint;
        let survivors = merge_seeds(candidates(&fields, &state, t), &fields, layout, m);
        prop_assert_eq!(survivors.len(), out.scores.len());
        for (s, (id, score)) in survivors.iter().zip(&out.scores) {
            prop_assert_eq!(out.map.data[s.pixel], *id);
            prop_assert_eq!(s.score, *score);
        }
        prop_assert_eq!(decode(&fields, &state, &cat, &cfg).unwrap(), out);
    }

    #[test]
    fn raising_the_seed_threshold_never_adds_seeds(seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let mut rng = SeededRng::new(seed);
        let fields = random_fields(&mut rng, 7, 6, 3);
        let state = random_state(&mut rng, 5, 3);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let count = |t| merge_seeds(candidates(&fields, &state, t), &fields, EmbeddingLayout::Joint, 0.5).len();
        prop_assert!(count(hi) <= count(lo));
    }

    #[test]
    fn metric_ranges_and_relations(seed in any::<u64>(), h in 1usize..7, w in 1usize..7) {
        let mut rng = SeededRng::new(seed);
        let cat = standard_catalog();
        let gt = random_gt(&mut rng, h, w);
        let pred = random_gt(&mut rng, h, w);
        let pq = panoptic_quality(&pred, &gt, &cat).unwrap();
        let pqd = pq_dagger(&pred, &gt, &cat).unwrap();
        let pc = parsing_covering(&pred, &gt, &cat).unwrap();
        let miou = mean_iou(&pred.semantic(), &gt.semantic(), &cat).unwrap();
        for v in [pq.pq, pq.pq_things, pq.pq_stuff, pqd.pq, pc.pc, miou] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
        prop_assert!(pqd.pq >= pq.pq - 1e-12);
        if gt.data.iter().any(|&id| id != VOID_SEGMENT) {
            prop_assert_eq!(panoptic_quality(&gt, &gt, &cat).unwrap().pq, 1.0);
            prop_assert_eq!(pq_dagger(&gt, &gt, &cat).unwrap().pq, 1.0);
            prop_assert_eq!(parsing_covering(&gt, &gt, &cat).unwrap().pc, 1.0);
        }
    }

    #[test]
    fn removing_a_prediction_never_adds_false_positives(seed in any::<u64>(), pick in any::<usize>()) {
        let mut rng = SeededRng::new(seed);
        let cat = standard_catalog();
        let gt = random_gt(&mut rng, 6, 6);
        let pred = random_gt(&mut rng, 6, 6);
        prop_assume!(!pred.segments.is_empty());
        let victim = pred.segments[pick % pred.segments.len()].id;
        let mut smaller = pred.clone();
        smaller.segments.retain(|s| s.id != victim);
        smaller.data.iter_mut().filter(|id| **id == victim).for_each(|id| *id = VOID_SEGMENT);
        let fp = |m: &PanopticMap| panoptic_quality(m, &gt, &cat).unwrap().per_class.iter().map(|c| c.fp).sum::<usize>();
        prop_assert!(fp(&smaller) <= fp(&pred));
    }

    #[test]
    fn synthetic_instances_are_connected_and_typed(seed in any::<u64>(), overlap in any::<bool>()) {
        let cat = standard_catalog();
        let mut spec = suite_scene(if overlap { "occluded" } else { "small" }).unwrap();
        spec.rng_seed = seed;
        let scene = generate(&spec, &cat).unwrap();
        let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (p, (&c, &i)) in scene.labels.data.iter().zip(&scene.instances.data).enumerate() {
            prop_assert_eq!(i != 0, cat.is_thing(c));
            prop_assert!(cat.contains(c));
            if i != 0 {
                by_id.entry(i).or_default().push(p);
            }
        }
        if !overlap {
            let ids: Vec<u32> = by_id.keys().copied().collect();
            prop_assert_eq!(ids, (1..=by_id.len() as u32).collect::<Vec<_>>());
            for px in by_id.values() {
                prop_assert!(connected(px, spec.width));
            }
        }
    }

    #[test]
    fn training_keeps_fields_on_their_manifolds(steps in 0usize..12, seed in any::<u64>(), split in any::<bool>()) {
        let cat = standard_catalog();
        let scene = generate(&suite_scene("tiny").unwrap(), &cat).unwrap();
        let variant = if split { Variant::SplitEmbedding } else { Variant::Hierarchical };
        let cfg = TrainConfig { steps, rng_seed: seed, variant, step_size: 0.1, ..Default::default() };
        let out = train(&scene, &cat, &cfg).unwrap();
        let layout = cfg.layout();
        for i in 0..out.fields.pixels() {
            for r in layout.unit_blocks(out.fields.dim()) {
                let n: f64 = out.fields.embedding.pixel(i)[r].iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-6);
            }
        }
        prop_assert!(out.fields.sigma.data.iter().chain(&out.fields.sigma_spatial.data).all(|&s| s > 0.0));
        prop_assert!(out.state.sigma_sem.iter().all(|&s| s > 0.0));
        prop_assert!(out.fields.seed.data.iter().all(|&s| (0.0..=1.0).contains(&s)));
        for k in 0..out.state.num_classes() {
            let n: f64 = out.state.mean(k).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }
        prop_assert_eq!(out.curve.len(), steps + 1);
    }
}

/// The seed and seg_mean targets are detached, so a gradient step descends
/// the total with those targets frozen at the current point. Evaluates that
/// surrogate at `next`, with targets taken from `here`.
fn frozen_total(here: &PixelFields, next: &PixelFields, state: &SemanticState, t: &Targets, cfg: &LossConfig) -> f64 {
    let (r, _) = total_loss(next, state, t, cfg).unwrap();
    let layout = EmbeddingLayout::infer(next.dim(), state.dim()).unwrap();
    let mut seeded = here.clone();
    seeded.seed = next.seed.clone();
    let seed = seed_loss(&seeded, t, layout).0;
    let seg_mean = seg_mean_loss(here, t, state).unwrap().0;
    r.seg + r.ins + r.ins_var + seed + seg_mean
}

/// Projected gradient steps with backtracking on random scenes: every accepted
/// step lowers the frozen-target total, and the run lowers the true total.
#[test]
fn gradient_steps_descend_monotonically() {
    let mut rng = SeededRng::new(77);
    let cfg = LossConfig::default();
    for _ in 0..10 {
        let (mut f, mut s, t) = random_scene(&mut rng).unwrap();
        let (mut report, mut g) = total_loss(&f, &s, &t, &cfg).unwrap();
        let initial = report.total;
        let layout = EmbeddingLayout::infer(f.dim(), s.dim()).unwrap();
        assert!((frozen_total(&f, &f, &s, &t, &cfg) - initial).abs() < 1e-12);
        for step in 0..15 {
            let mut eta = 0.1;
            let mut accepted = false;
            while eta > 1e-12 {
                let mut f2 = f.clone();
                let mut s2 = s.clone();
                let axpy = |x: &mut [f64], d: &[f64]| x.iter_mut().zip(d).for_each(|(a, b)| *a -= eta * b);
                axpy(&mut f2.embedding.data, &g.embedding);
                axpy(&mut f2.sigma.data, &g.sigma);
                axpy(&mut f2.sigma_spatial.data, &g.sigma_spatial);
                axpy(&mut f2.seed.data, &g.seed);
                axpy(&mut s2.mu_hat, &g.mu_hat);
                axpy(&mut s2.sigma_sem, &g.sigma_sem);
                for i in 0..f2.pixels() {
                    for r in layout.unit_blocks(f2.dim()) {
                        normalize(&mut f2.embedding.pixel_mut(i)[r]);
                    }
                }
                s2.reproject();
                let positive = f2.sigma.data.iter().chain(&f2.sigma_spatial.data).chain(&s2.sigma_sem).all(|&v| v > 0.0);
                if positive && frozen_total(&f, &f2, &s2, &t, &cfg) < report.total {
                    let (r2, g2) = total_loss(&f2, &s2, &t, &cfg).unwrap();
                    (f, s, report, g) = (f2, s2, r2, g2);
                    accepted = true;
                    break;
                }
                eta *= 0.5;
            }
            let norm: f64 = [&g.embedding, &g.sigma, &g.sigma_spatial, &g.seed, &g.mu_hat, &g.sigma_sem]
                .iter()
                .flat_map(|v| v.iter())
                .map(|v| v * v)
                .sum();
            assert!(accepted || norm == 0.0, "no descent at step {step}: {report:?}");
        }
        assert!(report.total < initial, "{} -> {}", initial, report.total);
    }
}
