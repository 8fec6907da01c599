//! Panoptic decoding: semantic argmax, seed non-maximum suppression, greedy
//! seed merging, mask assignment and stuff filtering.

use rayon::prelude::*;

use crate::embed::{psi_scores, EmbeddingLayout, PixelFields, SemanticState};
use crate::error::{HleError, Result};
use crate::grid::{dot, ClassCatalog, FieldGrid, LabelMap, PanopticMap, Segment, VOID_SEGMENT};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub seed_threshold: f64,
    pub merge_threshold: f64,
    pub mask_threshold: f64,
    pub stuff_threshold: f64,
    pub min_stuff_area: usize,
    pub downsample_factor: usize,
    /// Only accept seeds whose semantic argmax is a thing class.
    pub things_only_seeds: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            seed_threshold: 0.5,
            merge_threshold: 0.5,
            mask_threshold: 0.5,
            stuff_threshold: 0.25,
            min_stuff_area: 0,
            downsample_factor: 1,
            things_only_seeds: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("seed_threshold", self.seed_threshold),
            ("merge_threshold", self.merge_threshold),
            ("mask_threshold", self.mask_threshold),
            ("stuff_threshold", self.stuff_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(HleError::InvalidConfig(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if ![1, 2, 4, 8].contains(&self.downsample_factor) {
            return Err(HleError::InvalidConfig(format!(
                "downsample_factor must be 1, 2, 4 or 8, got {}",
                self.downsample_factor
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedCandidate {
    pub pixel: usize,
    pub score: f64,
    pub class_id: u32,
}

/// Decoder output: the panoptic map and the seed score of each thing segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub map: PanopticMap,
    pub scores: Vec<(u32, f64)>,
}

/// Per-pixel argmax of ψ; ties go to the smallest class id.
pub fn semantic_argmax(fields: &PixelFields, state: &SemanticState) -> Result<LabelMap> {
    let layout = EmbeddingLayout::infer(fields.dim(), state.dim())?;
    let range = layout.semantic_range(fields.dim());
    let data: Vec<u32> = (0..fields.pixels())
        .into_par_iter()
        .map(|i| argmax(&psi_scores(&fields.embedding.pixel(i)[range.clone()], state)) as u32)
        .collect();
    LabelMap::new(fields.height(), fields.width(), data)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// 3x3 max pooling with edge clamping. A pixel survives when it attains the
/// maximum of its window and no earlier pixel (row-major) of that window does.
pub fn seed_nms(seed: &FieldGrid) -> Vec<usize> {
    let (h, w) = (seed.height, seed.width);
    let s = |r: usize, c: usize| seed.data[r * w + c];
    let mut keep = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = s(r, c);
            let (r0, r1, c0, c1) = (r.saturating_sub(1), (r + 1).min(h - 1), c.saturating_sub(1), (c + 1).min(w - 1));
            let mut max = f64::NEG_INFINITY;
            let mut first = usize::MAX;
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    let x = s(rr, cc);
                    if x > max {
                        max = x;
                        first = rr * w + cc;
                    }
                }
            }
            if v == max && first == r * w + c {
                keep.push(r * w + c);
            }
        }
    }
    keep
}

/// Φ between pixel `a` (whose bandwidths are used) and pixel `b`.
pub fn pair_affinity(fields: &PixelFields, layout: EmbeddingLayout, a: usize, b: usize) -> f64 {
    let range = layout.instance_range(fields.dim());
    let ea = &fields.embedding.pixel(a)[range.clone()];
    let eb = &fields.embedding.pixel(b)[range];
    let (pa, pb) = (fields.position(a), fields.position(b));
    let s = fields.sigma.data[a];
    let ss = fields.sigma_spatial.data[a];
    let r2 = (pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2);
    (-(1.0 - dot(ea, eb)) / (2.0 * s * s) - r2 / (2.0 * ss * ss)).exp()
}

/// Greedy merge in descending score order (ties by pixel index): a candidate
/// survives only if its Φ from every earlier survivor is below the threshold.
pub fn merge_seeds(
    mut candidates: Vec<SeedCandidate>,
    fields: &PixelFields,
    layout: EmbeddingLayout,
    merge_threshold: f64,
) -> Vec<SeedCandidate> {
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.pixel.cmp(&b.pixel)));
    let mut survivors: Vec<SeedCandidate> = Vec::new();
    for c in candidates {
        if survivors.iter().all(|s| pair_affinity(fields, layout, s.pixel, c.pixel) < merge_threshold) {
            survivors.push(c);
        }
    }
    survivors
}

/// Owner survivor of each pixel: the one with the largest Φ (first on ties),
/// if that Φ reaches the mask threshold.
pub fn assign_owners(
    survivors: &[SeedCandidate],
    fields: &PixelFields,
    layout: EmbeddingLayout,
    mask_threshold: f64,
) -> Vec<Option<usize>> {
    (0..fields.pixels())
        .into_par_iter()
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (k, s) in survivors.iter().enumerate() {
                let phi = pair_affinity(fields, layout, s.pixel, i);
                if phi >= mask_threshold && best.is_none_or(|(_, b)| phi > b) {
                    best = Some((k, phi));
                }
            }
            best.map(|(k, _)| k)
        })
        .collect()
}

/// Instance segments from the survivors. Segment ids run from 1 in survivor
/// order; survivors that own no pixel are dropped. Pixels left unassigned
/// keep id 0 (stuff filtering decides what happens to them). A segment is
/// marked as a thing when its seed's class is a thing class.
pub fn assign_masks(
    survivors: &[SeedCandidate],
    fields: &PixelFields,
    layout: EmbeddingLayout,
    catalog: &ClassCatalog,
    config: &DecoderConfig,
) -> (PanopticMap, Vec<(u32, f64)>) {
    let owners = assign_owners(survivors, fields, layout, config.mask_threshold);
    let mut counts = vec![0usize; survivors.len()];
    owners.iter().flatten().for_each(|&k| counts[k] += 1);
    let mut ids = vec![VOID_SEGMENT; survivors.len()];
    let mut segments = Vec::new();
    let mut scores = Vec::new();
    for (k, s) in survivors.iter().enumerate() {
        if counts[k] > 0 {
            let id = segments.len() as u32 + 1;
            ids[k] = id;
            segments.push(Segment { id, class_id: s.class_id, is_thing: catalog.is_thing(s.class_id) });
            scores.push((id, s.score));
        }
    }
    let data = owners.iter().map(|o| o.map_or(VOID_SEGMENT, |k| ids[k])).collect();
    (PanopticMap { height: fields.height(), width: fields.width(), data, segments }, scores)
}

/// Adds one segment per confident stuff class over the still-unassigned pixels.
pub fn stuff_filter(
    map: &mut PanopticMap,
    semantic: &LabelMap,
    fields: &PixelFields,
    state: &SemanticState,
    catalog: &ClassCatalog,
    config: &DecoderConfig,
) -> Result<()> {
    let layout = EmbeddingLayout::infer(fields.dim(), state.dim())?;
    let range = layout.semantic_range(fields.dim());
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); catalog.len()];
    for i in 0..map.data.len() {
        let k = semantic.data[i];
        if map.data[i] != VOID_SEGMENT || !catalog.is_stuff(k) {
            continue;
        }
        let psi = psi_scores(&fields.embedding.pixel(i)[range.clone()], state);
        if psi[k as usize] >= config.stuff_threshold {
            members[k as usize].push(i);
        }
    }
    for (k, pixels) in members.iter().enumerate() {
        if pixels.is_empty() || pixels.len() < config.min_stuff_area {
            continue;
        }
        let id = map.segments.len() as u32 + 1;
        map.segments.push(Segment { id, class_id: k as u32, is_thing: false });
        for &p in pixels {
            map.data[p] = id;
        }
    }
    Ok(())
}

fn check_inputs(fields: &PixelFields, state: &SemanticState, catalog: &ClassCatalog) -> Result<()> {
    if state.num_classes() != catalog.len() {
        return Err(HleError::DimensionMismatch(format!(
            "state has {} classes, catalog {}",
            state.num_classes(),
            catalog.len()
        )));
    }
    EmbeddingLayout::infer(fields.dim(), state.dim())?;
    Ok(())
}

/// Full-resolution decode, ignoring `downsample_factor`.
pub fn decode_full(
    fields: &PixelFields,
    state: &SemanticState,
    catalog: &ClassCatalog,
    config: &DecoderConfig,
) -> Result<Decoded> {
    config.validate()?;
    check_inputs(fields, state, catalog)?;
    let layout = EmbeddingLayout::infer(fields.dim(), state.dim())?;
    let semantic = semantic_argmax(fields, state)?;
    let candidates: Vec<SeedCandidate> = seed_nms(&fields.seed)
        .into_iter()
        .filter(|&p| fields.seed.data[p] >= config.seed_threshold)
        .map(|p| SeedCandidate { pixel: p, score: fields.seed.data[p], class_id: semantic.data[p] })
        .filter(|c| !config.things_only_seeds || catalog.is_thing(c.class_id))
        .collect();
    let survivors = merge_seeds(candidates, fields, layout, config.merge_threshold);
    let (mut map, scores) = assign_masks(&survivors, fields, layout, catalog, config);
    stuff_filter(&mut map, &semantic, fields, state, catalog, config)?;
    Ok(Decoded { map, scores })
}

/// Decodes on fields subsampled by `factor`, then replicates each output
/// pixel over its block (cut at the original borders).
pub fn decode_downsampled(
    fields: &PixelFields,
    state: &SemanticState,
    catalog: &ClassCatalog,
    config: &DecoderConfig,
    factor: usize,
) -> Result<Decoded> {
    if factor <= 1 {
        return decode_full(fields, state, catalog, config);
    }
    let small = fields.subsample(factor);
    let coarse = decode_full(&small, state, catalog, config)?;
    let (h, w) = (fields.height(), fields.width());
    let sw = small.width();
    let mut data = vec![VOID_SEGMENT; h * w];
    for r in 0..h {
        for c in 0..w {
            data[r * w + c] = coarse.map.data[(r / factor) * sw + c / factor];
        }
    }
    Ok(Decoded { map: PanopticMap { height: h, width: w, data, segments: coarse.map.segments }, scores: coarse.scores })
}

/// Decodes at the configured downsample factor.
pub fn decode(fields: &PixelFields, state: &SemanticState, catalog: &ClassCatalog, config: &DecoderConfig) -> Result<Decoded> {
    decode_downsampled(fields, state, catalog, config, config.downsample_factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ClassKind;

    fn grid(h: usize, w: usize, v: Vec<f64>) -> FieldGrid {
        FieldGrid::new(h, w, 1, v).unwrap()
    }

    #[test]
    fn argmax_ties_and_means() {
        let s = SemanticState::new(2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0], vec![0.5; 4]).unwrap();
        let h = 0.5f64.sqrt();
        let f = PixelFields::new(
            FieldGrid::new(1, 3, 2, vec![0.0, -1.0, h, h, 0.0, 0.0]).unwrap(),
            grid(1, 3, vec![0.5; 3]),
            grid(1, 3, vec![0.5; 3]),
            grid(1, 3, vec![0.0; 3]),
        )
        .unwrap();
        // pixel 0 at class 3's mean; pixel 1 ties classes 0 and 1; pixel 2 uniform
        assert_eq!(semantic_argmax(&f, &s).unwrap().data, vec![3, 0, 0]);
    }

    #[test]
    fn nms_examples() {
        // single peak, strictly decreasing away from it
        let v: Vec<f64> = (0..25).map(|i: i32| 1.0 / (1.0 + ((i / 5 - 2).pow(2) + (i % 5 - 2).pow(2)) as f64)).collect();
        assert_eq!(seed_nms(&grid(5, 5, v)), vec![12]);
        // constant map: only the first pixel wins every window it is in
        assert_eq!(seed_nms(&grid(5, 5, vec![0.4; 25])), vec![0]);
        let mut v = vec![0.0; 12];
        v[0] = 0.8;
        v[10] = 0.8;
        assert_eq!(seed_nms(&grid(1, 12, v)), vec![0, 10]);
        // adjacent equal maxima: the row-major first one survives
        let mut v = vec![0.0; 9];
        v[4] = 0.7;
        v[5] = 0.7;
        assert_eq!(seed_nms(&grid(3, 3, v)), vec![4]);
    }

    fn two_pixel_fields(e0: [f64; 2], e1: [f64; 2], sigma: f64) -> PixelFields {
        PixelFields::new(
            FieldGrid::new(1, 2, 2, [e0, e1].concat()).unwrap(),
            grid(1, 2, vec![sigma; 2]),
            grid(1, 2, vec![1e3; 2]),
            grid(1, 2, vec![0.9, 0.8]),
        )
        .unwrap()
    }

    #[test]
    fn affinity_examples() {
        let f = two_pixel_fields([1.0, 0.0], [1.0, 0.0], 0.3);
        assert_eq!(pair_affinity(&f, EmbeddingLayout::Joint, 0, 0), 1.0);
        let f = two_pixel_fields([1.0, 0.0], [0.0, 1.0], 0.5f64.sqrt());
        let v = pair_affinity(&f, EmbeddingLayout::Joint, 0, 1);
        assert!((v - (-1.0f64).exp()).abs() < 1e-6);
        let mut f = PixelFields::constant(1, 4, &[1.0, 0.0], 0.5, 0.2, 0.5);
        f.sigma_spatial.data[0] = 0.2;
        let a: Vec<f64> = (1..4).map(|b| pair_affinity(&f, EmbeddingLayout::Joint, 0, b)).collect();
        assert!(a[0] > a[1] && a[1] > a[2]);
    }

    #[test]
    fn merge_examples() {
        let f = two_pixel_fields([1.0, 0.0], [0.0, 1.0], 0.05);
        let c = |pixel, score| SeedCandidate { pixel, score, class_id: 3 };
        assert_eq!(merge_seeds(vec![c(0, 0.9), c(0, 0.9)], &f, EmbeddingLayout::Joint, 0.5).len(), 1);
        assert_eq!(merge_seeds(vec![c(0, 0.9), c(1, 0.8)], &f, EmbeddingLayout::Joint, 0.5).len(), 2);
        let same = PixelFields::constant(1, 3, &[1.0, 0.0], 0.5, 1.0, 0.5);
        let out = merge_seeds(vec![c(0, 0.6), c(1, 0.9), c(2, 0.7)], &same, EmbeddingLayout::Joint, 0.5);
        assert_eq!(out, vec![c(1, 0.9)]);
    }

    #[test]
    fn mask_assignment() {
        let cfg = DecoderConfig::default();
        let same = PixelFields::constant(2, 2, &[1.0, 0.0], 0.5, 1e3, 0.5);
        let (map, _) = assign_masks(&[], &same, EmbeddingLayout::Joint, &catalog(), &cfg);
        assert!(map.data.iter().all(|&v| v == VOID_SEGMENT) && map.segments.is_empty());
        let s = SeedCandidate { pixel: 0, score: 0.9, class_id: 2 };
        let (map, scores) = assign_masks(&[s], &same, EmbeddingLayout::Joint, &catalog(), &cfg);
        assert!(map.segments[0].is_thing);
        assert_eq!(map.data, vec![1; 4]);
        assert_eq!(scores, vec![(1, 0.9)]);

        // pixel 2 sees Φ 0.7 to the first seed and 0.9 to the second
        let e = |t: f64| [t.cos(), t.sin()];
        let sigma = 1.0;
        let t_a = (1.0 + 2.0 * sigma * sigma * 0.7f64.ln()).acos();
        let t_b = (1.0 + 2.0 * sigma * sigma * 0.9f64.ln()).acos();
        // seeds at angles -t_a and +t_b around pixel 2 at angle 0
        let f = PixelFields::new(
            FieldGrid::new(1, 3, 2, [e(-t_a), e(t_b), e(0.0)].concat()).unwrap(),
            grid(1, 3, vec![sigma; 3]),
            grid(1, 3, vec![1e6; 3]),
            grid(1, 3, vec![0.0; 3]),
        )
        .unwrap();
        assert!((pair_affinity(&f, EmbeddingLayout::Joint, 0, 2) - 0.7).abs() < 1e-9);
        assert!((pair_affinity(&f, EmbeddingLayout::Joint, 1, 2) - 0.9).abs() < 1e-9);
        let seeds = [SeedCandidate { pixel: 0, score: 0.9, class_id: 1 }, SeedCandidate { pixel: 1, score: 0.8, class_id: 1 }];
        assert_eq!(assign_owners(&seeds, &f, EmbeddingLayout::Joint, 0.5)[2], Some(1));
    }

    fn catalog() -> ClassCatalog {
        ClassCatalog::from_kinds([("ground", ClassKind::Stuff), ("sky", ClassKind::Stuff), ("car", ClassKind::Thing)]).unwrap()
    }

    #[test]
    fn stuff_filter_rules() {
        let cat = catalog();
        let state = SemanticState::new(3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![0.3; 3]).unwrap();
        let f = PixelFields::constant(1, 5, &[1.0, 0.0, 0.0], 0.5, 0.5, 0.0);
        let sem = semantic_argmax(&f, &state).unwrap();
        let mut map = PanopticMap::void(1, 5);
        stuff_filter(&mut map, &sem, &f, &state, &cat, &DecoderConfig::default()).unwrap();
        assert_eq!(map.segments, vec![Segment { id: 1, class_id: 0, is_thing: false }]);
        assert_eq!(map.data, vec![1; 5]);

        let mut map = PanopticMap::void(1, 5);
        let cfg = DecoderConfig { min_stuff_area: 10, ..Default::default() };
        stuff_filter(&mut map, &sem, &f, &state, &cat, &cfg).unwrap();
        assert!(map.segments.is_empty());

        // uncertain embedding: ψ = 1/3 at every class, below a 0.5 threshold
        let u = 1.0 / 3f64.sqrt();
        let f = PixelFields::constant(1, 5, &[u, u, u], 0.5, 0.5, 0.0);
        let sem = semantic_argmax(&f, &state).unwrap();
        let mut map = PanopticMap::void(1, 5);
        let cfg = DecoderConfig { stuff_threshold: 0.5, ..Default::default() };
        stuff_filter(&mut map, &sem, &f, &state, &cat, &cfg).unwrap();
        assert!(map.segments.is_empty());
    }

    #[test]
    fn empty_and_constant_inputs() {
        let cat = catalog();
        let state = SemanticState::new(3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![0.3; 3]).unwrap();
        let f = PixelFields::constant(6, 10, &[0.0, 1.0, 0.0], 0.5, 0.5, 0.0);
        let full = decode_full(&f, &state, &cat, &DecoderConfig::default()).unwrap();
        assert_eq!(full.map.segments.len(), 1);
        assert_eq!(decode(&f, &state, &cat, &DecoderConfig::default()).unwrap(), full);
        for factor in [2, 4, 8] {
            let d = decode_downsampled(&f, &state, &cat, &DecoderConfig::default(), factor).unwrap();
            assert_eq!(d, full, "factor {factor}");
        }
        assert!(DecoderConfig { downsample_factor: 3, ..Default::default() }.validate().is_err());
        assert!(DecoderConfig { seed_threshold: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn raising_seed_threshold_never_adds_seeds() {
        use crate::rng::SeededRng;
        let mut rng = SeededRng::new(4);
        let cat = catalog();
        let state = SemanticState::new(3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![0.5; 3]).unwrap();
        let mut f = PixelFields::constant(8, 8, &[0.0, 0.0, 1.0], 0.1, 0.05, 0.0);
        for i in 0..64 {
            f.embedding.pixel_mut(i).copy_from_slice(&rng.unit_vector(3));
            f.seed.data[i] = rng.uniform();
        }
        let mut last = usize::MAX;
        for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let cfg = DecoderConfig { seed_threshold: t, ..Default::default() };
            let n = decode_full(&f, &state, &cat, &cfg).unwrap().scores.len();
            assert!(n <= last);
            last = n;
            assert!(decode_full(&f, &state, &cat, &cfg).unwrap().map.check().is_ok());
        }
    }
}
