//! Synthetic panoptic scenes: horizontal stuff bands with discs and
//! rectangles painted on top as thing instances.

use serde::{Deserialize, Serialize};

use crate::error::{HleError, Result};
use crate::grid::{ensure_valid, ClassCatalog, ClassKind, InstanceMap, LabelMap};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Rectangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StuffBand {
    pub class_id: u32,
    /// Fraction of the image height, top to bottom.
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThingSpec {
    pub class_id: u32,
    pub min_count: u32,
    pub max_count: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub stuff_bands: Vec<StuffBand>,
    pub things: Vec<ThingSpec>,
    pub shapes: Vec<ShapeKind>,
    /// Shape extent as a fraction of `min(height, width)`.
    pub min_size: f64,
    pub max_size: f64,
    /// When false, shapes are re-drawn until they keep a margin from every
    /// earlier shape. When true, later shapes occlude earlier ones.
    #[serde(default)]
    pub allow_overlap: bool,
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub labels: LabelMap,
    pub instances: InstanceMap,
}

/// Classes used by the standard suite: three stuff classes, two thing classes.
pub fn standard_catalog() -> ClassCatalog {
    ClassCatalog::from_kinds([
        ("ground", ClassKind::Stuff),
        ("wall", ClassKind::Stuff),
        ("sky", ClassKind::Stuff),
        ("car", ClassKind::Thing),
        ("person", ClassKind::Thing),
    ])
    .expect("standard catalog is well formed")
}

const GROUND: u32 = 0;
const WALL: u32 = 1;
const SKY: u32 = 2;
const CAR: u32 = 3;
const PERSON: u32 = 4;

fn bands3() -> Vec<StuffBand> {
    vec![
        StuffBand { class_id: SKY, fraction: 0.25 },
        StuffBand { class_id: WALL, fraction: 0.35 },
        StuffBand { class_id: GROUND, fraction: 0.4 },
    ]
}

fn fixed(class_id: u32, n: u32) -> ThingSpec {
    ThingSpec { class_id, min_count: n, max_count: n }
}

/// The named scenes used throughout the tests.
pub fn standard_suite() -> Vec<(String, SceneSpec)> {
    let both = vec![ShapeKind::Disc, ShapeKind::Rectangle];
    vec![
        (
            "tiny".into(),
            SceneSpec {
                height: 32,
                width: 48,
                stuff_bands: vec![StuffBand { class_id: SKY, fraction: 0.4 }, StuffBand { class_id: GROUND, fraction: 0.6 }],
                things: vec![fixed(CAR, 1), fixed(PERSON, 1)],
                shapes: both.clone(),
                min_size: 0.25,
                max_size: 0.4,
                allow_overlap: false,
                rng_seed: 1,
            },
        ),
        (
            "small".into(),
            SceneSpec {
                height: 64,
                width: 96,
                stuff_bands: bands3(),
                things: vec![fixed(CAR, 3), fixed(PERSON, 2)],
                shapes: both.clone(),
                min_size: 0.18,
                max_size: 0.3,
                allow_overlap: false,
                rng_seed: 2,
            },
        ),
        (
            "occluded".into(),
            SceneSpec {
                height: 64,
                width: 96,
                stuff_bands: bands3(),
                things: vec![fixed(CAR, 2), fixed(PERSON, 2)],
                shapes: vec![ShapeKind::Disc],
                min_size: 0.3,
                max_size: 0.45,
                allow_overlap: true,
                rng_seed: 3,
            },
        ),
        (
            "dense".into(),
            SceneSpec {
                height: 96,
                width: 128,
                stuff_bands: bands3(),
                things: vec![fixed(CAR, 7), fixed(PERSON, 5)],
                shapes: both,
                min_size: 0.1,
                max_size: 0.16,
                allow_overlap: false,
                rng_seed: 4,
            },
        ),
    ]
}

pub fn suite_scene(name: &str) -> Option<SceneSpec> {
    standard_suite().into_iter().find(|(n, _)| n == name).map(|(_, s)| s)
}

impl SceneSpec {
    pub fn validate(&self, catalog: &ClassCatalog) -> Result<()> {
        let bad = |m: String| Err(HleError::InvalidScene(m));
        if self.height == 0 || self.width == 0 {
            return bad("empty image".into());
        }
        if self.stuff_bands.is_empty() {
            return bad("at least one stuff band is required".into());
        }
        let total: f64 = self.stuff_bands.iter().map(|b| b.fraction).sum();
        if (total - 1.0).abs() > 1e-9 || self.stuff_bands.iter().any(|b| !(b.fraction >= 0.0)) {
            return bad(format!("band fractions must be non-negative and sum to 1, got {total}"));
        }
        if let Some(b) = self.stuff_bands.iter().find(|b| !catalog.is_stuff(b.class_id)) {
            return bad(format!("band class {} is not a stuff class", b.class_id));
        }
        if let Some(t) = self.things.iter().find(|t| !catalog.is_thing(t.class_id)) {
            return bad(format!("thing class {} is not a thing class", t.class_id));
        }
        if let Some(t) = self.things.iter().find(|t| t.min_count > t.max_count) {
            return bad(format!("class {}: min_count exceeds max_count", t.class_id));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= 0.5) {
            return bad(format!("sizes must satisfy 0 < min <= max <= 0.5, got {}..{}", self.min_size, self.max_size));
        }
        if self.shapes.is_empty() && self.things.iter().any(|t| t.max_count > 0) {
            return bad("no shape kinds to draw things with".into());
        }
        Ok(())
    }
}

/// Pixels covered by one randomly placed shape, in row-major order.
fn draw_shape(spec: &SceneSpec, rng: &mut SeededRng) -> Vec<usize> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let m = h.min(w);
    let kind = spec.shapes[rng.int_inclusive(0, spec.shapes.len() as u32 - 1) as usize];
    let size = rng.range(spec.min_size, spec.max_size) * m;
    let (half_w, half_h) = match kind {
        ShapeKind::Disc => (size / 2.0, size / 2.0),
        ShapeKind::Rectangle => {
            let aspect = rng.range(0.6, 1.6);
            (size * aspect.sqrt() / 2.0, size / aspect.sqrt() / 2.0)
        }
    };
    let cx = rng.range(half_w.min(w / 2.0), (w - half_w).max(w / 2.0));
    let cy = rng.range(half_h.min(h / 2.0), (h - half_h).max(h / 2.0));
    let mut out = Vec::new();
    for r in 0..spec.height {
        for c in 0..spec.width {
            let dx = c as f64 + 0.5 - cx;
            let dy = r as f64 + 0.5 - cy;
            let inside = match kind {
                ShapeKind::Disc => dx * dx + dy * dy <= half_w * half_w,
                ShapeKind::Rectangle => dx.abs() <= half_w && dy.abs() <= half_h,
            };
            if inside {
                out.push(r * spec.width + c);
            }
        }
    }
    if out.is_empty() {
        // sub-pixel shape: keep its center pixel
        let r = (cy as usize).min(spec.height - 1);
        let c = (cx as usize).min(spec.width - 1);
        out.push(r * spec.width + c);
    }
    out
}

/// Minimum gap in pixels kept between non-overlapping shapes.
const MARGIN: usize = 2;
const MAX_ATTEMPTS: usize = 500;

fn near_occupied(occupied: &[bool], p: usize, h: usize, w: usize) -> bool {
    let (r, c) = (p / w, p % w);
    for rr in r.saturating_sub(MARGIN)..=(r + MARGIN).min(h - 1) {
        for cc in c.saturating_sub(MARGIN)..=(c + MARGIN).min(w - 1) {
            if occupied[rr * w + cc] {
                return true;
            }
        }
    }
    false
}

pub fn generate(spec: &SceneSpec, catalog: &ClassCatalog) -> Result<Scene> {
    spec.validate(catalog)?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = SeededRng::new(spec.rng_seed);
    let mut labels = LabelMap::filled(h, w, spec.stuff_bands[0].class_id);
    let mut cum = 0.0;
    let mut start = 0;
    for (i, band) in spec.stuff_bands.iter().enumerate() {
        cum += band.fraction;
        let end = if i + 1 == spec.stuff_bands.len() { h } else { ((cum * h as f64).round() as usize).min(h) };
        for r in start..end {
            labels.data[r * w..(r + 1) * w].fill(band.class_id);
        }
        start = end.max(start);
    }

    let mut order = Vec::new();
    for t in &spec.things {
        let n = rng.int_inclusive(t.min_count, t.max_count);
        order.extend(std::iter::repeat(t.class_id).take(n as usize));
    }

    let mut raw = InstanceMap::zeros(h, w);
    let mut occupied = vec![false; h * w];
    for (k, &class_id) in order.iter().enumerate() {
        let id = k as u32 + 1;
        let mut pixels = draw_shape(spec, &mut rng);
        if !spec.allow_overlap {
            let mut attempts = 1;
            while pixels.iter().any(|&p| near_occupied(&occupied, p, h, w)) {
                if attempts == MAX_ATTEMPTS {
                    return Err(HleError::InvalidScene(format!(
                        "could not place instance {id} without overlap after {MAX_ATTEMPTS} attempts"
                    )));
                }
                pixels = draw_shape(spec, &mut rng);
                attempts += 1;
            }
        }
        for p in pixels {
            occupied[p] = true;
            raw.data[p] = id;
            labels.data[p] = class_id;
        }
    }

    // compact ids, dropping instances that were painted over completely
    let mut remap = vec![0u32; order.len() + 1];
    let mut present = vec![false; order.len() + 1];
    raw.data.iter().for_each(|&v| present[v as usize] = true);
    let mut next = 1;
    for id in 1..=order.len() {
        if present[id] {
            remap[id] = next;
            next += 1;
        }
    }
    let instances = InstanceMap { height: h, width: w, data: raw.data.iter().map(|&v| remap[v as usize]).collect() };
    ensure_valid(&labels, &instances, catalog)?;
    Ok(Scene { labels, instances })
}
