//! Raster containers shared by every stage: class catalog, label and
//! instance maps, dense real-valued fields and the panoptic output map.
//!
//! All rasters are row-major. Pixel `i` sits at row `i / width`,
//! column `i % width`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{HleError, Result};

/// Reserved semantic id for unlabeled pixels.
pub const VOID_CLASS: u32 = 255;

/// Reserved segment id for unassigned pixels in a [`PanopticMap`].
pub const VOID_SEGMENT: u32 = 0;

/// Instance indices are encoded in the low three decimal digits.
pub const PANOPTIC_ID_DIVISOR: u32 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Thing,
    Stuff,
}

impl ClassKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassKind::Thing => "thing",
            ClassKind::Stuff => "stuff",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "thing" => Some(ClassKind::Thing),
            "stuff" => Some(ClassKind::Stuff),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub kind: ClassKind,
}

/// Ordered set of semantic classes with contiguous ids starting at 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCatalog {
    classes: Vec<ClassInfo>,
}

impl ClassCatalog {
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        if classes.is_empty() {
            return Err(HleError::InvalidCatalog("no classes".into()));
        }
        for (expected, class) in classes.iter().enumerate() {
            if class.id as usize != expected {
                return Err(HleError::InvalidCatalog(format!(
                    "class ids must be contiguous from 0; position {expected} holds id {}",
                    class.id
                )));
            }
            if class.id == VOID_CLASS {
                return Err(HleError::InvalidCatalog("class id 255 is reserved for void".into()));
            }
        }
        Ok(Self { classes })
    }

    /// Builds a catalog from `(name, kind)` pairs, numbering them in order.
    pub fn from_kinds<S: Into<String>>(entries: impl IntoIterator<Item = (S, ClassKind)>) -> Result<Self> {
        let classes = entries
            .into_iter()
            .enumerate()
            .map(|(i, (name, kind))| ClassInfo { id: i as u32, name: name.into(), kind })
            .collect();
        Self::new(classes)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn contains(&self, class_id: u32) -> bool {
        (class_id as usize) < self.classes.len()
    }

    pub fn kind(&self, class_id: u32) -> Option<ClassKind> {
        self.classes.get(class_id as usize).map(|c| c.kind)
    }

    pub fn is_thing(&self, class_id: u32) -> bool {
        self.kind(class_id) == Some(ClassKind::Thing)
    }

    pub fn is_stuff(&self, class_id: u32) -> bool {
        self.kind(class_id) == Some(ClassKind::Stuff)
    }

    pub fn thing_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.iter().filter(|c| c.kind == ClassKind::Thing).map(|c| c.id)
    }

    pub fn stuff_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.iter().filter(|c| c.kind == ClassKind::Stuff).map(|c| c.id)
    }

    /// Panoptic decoding needs both kinds present.
    pub fn check_panoptic(&self) -> Result<()> {
        if self.thing_ids().next().is_none() || self.stuff_ids().next().is_none() {
            return Err(HleError::InvalidCatalog(
                "panoptic decoding needs at least one thing and one stuff class".into(),
            ));
        }
        Ok(())
    }

    /// Parses `id<TAB>name<TAB>kind` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut classes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(HleError::InvalidCatalog(format!(
                    "line {}: expected 3 tab-separated columns",
                    lineno + 1
                )));
            }
            let id = cols[0]
                .parse::<u32>()
                .map_err(|e| HleError::InvalidCatalog(format!("line {}: {e}", lineno + 1)))?;
            let kind = ClassKind::parse(cols[2]).ok_or_else(|| {
                HleError::InvalidCatalog(format!("line {}: unknown kind {:?}", lineno + 1, cols[2]))
            })?;
            classes.push(ClassInfo { id, name: cols[1].to_string(), kind });
        }
        Self::new(classes)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.classes {
            out.push_str(&format!("{}\t{}\t{}\n", c.id, c.name, c.kind.as_str()));
        }
        out
    }
}

/// Per-pixel semantic class ids; [`VOID_CLASS`] marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        check_len(height * width, data.len())?;
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class_id: u32) -> Self {
        Self { height, width, data: vec![class_id; height * width] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Per-pixel instance ids; 0 means "no instance".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl InstanceMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        check_len(height * width, data.len())?;
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }
}

/// Dense `height x width x channels` raster of reals, channel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FieldGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(HleError::DimensionMismatch("field needs at least one channel".into()));
        }
        check_len(height * width * channels, data.len())?;
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.channels..(i + 1) * self.channels]
    }

    /// Scalar value of a single-channel field.
    #[inline]
    pub fn scalar(&self, i: usize) -> f64 {
        self.data[i * self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Checks that every pixel vector has unit norm within `tol`.
    pub fn is_unit_norm(&self, tol: f64) -> bool {
        (0..self.pixels()).all(|i| (norm(self.pixel(i)) - 1.0).abs() <= tol)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub id: u32,
    pub class_id: u32,
    pub is_thing: bool,
}

/// Single-raster panoptic partition plus its segment table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl PanopticMap {
    pub fn void(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![VOID_SEGMENT; height * width], segments: Vec::new() }
    }

    /// Ground-truth partition: one segment per instance id and one per stuff
    /// class present. Crowd pixels (thing class, instance 0) and void pixels
    /// map to the void segment.
    pub fn from_ground_truth(labels: &LabelMap, instances: &InstanceMap, catalog: &ClassCatalog) -> Result<Self> {
        let found = extract_instances(labels, instances)?;
        let mut map = PanopticMap::void(labels.height, labels.width);
        let mut next_id = 1u32;
        for inst in &found {
            let id = next_id;
            next_id += 1;
            map.segments.push(Segment { id, class_id: inst.class_id, is_thing: true });
            for &p in &inst.pixels {
                map.data[p] = id;
            }
        }
        for stuff in catalog.stuff_ids() {
            let mut any = false;
            let id = next_id;
            for (p, &c) in labels.data.iter().enumerate() {
                if c == stuff {
                    map.data[p] = id;
                    any = true;
                }
            }
            if any {
                map.segments.push(Segment { id, class_id: stuff, is_thing: false });
                next_id += 1;
            }
        }
        Ok(map)
    }

    pub fn segment(&self, id: u32) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }

    /// Semantic raster implied by the segment table; void segments map to [`VOID_CLASS`].
    pub fn semantic(&self) -> LabelMap {
        let lookup: BTreeMap<u32, u32> = self.segments.iter().map(|s| (s.id, s.class_id)).collect();
        let data = self.data.iter().map(|id| lookup.get(id).copied().unwrap_or(VOID_CLASS)).collect();
        LabelMap { height: self.height, width: self.width, data }
    }

    /// Interchange raster of `class_id * 1000 + instance` codes. Thing
    /// segments are numbered per class in segment-table order starting at 1;
    /// stuff uses instance 0 and void pixels encode as `255 * 1000`.
    pub fn to_panoptic_ids(&self) -> Result<Vec<u32>> {
        let mut per_class: BTreeMap<u32, u32> = BTreeMap::new();
        let mut codes: BTreeMap<u32, u32> = BTreeMap::new();
        for s in &self.segments {
            let inst = if s.is_thing {
                let n = per_class.entry(s.class_id).or_insert(0);
                *n += 1;
                *n
            } else {
                0
            };
            codes.insert(s.id, encode_panoptic_id(s.class_id, inst)?);
        }
        let void = encode_panoptic_id(VOID_CLASS, 0)?;
        Ok(self.data.iter().map(|id| codes.get(id).copied().unwrap_or(void)).collect())
    }

    /// Checks the partition invariants: every raster id is in the table or void,
    /// table ids are unique and non-void.
    pub fn check(&self) -> Result<()> {
        check_len(self.height * self.width, self.data.len())?;
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.segments {
            if s.id == VOID_SEGMENT || !seen.insert(s.id) {
                return Err(HleError::Validation(vec![format!("bad segment id {}", s.id)]));
            }
        }
        for &id in &self.data {
            if id != VOID_SEGMENT && !seen.contains(&id) {
                return Err(HleError::Validation(vec![format!("raster id {id} missing from segment table")]));
            }
        }
        Ok(())
    }

    /// Segment table as `segment_id<TAB>class_id<TAB>kind` lines.
    pub fn segments_to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.segments {
            let kind = if s.is_thing { ClassKind::Thing } else { ClassKind::Stuff };
            out.push_str(&format!("{}\t{}\t{}\n", s.id, s.class_id, kind.as_str()));
        }
        out
    }

    pub fn parse_segments(text: &str) -> Result<Vec<Segment>> {
        let mut segs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || HleError::Format(format!("segment table line {}: {line:?}", lineno + 1));
            if cols.len() != 3 {
                return Err(bad());
            }
            let id = cols[0].parse().map_err(|_| bad())?;
            let class_id = cols[1].parse().map_err(|_| bad())?;
            let kind = ClassKind::parse(cols[2]).ok_or_else(bad)?;
            segs.push(Segment { id, class_id, is_thing: kind == ClassKind::Thing });
        }
        Ok(segs)
    }
}

pub fn encode_panoptic_id(class_id: u32, instance_index: u32) -> Result<u32> {
    if instance_index >= PANOPTIC_ID_DIVISOR {
        return Err(HleError::InstanceIndexOutOfRange(instance_index));
    }
    Ok(class_id * PANOPTIC_ID_DIVISOR + instance_index)
}

pub fn decode_panoptic_id(id: u32) -> (u32, u32) {
    (id / PANOPTIC_ID_DIVISOR, id % PANOPTIC_ID_DIVISOR)
}

/// One ground-truth instance: its id, its semantic class and its pixels in
/// ascending row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub id: u32,
    pub class_id: u32,
    pub pixels: Vec<usize>,
}

/// Groups pixels by nonzero instance id, ordered by id.
pub fn extract_instances(labels: &LabelMap, instances: &InstanceMap) -> Result<Vec<Instance>> {
    if labels.height != instances.height || labels.width != instances.width {
        return Err(HleError::DimensionMismatch(format!(
            "labels {}x{} vs instances {}x{}",
            labels.height, labels.width, instances.height, instances.width
        )));
    }
    let mut by_id: BTreeMap<u32, Instance> = BTreeMap::new();
    for (p, (&id, &class_id)) in instances.data.iter().zip(&labels.data).enumerate() {
        if id == 0 {
            continue;
        }
        let entry = by_id.entry(id).or_insert_with(|| Instance { id, class_id, pixels: Vec::new() });
        if entry.class_id != class_id {
            return Err(HleError::InstanceSpansClasses { id, first: entry.class_id, second: class_id });
        }
        entry.pixels.push(p);
    }
    Ok(by_id.into_values().collect())
}

/// Raw arithmetic mean of the listed pixel vectors (not renormalized).
pub fn mean_embedding(field: &FieldGrid, pixels: &[usize]) -> Result<Vec<f64>> {
    if pixels.is_empty() {
        return Err(HleError::EmptyPixelSet);
    }
    let mut mean = vec![0.0; field.channels];
    for &p in pixels {
        for (m, v) in mean.iter_mut().zip(field.pixel(p)) {
            *m += v;
        }
    }
    let n = pixels.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Collects every invariant violation of a labeled scene; never aborts early.
pub fn validate(labels: &LabelMap, instances: &InstanceMap, catalog: &ClassCatalog) -> Vec<String> {
    let mut violations = Vec::new();
    if labels.data.len() != labels.height * labels.width {
        violations.push("label raster length does not match its dimensions".to_string());
    }
    if instances.data.len() != instances.height * instances.width {
        violations.push("instance raster length does not match its dimensions".to_string());
    }
    if labels.height != instances.height || labels.width != instances.width {
        violations.push(format!(
            "dimension mismatch: labels {}x{} vs instances {}x{}",
            labels.height, labels.width, instances.height, instances.width
        ));
        return violations;
    }
    let mut unknown = BTreeMap::new();
    let mut on_stuff = BTreeMap::new();
    let mut on_void = BTreeMap::new();
    let mut class_of: BTreeMap<u32, u32> = BTreeMap::new();
    let mut reported_span = std::collections::BTreeSet::new();
    for (p, (&c, &id)) in labels.data.iter().zip(&instances.data).enumerate() {
        if c != VOID_CLASS && !catalog.contains(c) {
            unknown.entry(c).or_insert(p);
        }
        if id == 0 {
            continue;
        }
        if c == VOID_CLASS {
            on_void.entry(id).or_insert(p);
        } else if catalog.is_stuff(c) {
            on_stuff.entry(id).or_insert(p);
        }
        match class_of.get(&id) {
            Some(&first) if first != c => {
                if reported_span.insert(id) {
                    violations.push(format!("instance {id} spans classes {first} and {c}"));
                }
            }
            Some(_) => {}
            None => {
                class_of.insert(id, c);
            }
        }
    }
    for (c, p) in unknown {
        violations.push(format!("unknown class id {c} (first at pixel {p})"));
    }
    for (id, p) in on_stuff {
        violations.push(format!("instance {id} lies on stuff pixel {p}"));
    }
    for (id, p) in on_void {
        violations.push(format!("instance {id} lies on void pixel {p}"));
    }
    violations
}

/// Like [`validate`] but as a `Result`.
pub fn ensure_valid(labels: &LabelMap, instances: &InstanceMap, catalog: &ClassCatalog) -> Result<()> {
    let v = validate(labels, instances, catalog);
    if v.is_empty() {
        Ok(())
    } else {
        Err(HleError::Validation(v))
    }
}

/// Normalized pixel-center position `((col + 0.5) / W, (row + 0.5) / H)`.
#[inline]
pub fn position(i: usize, height: usize, width: usize) -> [f64; 2] {
    let row = i / width;
    let col = i % width;
    [(col as f64 + 0.5) / width as f64, (row as f64 + 0.5) / height as f64]
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Rescales `v` to unit length; zero vectors are left untouched.
pub fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(HleError::LengthMismatch { left: expected, right: got });
    }
    Ok(())
}
