//! Segmentation metrics over panoptic maps: PQ (with thing/stuff splits),
//! PQ†, parsing covering, mIoU and a simplified mask AP.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{HleError, Result};
use crate::grid::{ClassCatalog, LabelMap, PanopticMap, VOID_CLASS, VOID_SEGMENT};

/// `|a ∩ b| / |a ∪ b|` over pixel index sets, 1 when both are empty.
pub fn mask_iou(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPq {
    pub class_id: u32,
    pub is_thing: bool,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
    pub pq: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PqResult {
    /// Classes with at least one TP, FP or FN, ordered by class id.
    pub per_class: Vec<ClassPq>,
    pub pq: f64,
    pub pq_things: f64,
    pub pq_stuff: f64,
}

/// Pixel counts shared by every panoptic metric.
struct Overlaps {
    pred_area: BTreeMap<u32, usize>,
    gt_area: BTreeMap<u32, usize>,
    /// Pixels of a predicted segment that are void in the ground truth.
    pred_void: BTreeMap<u32, usize>,
    inter: BTreeMap<(u32, u32), usize>,
    pred_class: BTreeMap<u32, u32>,
    gt_class: BTreeMap<u32, u32>,
}

impl Overlaps {
    fn new(pred: &PanopticMap, gt: &PanopticMap) -> Result<Self> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(HleError::DimensionMismatch(format!(
                "prediction is {}x{}, ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        pred.check()?;
        gt.check()?;
        let mut o = Overlaps {
            pred_area: BTreeMap::new(),
            gt_area: BTreeMap::new(),
            pred_void: BTreeMap::new(),
            inter: BTreeMap::new(),
            pred_class: pred.segments.iter().map(|s| (s.id, s.class_id)).collect(),
            gt_class: gt.segments.iter().map(|s| (s.id, s.class_id)).collect(),
        };
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if p != VOID_SEGMENT {
                *o.pred_area.entry(p).or_default() += 1;
            }
            if g != VOID_SEGMENT {
                *o.gt_area.entry(g).or_default() += 1;
            }
            match (p != VOID_SEGMENT, g != VOID_SEGMENT) {
                (true, true) => *o.inter.entry((p, g)).or_default() += 1,
                (true, false) => *o.pred_void.entry(p).or_default() += 1,
                _ => {}
            }
        }
        Ok(o)
    }

    /// IoU with ground-truth void pixels removed from the prediction.
    fn iou(&self, p: u32, g: u32) -> f64 {
        let i = self.inter.get(&(p, g)).copied().unwrap_or(0);
        let pa = self.pred_area.get(&p).copied().unwrap_or(0) - self.pred_void.get(&p).copied().unwrap_or(0);
        let ga = self.gt_area.get(&g).copied().unwrap_or(0);
        let union = pa + ga - i;
        if union == 0 {
            0.0
        } else {
            i as f64 / union as f64
        }
    }

    fn preds_of(&self, class: u32) -> Vec<u32> {
        self.pred_area.keys().copied().filter(|p| self.pred_class[p] == class).collect()
    }

    fn gts_of(&self, class: u32) -> Vec<u32> {
        self.gt_area.keys().copied().filter(|g| self.gt_class[g] == class).collect()
    }

    /// Unmatched predictions that are mostly ground-truth void are not false positives.
    fn counts_as_fp(&self, p: u32) -> bool {
        let void = self.pred_void.get(&p).copied().unwrap_or(0);
        void * 2 <= self.pred_area[&p]
    }

    fn classes(&self) -> BTreeSet<u32> {
        self.pred_area.keys().map(|p| self.pred_class[p]).chain(self.gt_area.keys().map(|g| self.gt_class[g])).collect()
    }
}

fn score_class(o: &Overlaps, class: u32, is_thing: bool, relax_stuff: bool) -> ClassPq {
    let preds = o.preds_of(class);
    let gts = o.gts_of(class);
    let mut matched_p = BTreeSet::new();
    let mut matched_g = BTreeSet::new();
    let mut iou_sum = 0.0;
    if relax_stuff && !is_thing {
        // each ground-truth segment takes its best same-class prediction with any overlap
        for &g in &gts {
            let best = preds
                .iter()
                .filter(|p| !matched_p.contains(*p))
                .map(|&p| (p, o.iou(p, g)))
                .filter(|&(_, v)| v > 0.0)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((p, v)) = best {
                matched_p.insert(p);
                matched_g.insert(g);
                iou_sum += v;
            }
        }
    } else {
        for &g in &gts {
            for &p in &preds {
                let v = o.iou(p, g);
                if v > 0.5 {
                    assert!(matched_p.insert(p) && matched_g.insert(g), "IoU > 0.5 matches are unique");
                    iou_sum += v;
                }
            }
        }
    }
    let tp = matched_g.len();
    let fn_ = gts.len() - tp;
    let fp = preds.iter().filter(|p| !matched_p.contains(*p) && o.counts_as_fp(**p)).count();
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    let pq = if denom > 0.0 { iou_sum / denom } else { 0.0 };
    ClassPq { class_id: class, is_thing, tp, fp, fn_, iou_sum, pq }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn quality(pred: &PanopticMap, gt: &PanopticMap, catalog: &ClassCatalog, relax_stuff: bool) -> Result<PqResult> {
    let o = Overlaps::new(pred, gt)?;
    let per_class: Vec<ClassPq> = o
        .classes()
        .into_iter()
        .map(|c| score_class(&o, c, catalog.is_thing(c), relax_stuff))
        .filter(|c| c.tp + c.fp + c.fn_ > 0)
        .collect();
    Ok(PqResult {
        pq: mean(per_class.iter().map(|c| c.pq)),
        pq_things: mean(per_class.iter().filter(|c| c.is_thing).map(|c| c.pq)),
        pq_stuff: mean(per_class.iter().filter(|c| !c.is_thing).map(|c| c.pq)),
        per_class,
    })
}

/// Panoptic quality: per-class matching at IoU > 0.5, mean over classes with
/// any true positive, false positive or false negative.
pub fn panoptic_quality(pred: &PanopticMap, gt: &PanopticMap, catalog: &ClassCatalog) -> Result<PqResult> {
    quality(pred, gt, catalog, false)
}

/// PQ with stuff classes matched at any positive IoU.
pub fn pq_dagger(pred: &PanopticMap, gt: &PanopticMap, catalog: &ClassCatalog) -> Result<PqResult> {
    quality(pred, gt, catalog, true)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcResult {
    pub pc: f64,
    /// True when the ground truth has no labeled region (pc is then 0).
    pub undefined: bool,
}

/// Size-weighted best-IoU covering of ground-truth regions by same-class
/// predictions, averaged over classes present in the ground truth.
pub fn parsing_covering(pred: &PanopticMap, gt: &PanopticMap, _catalog: &ClassCatalog) -> Result<PcResult> {
    let o = Overlaps::new(pred, gt)?;
    let gt_classes: BTreeSet<u32> = o.gt_area.keys().map(|g| o.gt_class[g]).collect();
    if gt_classes.is_empty() {
        return Ok(PcResult { pc: 0.0, undefined: true });
    }
    let per_class = gt_classes.iter().map(|&c| {
        let preds = o.preds_of(c);
        let gts = o.gts_of(c);
        let total: usize = gts.iter().map(|g| o.gt_area[g]).sum();
        let covered: f64 = gts
            .iter()
            .map(|&g| o.gt_area[&g] as f64 * preds.iter().map(|&p| o.iou(p, g)).fold(0.0, f64::max))
            .sum();
        covered / total as f64
    });
    Ok(PcResult { pc: mean(per_class), undefined: false })
}

/// Mean per-class IoU over classes present in the ground truth; pixels void
/// in the ground truth are ignored.
pub fn mean_iou(pred: &LabelMap, gt: &LabelMap, catalog: &ClassCatalog) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(HleError::LengthMismatch { left: pred.len(), right: gt.len() });
    }
    let k = catalog.len();
    let mut inter = vec![0usize; k];
    let mut pred_n = vec![0usize; k];
    let mut gt_n = vec![0usize; k];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if g == VOID_CLASS {
            continue;
        }
        if (g as usize) < k {
            gt_n[g as usize] += 1;
        }
        if (p as usize) < k {
            pred_n[p as usize] += 1;
            if p == g {
                inter[p as usize] += 1;
            }
        }
    }
    Ok(mean((0..k).filter(|&c| gt_n[c] > 0).map(|c| inter[c] as f64 / (pred_n[c] + gt_n[c] - inter[c]) as f64)))
}

/// One predicted or ground-truth instance mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredMask {
    pub class_id: u32,
    pub score: f64,
    pub pixels: Vec<usize>,
}

/// Thresholds 0.5, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Interpolated precision averaged over the 101 recall levels 0, 0.01, ..., 1.
fn ap_single(preds: &[&ScoredMask], gts: &[&ScoredMask], threshold: f64) -> f64 {
    if gts.is_empty() || preds.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(preds.len());
    for (rank, &i) in order.iter().enumerate() {
        let best = (0..gts.len())
            .filter(|&g| !taken[g])
            .map(|g| (g, mask_iou(&preds[i].pixels, &gts[g].pixels)))
            .filter(|&(_, v)| v >= threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((g, _)) = best {
            taken[g] = true;
            tp += 1;
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    let levels = 101;
    let total: f64 = (0..levels)
        .map(|l| {
            let r = l as f64 / 100.0;
            curve.iter().filter(|(rec, _)| *rec >= r - 1e-12).map(|&(_, p)| p).fold(0.0, f64::max)
        })
        .sum();
    total / levels as f64
}

/// Class-aware mask AP: greedy score-ordered matching at IoU >= threshold,
/// averaged over thresholds and then over classes with ground truth.
pub fn average_precision(preds: &[ScoredMask], gts: &[ScoredMask], thresholds: &[f64]) -> f64 {
    let classes: BTreeSet<u32> = gts.iter().map(|g| g.class_id).collect();
    mean(classes.iter().map(|&c| {
        let p: Vec<&ScoredMask> = preds.iter().filter(|m| m.class_id == c).collect();
        let g: Vec<&ScoredMask> = gts.iter().filter(|m| m.class_id == c).collect();
        mean(thresholds.iter().map(|&t| ap_single(&p, &g, t)))
    }))
}

/// Thing segments of a panoptic map as masks, scored from `scores` (segment id
/// to score; missing ids score 1).
pub fn thing_masks(map: &PanopticMap, catalog: &ClassCatalog, scores: &[(u32, f64)]) -> Vec<ScoredMask> {
    let lookup: BTreeMap<u32, f64> = scores.iter().copied().collect();
    let mut pixels: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &id) in map.data.iter().enumerate() {
        if id != VOID_SEGMENT {
            pixels.entry(id).or_default().push(i);
        }
    }
    map.segments
        .iter()
        .filter(|s| catalog.is_thing(s.class_id))
        .filter_map(|s| {
            pixels.remove(&s.id).map(|px| ScoredMask {
                class_id: s.class_id,
                score: lookup.get(&s.id).copied().unwrap_or(1.0),
                pixels: px,
            })
        })
        .collect()
}
