//! Evaluation metrics. Accumulators gather per-scene statistics and reduce
//! once over a dataset; every reported value is a percentage.
//!
//! Points without a ground-truth label (void) are removed from predictions
//! before any IoU is computed.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::textio::Reader;

/// A set of points with a class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub points: Vec<usize>,
    pub class: u32,
}

/// A predicted instance with a confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub points: Vec<usize>,
    pub class: u32,
    pub score: f64,
}

/// IoU thresholds of the averaged AP: 0.50, 0.55, ..., 0.95.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn to_flags(points: &[usize], n: usize) -> Result<Vec<bool>> {
    let mut f = vec![false; n];
    for &p in points {
        *f.get_mut(p)
            .ok_or_else(|| Error::contract(format!("point {p} out of range")))? = true;
    }
    Ok(f)
}

/// IoU of two point sets, ignoring points where `valid` is false.
pub fn point_iou(a: &[usize], b: &[usize], valid: &[bool]) -> f64 {
    let mut inb = vec![false; valid.len()];
    for &p in b {
        inb[p] = true;
    }
    let a_valid = a.iter().filter(|&&p| valid[p]).count();
    let b_valid = b.iter().filter(|&&p| valid[p]).count();
    let inter = a.iter().filter(|&&p| valid[p] && inb[p]).count();
    let union = a_valid + b_valid - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn valid_from_gt(gt: &[Segment], n: usize) -> Result<Vec<bool>> {
    let mut valid = vec![false; n];
    for s in gt {
        for &p in &s.points {
            *valid
                .get_mut(p)
                .ok_or_else(|| Error::contract(format!("point {p} out of range")))? = true;
        }
    }
    Ok(valid)
}

fn check_disjoint(segments: &[Segment], n: usize, what: &str) -> Result<()> {
    let mut seen = vec![false; n];
    for s in segments {
        for &p in &s.points {
            let slot = seen
                .get_mut(p)
                .ok_or_else(|| Error::contract(format!("point {p} out of range")))?;
            if *slot {
                return Err(Error::contract(format!(
                    "{what} segments overlap at point {p}"
                )));
            }
            *slot = true;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct PqCounts {
    iou_sum: f64,
    tp: usize,
    fp: usize,
    fn_: usize,
}

/// Panoptic quality over a dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PqAccumulator {
    classes: BTreeMap<u32, PqCounts>,
    gt_classes: std::collections::BTreeSet<u32>,
}

impl PqAccumulator {
    /// Adds one scene. Points outside every gt segment are void.
    pub fn add(&mut self, pred: &[Segment], gt: &[Segment], num_points: usize) -> Result<()> {
        check_disjoint(pred, num_points, "predicted")?;
        check_disjoint(gt, num_points, "ground-truth")?;
        let valid = valid_from_gt(gt, num_points)?;
        let pred: Vec<&Segment> = pred
            .iter()
            .filter(|s| s.points.iter().any(|&p| valid[p]))
            .collect();
        let mut pred_matched = vec![false; pred.len()];
        for g in gt {
            self.gt_classes.insert(g.class);
            let entry = self.classes.entry(g.class).or_default();
            let mut hit: Option<(usize, f64)> = None;
            for (i, p) in pred.iter().enumerate() {
                if p.class != g.class {
                    continue;
                }
                let iou = point_iou(&p.points, &g.points, &valid);
                if iou > 0.5 {
                    if hit.is_some() || pred_matched[i] {
                        return Err(Error::contract("segment matched twice at IoU > 0.5"));
                    }
                    hit = Some((i, iou));
                }
            }
            match hit {
                Some((i, iou)) => {
                    pred_matched[i] = true;
                    entry.tp += 1;
                    entry.iou_sum += iou;
                }
                None => entry.fn_ += 1,
            }
        }
        for (i, p) in pred.iter().enumerate() {
            if !pred_matched[i] {
                self.classes.entry(p.class).or_default().fp += 1;
            }
        }
        Ok(())
    }

    pub fn value(&self) -> f64 {
        let per_class: Vec<f64> = self
            .gt_classes
            .iter()
            .map(|c| {
                let k = self.classes[c];
                let den = k.tp as f64 + 0.5 * k.fp as f64 + 0.5 * k.fn_ as f64;
                if den == 0.0 {
                    0.0
                } else {
                    k.iou_sum / den
                }
            })
            .collect();
        mean_percent(&per_class)
    }
}

fn mean_percent(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        100.0 * v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Single-scene panoptic quality.
pub fn panoptic_quality(pred: &[Segment], gt: &[Segment], num_points: usize) -> Result<f64> {
    let mut acc = PqAccumulator::default();
    acc.add(pred, gt, num_points)?;
    Ok(acc.value())
}

/// Semantic mIoU over a dataset. `None` labels are void.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SemanticAccumulator {
    inter: BTreeMap<u32, usize>,
    union: BTreeMap<u32, usize>,
    gt_classes: std::collections::BTreeSet<u32>,
}

impl SemanticAccumulator {
    pub fn add(&mut self, pred: &[u32], gt: &[Option<u32>]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "semantic_miou",
                "prediction and label lengths differ",
            ));
        }
        for (&p, g) in pred.iter().zip(gt) {
            let Some(g) = *g else { continue };
            self.gt_classes.insert(g);
            if p == g {
                *self.inter.entry(g).or_default() += 1;
                *self.union.entry(g).or_default() += 1;
            } else {
                *self.union.entry(g).or_default() += 1;
                *self.union.entry(p).or_default() += 1;
            }
        }
        Ok(())
    }

    pub fn value(&self) -> f64 {
        let per: Vec<f64> = self
            .gt_classes
            .iter()
            .map(|c| *self.inter.get(c).unwrap_or(&0) as f64 / self.union[c] as f64)
            .collect();
        mean_percent(&per)
    }
}

pub fn semantic_miou(pred: &[u32], gt: &[Option<u32>]) -> Result<f64> {
    let mut acc = SemanticAccumulator::default();
    acc.add(pred, gt)?;
    Ok(acc.value())
}

/// Area under the 101-point interpolated precision-recall curve, given the
/// TP/FP outcome of detections in rank order and the number of positives.
pub fn interpolated_ap(ranked_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (k, &hit) in ranked_tp.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let k = recall.partition_point(|&x| x < level - 1e-12);
        if k < precision.len() {
            total += precision[k];
        }
    }
    total / 101.0
}

/// Order of detections: descending score, ties by insertion index.
fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Greedy matching by descending score: each detection takes the unmatched
/// gt of its class with the highest IoU at or above `threshold`.
pub fn greedy_match(
    pred: &[ScoredMask],
    gt: &[Segment],
    valid: &[bool],
    threshold: f64,
) -> Vec<bool> {
    let scores: Vec<f64> = pred.iter().map(|p| p.score).collect();
    let mut taken = vec![false; gt.len()];
    let mut tp = vec![false; pred.len()];
    for i in rank(&scores) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if taken[j] || g.class != pred[i].class {
                continue;
            }
            let iou = point_iou(&pred[i].points, &g.points, valid);
            if iou >= threshold && best.is_none_or(|b| iou > b.1) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            tp[i] = true;
        }
    }
    tp
}

/// Class-averaged AP over a dataset at a list of IoU thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct ApAccumulator {
    pub thresholds: Vec<f64>,
    /// Per class: `(score, tp per threshold)` in insertion order.
    detections: BTreeMap<u32, Vec<(f64, Vec<bool>)>>,
    num_gt: BTreeMap<u32, usize>,
}

impl ApAccumulator {
    pub fn new(thresholds: Vec<f64>) -> Self {
        Self {
            thresholds,
            detections: BTreeMap::new(),
            num_gt: BTreeMap::new(),
        }
    }

    /// Adds one scene. Points outside every gt segment count as void unless
    /// `valid` is given.
    pub fn add(&mut self, pred: &[ScoredMask], gt: &[Segment], valid: &[bool]) -> Result<()> {
        for s in gt
            .iter()
            .map(|g| &g.points)
            .chain(pred.iter().map(|p| &p.points))
        {
            if s.iter().any(|&p| p >= valid.len()) {
                return Err(Error::contract("mask point out of range"));
            }
        }
        for g in gt {
            *self.num_gt.entry(g.class).or_default() += 1;
        }
        let per_threshold: Vec<Vec<bool>> = self
            .thresholds
            .iter()
            .map(|&t| greedy_match(pred, gt, valid, t))
            .collect();
        for (i, p) in pred.iter().enumerate() {
            let flags = per_threshold.iter().map(|f| f[i]).collect();
            self.detections
                .entry(p.class)
                .or_default()
                .push((p.score, flags));
        }
        Ok(())
    }

    /// AP per threshold, averaged over classes that have ground truth.
    pub fn values(&self) -> Vec<f64> {
        (0..self.thresholds.len())
            .map(|t| {
                let per_class: Vec<f64> = self
                    .num_gt
                    .iter()
                    .map(|(c, &n)| {
                        let dets = self.detections.get(c).map(Vec::as_slice).unwrap_or(&[]);
                        let scores: Vec<f64> = dets.iter().map(|d| d.0).collect();
                        let ranked: Vec<bool> =
                            rank(&scores).iter().map(|&i| dets[i].1[t]).collect();
                        interpolated_ap(&ranked, n)
                    })
                    .collect();
                mean_percent(&per_class)
            })
            .collect()
    }
}

/// `mAP` (mean over 0.50:0.05:0.95), `AP50`, `AP25`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApSummary {
    pub map: f64,
    pub ap50: f64,
    pub ap25: f64,
}

/// Accumulates at the averaged thresholds plus 0.25.
#[derive(Debug, Clone, PartialEq)]
pub struct ApFamily(ApAccumulator);

impl Default for ApFamily {
    fn default() -> Self {
        let mut t = map_thresholds();
        t.push(0.25);
        Self(ApAccumulator::new(t))
    }
}

impl ApFamily {
    pub fn add(&mut self, pred: &[ScoredMask], gt: &[Segment], valid: &[bool]) -> Result<()> {
        self.0.add(pred, gt, valid)
    }

    pub fn summary(&self) -> ApSummary {
        let v = self.0.values();
        ApSummary {
            map: v[..10].iter().sum::<f64>() / 10.0,
            ap50: v[0],
            ap25: v[10],
        }
    }
}

/// `(mIoU, acc@0.25, acc@0.5)` from per-expression IoUs.
pub fn referring_metrics(ious: &[f64]) -> (f64, f64, f64) {
    if ious.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = ious.len() as f64;
    let miou = 100.0 * ious.iter().sum::<f64>() / n;
    let acc = |t: f64| 100.0 * ious.iter().filter(|&&i| i >= t).count() as f64 / n;
    (miou, acc(0.25), acc(0.5))
}

/// One click's outcome: its predicted mask, score and target.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickResult {
    pub pred: Vec<usize>,
    pub score: f64,
    pub target: Vec<usize>,
}

/// Each click's mask scored as a detection that can only match its own
/// target. Returns the AP family and the mean IoU.
pub fn interactive_metrics(clicks: &[ClickResult], num_points: usize) -> Result<(ApSummary, f64)> {
    let mut family = ApFamily::default();
    let valid = vec![true; num_points];
    let mut ious = Vec::with_capacity(clicks.len());
    for c in clicks {
        to_flags(&c.pred, num_points)?;
        to_flags(&c.target, num_points)?;
        ious.push(point_iou(&c.pred, &c.target, &valid));
    }
    let thresholds = family.0.thresholds.clone();
    for (i, c) in clicks.iter().enumerate() {
        let flags = thresholds.iter().map(|&t| ious[i] >= t).collect();
        family
            .0
            .detections
            .entry(0)
            .or_default()
            .push((c.score, flags));
    }
    if !clicks.is_empty() {
        family.0.num_gt.insert(0, clicks.len());
    }
    Ok((family.summary(), mean_percent(&ious)))
}

/// Headline metrics of one evaluation, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsReport {
    pub pq: f64,
    pub sem_miou: f64,
    pub inst_map: f64,
    pub inst_ap50: f64,
    pub inst_ap25: f64,
    pub inter_ap: f64,
    pub inter_ap50: f64,
    pub inter_ap25: f64,
    pub inter_miou: f64,
    pub ref_miou: f64,
    pub ref_acc25: f64,
    pub ref_acc50: f64,
    pub ov_ap: f64,
    pub overall: f64,
}

impl MetricsReport {
    pub const KEYS: [&'static str; 14] = [
        "pq",
        "sem_miou",
        "inst_map",
        "inst_ap50",
        "inst_ap25",
        "inter_ap",
        "inter_ap50",
        "inter_ap25",
        "inter_miou",
        "ref_miou",
        "ref_acc25",
        "ref_acc50",
        "ov_ap",
        "overall",
    ];

    /// Fills `overall` with the mean of the six headline metrics.
    pub fn with_overall(mut self) -> Self {
        self.overall =
            (self.pq + self.sem_miou + self.inst_map + self.inter_ap + self.ref_miou + self.ov_ap)
                / 6.0;
        self
    }

    pub fn values(&self) -> [f64; 14] {
        [
            self.pq,
            self.sem_miou,
            self.inst_map,
            self.inst_ap50,
            self.inst_ap25,
            self.inter_ap,
            self.inter_ap50,
            self.inter_ap25,
            self.inter_miou,
            self.ref_miou,
            self.ref_acc25,
            self.ref_acc50,
            self.ov_ap,
            self.overall,
        ]
    }

    fn field_mut(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "pq" => &mut self.pq,
            "sem_miou" => &mut self.sem_miou,
            "inst_map" => &mut self.inst_map,
            "inst_ap50" => &mut self.inst_ap50,
            "inst_ap25" => &mut self.inst_ap25,
            "inter_ap" => &mut self.inter_ap,
            "inter_ap50" => &mut self.inter_ap50,
            "inter_ap25" => &mut self.inter_ap25,
            "inter_miou" => &mut self.inter_miou,
            "ref_miou" => &mut self.ref_miou,
            "ref_acc25" => &mut self.ref_acc25,
            "ref_acc50" => &mut self.ref_acc50,
            "ov_ap" => &mut self.ov_ap,
            "overall" => &mut self.overall,
            _ => return None,
        })
    }

    /// `key = value` lines in field order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(self.values()) {
            writeln!(out, "{k} = {}", crate::textio::fmt_f64(v)).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = Reader::new(text);
        let mut report = Self::default();
        let mut seen = Vec::new();
        while !r.at_eof() {
            let mut f = r.fields(3)?;
            let (offset, key) = f.next_token()?;
            f.expect_token("=")?;
            let v = f.next_f64()?;
            if seen.contains(&key) {
                return Err(Error::Parse {
                    offset,
                    message: format!("duplicate key {key}"),
                });
            }
            *report.field_mut(key).ok_or_else(|| Error::Parse {
                offset,
                message: format!("unknown key {key}"),
            })? = v;
            seen.push(key);
        }
        if seen.len() != Self::KEYS.len() {
            return Err(Error::Parse {
                offset: text.len(),
                message: "missing keys".into(),
            });
        }
        Ok(report)
    }
}
