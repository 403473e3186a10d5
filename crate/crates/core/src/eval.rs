//! Detection metrics: IoU, NMS, all-point AP, mAP and precision/recall/F1,
//! plus VisDrone annotation parsing.

use std::fmt::Write as _;

use thiserror::Error;

/// VisDrone categories 1..=10.
pub const VISDRONE_CLASSES: [&str; 10] = [
    "pedestrian",
    "people",
    "bicycle",
    "car",
    "van",
    "truck",
    "tricycle",
    "awning-tricycle",
    "bus",
    "motor",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("no ground truth to evaluate against")]
    NoGroundTruth,
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Axis-aligned box, top-left corner form, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl Bbox {
    pub fn new(left: f64, top: f64, width: f64, height: f64) -> Self {
        Bbox { left, top, width, height }
    }

    pub fn from_center(x: f64, y: f64, width: f64, height: f64) -> Self {
        Bbox::new(x - width / 2.0, y - height / 2.0, width, height)
    }

    pub fn area(&self) -> f64 {
        self.width.max(0.0) * self.height.max(0.0)
    }
}

pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let iw = (a.left + a.width).min(b.left + b.width) - a.left.max(b.left);
    let ih = (a.top + a.height).min(b.top + b.height) - a.top.max(b.top);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image: String,
    pub bbox: Bbox,
    /// 1-based category; 0 for ignored regions.
    pub class_id: usize,
    pub ignore: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBox {
    pub image: String,
    pub class_id: usize,
    pub score: f64,
    pub bbox: Bbox,
}

/// Indices of `dets` by descending score; ties keep input order.
fn ranked(dets: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy per-image, per-class suppression: keep the best remaining box
/// and drop same-class boxes with IoU above `threshold` against it. The
/// survivors come back ranked by score.
pub fn nms(dets: &[ScoredBox], threshold: f64) -> Vec<ScoredBox> {
    nms_indices(dets, threshold).into_iter().map(|i| dets[i].clone()).collect()
}

/// [`nms`] as indices into `dets`.
pub fn nms_indices(dets: &[ScoredBox], threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in ranked(dets) {
        let d = &dets[i];
        let suppressed = kept.iter().any(|&k| {
            let o = &dets[k];
            o.image == d.image && o.class_id == d.class_id && iou(&o.bbox, &d.bbox) > threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    /// Matched the ground truth at this index.
    TruePositive(usize),
    FalsePositive,
    /// Overlaps an ignored region; counts as neither.
    Ignored,
}

/// Greedy matching of one class in score order. Each detection takes the
/// unmatched, non-ignored ground truth of its class and image with the
/// highest IoU at or above `threshold`; failing that it is ignored if it
/// overlaps an ignored region by the same criterion. Outcomes are returned
/// in the order of `dets`.
pub fn match_detections(dets: &[ScoredBox], gts: &[GroundTruth], class_id: usize, threshold: f64) -> Vec<MatchOutcome> {
    let mut taken = vec![false; gts.len()];
    let mut out = vec![MatchOutcome::FalsePositive; dets.len()];
    for i in ranked(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.ignore || taken[g] || gt.class_id != class_id || gt.image != d.image {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= threshold && best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        out[i] = match best {
            Some((g, _)) => {
                taken[g] = true;
                MatchOutcome::TruePositive(g)
            }
            None if gts
                .iter()
                .any(|gt| gt.ignore && gt.image == d.image && iou(&d.bbox, &gt.bbox) >= threshold) =>
            {
                MatchOutcome::Ignored
            }
            None => MatchOutcome::FalsePositive,
        };
    }
    out
}

/// Area under the precision envelope given TP flags in rank order.
pub fn ap_from_ranked(tp: &[bool], gt_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / gt_count as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

/// All-point AP for one class; `None` when the class has no non-ignored
/// ground truth.
pub fn average_precision(dets: &[ScoredBox], gts: &[GroundTruth], class_id: usize, threshold: f64) -> Option<f64> {
    let gt_count = gts.iter().filter(|g| !g.ignore && g.class_id == class_id).count();
    let dets: Vec<ScoredBox> = dets.iter().filter(|d| d.class_id == class_id).cloned().collect();
    let outcomes = match_detections(&dets, gts, class_id, threshold);
    let tp: Vec<bool> = ranked(&dets)
        .into_iter()
        .filter_map(|i| match outcomes[i] {
            MatchOutcome::TruePositive(_) => Some(true),
            MatchOutcome::FalsePositive => Some(false),
            MatchOutcome::Ignored => None,
        })
        .collect();
    ap_from_ranked(&tp, gt_count)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Detections need a score strictly above this.
    pub conf_threshold: f64,
    pub nms_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            conf_threshold: 0.1,
            nms_threshold: 0.5,
            iou_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub label: String,
    pub ground_truths: usize,
    pub tp: usize,
    pub fp: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    /// Percentages.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(tp: usize, fp: usize, gts: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { 100.0 * tp as f64 / (tp + fp) as f64 };
    let r = if gts == 0 { 0.0 } else { 100.0 * tp as f64 / gts as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub classes: Vec<ClassRow>,
    /// Mean over classes with a defined AP.
    pub map: f64,
    pub overall: ClassRow,
    pub config: EvalConfig,
}

fn class_label(id: usize) -> String {
    id.checked_sub(1)
        .and_then(|i| VISDRONE_CLASSES.get(i))
        .map_or_else(|| format!("class{id}"), |s| s.to_string())
}

/// Confidence filter, NMS, then per-class AP and counts. Precision and
/// recall are measured over every detection surviving the filter.
pub fn evaluate(dets: &[ScoredBox], gts: &[GroundTruth], config: &EvalConfig) -> Result<EvalSummary, EvalError> {
    if gts.iter().all(|g| g.ignore) {
        return Err(EvalError::NoGroundTruth);
    }
    let kept: Vec<ScoredBox> = dets.iter().filter(|d| d.score > config.conf_threshold).cloned().collect();
    let kept = nms(&kept, config.nms_threshold);
    let mut ids: Vec<usize> = gts.iter().filter(|g| !g.ignore).map(|g| g.class_id).collect();
    ids.extend(kept.iter().map(|d| d.class_id));
    ids.sort_unstable();
    ids.dedup();

    let mut classes = Vec::new();
    let (mut tp_all, mut fp_all, mut gt_all) = (0, 0, 0);
    let mut aps = Vec::new();
    for id in ids {
        let class_dets: Vec<ScoredBox> = kept.iter().filter(|d| d.class_id == id).cloned().collect();
        let gt_count = gts.iter().filter(|g| !g.ignore && g.class_id == id).count();
        let outcomes = match_detections(&class_dets, gts, id, config.iou_threshold);
        let tp = outcomes.iter().filter(|o| matches!(o, MatchOutcome::TruePositive(_))).count();
        let fp = outcomes.iter().filter(|o| **o == MatchOutcome::FalsePositive).count();
        let ap = average_precision(&class_dets, gts, id, config.iou_threshold);
        aps.extend(ap);
        let (precision, recall, f1) = prf(tp, fp, gt_count);
        tp_all += tp;
        fp_all += fp;
        gt_all += gt_count;
        classes.push(ClassRow {
            label: class_label(id),
            ground_truths: gt_count,
            tp,
            fp,
            ap,
            precision,
            recall,
            f1,
        });
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    let (precision, recall, f1) = prf(tp_all, fp_all, gt_all);
    Ok(EvalSummary {
        classes,
        map,
        overall: ClassRow {
            label: "overall".into(),
            ground_truths: gt_all,
            tp: tp_all,
            fp: fp_all,
            ap: Some(map),
            precision,
            recall,
            f1,
        },
        config: *config,
    })
}

impl EvalSummary {
    pub fn rows(&self) -> impl Iterator<Item = &ClassRow> {
        self.classes.iter().chain(std::iter::once(&self.overall))
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "precision/recall at confidence > {}, NMS {}, IoU {}\n{:<16} {:>6} {:>6} {:>6} {:>8} {:>9} {:>7} {:>6}\n",
            self.config.conf_threshold,
            self.config.nms_threshold,
            self.config.iou_threshold,
            "class",
            "gt",
            "tp",
            "fp",
            "AP(%)",
            "P(%)",
            "R(%)",
            "F1(%)"
        );
        for r in self.rows() {
            let ap = r.ap.map_or_else(|| "n/a".to_string(), |a| format!("{:.1}", 100.0 * a));
            let _ = writeln!(
                s,
                "{:<16} {:>6} {:>6} {:>6} {:>8} {:>9.1} {:>7.1} {:>6.1}",
                r.label, r.ground_truths, r.tp, r.fp, ap, r.precision, r.recall, r.f1
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,gt,tp,fp,ap,precision,recall,f1\n");
        for r in self.rows() {
            let ap = r.ap.map_or_else(String::new, |a| format!("{a:.6}"));
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.1},{:.1},{:.1}",
                r.label, r.ground_truths, r.tp, r.fp, ap, r.precision, r.recall, r.f1
            );
        }
        s
    }
}

/// One VisDrone annotation file: `left,top,width,height,score,category,
/// truncation,occlusion` per line. Category 0 and zero-score rows are
/// ignored regions, category 11 is dropped.
pub fn parse_visdrone(text: &str, image: &str) -> Result<Vec<GroundTruth>, EvalError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let trimmed = raw.trim().trim_end_matches(',');
        if trimmed.is_empty() {
            continue;
        }
        let err = |reason: String| EvalError::Parse { line, reason };
        let fields: Vec<i64> = trimmed
            .split(',')
            .map(|f| f.trim().parse::<i64>().map_err(|_| err(format!("`{}` is not an integer", f.trim()))))
            .collect::<Result<_, _>>()?;
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", fields.len())));
        }
        let (w, h, score, category) = (fields[2], fields[3], fields[4], fields[5]);
        if w <= 0 || h <= 0 {
            return Err(err("box width and height must be positive".into()));
        }
        let class_id = match category {
            0..=10 => category as usize,
            11 => continue,
            _ => return Err(err(format!("unknown category {category}"))),
        };
        out.push(GroundTruth {
            image: image.to_string(),
            bbox: Bbox::new(fields[0] as f64, fields[1] as f64, w as f64, h as f64),
            class_id,
            ignore: class_id == 0 || score == 0,
        });
    }
    Ok(out)
}

/// Detection lines `image_id class_id score x y w h`, boxes in center form.
pub fn parse_detections(text: &str) -> Result<Vec<ScoredBox>, EvalError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let f: Vec<&str> = raw.split_whitespace().collect();
        if f.is_empty() || f[0].starts_with('#') {
            continue;
        }
        let err = |reason: String| EvalError::Parse { line, reason };
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let class_id = f[1].parse().map_err(|_| err(format!("bad class id `{}`", f[1])))?;
        let nums: Vec<f64> = f[2..]
            .iter()
            .map(|s| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(format!("bad number `{s}`"))))
            .collect::<Result<_, _>>()?;
        out.push(ScoredBox {
            image: f[0].to_string(),
            class_id,
            score: nums[0],
            bbox: Bbox::from_center(nums[1], nums[2], nums[3], nums[4]),
        });
    }
    Ok(out)
}
