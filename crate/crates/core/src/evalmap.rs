//! Frame-level detection evaluation: IoU, per-class average precision and
//! mAP at a single IoU threshold.
//!
//! Matching is greedy by descending score (ties: lower frame id, then input
//! order), one-to-one per frame and class. AP is the area under the
//! precision envelope over all recall points.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BoundingBox, GroundTruthRecord, PredictionRecord};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Whether each prediction (in ranked order) is a true positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub prediction: usize,
    pub score: f64,
    pub matched_gt: Option<usize>,
}

/// Ranks and matches the predictions of one class.
///
/// Returns the match log (indices into the filtered inputs) and the GT count.
fn match_class(
    preds: &[&PredictionRecord],
    gts: &[&GroundTruthRecord],
    iou_thr: f64,
) -> Vec<MatchEntry> {
    let mut by_frame: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_frame.entry(g.frame_id).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .total_cmp(&preds[a].score)
            .then(preds[a].frame_id.cmp(&preds[b].frame_id))
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|p| {
            let pred = preds[p];
            let mut best: Option<(usize, f64)> = None;
            for &g in by_frame
                .get(&pred.frame_id)
                .map(Vec::as_slice)
                .unwrap_or(&[])
            {
                if taken[g] {
                    continue;
                }
                let o = iou(&pred.bbox, &gts[g].bbox);
                if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            MatchEntry {
                prediction: p,
                score: pred.score,
                matched_gt: best.map(|(g, _)| g),
            }
        })
        .collect()
}

/// All-point interpolated AP from a ranked TP/FP sequence.
pub fn ap_from_matches(is_tp: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(is_tp.len());
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut tp = 0usize;
    for (k, &hit) in is_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / gt_count as f64);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// AP for `class`, or `None` when the class has no ground truth.
pub fn average_precision(
    preds: &[PredictionRecord],
    gts: &[GroundTruthRecord],
    class: usize,
    iou_thr: f64,
) -> Option<f64> {
    let p: Vec<&PredictionRecord> = preds.iter().filter(|r| r.class_id == class).collect();
    let g: Vec<&GroundTruthRecord> = gts.iter().filter(|r| r.class_id == class).collect();
    if g.is_empty() {
        return None;
    }
    let matches = match_class(&p, &g, iou_thr);
    let hits: Vec<bool> = matches.iter().map(|m| m.matched_gt.is_some()).collect();
    Some(ap_from_matches(&hits, g.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub gt_count: usize,
    pub prediction_count: usize,
    /// `None` for classes without ground truth.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub classes: Vec<ClassReport>,
    /// Unweighted mean of AP over classes with ground truth.
    pub map: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matches: Option<Vec<Vec<MatchEntry>>>,
}

impl EvalReport {
    pub fn evaluated_classes(&self) -> usize {
        self.classes.iter().filter(|c| c.ap.is_some()).count()
    }
}

pub fn mean_average_precision(
    preds: &[PredictionRecord],
    gts: &[GroundTruthRecord],
    class_count: usize,
    iou_thr: f64,
) -> Result<EvalReport> {
    evaluate(preds, gts, class_count, iou_thr, false)
}

/// Like [`mean_average_precision`], optionally keeping the per-class match log.
pub fn evaluate(
    preds: &[PredictionRecord],
    gts: &[GroundTruthRecord],
    class_count: usize,
    iou_thr: f64,
    keep_matches: bool,
) -> Result<EvalReport> {
    if let Some(r) = preds.iter().find(|r| r.class_id >= class_count) {
        return Err(Error::ClassTableMismatch(format!(
            "prediction class {} outside [0, {class_count})",
            r.class_id
        )));
    }
    if let Some(r) = gts.iter().find(|r| r.class_id >= class_count) {
        return Err(Error::ClassTableMismatch(format!(
            "ground-truth class {} outside [0, {class_count})",
            r.class_id
        )));
    }
    if let Some(r) = preds.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::invalid(
            format!("prediction in frame {}", r.frame_id),
            "score",
            "non-finite score",
        ));
    }
    let mut classes = Vec::with_capacity(class_count);
    let mut logs = Vec::new();
    for c in 0..class_count {
        let p: Vec<&PredictionRecord> = preds.iter().filter(|r| r.class_id == c).collect();
        let g: Vec<&GroundTruthRecord> = gts.iter().filter(|r| r.class_id == c).collect();
        let ap = if g.is_empty() {
            None
        } else {
            let matches = match_class(&p, &g, iou_thr);
            let hits: Vec<bool> = matches.iter().map(|m| m.matched_gt.is_some()).collect();
            let ap = ap_from_matches(&hits, g.len());
            if keep_matches {
                logs.push(matches);
            }
            Some(ap)
        };
        if keep_matches && g.is_empty() {
            logs.push(Vec::new());
        }
        classes.push(ClassReport {
            class_id: c,
            gt_count: g.len(),
            prediction_count: p.len(),
            ap,
        });
    }
    let aps: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    if aps.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    Ok(EvalReport {
        iou_threshold: iou_thr,
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        classes,
        matches: keep_matches.then_some(logs),
    })
}
