//! Lesion-detection metrics: FROC sensitivity at fixed false positives per
//! scan and average precision at an IoU threshold.
//!
//! Both share one greedy matching: predictions are visited in descending
//! score order (ties keep input order) and each takes the unmatched GT on
//! its own scan and slice with the highest IoU, if that IoU reaches the
//! threshold.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, LesionBox};
use crate::error::{Error, Result};

pub const FROC_LEVELS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scan {
    pub preds: Vec<LesionBox>,
    pub gts: Vec<LesionBox>,
}

impl Scan {
    pub fn new(preds: Vec<LesionBox>, gts: Vec<LesionBox>) -> Self {
        Self { preds, gts }
    }
}

/// Outcome for one prediction, in ranked order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ranked {
    pub scan: usize,
    pub pred: usize,
    pub score: f64,
    /// Index of the GT it took, if any.
    pub matched: Option<usize>,
}

pub fn total_gts(scans: &[Scan]) -> usize {
    scans.iter().map(|s| s.gts.len()).sum()
}

pub fn match_predictions(scans: &[Scan], iou_threshold: f64) -> Vec<Ranked> {
    let mut order: Vec<(usize, usize, f64)> = scans
        .iter()
        .enumerate()
        .flat_map(|(s, scan)| scan.preds.iter().enumerate().map(move |(p, b)| (s, p, b.score)))
        .collect();
    order.sort_by(|a, b| b.2.total_cmp(&a.2));
    let mut taken: Vec<Vec<bool>> = scans.iter().map(|s| vec![false; s.gts.len()]).collect();
    order
        .into_iter()
        .map(|(s, p, score)| {
            let pred = &scans[s].preds[p];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in scans[s].gts.iter().enumerate() {
                if taken[s][g] || gt.slice != pred.slice {
                    continue;
                }
                let v = iou(pred, gt);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[s][g] = true;
            }
            Ranked {
                scan: s,
                pred: p,
                score,
                matched: best.map(|(g, _)| g),
            }
        })
        .collect()
}

/// One threshold of the sweep: everything scoring at least `threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub fps_per_scan: f64,
    pub sensitivity: f64,
}

fn operating_points(ranked: &[Ranked], num_scans: usize, num_gt: usize) -> Vec<OperatingPoint> {
    let mut points = vec![OperatingPoint {
        threshold: f64::INFINITY,
        fps_per_scan: 0.0,
        sensitivity: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, r) in ranked.iter().enumerate() {
        if r.matched.is_some() {
            tp += 1;
        } else {
            fp += 1;
        }
        // a threshold admits every prediction with an equal score at once
        if ranked.get(i + 1).is_some_and(|n| n.score == r.score) {
            continue;
        }
        points.push(OperatingPoint {
            threshold: r.score,
            fps_per_scan: fp as f64 / num_scans as f64,
            sensitivity: tp as f64 / num_gt as f64,
        });
    }
    points
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Froc {
    /// `(fps_per_scan level, sensitivity)`.
    pub sensitivities: Vec<(f64, f64)>,
    pub average: f64,
}

/// Best sensitivity among operating points with mean FPs per scan at most
/// each level. No interpolation between operating points.
pub fn froc_sensitivity(scans: &[Scan], levels: &[f64], iou_threshold: f64) -> Result<Froc> {
    let num_gt = total_gts(scans);
    if num_gt == 0 {
        return Err(Error::MetricUndefined("FROC sensitivity needs at least one ground-truth box".into()));
    }
    let points = operating_points(&match_predictions(scans, iou_threshold), scans.len(), num_gt);
    let sensitivities: Vec<(f64, f64)> = levels
        .iter()
        .map(|&l| {
            let s = points
                .iter()
                .filter(|p| p.fps_per_scan <= l)
                .map(|p| p.sensitivity)
                .fold(0.0, f64::max);
            (l, s)
        })
        .collect();
    let average = if levels.is_empty() {
        0.0
    } else {
        sensitivities.iter().map(|s| s.1).sum::<f64>() / levels.len() as f64
    };
    Ok(Froc { sensitivities, average })
}

/// All-point interpolated AP over the ranked list.
pub fn average_precision(scans: &[Scan], iou_threshold: f64) -> Result<f64> {
    let num_gt = total_gts(scans);
    if num_gt == 0 {
        return Err(Error::MetricUndefined("average precision needs at least one ground-truth box".into()));
    }
    let ranked = match_predictions(scans, iou_threshold);
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (i, r) in ranked.iter().enumerate() {
        tp += r.matched.is_some() as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // precision envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    Ok(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub froc: Froc,
    pub average_sensitivity: f64,
    pub map50: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub num_scans: usize,
    pub num_gt: usize,
}

pub fn evaluate(scans: &[Scan]) -> Result<EvalReport> {
    let froc = froc_sensitivity(scans, &FROC_LEVELS, DEFAULT_IOU)?;
    let map50 = average_precision(scans, DEFAULT_IOU)?;
    let ranked = match_predictions(scans, DEFAULT_IOU);
    let tp = ranked.iter().filter(|r| r.matched.is_some()).count();
    let num_gt = total_gts(scans);
    Ok(EvalReport {
        average_sensitivity: froc.average,
        froc,
        map50,
        tp,
        fp: ranked.len() - tp,
        fn_: num_gt - tp,
        num_scans: scans.len(),
        num_gt,
    })
}
