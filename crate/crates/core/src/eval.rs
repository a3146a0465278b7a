//! Greedy IoU matching, all-points average precision and mAP.

use std::fmt::Write as _;

use crate::detector::{detect, DetectorError, ModelParams, PostProcess};
use crate::geometry::{iou, BBox};
use crate::synthdata::{GroundTruth, Image};

/// IoU threshold used throughout evaluation.
pub const EVAL_IOU: f64 = 0.3;

/// Detections of one class in one image, sorted by descending score (ties
/// keep input order), each flagged TP or FP.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub scored: Vec<(f64, bool)>,
    pub num_gt: usize,
    pub unmatched_gt: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.scored.iter().filter(|(_, tp)| *tp).count()
    }
}

pub fn match_detections(dets: &[(f64, BBox)], gts: &[BBox], iou_thresh: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].0.total_cmp(&dets[i].0).then(i.cmp(&j)));
    let mut matched = vec![false; gts.len()];
    let mut scored = Vec::with_capacity(dets.len());
    for i in order {
        let (score, b) = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let v = iou(b, gt).unwrap_or(0.0);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        let tp = match best {
            Some((g, v)) if v >= iou_thresh => {
                matched[g] = true;
                true
            }
            _ => false,
        };
        scored.push((*score, tp));
    }
    let unmatched_gt = matched.iter().filter(|m| !**m).count();
    MatchResult { scored, num_gt: gts.len(), unmatched_gt }
}

/// Area under the precision envelope. Tied scores enter the curve together,
/// so the result depends only on the score ranking. `None` when the class
/// has no ground truth anywhere.
pub fn average_precision(results: &[MatchResult]) -> Option<f64> {
    let num_gt: usize = results.iter().map(|r| r.num_gt).sum();
    if num_gt == 0 {
        return None;
    }
    let mut all: Vec<(f64, bool)> = results.iter().flat_map(|r| r.scored.iter().copied()).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    // One PR point per distinct score.
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut n) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            tp += all[i].1 as usize;
            n += 1;
            i += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / n as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..points.len() {
        let (r, _) = points[k];
        let env = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev_recall) * env;
        prev_recall = r;
    }
    Some(ap)
}

/// Unweighted mean over classes that have ground truth.
pub fn mean_average_precision(per_class: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Indexed by class id minus one.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

impl EvalReport {
    /// mAP then per-class AP, all x100, tab separated; excluded classes blank.
    pub fn row(&self) -> String {
        let mut s = format!("{:.2}", 100.0 * self.map);
        for ap in &self.per_class {
            match ap {
                Some(v) => {
                    let _ = write!(s, "\t{:.2}", 100.0 * v);
                }
                None => s.push('\t'),
            }
        }
        s
    }
}

/// Evaluate pre-computed detections `(class_id, score, box)` per image.
pub fn evaluate_detections(dets: &[Vec<(usize, f64, BBox)>], gts: &[GroundTruth], num_classes: usize) -> EvalReport {
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 1..=num_classes {
        let results: Vec<MatchResult> = dets
            .iter()
            .zip(gts)
            .map(|(d, g)| {
                let cd: Vec<(f64, BBox)> = d.iter().filter(|x| x.0 == c).map(|x| (x.1, x.2)).collect();
                let cg: Vec<BBox> = g.boxes.iter().filter(|b| b.class_id == c).map(|b| b.bbox).collect();
                match_detections(&cd, &cg, EVAL_IOU)
            })
            .collect();
        let ap = average_precision(&results);
        if ap.is_none() {
            log::info!("class {c} has no test ground truth; excluded from mAP");
        }
        per_class.push(ap);
    }
    let map = mean_average_precision(&per_class).unwrap_or(0.0);
    EvalReport { per_class, map }
}

pub fn evaluate(params: &ModelParams, images: &[Image], gts: &[GroundTruth], post: &PostProcess) -> Result<EvalReport, DetectorError> {
    let mut dets = Vec::with_capacity(images.len());
    for img in images {
        dets.push(detect(params, img, post)?.into_iter().map(|d| (d.class_id(), d.foreground_score, d.bbox)).collect());
    }
    Ok(evaluate_detections(&dets, gts, params.arch.num_classes))
}

/// Header matching [`EvalReport::row`]: name, mAP, then one column per class.
pub fn ap_table_header(num_classes: usize) -> String {
    let mut s = String::from("name\tmAP");
    for c in 1..=num_classes {
        let _ = write!(s, "\tclass{c}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn matching_fixtures() {
        let gt = b(0., 0., 10., 10.);
        let r = match_detections(&[], &[gt], 0.3);
        assert_eq!((r.true_positives(), r.unmatched_gt), (0, 1));

        // IoU = 31/100.
        let d = b(0., 0., 10., 3.1);
        assert!((iou(&d, &gt).unwrap() - 0.31).abs() < 1e-12);
        assert_eq!(match_detections(&[(0.5, d)], &[gt], 0.3).true_positives(), 1);

        let r = match_detections(&[(0.8, b(0., 0., 10., 9.)), (0.9, b(1., 0., 10., 10.))], &[gt], 0.3);
        assert_eq!(r.scored, vec![(0.9, true), (0.8, false)]);
    }

    #[test]
    fn ap_fixtures() {
        let all = MatchResult { scored: vec![(0.9, true), (0.8, true)], num_gt: 2, unmatched_gt: 0 };
        assert_eq!(average_precision(&[all]), Some(1.0));
        let none = MatchResult { scored: vec![], num_gt: 3, unmatched_gt: 3 };
        assert_eq!(average_precision(&[none]), Some(0.0));
        let hand = MatchResult { scored: vec![(0.9, true), (0.8, false), (0.7, true)], num_gt: 2, unmatched_gt: 0 };
        assert!((average_precision(&[hand]).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        let empty = MatchResult { scored: vec![(0.9, false)], num_gt: 0, unmatched_gt: 0 };
        assert_eq!(average_precision(&[empty]), None);
    }

    #[test]
    fn map_fixtures() {
        assert_eq!(mean_average_precision(&[Some(0.5)]), Some(0.5));
        assert_eq!(mean_average_precision(&[Some(1.0), Some(0.0)]), Some(0.5));
        assert_eq!(mean_average_precision(&[Some(0.3), None, Some(0.3)]), Some(0.3));
        assert_eq!(mean_average_precision(&[None]), None);
    }

    #[test]
    fn report_row_format() {
        let r = EvalReport { per_class: vec![Some(0.5), None, Some(1.0)], map: 0.75 };
        assert_eq!(r.row(), "75.00\t50.00\t\t100.00");
        assert_eq!(ap_table_header(2), "name\tmAP\tclass1\tclass2");
    }
}
