//! Turning (pseudo) ground-truth boxes into per-anchor and per-query targets.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::geometry::{encode_delta, iou, BBox};
use crate::plg::jitter;
use crate::synthdata::{GroundTruth, GtBox};
use crate::targets::{AnchorTarget, ClsTarget, ImageTargets, RoiTarget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignConfig {
    /// Anchors at or above this IoU with a box are foreground.
    pub fg_iou: f64,
    /// Anchors below this IoU with every box are background; others are ignored.
    pub bg_iou: f64,
    /// Classification slots sampled per image.
    pub anchors_per_image: usize,
    pub max_fg_per_image: usize,
    /// Jittered copies of each box used as refinement-head queries.
    pub roi_jitter_copies: usize,
    pub roi_jitter_frac: f64,
    /// Random background queries per image.
    pub roi_background: usize,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            fg_iou: 0.5,
            bg_iou: 0.3,
            anchors_per_image: 64,
            max_fg_per_image: 16,
            roi_jitter_copies: 2,
            roi_jitter_frac: 0.15,
            roi_background: 2,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0 < self.bg_iou && self.bg_iou <= self.fg_iou && self.fg_iou <= 1.0) {
            return Err("assign: need 0 < bg_iou <= fg_iou <= 1".into());
        }
        if self.anchors_per_image == 0 || self.max_fg_per_image > self.anchors_per_image {
            return Err("assign.max_fg_per_image: must not exceed a positive anchors_per_image".into());
        }
        if !(0.0..0.5).contains(&self.roi_jitter_frac) {
            return Err("assign.roi_jitter_frac: must lie in [0, 0.5)".into());
        }
        Ok(())
    }
}

/// Index of the best box for each anchor plus the best anchor for each box.
fn overlaps(anchors: &[BBox], boxes: &GroundTruth) -> (Vec<Option<(usize, f64)>>, Vec<usize>) {
    let mut per_anchor = vec![None; anchors.len()];
    let mut best_anchor = vec![(0usize, f64::NEG_INFINITY); boxes.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        for (g, gt) in boxes.boxes.iter().enumerate() {
            let v = iou(anchor, &gt.bbox).unwrap_or(0.0);
            if per_anchor[a].is_none_or(|(_, bv): (usize, f64)| v > bv) {
                per_anchor[a] = Some((g, v));
            }
            if v > best_anchor[g].1 {
                best_anchor[g] = (a, v);
            }
        }
    }
    (per_anchor, best_anchor.into_iter().map(|b| b.0).collect())
}

/// Foreground anchors (anchor, box index) and background anchors.
fn label_anchors(anchors: &[BBox], boxes: &GroundTruth, cfg: &AssignConfig) -> (Vec<(usize, usize)>, Vec<usize>) {
    let (per_anchor, best_anchor) = overlaps(anchors, boxes);
    let mut fg_of: Vec<Option<usize>> = per_anchor.iter().map(|m| m.filter(|(_, v)| *v >= cfg.fg_iou).map(|(g, _)| g)).collect();
    for (g, &a) in best_anchor.iter().enumerate() {
        fg_of[a] = Some(g);
    }
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for a in 0..anchors.len() {
        match fg_of[a] {
            Some(g) => fg.push((a, g)),
            None if per_anchor[a].is_none_or(|(_, v)| v < cfg.bg_iou) => bg.push(a),
            None => {}
        }
    }
    (fg, bg)
}

/// Assign targets for one view.
///
/// `cls_boxes` drive classification targets, `reg_boxes` regression
/// targets. `bg_weight` gives the weight of a background slot from its
/// box (reliability weighting); `None` means weight 1.
#[allow(clippy::too_many_arguments)]
pub fn assign(
    anchors: &[BBox],
    cls_boxes: &GroundTruth,
    reg_boxes: &GroundTruth,
    width: f64,
    height: f64,
    cfg: &AssignConfig,
    rng: &mut dyn RngCore,
    bg_weight: Option<&dyn Fn(&BBox) -> f64>,
) -> ImageTargets {
    let weight_of = |b: &BBox| bg_weight.map(|f| f(b)).unwrap_or(1.0);
    let mut slots: Vec<AnchorTarget> = Vec::new();
    let mut slot_of = vec![usize::MAX; anchors.len()];

    let (mut fg, mut bg) = label_anchors(anchors, cls_boxes, cfg);
    fg.shuffle(rng);
    fg.truncate(cfg.max_fg_per_image);
    bg.shuffle(rng);
    bg.truncate(cfg.anchors_per_image - fg.len());
    for (a, g) in fg {
        slot_of[a] = slots.len();
        slots.push(AnchorTarget { anchor: a, cls: Some(ClsTarget::new(cls_boxes.boxes[g].class_id)), reg: None });
    }
    for a in bg {
        slot_of[a] = slots.len();
        slots.push(AnchorTarget { anchor: a, cls: Some(ClsTarget { class: 0, weight: weight_of(&anchors[a]) }), reg: None });
    }

    if !reg_boxes.is_empty() {
        let (reg_fg, _) = label_anchors(anchors, reg_boxes, cfg);
        for (a, g) in reg_fg {
            let Ok(d) = encode_delta(&reg_boxes.boxes[g].bbox, &anchors[a]) else { continue };
            if slot_of[a] == usize::MAX {
                slot_of[a] = slots.len();
                slots.push(AnchorTarget { anchor: a, cls: None, reg: Some(d) });
            } else {
                slots[slot_of[a]].reg = Some(d);
            }
        }
    }

    let mut rois = Vec::new();
    for gt in &cls_boxes.boxes {
        for _ in 0..cfg.roi_jitter_copies {
            let q = jitter(&gt.bbox, rng, cfg.roi_jitter_frac, width, height);
            if let Some(t) = roi_target(q, cls_boxes, reg_boxes, cfg, &weight_of) {
                rois.push(t);
            }
        }
    }
    for _ in 0..cfg.roi_background {
        let (w, h) = (rng.random_range(16.0..32.0_f64).min(width), rng.random_range(16.0..32.0_f64).min(height));
        let x1 = rng.random_range(0.0..=(width - w));
        let y1 = rng.random_range(0.0..=(height - h));
        let Ok(q) = BBox::new(x1, y1, x1 + w, y1 + h) else { continue };
        if let Some(t) = roi_target(q, cls_boxes, reg_boxes, cfg, &weight_of) {
            rois.push(t);
        }
    }
    ImageTargets { anchors: slots, rois }
}

fn roi_target(q: BBox, cls_boxes: &GroundTruth, reg_boxes: &GroundTruth, cfg: &AssignConfig, weight_of: &dyn Fn(&BBox) -> f64) -> Option<RoiTarget> {
    fn best<'a>(q: &BBox, boxes: &'a GroundTruth) -> Option<(&'a GtBox, f64)> {
        let mut out: Option<(&GtBox, f64)> = None;
        for g in &boxes.boxes {
            let v = iou(q, &g.bbox).unwrap_or(0.0);
            if out.is_none_or(|(_, bv)| v > bv) {
                out = Some((g, v));
            }
        }
        out
    }
    let cls = match best(&q, cls_boxes) {
        Some((g, v)) if v >= cfg.fg_iou => Some(ClsTarget::new(g.class_id)),
        Some((_, v)) if v >= cfg.bg_iou => None,
        _ => Some(ClsTarget { class: 0, weight: weight_of(&q) }),
    };
    let reg = match best(&q, reg_boxes) {
        Some((g, v)) if v >= cfg.fg_iou => encode_delta(&g.bbox, &q).ok(),
        _ => None,
    };
    if cls.is_none() && reg.is_none() {
        return None;
    }
    Some(RoiTarget { query: q, cls, reg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{anchors, Arch};
    use crate::rng::stream;
    use crate::synthdata::{generate_scene, SceneConfig};

    #[test]
    fn every_default_lesion_has_a_covering_anchor() {
        let cfg = SceneConfig::default();
        let a = anchors(&Arch::new(cfg.num_classes), cfg.width, cfg.height);
        for seed in 0..300 {
            let (_, gt) = generate_scene(seed, &cfg).unwrap();
            for g in &gt.boxes {
                let best = a.iter().map(|x| iou(x, &g.bbox).unwrap()).fold(0.0, f64::max);
                assert!(best >= 0.3, "seed {seed}: {g:?} best IoU {best}");
            }
        }
    }

    #[test]
    fn assignment_shapes() {
        let arch = Arch::new(4);
        let a = anchors(&arch, 96, 96);
        let gt = GroundTruth::new(vec![GtBox { class_id: 3, bbox: BBox::new(20., 30., 60., 44.).unwrap() }]);
        let cfg = AssignConfig::default();
        let t = assign(&a, &gt, &gt, 96., 96., &cfg, &mut stream(&[1]), None);
        let fg: Vec<_> = t.anchors.iter().filter(|s| s.cls.is_some_and(|c| c.class == 3)).collect();
        assert!(!fg.is_empty());
        assert!(fg.iter().all(|s| s.reg.is_some()));
        assert!(t.anchors.iter().filter(|s| s.cls.is_some()).count() <= cfg.anchors_per_image);
        let mut seen = std::collections::HashSet::new();
        assert!(t.anchors.iter().all(|s| seen.insert(s.anchor)));
        assert!(t.rois.iter().any(|r| r.cls.is_some_and(|c| c.class == 3) && r.reg.is_some()));

        // Regression only on the reg set.
        let none = GroundTruth::default();
        let t = assign(&a, &gt, &none, 96., 96., &cfg, &mut stream(&[1]), None);
        assert!(t.anchors.iter().all(|s| s.reg.is_none()));
        assert!(t.rois.iter().all(|r| r.reg.is_none()));
    }

    #[test]
    fn background_weights_are_applied() {
        let a = anchors(&Arch::new(4), 96, 96);
        let w = |_: &BBox| 0.25;
        let t = assign(&a, &GroundTruth::default(), &GroundTruth::default(), 96., 96., &AssignConfig::default(), &mut stream(&[2]), Some(&w));
        assert_eq!(t.anchors.len(), 64);
        assert!(t.anchors.iter().all(|s| s.cls == Some(ClsTarget { class: 0, weight: 0.25 })));
    }
}
