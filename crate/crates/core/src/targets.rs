//! Per-image training targets and the matching head outputs.
//!
//! Targets are produced by anchor/query assignment in the trainer, consumed
//! by the loss compositions and by the detector's backward pass.

use crate::geometry::{BBox, BoxDelta};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsTarget {
    pub class: usize,
    pub weight: f64,
}

impl ClsTarget {
    pub fn new(class: usize) -> Self {
        Self { class, weight: 1.0 }
    }
}

/// Target attached to one dense anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTarget {
    pub anchor: usize,
    pub cls: Option<ClsTarget>,
    pub reg: Option<BoxDelta>,
}

/// Target attached to one query box fed through the RoI head.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTarget {
    pub query: BBox,
    pub cls: Option<ClsTarget>,
    pub reg: Option<BoxDelta>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageTargets {
    pub anchors: Vec<AnchorTarget>,
    pub rois: Vec<RoiTarget>,
}

impl ImageTargets {
    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty() && self.rois.is_empty()
    }

    pub fn num_cls(&self) -> usize {
        self.anchors.iter().filter(|t| t.cls.is_some()).count() + self.rois.iter().filter(|t| t.cls.is_some()).count()
    }

    pub fn num_reg(&self) -> usize {
        self.anchors.iter().filter(|t| t.reg.is_some()).count() + self.rois.iter().filter(|t| t.reg.is_some()).count()
    }
}

/// Class distribution and box delta predicted for one anchor or query.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub delta: BoxDelta,
}

/// Head outputs aligned with an [`ImageTargets`]: `anchors` covers every
/// dense anchor, `rois[i]` answers `targets.rois[i]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadOutputs {
    pub anchors: Vec<Prediction>,
    pub rois: Vec<Prediction>,
}
