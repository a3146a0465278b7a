//! Axis-aligned box arithmetic shared by the detector, pseudo-labeling and
//! the evaluator: IoU, class-wise NMS and the anchor delta codec.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest log-scale size delta accepted by [`decode_delta`] before the
/// exponential is clamped (ratio of ~62x).
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): need finite coordinates with x1 < x2 and y1 < y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("non-finite box delta {0:?}")]
    NonFiniteDelta([f64; 4]),
    #[error("box collapses to zero area after clamping to the image")]
    Collapsed,
}

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite();
        if finite && self.x1 < self.x2 && self.y1 < self.y2 {
            Ok(())
        } else {
            Err(GeometryError::InvalidBox { x1: self.x1, y1: self.y1, x2: self.x2, y2: self.y2 })
        }
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox { x1: self.x1 * s, y1: self.y1 * s, x2: self.x2 * s, y2: self.y2 * s }
    }

    /// Area of the intersection with `other` (0 when disjoint).
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Clip to `[0, width] x [0, height]`. Fails if nothing of the box remains.
    pub fn clip(&self, width: f64, height: f64) -> Result<BBox, GeometryError> {
        let b = BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        if b.x1 < b.x2 && b.y1 < b.y2 {
            Ok(b)
        } else {
            Err(GeometryError::Collapsed)
        }
    }

    /// True when the box lies inside `[0, width] x [0, height]`.
    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

/// Regression target relative to a reference box: center offsets normalized
/// by the reference size and log-scale size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        BoxDelta { dx, dy, dw, dh }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxDelta { dx: a[0], dy: a[1], dw: a[2], dh: a[3] }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Anything with a box, a class and a score can be suppressed.
pub trait Scored {
    fn bbox(&self) -> &BBox;
    fn class_id(&self) -> usize;
    fn score(&self) -> f64;
}

/// Greedy class-wise non-maximum suppression.
///
/// Candidates are visited in descending score (ties by lower input index); a
/// candidate is kept unless a kept box of the same class overlaps it with IoU
/// strictly above `iou_thresh`. Output is sorted by score.
pub fn nms<T: Scored + Clone>(dets: &[T], iou_thresh: f64) -> Vec<T> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score().total_cmp(&dets[i].score()).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class_id() == dets[i].class_id()
                && iou(dets[k].bbox(), dets[i].bbox()).map(|v| v > iou_thresh).unwrap_or(false)
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

pub fn encode_delta(target: &BBox, reference: &BBox) -> Result<BoxDelta, GeometryError> {
    target.validate()?;
    reference.validate()?;
    let (tcx, tcy) = target.center();
    let (rcx, rcy) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    Ok(BoxDelta {
        dx: (tcx - rcx) / rw,
        dy: (tcy - rcy) / rh,
        dw: (target.width() / rw).ln(),
        dh: (target.height() / rh).ln(),
    })
}

/// Inverse of [`encode_delta`]. With `clamp = Some((w, h))` the result is
/// clipped to the image.
pub fn decode_delta(d: &BoxDelta, reference: &BBox, clamp: Option<(f64, f64)>) -> Result<BBox, GeometryError> {
    if !d.is_finite() {
        return Err(GeometryError::NonFiniteDelta(d.to_array()));
    }
    reference.validate()?;
    let (rcx, rcy) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    let cx = rcx + d.dx * rw;
    let cy = rcy + d.dy * rh;
    let w = rw * d.dw.min(MAX_LOG_SCALE).exp();
    let h = rh * d.dh.min(MAX_LOG_SCALE).exp();
    let b = BBox::from_center(cx, cy, w, h)?;
    match clamp {
        Some((iw, ih)) => b.clip(iw, ih),
        None => Ok(b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct D(BBox, usize, f64);

    impl Scored for D {
        fn bbox(&self) -> &BBox {
            &self.0
        }
        fn class_id(&self) -> usize {
            self.1
        }
        fn score(&self) -> f64 {
            self.2
        }
    }

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_fixtures() {
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(0., 0., 10., 10.)).unwrap(), 1.0);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(5., 5., 6., 6.)).unwrap(), 0.0);
        let v = iou(&b(0., 0., 2., 2.), &b(1., 1., 3., 3.)).unwrap();
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn iou_rejects_degenerate() {
        let flat = BBox { x1: 0., y1: 0., x2: 0., y2: 5. };
        assert!(iou(&flat, &b(0., 0., 1., 1.)).is_err());
        assert!(BBox::new(0., 0., f64::NAN, 1.).is_err());
    }

    #[test]
    fn nms_fixtures() {
        let empty: Vec<D> = vec![];
        assert!(nms(&empty, 0.5).is_empty());

        let twins = vec![D(b(0., 0., 10., 10.), 1, 0.8), D(b(0., 0., 10., 10.), 1, 0.9)];
        assert_eq!(nms(&twins, 0.99), vec![twins[1].clone()]);

        let a = D(b(0., 0., 10., 10.), 1, 0.9);
        let bb = D(b(1., 1., 11., 11.), 1, 0.8);
        let c = D(b(20., 20., 30., 30.), 1, 0.7);
        // Pairwise brute force: only (A, B) exceeds 0.5.
        let ab = iou(&a.0, &bb.0).unwrap();
        assert!((ab - 81.0 / 119.0).abs() < 1e-12);
        assert_eq!(iou(&a.0, &c.0).unwrap(), 0.0);
        assert_eq!(iou(&bb.0, &c.0).unwrap(), 0.0);
        assert_eq!(nms(&[a.clone(), bb, c.clone()], 0.5), vec![a, c]);
    }

    #[test]
    fn nms_is_class_wise_and_breaks_ties_by_index() {
        let x = D(b(0., 0., 10., 10.), 1, 0.9);
        let y = D(b(0., 0., 10., 10.), 2, 0.9);
        assert_eq!(nms(&[x.clone(), y.clone()], 0.5).len(), 2);
        let z = D(b(0., 0., 10., 10.), 1, 0.9);
        let kept = nms(&[x.clone(), D(z.0, 1, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0], x);
    }

    #[test]
    fn delta_identities() {
        let r = b(3., 4., 17., 29.);
        assert_eq!(encode_delta(&r, &r).unwrap(), BoxDelta::default());
        assert_eq!(decode_delta(&BoxDelta::default(), &r, None).unwrap(), r);
        assert!(decode_delta(&BoxDelta::new(f64::INFINITY, 0., 0., 0.), &r, None).is_err());
    }

    #[test]
    fn decode_clamps_only_on_request() {
        let r = b(80., 80., 100., 100.);
        let free = decode_delta(&BoxDelta::default(), &r, None).unwrap();
        assert_eq!(free, r);
        let clipped = decode_delta(&BoxDelta::default(), &r, Some((96., 96.))).unwrap();
        assert_eq!(clipped, b(80., 80., 96., 96.));
    }
}
