//! Weak and strong augmentation with exact box co-transforms.
//!
//! Every op is an [`AugOp`] registered by name. An op samples its parameters
//! once; the sampled parameters are recorded in an [`AugRecord`] so the same
//! transform can be replayed on pixels and boxes (pseudo boxes produced on
//! the weak view are carried into the strong view through the record).

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::registry::{Named, Registry};
use crate::synthdata::{GroundTruth, GtBox, Image};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugError {
    #[error("mixup requested without a partner image")]
    MixupWithoutPartner,
    #[error("singular affine map (det = {0})")]
    SingularMap(f64),
    #[error("unknown augmentation op '{0}'")]
    UnknownOp(String),
    #[error("op '{op}' expects {expected} parameters, got {got}")]
    BadParams { op: String, expected: usize, got: usize },
    #[error("invalid augmentation config: {0}")]
    Config(String),
}

/// 2x3 affine map acting on continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine(pub [[f64; 3]; 2]);

impl Affine {
    pub const IDENTITY: Affine = Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine([[1.0, 0.0, tx], [0.0, 1.0, ty]])
    }

    /// Rotation by `deg` degrees about `(cx, cy)`.
    pub fn rotation_about(cx: f64, cy: f64, deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Affine([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy]])
    }

    /// Horizontal shear by `deg` degrees about the row `cy`.
    pub fn shear_about(cy: f64, deg: f64) -> Self {
        let k = deg.to_radians().tan();
        Affine([[1.0, k, -k * cy], [0.0, 1.0, 0.0]])
    }

    pub fn hflip(width: f64) -> Self {
        Affine([[-1.0, 0.0, width], [0.0, 1.0, 0.0]])
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn after(&self, inner: &Affine) -> Affine {
        let a = &self.0;
        let b = &inner.0;
        Affine([
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
                a[0][0] * b[0][2] + a[0][1] * b[1][2] + a[0][2],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
                a[1][0] * b[0][2] + a[1][1] * b[1][2] + a[1][2],
            ],
        ])
    }

    pub fn det(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn inverse(&self) -> Result<Affine, AugError> {
        let d = self.det();
        if !(d.abs() > 1e-12) {
            return Err(AugError::SingularMap(d));
        }
        let [[a, b, tx], [c, e, ty]] = self.0;
        let (ia, ib, ic, ie) = (e / d, -b / d, -c / d, a / d);
        Ok(Affine([[ia, ib, -(ia * tx + ib * ty)], [ic, ie, -(ic * tx + ie * ty)]]))
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    pub fn is_identity(&self) -> bool {
        *self == Affine::IDENTITY
    }
}

/// Box drop threshold after a geometric transform.
pub const MIN_KEEP_FRACTION: f64 = 0.3;

/// Axis-aligned hull of the transformed corners, clipped to the image.
/// `None` when the clipped hull keeps less than [`MIN_KEEP_FRACTION`] of the
/// original area.
pub fn transform_box(b: &BBox, m: &Affine, width: f64, height: f64) -> Result<Option<BBox>, AugError> {
    let d = m.det();
    if !(d.abs() > 1e-12) {
        return Err(AugError::SingularMap(d));
    }
    if m.is_identity() {
        return Ok(Some(*b));
    }
    let corners = [(b.x1, b.y1), (b.x2, b.y1), (b.x1, b.y2), (b.x2, b.y2)];
    let (mut x1, mut y1, mut x2, mut y2) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in corners {
        let (u, v) = m.apply(x, y);
        x1 = x1.min(u);
        y1 = y1.min(v);
        x2 = x2.max(u);
        y2 = y2.max(v);
    }
    let hull = BBox { x1, y1, x2, y2 };
    match hull.clip(width, height) {
        Ok(c) if c.area() >= MIN_KEEP_FRACTION * b.area() => Ok(Some(c)),
        _ => Ok(None),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Flip,
    Color,
    Geo,
    Cutout,
    Mixup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrongAugConfig {
    pub color: bool,
    pub cutout: bool,
    pub mixup: bool,
    pub geo: bool,
    pub color_range: [f64; 2],
    pub cutout_area: [f64; 2],
    pub cutout_aspect: [f64; 2],
    pub max_translate: f64,
    pub max_rotate_deg: f64,
    pub max_shear_deg: f64,
    pub mixup_beta: f64,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        Self {
            color: true,
            cutout: true,
            mixup: false,
            geo: false,
            color_range: [0.7, 1.3],
            cutout_area: [0.01, 0.05],
            cutout_aspect: [0.5, 2.0],
            max_translate: 0.1,
            max_rotate_deg: 15.0,
            max_shear_deg: 10.0,
            mixup_beta: 1.5,
        }
    }
}

impl StrongAugConfig {
    pub fn all_off() -> Self {
        Self { color: false, cutout: false, mixup: false, geo: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), AugError> {
        let range = |name: &str, r: [f64; 2], lo: f64, hi: f64| {
            if r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi {
                Ok(())
            } else {
                Err(AugError::Config(format!("{name} = {r:?} must satisfy {lo} <= lo <= hi <= {hi}")))
            }
        };
        range("color_range", self.color_range, 0.0, 10.0)?;
        range("cutout_area", self.cutout_area, 0.0, 1.0)?;
        range("cutout_aspect", self.cutout_aspect, 1e-3, 1e3)?;
        for (name, v, hi) in [
            ("max_translate", self.max_translate, 0.5),
            ("max_rotate_deg", self.max_rotate_deg, 90.0),
            ("max_shear_deg", self.max_shear_deg, 45.0),
        ] {
            if !(0.0..=hi).contains(&v) {
                return Err(AugError::Config(format!("{name} = {v} outside [0, {hi}]")));
            }
        }
        if !(self.mixup_beta > 0.0 && self.mixup_beta.is_finite()) {
            return Err(AugError::Config(format!("mixup_beta = {} must be positive", self.mixup_beta)));
        }
        Ok(())
    }
}

/// Context handed to ops when sampling parameters.
pub struct SampleCtx<'a> {
    pub cfg: &'a StrongAugConfig,
    pub width: f64,
    pub height: f64,
}

/// One augmentation op. Geometric ops expose an affine map and are warped
/// jointly; all others edit pixels directly.
pub trait AugOp: Named + Send + Sync {
    fn family(&self) -> Family;
    fn arity(&self) -> usize;
    fn sample(&self, rng: &mut dyn rand::RngCore, ctx: &SampleCtx<'_>) -> Vec<f64>;

    fn affine(&self, _params: &[f64], _width: f64, _height: f64) -> Option<Affine> {
        None
    }

    fn apply_pixels(&self, _img: &mut Image, _params: &[f64], _partner: Option<&Image>) -> Result<(), AugError> {
        Ok(())
    }
}

fn uniform(rng: &mut dyn rand::RngCore, r: [f64; 2]) -> f64 {
    if r[0] < r[1] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

fn symmetric(rng: &mut dyn rand::RngCore, max: f64) -> f64 {
    if max > 0.0 {
        rng.random_range(-max..=max)
    } else {
        0.0
    }
}

pub struct HFlip;
impl Named for HFlip {
    fn name(&self) -> &'static str {
        "hflip"
    }
}
impl AugOp for HFlip {
    fn family(&self) -> Family {
        Family::Flip
    }
    fn arity(&self) -> usize {
        0
    }
    fn sample(&self, _rng: &mut dyn rand::RngCore, _ctx: &SampleCtx<'_>) -> Vec<f64> {
        vec![]
    }
    fn apply_pixels(&self, img: &mut Image, _params: &[f64], _partner: Option<&Image>) -> Result<(), AugError> {
        let w = img.width;
        for y in 0..img.height {
            img.pixels[y * w..(y + 1) * w].reverse();
        }
        Ok(())
    }
}

pub struct Brightness;
impl Named for Brightness {
    fn name(&self) -> &'static str {
        "brightness"
    }
}
impl AugOp for Brightness {
    fn family(&self) -> Family {
        Family::Color
    }
    fn arity(&self) -> usize {
        1
    }
    fn sample(&self, rng: &mut dyn rand::RngCore, ctx: &SampleCtx<'_>) -> Vec<f64> {
        vec![uniform(rng, ctx.cfg.color_range)]
    }
    fn apply_pixels(&self, img: &mut Image, params: &[f64], _partner: Option<&Image>) -> Result<(), AugError> {
        for p in &mut img.pixels {
            *p *= params[0];
        }
        img.clamp_unit();
        Ok(())
    }
}

pub struct Contrast;
impl Named for Contrast {
    fn name(&self) -> &'static str {
        "contrast"
    }
}
impl AugOp for Contrast {
    fn family(&self) -> Family {
        Family::Color
    }
    fn arity(&self) -> usize {
        1
    }
    fn sample(&self, rng: &mut dyn rand::RngCore, ctx: &SampleCtx<'_>) -> Vec<f64> {
        vec![uniform(rng, ctx.cfg.color_range)]
    }
    fn apply_pixels(&self, img: &mut Image, params: &[f64], _partner: Option<&Image>) -> Result<(), AugError> {
        let mean = img.mean();
        for p in &mut img.pixels {
            *p = (*p - mean) * params[0] + mean;
        }
        img.clamp_unit();
        Ok(())
    }
}

pub struct Sharpness;
impl Named for Sharpness {
    fn name(&self) -> &'static str {
        "sharpness"
    }
}
impl AugOp for Sharpness {
    fn family(&self) -> Family {
        Family::Color
    }
    fn arity(&self) -> usize {
        1
    }
    fn sample(&self, rng: &mut dyn rand::RngCore, ctx: &SampleCtx<'_>) -> Vec<f64> {
        vec![uniform(rng, ctx.cfg.color_range)]
    }
    fn apply_pixels(&self, img: &mut Image, params: &[f64], _partner: Option<&Image>) -> Result<(), AugError> {
        // Blend against a 3x3 box blur (edge-replicated).
        let (w, h) = (img.width as isize, img.height as isize);
        let src = img.pixels.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let sx = (x + dx).clamp(0, w - 1);
                        let sy = (y + dy).clamp(0, h - 1);
                        acc += src[(sy * w + sx) as usize];
                    }
                }
                let blur = acc / 9.0;
                let i = (y * w + x) as usize;
                img.pixels[i] = blur + params[0] * (src[i] - blur);
            }
        }
        img.clamp_unit();
        Ok(())
    }
}

pub struct Translate;
impl Named for Translate {
    fn name(&self) -> &'static str {
        "translate"
    }
}
impl AugOp for Translate {
    fn family(&self) -> Family {
        Family::Geo
    }
    fn arity(&self) -> usize {
        2
    }
    fn sample(&self, rng: &mut dyn rand::RngCore, ctx: &SampleCtx<'_>) -> Vec<f64> {
        let tx = symmetric(rng, ctx.cfg.max_translate * ctx.width);
        let ty = symmetric(rng, ctx.cfg.max_translate * ctx.height);
        vec![tx, ty]
    }
    fn affine(&self, p: &[f64], _w: f64, _h: f64) -> Option<Affine> {
        Some(Affine::translation(p[0], p[1]))
    }
}

pub struct Rotate;
impl Named for Rotate {
    fn name(&self) -> &'static str {
        "rotate"
    }
}
impl AugOp for Rotate {
    fn family(&self) -> Family {
        Family::Geo
    }
    fn arity(&self) -> usize {
        1
    }
    fn sample(&self, rng: &mut dyn rand::RngCore, ctx: &SampleCtx<'_>) -> Vec<f64> {
        vec![symmetric(rng, ctx.cfg.max_rotate_deg)]
    }
    fn affine(&self, p: &[f64], w: f64, h: f64) -> Option<Affine> {
        Some(Affine::rotation_about(0.5 * w, 0.5 * h, p[0]))
    }
}

pub struct Shear;
impl Named for Shear {
    fn name(&self) -> &'static str {
        "shear"
    }
}
impl AugOp for Shear {
    fn family(&self) -> Family {
        Family::Geo
    }
    fn arity(&self) -> usize {
        1
    }
    fn sample(&self, rng: &mut dyn rand::RngCore, ctx: &SampleCtx<'_>) -> Vec<f64> {
        vec![symmetric(rng, ctx.cfg.max_shear_deg)]
    }
    fn affine(&self, p: &[f64], _w: f64, h: f64) -> Option<Affine> {
        Some(Affine::shear_about(0.5 * h, p[0]))
    }
}

pub struct Cutout;
impl Named for Cutout {
    fn name(&self) -> &'static str {
        "cutout"
    }
}

impl Cutout {
    /// Rectangle `[x1, y1, x2, y2]` for an area fraction and aspect ratio,
    /// placed by two unit draws.
    pub fn rect(area_frac: f64, aspect: f64, u: f64, v: f64, width: f64, height: f64) -> [f64; 4] {
        let area = area_frac * width * height;
        let rw = (area * aspect).sqrt().min(width);
        let rh = (area / aspect).sqrt().min(height);
        let x1 = u * (width - rw);
        let y1 = v * (height - rh);
        [x1, y1, x1 + rw, y1 + rh]
    }
}

impl AugOp for Cutout {
    fn family(&self) -> Family {
        Family::Cutout
    }
    fn arity(&self) -> usize {
        4
    }
    fn sample(&self, rng: &mut dyn rand::RngCore, ctx: &SampleCtx<'_>) -> Vec<f64> {
        let a = uniform(rng, ctx.cfg.cutout_area);
        let r = uniform(rng, ctx.cfg.cutout_aspect);
        let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
        Self::rect(a, r, u, v, ctx.width, ctx.height).to_vec()
    }
    fn apply_pixels(&self, img: &mut Image, p: &[f64], _partner: Option<&Image>) -> Result<(), AugError> {
        // Zero every pixel whose center lies inside the rectangle.
        let xs = ((p[0] - 0.5).ceil().max(0.0) as usize)..(((p[2] - 0.5).ceil().max(0.0) as usize).min(img.width));
        let ys = ((p[1] - 0.5).ceil().max(0.0) as usize)..(((p[3] - 0.5).ceil().max(0.0) as usize).min(img.height));
        for y in ys {
            for x in xs.clone() {
                img.set(x, y, 0.0);
            }
        }
        Ok(())
    }
}

pub struct Mixup;
impl Named for Mixup {
    fn name(&self) -> &'static str {
        "mixup"
    }
}
impl AugOp for Mixup {
    fn family(&self) -> Family {
        Family::Mixup
    }
    fn arity(&self) -> usize {
        1
    }
    fn sample(&self, rng: &mut dyn rand::RngCore, ctx: &SampleCtx<'_>) -> Vec<f64> {
        let b = ctx.cfg.mixup_beta;
        let beta = Beta::new(b, b).expect("validated beta parameter");
        vec![beta.sample(rng)]
    }
    fn apply_pixels(&self, img: &mut Image, p: &[f64], partner: Option<&Image>) -> Result<(), AugError> {
        let other = partner.ok_or(AugError::MixupWithoutPartner)?;
        let lam = p[0];
        for (a, b) in img.pixels.iter_mut().zip(&other.pixels) {
            *a = lam * *a + (1.0 - lam) * b;
        }
        Ok(())
    }
}

pub fn aug_ops() -> Registry<dyn AugOp> {
    Registry::<dyn AugOp>::new("augmentation op")
        .with(Arc::new(HFlip))
        .with(Arc::new(Brightness))
        .with(Arc::new(Contrast))
        .with(Arc::new(Sharpness))
        .with(Arc::new(Translate))
        .with(Arc::new(Rotate))
        .with(Arc::new(Shear))
        .with(Arc::new(Cutout))
        .with(Arc::new(Mixup))
}

/// Op names applied by the strong pipeline, in order, for a given config.
pub fn strong_plan(cfg: &StrongAugConfig) -> Vec<&'static str> {
    let mut plan = Vec::new();
    if cfg.color {
        plan.extend(["brightness", "contrast", "sharpness"]);
    }
    if cfg.geo {
        // Applied right to left: shear, then rotate, then translate.
        plan.extend(["shear", "rotate", "translate"]);
    }
    if cfg.cutout {
        plan.push("cutout");
    }
    if cfg.mixup {
        plan.push("mixup");
    }
    plan
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpRecord {
    pub name: String,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub ops_applied: Vec<OpRecord>,
    pub geometric_map: Affine,
}

impl Default for AugRecord {
    fn default() -> Self {
        Self { ops_applied: Vec::new(), geometric_map: Affine::IDENTITY }
    }
}

impl AugRecord {
    pub fn mixup_lambda(&self) -> Option<f64> {
        self.ops_applied.iter().find(|o| o.name == "mixup").map(|o| o.params[0])
    }

    /// Carry boxes into the augmented frame: primary boxes through the
    /// geometric map, partner boxes (mixup) unchanged.
    pub fn map_boxes(
        &self,
        primary: &GroundTruth,
        partner: Option<&GroundTruth>,
        width: f64,
        height: f64,
    ) -> Result<GroundTruth, AugError> {
        let mut out = Vec::with_capacity(primary.len());
        for b in &primary.boxes {
            if let Some(bbox) = map_one(&b.bbox, &self.geometric_map, width, height)? {
                out.push(GtBox { class_id: b.class_id, bbox });
            }
        }
        if self.mixup_lambda().is_some() {
            if let Some(p) = partner {
                out.extend(p.boxes.iter().copied());
            }
        }
        Ok(GroundTruth::new(out))
    }
}

fn map_one(b: &BBox, m: &Affine, width: f64, height: f64) -> Result<Option<BBox>, AugError> {
    // Mirror maps keep exact arithmetic instead of the corner-hull route.
    if *m == Affine::hflip(width) {
        return Ok(Some(BBox { x1: width - b.x2, y1: b.y1, x2: width - b.x1, y2: b.y2 }));
    }
    transform_box(b, m, width, height)
}

/// Inverse-map bilinear warp with zero padding.
pub fn warp(img: &Image, m: &Affine) -> Result<Image, AugError> {
    let inv = m.inverse()?;
    let (w, h) = (img.width, img.height);
    let mut out = Image::filled(w, h, 0.0);
    for qy in 0..h {
        for qx in 0..w {
            let (sx, sy) = inv.apply(qx as f64 + 0.5, qy as f64 + 0.5);
            let (fx, fy) = (sx - 0.5, sy - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let mut acc = 0.0;
            for (dy, wy) in [(0isize, 1.0 - ay), (1, ay)] {
                for (dx, wx) in [(0isize, 1.0 - ax), (1, ax)] {
                    let (x, y) = (x0 + dx, y0 + dy);
                    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && wx * wy > 0.0 {
                        acc += wx * wy * img.get(x as usize, y as usize);
                    }
                }
            }
            out.set(qx, qy, acc);
        }
    }
    Ok(out)
}

/// Apply recorded ops to pixels; consecutive geometric ops are composed and
/// warped once.
fn run_ops(img: &Image, ops: &[OpRecord], partner: Option<&Image>) -> Result<(Image, Affine), AugError> {
    let registry = aug_ops();
    let (w, h) = img.dims();
    let mut out = img.clone();
    let mut total = Affine::IDENTITY;
    let mut pending: Option<Affine> = None;
    for rec in ops {
        let op = registry.resolve(&rec.name).map_err(|_| AugError::UnknownOp(rec.name.clone()))?;
        if rec.params.len() != op.arity() {
            return Err(AugError::BadParams { op: rec.name.clone(), expected: op.arity(), got: rec.params.len() });
        }
        if let Some(m) = op.affine(&rec.params, w, h) {
            pending = Some(m.after(&pending.unwrap_or(Affine::IDENTITY)));
            continue;
        }
        if let Some(m) = pending.take() {
            out = warp(&out, &m)?;
            total = m.after(&total);
        }
        op.apply_pixels(&mut out, &rec.params, partner)?;
        if op.family() == Family::Flip {
            total = Affine::hflip(w).after(&total);
        }
    }
    if let Some(m) = pending {
        out = warp(&out, &m)?;
        total = m.after(&total);
    }
    Ok((out, total))
}

/// Replaying a record reproduces the augmented pixels bit-exactly.
pub fn replay(img: &Image, record: &AugRecord, partner: Option<&Image>) -> Result<Image, AugError> {
    Ok(run_ops(img, &record.ops_applied, partner)?.0)
}

/// Weak augmentation: horizontal flip with probability 0.5.
pub fn weak(img: &Image, boxes: &GroundTruth, rng: &mut dyn rand::RngCore) -> Result<(Image, GroundTruth, AugRecord), AugError> {
    let flip = rng.random_bool(0.5);
    weak_with(img, boxes, flip)
}

pub fn weak_with(img: &Image, boxes: &GroundTruth, flip: bool) -> Result<(Image, GroundTruth, AugRecord), AugError> {
    if !flip {
        return Ok((img.clone(), boxes.clone(), AugRecord::default()));
    }
    let ops = vec![OpRecord { name: "hflip".into(), params: vec![] }];
    let (out, map) = run_ops(img, &ops, None)?;
    let record = AugRecord { ops_applied: ops, geometric_map: map };
    let mapped = record.map_boxes(boxes, None, img.width as f64, img.height as f64)?;
    Ok((out, mapped, record))
}

/// Strong augmentation in the fixed order color, geo, cutout, mixup.
pub fn strong(
    img: &Image,
    boxes: &GroundTruth,
    rng: &mut dyn rand::RngCore,
    cfg: &StrongAugConfig,
    partner: Option<(&Image, &GroundTruth)>,
) -> Result<(Image, GroundTruth, AugRecord), AugError> {
    if cfg.mixup && partner.is_none() {
        return Err(AugError::MixupWithoutPartner);
    }
    let (w, h) = img.dims();
    let ctx = SampleCtx { cfg, width: w, height: h };
    let registry = aug_ops();
    let ops: Vec<OpRecord> = strong_plan(cfg)
        .into_iter()
        .map(|name| {
            let op = registry.get(name).expect("planned op is registered");
            OpRecord { name: name.to_string(), params: op.sample(rng, &ctx) }
        })
        .collect();
    let (out, map) = run_ops(img, &ops, partner.map(|p| p.0))?;
    let record = AugRecord { ops_applied: ops, geometric_map: map };
    let mapped = record.map_boxes(boxes, partner.map(|p| p.1), w, h)?;
    Ok((out, mapped, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn gt(boxes: &[(f64, f64, f64, f64)]) -> GroundTruth {
        GroundTruth::new(boxes.iter().map(|&(a, b, c, d)| GtBox { class_id: 1, bbox: BBox::new(a, b, c, d).unwrap() }).collect())
    }

    fn ramp(w: usize, h: usize) -> Image {
        let mut img = Image::filled(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, ((x * 7 + y * 3) % 17) as f64 / 17.0);
            }
        }
        img
    }

    #[test]
    fn weak_flip_fixtures() {
        let img = ramp(96, 96);
        let boxes = gt(&[(10., 20., 30., 40.)]);
        let (same, b, rec) = weak_with(&img, &boxes, false).unwrap();
        assert_eq!((same, b), (img.clone(), boxes.clone()));
        assert!(rec.geometric_map.is_identity());

        let (f, fb, rec) = weak_with(&img, &boxes, true).unwrap();
        assert_eq!(fb.boxes[0].bbox, BBox::new(66., 20., 86., 40.).unwrap());
        assert_eq!(rec.geometric_map, Affine::hflip(96.));
        assert_eq!(f.get(0, 5), img.get(95, 5));
        let (back, bb, _) = weak_with(&f, &fb, true).unwrap();
        assert_eq!((back, bb), (img, boxes));
    }

    #[test]
    fn strong_with_everything_off_is_identity() {
        let img = ramp(64, 48);
        let boxes = gt(&[(3., 4., 20., 30.)]);
        let (out, b, rec) = strong(&img, &boxes, &mut stream(&[1]), &StrongAugConfig::all_off(), None).unwrap();
        assert_eq!((out, b), (img, boxes));
        assert!(rec.ops_applied.is_empty() && rec.geometric_map.is_identity());
    }

    #[test]
    fn degenerate_cutout_and_unit_mixup() {
        let img = ramp(32, 32);
        let mut out = img.clone();
        let r = Cutout::rect(0.0, 1.0, 0.3, 0.6, 32., 32.);
        Cutout.apply_pixels(&mut out, &r, None).unwrap();
        assert_eq!(out, img);

        let partner = Image::filled(32, 32, 0.9);
        let rec = AugRecord { ops_applied: vec![OpRecord { name: "mixup".into(), params: vec![1.0] }], geometric_map: Affine::IDENTITY };
        assert_eq!(replay(&img, &rec, Some(&partner)).unwrap(), img);
        let a = gt(&[(1., 1., 5., 5.)]);
        let b = gt(&[(10., 10., 20., 20.), (2., 3., 4., 5.)]);
        assert_eq!(rec.map_boxes(&a, Some(&b), 32., 32.).unwrap().len(), 3);

        let cfg = StrongAugConfig { mixup: true, ..StrongAugConfig::all_off() };
        assert_eq!(strong(&img, &a, &mut stream(&[1]), &cfg, None).unwrap_err(), AugError::MixupWithoutPartner);
    }

    #[test]
    fn transform_box_fixtures() {
        let b = BBox::new(0., 0., 10., 10.).unwrap();
        assert_eq!(transform_box(&b, &Affine::IDENTITY, 96., 96.).unwrap(), Some(b));
        let t = transform_box(&b, &Affine::translation(5., 0.), 96., 96.).unwrap().unwrap();
        assert_eq!(t, BBox::new(5., 0., 15., 10.).unwrap());

        let sq = BBox::new(38., 38., 58., 58.).unwrap();
        let r = transform_box(&sq, &Affine::rotation_about(48., 48., 90.), 96., 96.).unwrap().unwrap();
        for (u, v) in [(r.x1, sq.x1), (r.y1, sq.y1), (r.x2, sq.x2), (r.y2, sq.y2)] {
            assert!((u - v).abs() < 1e-9);
        }

        let singular = Affine([[1., 2., 0.], [2., 4., 0.]]);
        assert!(matches!(transform_box(&b, &singular, 96., 96.), Err(AugError::SingularMap(_))));
        // Pushed mostly off-image: dropped.
        assert_eq!(transform_box(&b, &Affine::translation(-8., 0.), 96., 96.).unwrap(), None);
    }

    #[test]
    fn color_leaves_boxes_alone_and_replay_is_exact() {
        let img = ramp(48, 48);
        let boxes = gt(&[(3., 4., 20., 30.), (25., 25., 40., 47.)]);
        let color = StrongAugConfig { cutout: false, ..StrongAugConfig::default() };
        let (_, b, _) = strong(&img, &boxes, &mut stream(&[2]), &color, None).unwrap();
        assert_eq!(b, boxes);

        let partner = ramp(48, 48);
        let all = StrongAugConfig { color: true, cutout: true, mixup: true, geo: true, ..StrongAugConfig::default() };
        for s in 0..20 {
            let (out, _, rec) = strong(&img, &boxes, &mut stream(&[3, s]), &all, Some((&partner, &boxes))).unwrap();
            assert_eq!(replay(&img, &rec, Some(&partner)).unwrap(), out);
            assert_eq!(rec.ops_applied.iter().map(|o| o.name.as_str()).collect::<Vec<_>>(), strong_plan(&all));
        }
    }

    #[test]
    fn replay_rejects_bad_records() {
        let img = ramp(16, 16);
        let bad = AugRecord { ops_applied: vec![OpRecord { name: "warp9".into(), params: vec![] }], ..Default::default() };
        assert_eq!(replay(&img, &bad, None).unwrap_err(), AugError::UnknownOp("warp9".into()));
        let bad = AugRecord { ops_applied: vec![OpRecord { name: "rotate".into(), params: vec![] }], ..Default::default() };
        assert!(matches!(replay(&img, &bad, None), Err(AugError::BadParams { .. })));
    }

    #[test]
    fn affine_inverse_and_composition() {
        let m = Affine::rotation_about(10., 20., 13.).after(&Affine::shear_about(5., 7.));
        let id = m.inverse().unwrap().after(&m);
        for (r, e) in id.0.iter().flatten().zip(Affine::IDENTITY.0.iter().flatten()) {
            assert!((r - e).abs() < 1e-12);
        }
        let (x, y) = Affine::translation(1., 2.).after(&Affine::hflip(10.)).apply(3., 4.);
        assert_eq!((x, y), (8., 6.));
    }
}
