//! Tiny two-stage detector with hand-derived reverse-mode gradients.
//!
//! Layout (version 1):
//!
//! ```text
//! input   2 x H x W          intensity + normalized row coordinate
//! conv1   8 filters 3x3 s2 p1, ReLU      -> 8 x H/2 x W/2
//! conv2   16 filters 3x3 s2 p1, ReLU     -> 16 x H/4 x W/4   (backbone)
//! anchor  1x1 conv 16 -> (C+1) logits + 4 deltas, one square anchor per cell
//! roi     4x4 nearest-cell average pool over a query box -> 256
//!         fc 256 -> 64, ReLU; fc 64 -> (C+1) logits + 4 deltas
//! ```
//!
//! The row-coordinate input channel lets the dense head use absolute
//! vertical position, which the synthetic lesion classes are coupled to.

use std::fs;
use std::io;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use serde::{Deserialize, Serialize};

use crate::geometry::{decode_delta, nms, BBox, BoxDelta, GeometryError, Scored};
use crate::losses::{image_loss, smooth_l1_scalar_grad, ClassificationLoss, LossError, LossTerms};
use crate::synthdata::Image;
use crate::targets::{HeadOutputs, ImageTargets, Prediction};

pub const LAYOUT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"SSODPARM";

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("image {width}x{height} not usable: {reason}")]
    ImageSize { width: usize, height: usize, reason: &'static str },
    #[error("query box {0:?} lies less than 25% inside the image")]
    BoxOutside(BBox),
    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: &'static str },
    #[error("parameter vector has length {got}, layout needs {expected}")]
    Length { expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

/// Architecture constants. Together with the layout version they fully
/// determine the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arch {
    pub in_channels: usize,
    pub c1: usize,
    pub c2: usize,
    pub hidden: usize,
    pub pool: usize,
    pub num_classes: usize,
    pub anchor_size: f64,
}

impl Arch {
    pub fn new(num_classes: usize) -> Self {
        Self { in_channels: 2 + CONTEXT_WINDOWS.len(), c1: 8, c2: 16, hidden: 64, pool: 4, num_classes, anchor_size: 24.0 }
    }

    /// Outputs per anchor or query: C+1 logits then 4 deltas.
    pub fn head_outputs(&self) -> usize {
        self.num_classes + 1 + 4
    }

    pub fn roi_features(&self) -> usize {
        self.c2 * self.pool * self.pool
    }

    pub fn layout(&self) -> Layout {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let k = self.head_outputs();
        Layout {
            conv1_w: take(self.c1 * self.in_channels * 9),
            conv1_b: take(self.c1),
            conv2_w: take(self.c2 * self.c1 * 9),
            conv2_b: take(self.c2),
            head_w: take(k * self.c2),
            head_b: take(k),
            fc1_w: take(self.hidden * self.roi_features()),
            fc1_b: take(self.hidden),
            fc2_w: take(k * self.hidden),
            fc2_b: take(k),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().fc2_b.end
    }

    pub fn stride(&self) -> usize {
        4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub conv1_w: Range<usize>,
    pub conv1_b: Range<usize>,
    pub conv2_w: Range<usize>,
    pub conv2_b: Range<usize>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
    pub fc1_w: Range<usize>,
    pub fc1_b: Range<usize>,
    pub fc2_w: Range<usize>,
    pub fc2_b: Range<usize>,
}

impl Layout {
    pub fn blocks(&self) -> [(&'static str, Range<usize>); 10] {
        [
            ("conv1.w", self.conv1_w.clone()),
            ("conv1.b", self.conv1_b.clone()),
            ("conv2.w", self.conv2_w.clone()),
            ("conv2.b", self.conv2_b.clone()),
            ("anchor_head.w", self.head_w.clone()),
            ("anchor_head.b", self.head_b.clone()),
            ("roi_fc1.w", self.fc1_w.clone()),
            ("roi_fc1.b", self.fc1_b.clone()),
            ("roi_fc2.w", self.fc2_w.clone()),
            ("roi_fc2.b", self.fc2_b.clone()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Arch) -> Self {
        Self { arch, values: vec![0.0; arch.num_params()] }
    }

    /// He-normal backbone and hidden layer, small-normal output layers, zero biases.
    pub fn init(arch: Arch, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(arch);
        let l = arch.layout();
        let mut fill = |r: Range<usize>, std: f64, vals: &mut Vec<f64>| {
            let n = Normal::new(0.0, std).expect("positive std");
            for v in &mut vals[r] {
                *v = n.sample(rng);
            }
        };
        fill(l.conv1_w, (2.0 / (arch.in_channels * 9) as f64).sqrt(), &mut p.values);
        fill(l.conv2_w, (2.0 / (arch.c1 * 9) as f64).sqrt(), &mut p.values);
        fill(l.head_w, 0.01, &mut p.values);
        fill(l.fc1_w, (2.0 / arch.roi_features() as f64).sqrt(), &mut p.values);
        fill(l.fc2_w, 0.01, &mut p.values);
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check(&self) -> Result<(), DetectorError> {
        let expected = self.arch.num_params();
        if self.values.len() != expected {
            return Err(DetectorError::Length { expected, got: self.values.len() });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let a = &self.arch;
        let mut out = Vec::with_capacity(64 + 8 * self.values.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&LAYOUT_VERSION.to_le_bytes());
        for v in [a.in_channels, a.c1, a.c2, a.hidden, a.pool, a.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&a.anchor_size.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8], String> {
            let s = bytes.get(at..at + n).ok_or("truncated checkpoint")?;
            at += n;
            Ok(s)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != LAYOUT_VERSION {
            return Err(format!("unsupported layout version {version}"));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = u32_at(take(4)?) as usize;
        }
        let anchor_size = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let arch = Arch {
            in_channels: dims[0],
            c1: dims[1],
            c2: dims[2],
            hidden: dims[3],
            pool: dims[4],
            num_classes: dims[5],
            anchor_size,
        };
        if arch.num_params() != n {
            return Err(format!("header declares {n} values but architecture needs {}", arch.num_params()));
        }
        let body = take(8 * n)?;
        let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if at != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(Self { arch, values })
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectorError> {
        fs::write(path, self.to_bytes()).map_err(|source| DetectorError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let bytes = fs::read(path).map_err(|source| DetectorError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes).map_err(|msg| DetectorError::Checkpoint { path: path.display().to_string(), msg })
    }
}

/// One dense prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_probs: Vec<f64>,
    pub foreground_score: f64,
    pub anchor: usize,
}

impl Detection {
    /// Most likely non-background class (ties to the lower index).
    pub fn class_id(&self) -> usize {
        argmax_foreground(&self.class_probs)
    }
}

impl Scored for Detection {
    fn bbox(&self) -> &BBox {
        &self.bbox
    }
    fn class_id(&self) -> usize {
        Detection::class_id(self)
    }
    fn score(&self) -> f64 {
        self.foreground_score
    }
}

pub fn argmax_foreground(probs: &[f64]) -> usize {
    let mut best = 1;
    for c in 2..probs.len() {
        if probs[c] > probs[best] {
            best = c;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Square anchors, one per backbone cell, row-major.
pub fn anchors(arch: &Arch, width: usize, height: usize) -> Vec<BBox> {
    let s = arch.stride();
    let (fw, fh) = (width / s, height / s);
    let mut out = Vec::with_capacity(fw * fh);
    for i in 0..fh {
        for j in 0..fw {
            let cx = (j * s) as f64 + 0.5 * s as f64;
            let cy = (i * s) as f64 + 0.5 * s as f64;
            out.push(BBox::from_center(cx, cy, arch.anchor_size, arch.anchor_size).expect("positive anchor size"));
        }
    }
    out
}

/// Backbone activations for one image. Pre-activations are kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct Features {
    pub width: usize,
    pub height: usize,
    input: Vec<f64>,
    f1_pre: Vec<f64>,
    f1: Vec<f64>,
    f2_pre: Vec<f64>,
    /// 16 x fh x fw backbone output.
    pub f2: Vec<f64>,
    pub fw: usize,
    pub fh: usize,
}

fn check_finite(v: &[f64], layer: &'static str) -> Result<(), DetectorError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DetectorError::NonFinite { layer })
    }
}

fn check_image(img: &Image) -> Result<(), DetectorError> {
    if img.width == 0 || img.height == 0 || img.width % 4 != 0 || img.height % 4 != 0 {
        return Err(DetectorError::ImageSize { width: img.width, height: img.height, reason: "dimensions must be positive multiples of 4" });
    }
    if img.pixels.len() != img.width * img.height {
        return Err(DetectorError::ImageSize { width: img.width, height: img.height, reason: "pixel buffer length mismatch" });
    }
    Ok(())
}

/// 3x3, stride 2, zero padding 1.
fn conv3x3_s2(input: &[f64], cin: usize, h: usize, w: usize, weights: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let (ph, pw) = (h + 2, w + 2);
    let mut padded = vec![0.0; cin * ph * pw];
    for c in 0..cin {
        for y in 0..h {
            let src = &input[(c * h + y) * w..(c * h + y + 1) * w];
            padded[(c * ph + y + 1) * pw + 1..(c * ph + y + 1) * pw + 1 + w].copy_from_slice(src);
        }
    }
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(bias[o]);
        for c in 0..cin {
            let k = &weights[(o * cin + c) * 9..(o * cin + c + 1) * 9];
            let base = c * ph * pw;
            for i in 0..oh {
                let row = &mut plane[i * ow..(i + 1) * ow];
                let r0 = base + (2 * i) * pw;
                let r1 = r0 + pw;
                let r2 = r1 + pw;
                for (j, acc) in row.iter_mut().enumerate() {
                    let x = 2 * j;
                    *acc += k[0] * padded[r0 + x]
                        + k[1] * padded[r0 + x + 1]
                        + k[2] * padded[r0 + x + 2]
                        + k[3] * padded[r1 + x]
                        + k[4] * padded[r1 + x + 1]
                        + k[5] * padded[r1 + x + 2]
                        + k[6] * padded[r2 + x]
                        + k[7] * padded[r2 + x + 1]
                        + k[8] * padded[r2 + x + 2];
                }
            }
        }
    }
    out
}

/// Accumulate weight/bias gradients of a 3x3 s2 p1 conv and, when asked,
/// the input gradient. Output positions with an all-zero gradient are skipped.
#[allow(clippy::too_many_arguments)]
fn conv3x3_s2_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    cout: usize,
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let (oh, ow) = (h / 2, w / 2);
    for i in 0..oh {
        for j in 0..ow {
            let pos = i * ow + j;
            if (0..cout).all(|o| dout[o * oh * ow + pos] == 0.0) {
                continue;
            }
            for o in 0..cout {
                let g = dout[o * oh * ow + pos];
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                for c in 0..cin {
                    let kbase = (o * cin + c) * 9;
                    for ky in 0..3 {
                        let y = (2 * i + ky) as isize - 1;
                        if y < 0 || y as usize >= h {
                            continue;
                        }
                        for kx in 0..3 {
                            let x = (2 * j + kx) as isize - 1;
                            if x < 0 || x as usize >= w {
                                continue;
                            }
                            let idx = (c * h + y as usize) * w + x as usize;
                            dw[kbase + ky * 3 + kx] += g * input[idx];
                            if let Some(di) = dinput.as_deref_mut() {
                                di[idx] += g * weights[kbase + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Local-mean window sizes of the context input planes.
pub const CONTEXT_WINDOWS: [usize; 2] = [9, 21];

/// Mean of `img` over a `k`x`k` window centered at each pixel, restricted to
/// the image.
fn box_mean(img: &Image, k: usize) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut integral = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += img.pixels[y * w + x];
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let r = k / 2;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let sum = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0] + integral[y0 * (w + 1) + x0];
            out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out
}

/// Network input: intensity, row coordinate in [-1, 1], then local means
/// over the context windows.
pub fn input_planes(img: &Image, in_channels: usize) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut input = Vec::with_capacity(in_channels * w * h);
    input.extend_from_slice(&img.pixels);
    for y in 0..h {
        let coord = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
        input.extend(std::iter::repeat_n(coord, w));
    }
    for &k in CONTEXT_WINDOWS.iter().take(in_channels.saturating_sub(2)) {
        input.extend(box_mean(img, k));
    }
    input
}

pub fn features(params: &ModelParams, img: &Image) -> Result<Features, DetectorError> {
    params.check()?;
    check_image(img)?;
    let a = &params.arch;
    let l = a.layout();
    let (w, h) = (img.width, img.height);
    let input = input_planes(img, a.in_channels);
    let v = &params.values;
    let f1_pre = conv3x3_s2(&input, a.in_channels, h, w, &v[l.conv1_w], &v[l.conv1_b], a.c1);
    check_finite(&f1_pre, "conv1")?;
    let f1: Vec<f64> = f1_pre.iter().map(|x| x.max(0.0)).collect();
    let f2_pre = conv3x3_s2(&f1, a.c1, h / 2, w / 2, &v[l.conv2_w], &v[l.conv2_b], a.c2);
    check_finite(&f2_pre, "conv2")?;
    let f2: Vec<f64> = f2_pre.iter().map(|x| x.max(0.0)).collect();
    Ok(Features { width: w, height: h, input, f1_pre, f1, f2_pre, f2, fw: w / 4, fh: h / 4 })
}

fn anchor_head_raw(params: &ModelParams, feats: &Features) -> Result<Vec<Vec<f64>>, DetectorError> {
    let a = &params.arch;
    let l = a.layout();
    let k = a.head_outputs();
    let hw = &params.values[l.head_w];
    let hb = &params.values[l.head_b];
    let cells = feats.fw * feats.fh;
    let mut out = Vec::with_capacity(cells);
    for cell in 0..cells {
        let mut o = hb.to_vec();
        for (c, _) in (0..a.c2).enumerate() {
            let f = feats.f2[c * cells + cell];
            if f != 0.0 {
                for (q, oq) in o.iter_mut().enumerate() {
                    *oq += hw[q * a.c2 + c] * f;
                }
            }
        }
        out.push(o);
    }
    let flat: Vec<f64> = out.iter().flatten().copied().collect();
    check_finite(&flat, "anchor_head")?;
    debug_assert_eq!(out.first().map(|o| o.len()).unwrap_or(k), k);
    Ok(out)
}

fn split_head(raw: &[f64], num_classes: usize) -> Prediction {
    let probs = softmax(&raw[..num_classes + 1]);
    let d = &raw[num_classes + 1..];
    Prediction { probs, delta: BoxDelta::new(d[0], d[1], d[2], d[3]) }
}

/// Feature cells averaged by each of the pool x pool grid cells of a query.
#[derive(Debug, Clone)]
struct PoolPlan {
    cells: Vec<(Range<usize>, Range<usize>)>,
}

fn cover(lo: f64, hi: f64, n: usize) -> Range<usize> {
    // Cells whose centers fall in [lo, hi), else the nearest one.
    let start = (lo - 0.5).ceil().max(0.0) as usize;
    let end = ((hi - 0.5).ceil().max(0.0) as usize).min(n);
    if start < end {
        start..end
    } else {
        let mid = (0.5 * (lo + hi)).floor().clamp(0.0, (n - 1) as f64) as usize;
        mid..mid + 1
    }
}

fn pool_plan(arch: &Arch, feats: &Features, b: &BBox) -> PoolPlan {
    let s = arch.stride() as f64;
    let p = arch.pool;
    let (bw, bh) = (b.width() / p as f64, b.height() / p as f64);
    let mut cells = Vec::with_capacity(p * p);
    for gy in 0..p {
        let rows = cover((b.y1 + gy as f64 * bh) / s, (b.y1 + (gy + 1) as f64 * bh) / s, feats.fh);
        for gx in 0..p {
            let cols = cover((b.x1 + gx as f64 * bw) / s, (b.x1 + (gx + 1) as f64 * bw) / s, feats.fw);
            cells.push((rows.clone(), cols));
        }
    }
    PoolPlan { cells }
}

fn roi_pool(arch: &Arch, feats: &Features, plan: &PoolPlan) -> Vec<f64> {
    let pp = arch.pool * arch.pool;
    let plane = feats.fw * feats.fh;
    let mut out = vec![0.0; arch.c2 * pp];
    for (g, (rows, cols)) in plan.cells.iter().enumerate() {
        let n = (rows.len() * cols.len()) as f64;
        for c in 0..arch.c2 {
            let mut acc = 0.0;
            for r in rows.clone() {
                for q in cols.clone() {
                    acc += feats.f2[c * plane + r * feats.fw + q];
                }
            }
            out[c * pp + g] = acc / n;
        }
    }
    out
}

struct RoiForward {
    plan: PoolPlan,
    pooled: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    raw: Vec<f64>,
}

fn roi_forward(params: &ModelParams, feats: &Features, b: &BBox) -> Result<RoiForward, DetectorError> {
    b.validate()?;
    let (w, h) = (feats.width as f64, feats.height as f64);
    let inside = b.clip(w, h).map(|c| c.area()).unwrap_or(0.0);
    if inside < 0.25 * b.area() {
        return Err(DetectorError::BoxOutside(*b));
    }
    let a = &params.arch;
    let l = a.layout();
    let v = &params.values;
    let plan = pool_plan(a, feats, b);
    let pooled = roi_pool(a, feats, &plan);
    let nf = a.roi_features();
    let w1 = &v[l.fc1_w];
    let mut hidden_pre = v[l.fc1_b].to_vec();
    for (m, hm) in hidden_pre.iter_mut().enumerate() {
        let row = &w1[m * nf..(m + 1) * nf];
        *hm += row.iter().zip(&pooled).map(|(x, y)| x * y).sum::<f64>();
    }
    check_finite(&hidden_pre, "roi_fc1")?;
    let hidden: Vec<f64> = hidden_pre.iter().map(|x| x.max(0.0)).collect();
    let k = a.head_outputs();
    let w2 = &v[l.fc2_w];
    let mut raw = v[l.fc2_b].to_vec();
    for (q, rq) in raw.iter_mut().enumerate().take(k) {
        let row = &w2[q * a.hidden..(q + 1) * a.hidden];
        *rq += row.iter().zip(&hidden).map(|(x, y)| x * y).sum::<f64>();
    }
    check_finite(&raw, "roi_fc2")?;
    Ok(RoiForward { plan, pooled, hidden_pre, hidden, raw })
}

/// Dense detections, one per anchor, boxes clipped to the image. Anchors
/// whose decoded box collapses after clipping are skipped.
pub fn forward(params: &ModelParams, img: &Image) -> Result<Vec<Detection>, DetectorError> {
    let feats = features(params, img)?;
    detections_from_features(params, &feats)
}

pub fn detections_from_features(params: &ModelParams, feats: &Features) -> Result<Vec<Detection>, DetectorError> {
    let raw = anchor_head_raw(params, feats)?;
    let anchor_boxes = anchors(&params.arch, feats.width, feats.height);
    let dims = (feats.width as f64, feats.height as f64);
    let mut out = Vec::with_capacity(raw.len());
    for (i, (r, anchor)) in raw.iter().zip(&anchor_boxes).enumerate() {
        let pred = split_head(r, params.arch.num_classes);
        let bbox = match decode_delta(&pred.delta, anchor, Some(dims)) {
            Ok(b) => b,
            Err(GeometryError::Collapsed) => continue,
            Err(e) => return Err(e.into()),
        };
        let fg = pred.probs[1..].iter().copied().fold(0.0, f64::max);
        out.push(Detection { bbox, class_probs: pred.probs, foreground_score: fg, anchor: i });
    }
    Ok(out)
}

/// Candidate post-processing shared by evaluation and pseudo-labelling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostProcess {
    /// Dense predictions at or below this foreground score are dropped before NMS.
    pub score_floor: f64,
    pub pre_nms_top_k: usize,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for PostProcess {
    fn default() -> Self {
        Self { score_floor: 0.05, pre_nms_top_k: 200, nms_iou: 0.5, max_detections: 50 }
    }
}

impl PostProcess {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.score_floor) {
            return Err("postprocess.score_floor: must lie in [0, 1)".into());
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err("postprocess.nms_iou: must lie in (0, 1]".into());
        }
        if self.pre_nms_top_k == 0 || self.max_detections == 0 {
            return Err("postprocess: pre_nms_top_k and max_detections must be positive".into());
        }
        Ok(())
    }

    /// Floor, top-k by score (stable), class-wise NMS, cap.
    pub fn apply(&self, mut dets: Vec<Detection>) -> Vec<Detection> {
        dets.retain(|d| d.foreground_score > self.score_floor);
        dets.sort_by(|a, b| b.foreground_score.total_cmp(&a.foreground_score));
        dets.truncate(self.pre_nms_top_k);
        let mut kept = nms(&dets, self.nms_iou);
        kept.truncate(self.max_detections);
        kept
    }
}

/// Post-processed detections for one image.
pub fn detect(params: &ModelParams, img: &Image, post: &PostProcess) -> Result<Vec<Detection>, DetectorError> {
    Ok(post.apply(forward(params, img)?))
}

/// Run the RoI head on `b`: refined box (clipped) and class probabilities.
pub fn refine(params: &ModelParams, img: &Image, b: &BBox) -> Result<(BBox, Vec<f64>), DetectorError> {
    let feats = features(params, img)?;
    refine_with_features(params, &feats, b)
}

pub fn refine_with_features(params: &ModelParams, feats: &Features, b: &BBox) -> Result<(BBox, Vec<f64>), DetectorError> {
    let fw = roi_forward(params, feats, b)?;
    let pred = split_head(&fw.raw, params.arch.num_classes);
    let refined = decode_delta(&pred.delta, b, Some((feats.width as f64, feats.height as f64)))?;
    Ok((refined, pred.probs))
}

/// Head outputs for every anchor and for each RoI query in `targets`.
pub fn predict(params: &ModelParams, img: &Image, targets: &ImageTargets) -> Result<HeadOutputs, DetectorError> {
    let feats = features(params, img)?;
    let nc = params.arch.num_classes;
    let anchors = anchor_head_raw(params, &feats)?.iter().map(|r| split_head(r, nc)).collect();
    let mut rois = Vec::with_capacity(targets.rois.len());
    for t in &targets.rois {
        rois.push(split_head(&roi_forward(params, &feats, &t.query)?.raw, nc));
    }
    Ok(HeadOutputs { anchors, rois })
}

/// One weighted training view.
#[derive(Clone)]
pub struct TrainExample {
    pub image: Image,
    pub targets: ImageTargets,
    pub weight: f64,
    pub cls_loss: std::sync::Arc<dyn ClassificationLoss>,
    pub use_reg: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GradConfig {
    pub lambda_r: f64,
    pub focal_gamma: f64,
}

/// Gradient of the loss of one prediction slot with respect to its raw
/// head outputs (logits then deltas).
fn slot_grad(
    pred: &Prediction,
    cls: Option<crate::targets::ClsTarget>,
    reg: Option<BoxDelta>,
    cls_scale: f64,
    reg_scale: f64,
    loss: &dyn ClassificationLoss,
    gamma: f64,
    use_reg: bool,
    out: &mut [f64],
) {
    let nc1 = pred.probs.len();
    if let Some(c) = cls {
        let p_t = pred.probs[c.class];
        let (_, slope) = loss.value_and_slope(p_t, c.weight, gamma);
        let g = cls_scale * slope * p_t;
        if g != 0.0 {
            for (j, oj) in out.iter_mut().enumerate().take(nc1) {
                let delta = if j == c.class { 1.0 } else { 0.0 };
                *oj += g * (delta - pred.probs[j]);
            }
        }
    }
    if let (true, Some(t)) = (use_reg, reg) {
        let p = pred.delta.to_array();
        let t = t.to_array();
        for k in 0..4 {
            out[nc1 + k] += reg_scale * smooth_l1_scalar_grad(p[k] - t[k]);
        }
    }
}

/// Weighted sum of per-view losses and its exact gradient.
pub fn loss_and_grad(params: &ModelParams, batch: &[TrainExample], cfg: &GradConfig) -> Result<(f64, Vec<f64>), DetectorError> {
    let (loss, grad, _) = loss_and_grad_terms(params, batch, cfg)?;
    Ok((loss, grad))
}

/// As [`loss_and_grad`], also returning the unweighted loss terms per view.
pub fn loss_and_grad_terms(
    params: &ModelParams,
    batch: &[TrainExample],
    cfg: &GradConfig,
) -> Result<(f64, Vec<f64>, Vec<LossTerms>), DetectorError> {
    params.check()?;
    let a = params.arch;
    let l = a.layout();
    let v = &params.values;
    let k = a.head_outputs();
    let nc = a.num_classes;
    let mut grad = vec![0.0; v.len()];
    let mut total = 0.0;
    let mut terms = Vec::with_capacity(batch.len());

    for ex in batch {
        if ex.targets.is_empty() {
            terms.push(LossTerms::default());
            continue;
        }
        let feats = features(params, &ex.image)?;
        let cells = feats.fw * feats.fh;
        let raw = anchor_head_raw(params, &feats)?;
        let anchor_preds: Vec<Prediction> = raw.iter().map(|r| split_head(r, nc)).collect();
        let mut roi_fw = Vec::with_capacity(ex.targets.rois.len());
        for t in &ex.targets.rois {
            roi_fw.push(roi_forward(params, &feats, &t.query)?);
        }
        let outputs = HeadOutputs {
            anchors: anchor_preds,
            rois: roi_fw.iter().map(|r| split_head(&r.raw, nc)).collect(),
        };
        let t = image_loss(&outputs, &ex.targets, ex.cls_loss.as_ref(), cfg.focal_gamma, ex.use_reg)?;
        terms.push(t);
        total += ex.weight * t.total(cfg.lambda_r);
        if ex.weight == 0.0 {
            continue;
        }

        let count = |it: &mut dyn Iterator<Item = (bool, bool)>| it.fold((0usize, 0usize), |(c, r), (hc, hr)| (c + hc as usize, r + hr as usize));
        let (a_cls, a_reg) = count(&mut ex.targets.anchors.iter().map(|t| (t.cls.is_some(), t.reg.is_some() && ex.use_reg)));
        let (r_cls, r_reg) = count(&mut ex.targets.rois.iter().map(|t| (t.cls.is_some(), t.reg.is_some() && ex.use_reg)));
        let scale = |n: usize| if n > 0 { ex.weight / n as f64 } else { 0.0 };

        // Anchor head.
        let mut d_anchor = vec![0.0; cells * k];
        for t in &ex.targets.anchors {
            slot_grad(
                &outputs.anchors[t.anchor],
                t.cls,
                t.reg,
                scale(a_cls),
                scale(a_reg) * cfg.lambda_r,
                ex.cls_loss.as_ref(),
                cfg.focal_gamma,
                ex.use_reg,
                &mut d_anchor[t.anchor * k..(t.anchor + 1) * k],
            );
        }
        let mut df2 = vec![0.0; a.c2 * cells];
        {
            let hw = &v[l.head_w.clone()];
            for cell in 0..cells {
                let g = &d_anchor[cell * k..(cell + 1) * k];
                if g.iter().all(|x| *x == 0.0) {
                    continue;
                }
                for (q, gq) in g.iter().enumerate() {
                    grad[l.head_b.start + q] += gq;
                    for c in 0..a.c2 {
                        let f = feats.f2[c * cells + cell];
                        grad[l.head_w.start + q * a.c2 + c] += gq * f;
                        df2[c * cells + cell] += hw[q * a.c2 + c] * gq;
                    }
                }
            }
        }

        // RoI head.
        let nf = a.roi_features();
        let pp = a.pool * a.pool;
        for (t, (rf, pred)) in ex.targets.rois.iter().zip(roi_fw.iter().zip(&outputs.rois)) {
            let mut g = vec![0.0; k];
            slot_grad(pred, t.cls, t.reg, scale(r_cls), scale(r_reg) * cfg.lambda_r, ex.cls_loss.as_ref(), cfg.focal_gamma, ex.use_reg, &mut g);
            if g.iter().all(|x| *x == 0.0) {
                continue;
            }
            let mut dh = vec![0.0; a.hidden];
            for (q, gq) in g.iter().enumerate() {
                grad[l.fc2_b.start + q] += gq;
                for m in 0..a.hidden {
                    grad[l.fc2_w.start + q * a.hidden + m] += gq * rf.hidden[m];
                    dh[m] += v[l.fc2_w.start + q * a.hidden + m] * gq;
                }
            }
            let mut dpooled = vec![0.0; nf];
            for m in 0..a.hidden {
                if rf.hidden_pre[m] <= 0.0 || dh[m] == 0.0 {
                    continue;
                }
                let gm = dh[m];
                grad[l.fc1_b.start + m] += gm;
                let wrow = l.fc1_w.start + m * nf;
                for n in 0..nf {
                    grad[wrow + n] += gm * rf.pooled[n];
                    dpooled[n] += v[wrow + n] * gm;
                }
            }
            for (gi, (rows, cols)) in rf.plan.cells.iter().enumerate() {
                let inv = 1.0 / (rows.len() * cols.len()) as f64;
                for c in 0..a.c2 {
                    let gp = dpooled[c * pp + gi] * inv;
                    if gp == 0.0 {
                        continue;
                    }
                    for r in rows.clone() {
                        for q in cols.clone() {
                            df2[c * cells + r * feats.fw + q] += gp;
                        }
                    }
                }
            }
        }

        // Backbone.
        for (d, pre) in df2.iter_mut().zip(&feats.f2_pre) {
            if *pre <= 0.0 {
                *d = 0.0;
            }
        }
        let (h1, w1) = (feats.height / 2, feats.width / 2);
        let mut df1 = vec![0.0; a.c1 * h1 * w1];
        {
            let (gw, gb) = split_two(&mut grad, l.conv2_w.clone(), l.conv2_b.clone());
            conv3x3_s2_backward(&feats.f1, a.c1, h1, w1, &v[l.conv2_w.clone()], a.c2, &df2, gw, gb, Some(&mut df1));
        }
        for (d, pre) in df1.iter_mut().zip(&feats.f1_pre) {
            if *pre <= 0.0 {
                *d = 0.0;
            }
        }
        let (gw, gb) = split_two(&mut grad, l.conv1_w.clone(), l.conv1_b.clone());
        conv3x3_s2_backward(&feats.input, a.in_channels, feats.height, feats.width, &v[l.conv1_w.clone()], a.c1, &df1, gw, gb, None);
    }
    if !total.is_finite() {
        return Err(DetectorError::NonFinite { layer: "loss" });
    }
    check_finite(&grad, "gradient")?;
    Ok((total, grad, terms))
}

/// Two disjoint mutable sub-slices (`first` must precede `second`).
fn split_two(v: &mut [f64], first: Range<usize>, second: Range<usize>) -> (&mut [f64], &mut [f64]) {
    debug_assert!(first.end <= second.start);
    let (lo, hi) = v.split_at_mut(second.start);
    (&mut lo[first], &mut hi[..second.end - second.start])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::classification_losses;
    use crate::rng::stream;
    use crate::targets::{AnchorTarget, ClsTarget, RoiTarget};

    fn gray(w: usize, h: usize) -> Image {
        Image::filled(w, h, 0.5)
    }

    #[test]
    fn param_count_is_about_twenty_thousand() {
        let n = Arch::new(4).num_params();
        assert!((15_000..25_000).contains(&n), "{n}");
    }

    #[test]
    fn probabilities_normalized() {
        let p = ModelParams::init(Arch::new(4), &mut stream(&[1]));
        let mut img = gray(32, 32);
        for (i, v) in img.pixels.iter_mut().enumerate() {
            *v = (i % 7) as f64 / 7.0;
        }
        for d in forward(&p, &img).unwrap() {
            assert!((d.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(d.class_probs.iter().all(|&x| x >= 0.0));
            assert_eq!(d.foreground_score, d.class_probs[1..].iter().copied().fold(0.0, f64::max));
        }
        let (_, probs) = refine(&p, &img, &BBox::new(4., 4., 20., 20.).unwrap()).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_params_are_spatially_symmetric() {
        let p = ModelParams::zeros(Arch::new(4));
        let dets = forward(&p, &gray(96, 96)).unwrap();
        assert_eq!(dets.len(), 24 * 24);
        assert!(dets.iter().all(|d| d.class_probs == dets[0].class_probs));
        assert!((dets[0].class_probs[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn forward_and_refine_are_pure() {
        let p = ModelParams::init(Arch::new(3), &mut stream(&[2]));
        let img = gray(48, 48);
        assert_eq!(forward(&p, &img).unwrap(), forward(&p, &img).unwrap());
        let b = BBox::new(5., 6., 30., 28.).unwrap();
        assert_eq!(refine(&p, &img, &b).unwrap(), refine(&p, &img, &b).unwrap());
    }

    #[test]
    fn zero_roi_deltas_keep_the_box() {
        let mut p = ModelParams::init(Arch::new(4), &mut stream(&[3]));
        let l = p.arch.layout();
        let k = p.arch.head_outputs();
        let nc1 = p.arch.num_classes + 1;
        for q in nc1..k {
            for m in 0..p.arch.hidden {
                p.values[l.fc2_w.start + q * p.arch.hidden + m] = 0.0;
            }
            p.values[l.fc2_b.start + q] = 0.0;
        }
        let b = BBox::new(10., 12., 40., 33.).unwrap();
        let (r, _) = refine(&p, &gray(64, 64), &b).unwrap();
        assert_eq!(r, b);
    }

    #[test]
    fn size_and_box_errors() {
        let p = ModelParams::zeros(Arch::new(4));
        assert!(matches!(forward(&p, &gray(30, 32)), Err(DetectorError::ImageSize { .. })));
        let far = BBox::new(200., 200., 220., 220.).unwrap();
        assert!(matches!(refine(&p, &gray(32, 32), &far), Err(DetectorError::BoxOutside(_))));
        let bad = ModelParams { arch: Arch::new(4), values: vec![0.0; 3] };
        assert!(matches!(forward(&bad, &gray(32, 32)), Err(DetectorError::Length { .. })));
    }

    #[test]
    fn non_finite_reports_layer() {
        let mut p = ModelParams::zeros(Arch::new(4));
        let l = p.arch.layout();
        p.values[l.conv1_b.start] = f64::NAN;
        match forward(&p, &gray(32, 32)) {
            Err(DetectorError::NonFinite { layer }) => assert_eq!(layer, "conv1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_batch_is_zero() {
        let p = ModelParams::init(Arch::new(4), &mut stream(&[4]));
        let cfg = GradConfig { lambda_r: 1.0, focal_gamma: 2.0 };
        let (l, g) = loss_and_grad(&p, &[], &cfg).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        assert_eq!(g.len(), p.len());
    }

    fn example(seed: u64, weight: f64, loss: &str) -> TrainExample {
        let mut rng = stream(&[seed]);
        let mut img = gray(24, 24);
        for v in &mut img.pixels {
            *v = rng.random::<f64>();
        }
        let targets = ImageTargets {
            anchors: vec![
                AnchorTarget { anchor: 7, cls: Some(ClsTarget::new(2)), reg: Some(BoxDelta::new(0.1, -0.2, 0.3, 1.5)) },
                AnchorTarget { anchor: 20, cls: Some(ClsTarget { class: 0, weight: 0.4 }), reg: None },
            ],
            rois: vec![RoiTarget {
                query: BBox::new(2.0, 3.0, 18.0, 20.0).unwrap(),
                cls: Some(ClsTarget::new(1)),
                reg: Some(BoxDelta::new(-0.1, 0.05, 0.2, -0.1)),
            }],
        };
        TrainExample { image: img, targets, weight, cls_loss: classification_losses().get(loss).unwrap(), use_reg: true }
    }

    #[test]
    fn loss_matches_composition_and_scales_linearly() {
        let p = ModelParams::init(Arch::new(4), &mut stream(&[5]));
        let cfg = GradConfig { lambda_r: 1.0, focal_gamma: 2.0 };
        let ex = example(9, 1.0, "focal");
        let (l1, g1) = loss_and_grad(&p, &[ex.clone()], &cfg).unwrap();
        let out = predict(&p, &ex.image, &ex.targets).unwrap();
        let t = image_loss(&out, &ex.targets, ex.cls_loss.as_ref(), 2.0, true).unwrap();
        assert!((l1 - t.total(1.0)).abs() < 1e-9);

        let ex2 = TrainExample { weight: 2.0, ..ex };
        let (l2, g2) = loss_and_grad(&p, &[ex2], &cfg).unwrap();
        assert_eq!(l2, 2.0 * l1);
        assert!(g1.iter().zip(&g2).all(|(a, b)| *b == 2.0 * a));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = ModelParams::init(Arch::new(5), &mut stream(&[6]));
        let back = ModelParams::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(back.arch, p.arch);
        assert!(back.values.iter().zip(&p.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        let mut bytes = p.to_bytes();
        bytes[8] = 9;
        assert!(ModelParams::from_bytes(&bytes).is_err());
        assert!(ModelParams::from_bytes(&p.to_bytes()[..100]).is_err());
    }
}
