//! Deterministic synthetic "layered retina" scenes.
//!
//! Each scene is a grayscale image made of tilted horizontal bands with a
//! smooth vertical gradient, plus one or more Gaussian lesions. Lesion classes
//! differ in appearance (bright blob, dark blob, horizontal streak, vertical
//! notch; assigned round-robin over the classes). With position coupling on,
//! every class draws its vertical center from its own horizontal stratum.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::rng::mix_seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed dataset file {path}: {msg}")]
    Format { path: String, msg: String },
}

fn io_err(path: &Path, source: io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len().max(1) as f64
    }

    pub fn clamp_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    pub fn dims(&self) -> (f64, f64) {
        (self.width as f64, self.height as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<GtBox>,
}

impl GroundTruth {
    pub fn new(boxes: Vec<GtBox>) -> Self {
        Self { boxes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Appearance {
    BrightBlob,
    DarkBlob,
    HorizontalStreak,
    VerticalNotch,
}

impl Appearance {
    pub fn for_class(class_id: usize) -> Self {
        match (class_id - 1) % 4 {
            0 => Appearance::BrightBlob,
            1 => Appearance::DarkBlob,
            2 => Appearance::HorizontalStreak,
            _ => Appearance::VerticalNotch,
        }
    }

    /// Width and height ranges in pixels at the 96 px reference scale.
    fn size_ranges(self) -> ([f64; 2], [f64; 2]) {
        match self {
            Appearance::BrightBlob | Appearance::DarkBlob => ([22.0, 30.0], [22.0, 30.0]),
            Appearance::HorizontalStreak => ([36.0, 44.0], [13.0, 15.0]),
            Appearance::VerticalNotch => ([13.0, 15.0], [36.0, 44.0]),
        }
    }

    fn amplitude(self) -> f64 {
        match self {
            Appearance::BrightBlob => 0.5,
            Appearance::DarkBlob => -0.3,
            Appearance::HorizontalStreak => 0.4,
            Appearance::VerticalNotch => -0.3,
        }
    }
}

const REFERENCE_SIZE: f64 = 96.0;
/// Lesion contrast is the class amplitude times a factor in [MIN_STRENGTH, 1].
const MIN_STRENGTH: f64 = 0.4;
const CLUTTER_COUNT: [usize; 2] = [2, 6];
/// Clutter footprint diameter in pixels at the reference scale.
const CLUTTER_SIZE: [f64; 2] = [8.0, 14.0];
const CLUTTER_AMPLITUDE: [f64; 2] = [0.1, 0.3];
const MAX_PLACEMENT_TRIES: usize = 50;
const MAX_SUBSEEDS: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub lesions_min: usize,
    pub lesions_max: usize,
    pub position_coupling: bool,
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { width: 96, height: 96, num_classes: 4, lesions_min: 1, lesions_max: 3, position_coupling: true, noise_sigma: 0.02 }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.width < 32 || self.height < 32 {
            return Err(DataError::Config(format!("image size {}x{} below 32x32", self.width, self.height)));
        }
        if !(2..=9).contains(&self.num_classes) {
            return Err(DataError::Config(format!("num_classes {} outside [2, 9]", self.num_classes)));
        }
        if self.lesions_min < 1 || self.lesions_min > self.lesions_max {
            return Err(DataError::Config(format!("lesion range [{}, {}] invalid", self.lesions_min, self.lesions_max)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DataError::Config(format!("noise_sigma {} invalid", self.noise_sigma)));
        }
        for class_id in 1..=self.num_classes {
            let (_, hr) = self.size_range(class_id);
            let (lo, hi) = self.center_range(class_id, hr[1]);
            if lo > hi {
                return Err(DataError::Config(format!("class {class_id} stratum cannot hold its lesions")));
            }
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.width.min(self.height) as f64 / REFERENCE_SIZE
    }

    /// Lesion width/height ranges for a class at this image size.
    pub fn size_range(&self, class_id: usize) -> ([f64; 2], [f64; 2]) {
        let s = self.scale();
        let (w, h) = Appearance::for_class(class_id).size_ranges();
        ([w[0] * s, w[1] * s], [h[0] * s, h[1] * s])
    }

    /// Smallest lesion area over all classes.
    pub fn min_lesion_area(&self) -> f64 {
        (1..=self.num_classes)
            .map(|c| {
                let (w, h) = self.size_range(c);
                w[0] * h[0]
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// The vertical stratum `[lo, hi]` of a class under position coupling.
    pub fn stratum(&self, class_id: usize) -> (f64, f64) {
        let h = self.height as f64;
        let margin = 16.0 * self.scale();
        let (lo, hi) = (margin, h - margin);
        let step = (hi - lo) / self.num_classes as f64;
        (lo + (class_id - 1) as f64 * step, lo + class_id as f64 * step)
    }

    fn center_range(&self, class_id: usize, box_h: f64) -> (f64, f64) {
        let h = self.height as f64;
        let (flo, fhi) = (1.0 + 0.5 * box_h, h - 1.0 - 0.5 * box_h);
        if self.position_coupling {
            let (slo, shi) = self.stratum(class_id);
            (slo.max(flo), shi.min(fhi))
        } else {
            (flo, fhi)
        }
    }
}

/// Generate one scene. Deterministic in `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<(Image, GroundTruth), DataError> {
    cfg.validate()?;
    for sub in 0..MAX_SUBSEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, sub]));
        if let Some(scene) = try_scene(&mut rng, cfg) {
            return Ok(scene);
        }
    }
    Err(DataError::Config("lesion placement keeps failing; lesion count too large for the image".into()))
}

fn try_scene(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Option<(Image, GroundTruth)> {
    let (w, h) = (cfg.width, cfg.height);
    let mut img = background(rng, w, h);

    let n = rng.random_range(cfg.lesions_min..=cfg.lesions_max);
    let mut boxes: Vec<GtBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = rng.random_range(1..=cfg.num_classes);
        let (wr, hr) = cfg.size_range(class_id);
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let bw = rng.random_range(wr[0]..=wr[1]);
            let bh = rng.random_range(hr[0]..=hr[1]);
            let (ylo, yhi) = cfg.center_range(class_id, bh);
            let cy = if ylo < yhi { rng.random_range(ylo..=yhi) } else { ylo };
            let cx = rng.random_range((1.0 + 0.5 * bw)..=(w as f64 - 1.0 - 0.5 * bw));
            let bbox = BBox::from_center(cx, cy, bw, bh).ok()?;
            let gap = BBox { x1: bbox.x1 - 1.0, y1: bbox.y1 - 1.0, x2: bbox.x2 + 1.0, y2: bbox.y2 + 1.0 };
            if boxes.iter().any(|b| b.bbox.intersection_area(&gap) > 0.0) {
                continue;
            }
            boxes.push(GtBox { class_id, bbox });
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }

    for b in &boxes {
        let strength = rng.random_range(MIN_STRENGTH..=1.0);
        render_lesion(&mut img, b, strength);
    }
    add_clutter(rng, &mut img, &boxes);
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
        for p in &mut img.pixels {
            *p += normal.sample(rng);
        }
    }
    img.clamp_unit();
    Some((img, GroundTruth::new(boxes)))
}

fn background(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    let n_bands = rng.random_range(4..=6usize);
    let mut edges: Vec<f64> = (0..n_bands - 1).map(|_| rng.random_range(0.0..h as f64)).collect();
    edges.sort_by(f64::total_cmp);
    let levels: Vec<f64> = (0..n_bands).map(|_| rng.random_range(0.15..0.45)).collect();
    let tilt = rng.random_range(-0.05..0.05);
    let gradient = rng.random_range(0.0..0.1);

    let mut img = Image::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let shift = tilt * (px - 0.5 * w as f64);
            // Soft band transitions: logistic steps between consecutive levels.
            let mut v = levels[0];
            for (k, e) in edges.iter().enumerate() {
                let t = 1.0 / (1.0 + (-(py - e - shift) / 1.5).exp());
                v += t * (levels[k + 1] - levels[k]);
            }
            img.set(x, y, v + gradient * py / h as f64);
        }
    }
    img
}

fn render_lesion(img: &mut Image, b: &GtBox, strength: f64) {
    let app = Appearance::for_class(b.class_id);
    let (cx, cy) = b.bbox.center();
    let (sx, sy) = (b.bbox.width() / 4.0, b.bbox.height() / 4.0);
    add_gaussian(img, cx, cy, sx, sy, strength * app.amplitude());
}

/// Small round blobs of either polarity away from the lesions: hard
/// negatives that differ from lesions mainly in size.
fn add_clutter(rng: &mut ChaCha8Rng, img: &mut Image, boxes: &[GtBox]) {
    let scale = img.width.min(img.height) as f64 / REFERENCE_SIZE;
    let n = rng.random_range(CLUTTER_COUNT[0]..=CLUTTER_COUNT[1]);
    for _ in 0..n {
        let d = scale * rng.random_range(CLUTTER_SIZE[0]..=CLUTTER_SIZE[1]);
        let cx = rng.random_range(0.0..img.width as f64);
        let cy = rng.random_range(0.0..img.height as f64);
        let amp = rng.random_range(CLUTTER_AMPLITUDE[0]..=CLUTTER_AMPLITUDE[1]) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let footprint = BBox { x1: cx - d, y1: cy - d, x2: cx + d, y2: cy + d };
        if boxes.iter().any(|b| b.bbox.intersection_area(&footprint) > 0.0) {
            continue;
        }
        add_gaussian(img, cx, cy, d / 4.0, d / 4.0, amp);
    }
}

fn add_gaussian(img: &mut Image, cx: f64, cy: f64, sx: f64, sy: f64, amp: f64) {
    let b = BBox { x1: cx - 2.0 * sx, y1: cy - 2.0 * sy, x2: cx + 2.0 * sx, y2: cy + 2.0 * sy };
    let x0 = (b.x1 - sx).floor().max(0.0) as usize;
    let x1 = ((b.x2 + sx).ceil().max(0.0) as usize).min(img.width);
    let y0 = (b.y1 - sy).floor().max(0.0) as usize;
    let y1 = ((b.y2 + sy).ceil().max(0.0) as usize).min(img.height);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = (x as f64 + 0.5 - cx) / sx;
            let dy = (y as f64 + 0.5 - cy) / sy;
            let g = (-0.5 * (dx * dx + dy * dy)).exp();
            let v = img.get(x, y) + amp * g;
            img.set(x, y, v);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<(Image, GroundTruth)>,
    pub unlabeled: Vec<Image>,
    pub test: Vec<(Image, GroundTruth)>,
    /// Ground truth of the unlabeled scenes, kept only for pseudo-label audits.
    pub unlabeled_audit: Vec<GroundTruth>,
    pub seeds: SplitSeeds,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitSeeds {
    pub labeled: Vec<u64>,
    pub unlabeled: Vec<u64>,
    pub test: Vec<u64>,
}

/// Build labeled / unlabeled / test splits from disjoint scene-id ranges.
pub fn make_dataset(
    seed: u64,
    n_labeled: usize,
    n_unlabeled: usize,
    n_test: usize,
    cfg: &SceneConfig,
) -> Result<DatasetSplit, DataError> {
    cfg.validate()?;
    let scene_seed = |id: usize| mix_seed(&[seed, 0x5ce9e, id as u64]);
    let mut split = DatasetSplit::default();
    for id in 0..n_labeled {
        let s = scene_seed(id);
        split.labeled.push(generate_scene(s, cfg)?);
        split.seeds.labeled.push(s);
    }
    for id in n_labeled..n_labeled + n_unlabeled {
        let s = scene_seed(id);
        let (img, gt) = generate_scene(s, cfg)?;
        split.unlabeled.push(img);
        split.unlabeled_audit.push(gt);
        split.seeds.unlabeled.push(s);
    }
    for id in n_labeled + n_unlabeled..n_labeled + n_unlabeled + n_test {
        let s = scene_seed(id);
        split.test.push(generate_scene(s, cfg)?);
        split.seeds.test.push(s);
    }
    Ok(split)
}

// ---------------------------------------------------------------------------
// On-disk format: one 16-bit binary PGM (P5, maxval 65535) per image under
// `images/`, named `<split>_<index:05>.pgm`, plus `annotations.txt` with one
// line per box: `<image-id> <class-id> <x1> <y1> <x2> <y2>`. Unlabeled boxes
// are written too; the loader keeps them as audit ground truth only.

const ANNOTATION_HEADER: &str = "# ssod annotations v1: image-id class-id x1 y1 x2 y2";

pub fn write_pgm(path: &Path, img: &Image) -> Result<(), DataError> {
    let mut buf = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for p in &img.pixels {
        let v = (p.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let fmt = |msg: &str| DataError::Format { path: path.display().to_string(), msg: msg.to_string() };
    // Header: four whitespace-separated tokens, then a single whitespace byte.
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(fmt("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).to_string());
    }
    i += 1;
    if tokens[0] != "P5" {
        return Err(fmt("not a binary PGM"));
    }
    let width: usize = tokens[1].parse().map_err(|_| fmt("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| fmt("bad height"))?;
    let maxval: u32 = tokens[3].parse().map_err(|_| fmt("bad maxval"))?;
    let data = bytes.get(i..).ok_or_else(|| fmt("missing pixel data"))?;
    let pixels: Vec<f64> = if maxval > 255 {
        if data.len() < 2 * width * height {
            return Err(fmt("short pixel data"));
        }
        data.chunks_exact(2).take(width * height).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64).collect()
    } else {
        if data.len() < width * height {
            return Err(fmt("short pixel data"));
        }
        data.iter().take(width * height).map(|&v| v as f64 / maxval as f64).collect()
    };
    Ok(Image { width, height, pixels })
}

fn image_id(split: &str, idx: usize) -> String {
    format!("{split}_{idx:05}")
}

pub fn dump_dataset(dir: &Path, data: &DatasetSplit) -> Result<(), DataError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;
    let mut ann = String::from(ANNOTATION_HEADER);
    ann.push('\n');
    let mut emit = |split: &str, items: &mut dyn Iterator<Item = (&Image, &GroundTruth)>| -> Result<(), DataError> {
        for (idx, (img, gt)) in items.enumerate() {
            let id = image_id(split, idx);
            write_pgm(&images.join(format!("{id}.pgm")), img)?;
            for b in &gt.boxes {
                let _ = writeln!(ann, "{} {} {} {} {} {}", id, b.class_id, b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2);
            }
        }
        Ok(())
    };
    emit("labeled", &mut data.labeled.iter().map(|(i, g)| (i, g)))?;
    emit("unlabeled", &mut data.unlabeled.iter().zip(data.unlabeled_audit.iter()))?;
    emit("test", &mut data.test.iter().map(|(i, g)| (i, g)))?;
    let path = dir.join("annotations.txt");
    let mut f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    f.write_all(ann.as_bytes()).map_err(|e| io_err(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplit, DataError> {
    let path = dir.join("annotations.txt");
    let fmt = |line: usize, msg: &str| DataError::Format { path: path.display().to_string(), msg: format!("line {line}: {msg}") };
    let file = fs::File::open(&path).map_err(|e| io_err(&path, e))?;
    let mut boxes: std::collections::HashMap<String, Vec<GtBox>> = Default::default();
    for (n, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(&path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 {
            return Err(fmt(n + 1, "expected 6 fields"));
        }
        let class_id: usize = parts[1].parse().map_err(|_| fmt(n + 1, "bad class id"))?;
        let c: Vec<f64> = parts[2..].iter().map(|s| s.parse::<f64>()).collect::<Result<_, _>>().map_err(|_| fmt(n + 1, "bad coordinate"))?;
        let bbox = BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| fmt(n + 1, &e.to_string()))?;
        boxes.entry(parts[0].to_string()).or_default().push(GtBox { class_id, bbox });
    }

    let images = dir.join("images");
    let mut split = DatasetSplit::default();
    for name in ["labeled", "unlabeled", "test"] {
        let mut idx = 0;
        loop {
            let id = image_id(name, idx);
            let p = images.join(format!("{id}.pgm"));
            if !p.exists() {
                break;
            }
            let img = read_pgm(&p)?;
            let gt = GroundTruth::new(boxes.remove(&id).unwrap_or_default());
            match name {
                "labeled" => split.labeled.push((img, gt)),
                "unlabeled" => {
                    split.unlabeled.push(img);
                    split.unlabeled_audit.push(gt);
                }
                _ => split.test.push((img, gt)),
            }
            idx += 1;
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(11, &cfg).unwrap(), generate_scene(11, &cfg).unwrap());
    }

    #[test]
    fn forced_single_lesion() {
        let cfg = SceneConfig { lesions_min: 1, lesions_max: 1, ..Default::default() };
        for s in 0..20 {
            assert_eq!(generate_scene(s, &cfg).unwrap().1.len(), 1);
        }
    }

    #[test]
    fn boxes_strictly_inside_and_pixels_in_range() {
        let cfg = SceneConfig::default();
        for s in 0..50 {
            let (img, gt) = generate_scene(s, &cfg).unwrap();
            assert!(img.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            assert_eq!(img.pixels.len(), 96 * 96);
            for b in &gt.boxes {
                assert!(b.class_id >= 1 && b.class_id <= cfg.num_classes);
                assert!(b.bbox.x1 > 0.0 && b.bbox.y1 > 0.0 && b.bbox.x2 < 96.0 && b.bbox.y2 < 96.0);
            }
        }
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = SceneConfig::default();
        let scenes: Vec<_> = (0..10).map(|s| generate_scene(s, &cfg).unwrap().0).collect();
        for i in 0..scenes.len() {
            for j in i + 1..scenes.len() {
                assert_ne!(scenes[i], scenes[j]);
            }
        }
    }

    #[test]
    fn vertical_centers_stay_in_strata() {
        let cfg = SceneConfig::default();
        let mut seen = vec![0usize; cfg.num_classes + 1];
        for s in 0..1000 {
            let (_, gt) = generate_scene(s, &cfg).unwrap();
            for b in &gt.boxes {
                let (lo, hi) = cfg.stratum(b.class_id);
                let cy = b.bbox.center().1;
                assert!(cy >= lo - 1e-9 && cy <= hi + 1e-9, "class {} center {cy} outside [{lo}, {hi}]", b.class_id);
                seen[b.class_id] += 1;
            }
        }
        assert!(seen[1..].iter().all(|&n| n > 100));
    }

    #[test]
    fn config_validation() {
        assert!(SceneConfig { width: 16, ..Default::default() }.validate().is_err());
        assert!(SceneConfig { num_classes: 1, ..Default::default() }.validate().is_err());
        assert!(SceneConfig { num_classes: 10, ..Default::default() }.validate().is_err());
        assert!(SceneConfig { lesions_min: 3, lesions_max: 2, ..Default::default() }.validate().is_err());
        assert!(SceneConfig { num_classes: 9, ..Default::default() }.validate().is_ok());
        assert!(SceneConfig { width: 32, height: 32, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn dataset_splits() {
        let cfg = SceneConfig::default();
        let d = make_dataset(7, 0, 3, 2, &cfg).unwrap();
        assert!(d.labeled.is_empty());
        let a = make_dataset(7, 10, 100, 20, &cfg).unwrap();
        let b = make_dataset(7, 10, 100, 20, &cfg).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<u64> = a.seeds.labeled.iter().chain(&a.seeds.unlabeled).chain(&a.seeds.test).copied().collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn dump_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let d = make_dataset(3, 2, 2, 2, &SceneConfig::default()).unwrap();
        dump_dataset(dir.path(), &d).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.labeled.len(), 2);
        assert_eq!(back.unlabeled.len(), 2);
        assert_eq!(back.test.len(), 2);
        for ((a, ga), (b, gb)) in d.labeled.iter().zip(&back.labeled) {
            assert_eq!(ga, gb);
            let err = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err <= 0.5 / 65535.0 + 1e-12);
        }
        assert_eq!(back.unlabeled_audit, d.unlabeled_audit);
    }
}
