//! Pseudo-label generation from teacher predictions.
//!
//! Classification pseudo labels always come from the foreground-score
//! filter. The regression set is chosen by a named strategy: either the
//! same set (`score`) or the double filter (`double`), which additionally
//! rejects boxes whose jitter-refine spread is large.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{detections_from_features, features, refine_with_features, Detection, DetectorError, Features, ModelParams, PostProcess};
use crate::geometry::BBox;
use crate::registry::{Named, Registry};
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum PlgError {
    #[error("box regression variance needs at least 2 refined boxes, got {0}")]
    TooFewRefined(usize),
    #[error("plg.{field}: {msg}")]
    Config { field: &'static str, msg: String },
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// One pseudo box. `variance` is r(b) when the double filter computed it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f64,
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelSet {
    pub cls_labels: Vec<PseudoLabel>,
    pub reg_labels: Vec<PseudoLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlgConfig {
    /// Regression-label strategy name: `score` or `double`.
    pub strategy: String,
    pub theta: f64,
    pub theta2: f64,
    pub delta: f64,
    pub n_jitter: usize,
    pub jitter_frac: f64,
}

impl Default for PlgConfig {
    fn default() -> Self {
        Self { strategy: "score".into(), theta: 0.7, theta2: 0.9, delta: 0.02, n_jitter: 10, jitter_frac: 0.06 }
    }
}

impl PlgConfig {
    pub fn validate(&self) -> Result<(), PlgError> {
        let open01 = |v: f64| v > 0.0 && v < 1.0;
        if !open01(self.theta) {
            return Err(PlgError::Config { field: "theta", msg: format!("{} not in (0, 1)", self.theta) });
        }
        if !open01(self.theta2) {
            return Err(PlgError::Config { field: "theta2", msg: format!("{} not in (0, 1)", self.theta2) });
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(PlgError::Config { field: "delta", msg: format!("{} must be positive", self.delta) });
        }
        if self.n_jitter < 2 {
            return Err(PlgError::Config { field: "n_jitter", msg: format!("{} < 2", self.n_jitter) });
        }
        if !(self.jitter_frac > 0.0 && self.jitter_frac < 0.5) {
            return Err(PlgError::Config { field: "jitter_frac", msg: format!("{} not in (0, 0.5)", self.jitter_frac) });
        }
        regression_filters()
            .resolve(&self.strategy)
            .map_err(|e| PlgError::Config { field: "strategy", msg: e.to_string() })?;
        Ok(())
    }
}

/// Max probability over non-background classes.
pub fn foreground_score(class_probs: &[f64]) -> f64 {
    class_probs[1..].iter().copied().fold(0.0, f64::max)
}

pub fn score_filter(candidates: &[Detection], theta: f64) -> Vec<PseudoLabel> {
    candidates
        .iter()
        .filter(|d| d.foreground_score > theta)
        .map(|d| PseudoLabel { class_id: d.class_id(), bbox: d.bbox, score: d.foreground_score, variance: None })
        .collect()
}

/// Random center shift within +-frac of the size and independent size
/// scaling in [1-frac, 1+frac], clipped to the image.
pub fn jitter(b: &BBox, rng: &mut dyn RngCore, frac: f64, width: f64, height: f64) -> BBox {
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    let mut u = || if frac > 0.0 { rng.random_range(-frac..frac) } else { 0.0 };
    let (ox, oy, sw, sh) = (u() * w, u() * h, 1.0 + u(), 1.0 + u());
    BBox::from_center(cx + ox, cy + oy, w * sw, h * sh)
        .and_then(|j| j.clip(width, height))
        .unwrap_or(*b)
}

/// Mean sample standard deviation of the four coordinates over `refined`,
/// normalized by the half-perimeter of `b`.
pub fn box_regression_variance(refined: &[BBox], b: &BBox) -> Result<f64, PlgError> {
    let n = refined.len();
    if n < 2 {
        return Err(PlgError::TooFewRefined(n));
    }
    let mut sum_sigma = 0.0;
    for k in 0..4 {
        let xs: Vec<f64> = refined.iter().map(|r| r.coords()[k]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        sum_sigma += var.sqrt();
    }
    Ok(0.25 * sum_sigma / (0.5 * (b.height() + b.width())))
}

/// Keep candidates with f > theta2 and r(b) <= delta, computing r(b) only
/// for candidates that pass the score test. Jitters for candidate `i` come
/// from their own stream, so a candidate's r(b) does not depend on which
/// other candidates were scored.
pub fn double_filter(
    candidates: &[Detection],
    teacher: &ModelParams,
    feats: &Features,
    cfg: &PlgConfig,
    rng: &mut dyn RngCore,
) -> Vec<PseudoLabel> {
    let (w, h) = (feats.width as f64, feats.height as f64);
    let base = rng.next_u64();
    let mut kept = Vec::new();
    'cand: for (i, d) in candidates.iter().enumerate() {
        if d.foreground_score <= cfg.theta2 {
            continue;
        }
        let mut rng = stream(&[base, i as u64]);
        let mut refined = Vec::with_capacity(cfg.n_jitter);
        for _ in 0..cfg.n_jitter {
            let j = jitter(&d.bbox, &mut rng, cfg.jitter_frac, w, h);
            match refine_with_features(teacher, feats, &j) {
                Ok((r, _)) => refined.push(r),
                Err(e) => {
                    log::debug!("double filter rejects {:?}: {e}", d.bbox);
                    continue 'cand;
                }
            }
        }
        let r = box_regression_variance(&refined, &d.bbox).expect("n_jitter >= 2 is validated");
        if r <= cfg.delta {
            kept.push(PseudoLabel { class_id: d.class_id(), bbox: d.bbox, score: d.foreground_score, variance: Some(r) });
        }
    }
    kept
}

/// Regression pseudo-label strategy.
pub trait RegressionFilter: Named + Send + Sync {
    fn select(
        &self,
        cls_labels: &[PseudoLabel],
        candidates: &[Detection],
        teacher: &ModelParams,
        feats: &Features,
        cfg: &PlgConfig,
        rng: &mut dyn RngCore,
    ) -> Vec<PseudoLabel>;
}

pub struct ScoreOnly;

impl Named for ScoreOnly {
    fn name(&self) -> &'static str {
        "score"
    }
}

impl RegressionFilter for ScoreOnly {
    fn select(&self, cls_labels: &[PseudoLabel], _: &[Detection], _: &ModelParams, _: &Features, _: &PlgConfig, _: &mut dyn RngCore) -> Vec<PseudoLabel> {
        cls_labels.to_vec()
    }
}

pub struct DoubleFilter;

impl Named for DoubleFilter {
    fn name(&self) -> &'static str {
        "double"
    }
}

impl RegressionFilter for DoubleFilter {
    fn select(
        &self,
        _: &[PseudoLabel],
        candidates: &[Detection],
        teacher: &ModelParams,
        feats: &Features,
        cfg: &PlgConfig,
        rng: &mut dyn RngCore,
    ) -> Vec<PseudoLabel> {
        double_filter(candidates, teacher, feats, cfg, rng)
    }
}

pub fn regression_filters() -> Registry<dyn RegressionFilter> {
    Registry::<dyn RegressionFilter>::new("regression filter").with(Arc::new(ScoreOnly)).with(Arc::new(DoubleFilter))
}

/// Everything the teacher produced for one weak view.
#[derive(Debug, Clone)]
pub struct TeacherView {
    pub labels: PseudoLabelSet,
    /// Post-processed candidates the labels were filtered from.
    pub candidates: Vec<Detection>,
    /// Dense per-anchor background probability.
    pub anchor_background: Vec<f64>,
}

/// Pseudo labels plus the teacher's dense background probabilities.
pub fn teacher_view(
    img_weak: &crate::synthdata::Image,
    teacher: &ModelParams,
    cfg: &PlgConfig,
    post: &PostProcess,
    rng: &mut dyn RngCore,
) -> Result<TeacherView, PlgError> {
    let feats = features(teacher, img_weak)?;
    let dense = detections_from_features(teacher, &feats)?;
    let n_anchor = feats.fw * feats.fh;
    let mut anchor_background = vec![1.0; n_anchor];
    for d in &dense {
        anchor_background[d.anchor] = d.class_probs[0];
    }
    let candidates = post.apply(dense);
    let cls_labels = score_filter(&candidates, cfg.theta);
    let filter = regression_filters()
        .resolve(&cfg.strategy)
        .map_err(|e| PlgError::Config { field: "strategy", msg: e.to_string() })?;
    let reg_labels = filter.select(&cls_labels, &candidates, teacher, &feats, cfg, rng);
    Ok(TeacherView { labels: PseudoLabelSet { cls_labels, reg_labels }, candidates, anchor_background })
}

pub fn generate_pseudo_labels(
    img_weak: &crate::synthdata::Image,
    teacher: &ModelParams,
    cfg: &PlgConfig,
    post: &PostProcess,
    rng: &mut dyn RngCore,
) -> Result<PseudoLabelSet, PlgError> {
    Ok(teacher_view(img_weak, teacher, cfg, post, rng)?.labels)
}

/// Rows of the pseudo-label audit file:
/// `image-id stage class x1 y1 x2 y2 score variance` (variance blank when not computed).
pub fn write_audit(path: &Path, sets: &[(usize, PseudoLabelSet)]) -> Result<(), PlgError> {
    let mut out = String::from("# image-id\tstage\tclass\tx1\ty1\tx2\ty2\tscore\tvariance\n");
    for (id, set) in sets {
        for (stage, labels) in [("cls", &set.cls_labels), ("reg", &set.reg_labels)] {
            for l in labels {
                let b = l.bbox;
                let var = l.variance.map(|v| format!("{v:.6}")).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{id}\t{stage}\t{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.6}\t{var}",
                    l.class_id, b.x1, b.y1, b.x2, b.y2, l.score
                );
            }
        }
    }
    fs::write(path, out).map_err(|source| PlgError::Io { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Arch;
    use crate::rng::stream;
    use crate::synthdata::Image;

    fn det(score: f64, bbox: BBox) -> Detection {
        let rest = (1.0 - score) / 2.0;
        Detection { bbox, class_probs: vec![rest, score, rest], foreground_score: score, anchor: 0 }
    }

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn foreground_fixtures() {
        assert_eq!(foreground_score(&[0.5, 0.3, 0.2]), 0.3);
        assert_eq!(foreground_score(&[1.0, 0.0, 0.0, 0.0]), 0.0);
        assert_eq!(foreground_score(&[0.2; 5]), 0.2);
    }

    #[test]
    fn score_filter_fixtures() {
        let c: Vec<_> = [0.9, 0.6, 0.71].iter().map(|&s| det(s, b(0., 0., 10., 10.))).collect();
        let kept = score_filter(&c, 0.7);
        assert_eq!(kept.iter().map(|l| l.score).collect::<Vec<_>>(), vec![0.9, 0.71]);
        assert!(score_filter(&c, 1.0).is_empty());
        assert_eq!(score_filter(&c, 0.0).len(), 3);
        assert!(kept.iter().all(|l| l.class_id >= 1));
    }

    #[test]
    fn variance_fixtures() {
        let base = b(0., 0., 10., 10.);
        assert_eq!(box_regression_variance(&[base, base, base], &base).unwrap(), 0.0);
        let r = box_regression_variance(&[b(0., 0., 10., 10.), b(2., 0., 10., 10.)], &base).unwrap();
        assert!((r - 0.25 * 2f64.sqrt() / 10.0).abs() < 1e-12);
        let s = 3.0;
        let r3 = box_regression_variance(&[b(0., 0., 10., 10.).scaled(s), b(2., 0., 10., 10.).scaled(s)], &base.scaled(s)).unwrap();
        assert!((r3 - r).abs() < 1e-12);
        assert!(matches!(box_regression_variance(&[base], &base), Err(PlgError::TooFewRefined(1))));
    }

    #[test]
    fn zero_jitter_is_identity() {
        let mut rng = stream(&[1]);
        let bb = b(10., 12., 30., 40.);
        assert_eq!(jitter(&bb, &mut rng, 0.0, 96., 96.), bb);
        for _ in 0..1000 {
            assert!(jitter(&bb, &mut rng, 0.3, 96., 96.).is_valid());
        }
    }

    #[test]
    fn jitter_centers_are_unbiased() {
        let mut rng = stream(&[2]);
        let bb = b(30., 30., 60., 50.);
        let n = 10_000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let (cx, cy) = jitter(&bb, &mut rng, 0.06, 96., 96.).center();
            sx += cx;
            sy += cy;
        }
        let (cx, cy) = bb.center();
        assert!((sx / n as f64 - cx).abs() < 0.01 * cx);
        assert!((sy / n as f64 - cy).abs() < 0.01 * cy);
    }

    #[test]
    fn double_filter_short_circuits_and_thresholds() {
        // Zero parameters: every refinement returns the jittered box itself.
        let p = ModelParams::zeros(Arch::new(2));
        let img = Image::filled(48, 48, 0.5);
        let feats = features(&p, &img).unwrap();
        let cfg = PlgConfig { strategy: "double".into(), ..Default::default() };
        let mut rng = stream(&[3]);
        let low = vec![det(0.5, b(5., 5., 30., 30.))];
        assert!(double_filter(&low, &p, &feats, &cfg, &mut rng).is_empty());
        // Jitter spread is about frac/sqrt(3) of the size, well above delta.
        let high = vec![det(0.95, b(5., 5., 30., 30.))];
        assert!(double_filter(&high, &p, &feats, &cfg, &mut rng).is_empty());
        let loose = PlgConfig { delta: 1.0, ..cfg.clone() };
        let kept = double_filter(&high, &p, &feats, &loose, &mut rng);
        assert_eq!(kept.len(), 1);
        assert!(kept[0].variance.unwrap() > 0.0);
    }

    #[test]
    fn zero_teacher_yields_nothing() {
        let p = ModelParams::zeros(Arch::new(4));
        let img = Image::filled(96, 96, 0.3);
        for strategy in ["score", "double"] {
            let cfg = PlgConfig { strategy: strategy.into(), ..Default::default() };
            let set = generate_pseudo_labels(&img, &p, &cfg, &PostProcess::default(), &mut stream(&[4])).unwrap();
            assert!(set.cls_labels.is_empty() && set.reg_labels.is_empty());
        }
    }

    #[test]
    fn config_validation() {
        assert!(PlgConfig::default().validate().is_ok());
        let bad = PlgConfig { n_jitter: 1, ..Default::default() };
        assert!(matches!(bad.validate(), Err(PlgError::Config { field: "n_jitter", .. })));
        let bad = PlgConfig { strategy: "vote".into(), ..Default::default() };
        assert!(matches!(bad.validate(), Err(PlgError::Config { field: "strategy", .. })));
    }
}
