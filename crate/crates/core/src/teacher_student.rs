//! Teacher-student training: burn-in, pseudo labelling on weak views,
//! student SGD on strong views, teacher update.

use std::sync::Arc;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::{assign, AssignConfig};
use crate::augment::{strong, weak, AugError, AugRecord, StrongAugConfig};
use crate::detector::{anchors, loss_and_grad_terms, Arch, DetectorError, GradConfig, ModelParams, PostProcess, TrainExample};
use crate::eval::{evaluate, EvalReport};
use crate::geometry::{iou, BBox};
use crate::losses::{classification_losses, LossConfig};
use crate::plg::{teacher_view, PlgConfig, PlgError, PseudoLabel, PseudoLabelSet};
use crate::registry::{Named, Registry};
use crate::rng::stream;
use crate::synthdata::{DatasetSplit, GroundTruth, GtBox, Image};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("labeled split is empty")]
    EmptyLabeled,
    #[error("parameter length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("non-finite gradient")]
    NonFiniteGrad,
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Plg(#[from] PlgError),
    #[error(transparent)]
    Aug(#[from] AugError),
    #[error("step {step}: {source}")]
    AtStep { step: u64, source: Box<TrainError> },
}

// Independent random streams per purpose.
const RNG_INIT: u64 = 1;
const RNG_LABELED_PICK: u64 = 2;
const RNG_LABELED_AUG: u64 = 3;
const RNG_UNLABELED_PICK: u64 = 4;
const RNG_UNLABELED_AUG: u64 = 5;
const RNG_PLG: u64 = 6;
const RNG_ASSIGN: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { base_lr: 0.01, warmup_steps: 100, momentum: 0.9, weight_decay: 1e-4 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err("optim.base_lr: must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err("optim.momentum: must lie in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err("optim.weight_decay: must be >= 0".into());
        }
        Ok(())
    }

    /// Linear warm-up to `base_lr` over `warmup_steps`.
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.base_lr
        } else {
            self.base_lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub velocity: Vec<f64>,
    pub step: u64,
    pub cfg: OptimConfig,
}

impl OptimState {
    pub fn new(len: usize, cfg: OptimConfig) -> Self {
        Self { velocity: vec![0.0; len], step: 0, cfg }
    }
}

/// v <- m v + g + wd p;  p <- p - lr(t) v.
pub fn sgd_step(params: &mut ModelParams, grad: &[f64], opt: &mut OptimState) -> Result<(), TrainError> {
    if grad.len() != params.len() || opt.velocity.len() != params.len() {
        return Err(TrainError::Length(params.len(), grad.len()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGrad);
    }
    let lr = opt.cfg.lr(opt.step);
    let (m, wd) = (opt.cfg.momentum, opt.cfg.weight_decay);
    for ((p, v), g) in params.values.iter_mut().zip(opt.velocity.iter_mut()).zip(grad) {
        *v = m * *v + g + wd * *p;
        *p -= lr * *v;
    }
    opt.step += 1;
    Ok(())
}

pub fn ema_update(teacher: &ModelParams, student: &ModelParams, alpha: f64) -> Result<ModelParams, TrainError> {
    if teacher.len() != student.len() {
        return Err(TrainError::Length(teacher.len(), student.len()));
    }
    let values = teacher.values.iter().zip(&student.values).map(|(t, s)| alpha * t + (1.0 - alpha) * s).collect();
    Ok(ModelParams { arch: teacher.arch, values })
}

/// How the teacher follows the student after each step.
pub trait TeacherUpdate: Named + Send + Sync {
    fn update(&self, teacher: &mut ModelParams, student: &ModelParams, alpha: f64) -> Result<(), TrainError>;
}

pub struct Ema;
pub struct SharedBp;
pub struct Frozen;

impl Named for Ema {
    fn name(&self) -> &'static str {
        "ema"
    }
}
impl Named for SharedBp {
    fn name(&self) -> &'static str {
        "shared_bp"
    }
}
impl Named for Frozen {
    fn name(&self) -> &'static str {
        "frozen"
    }
}

impl TeacherUpdate for Ema {
    fn update(&self, teacher: &mut ModelParams, student: &ModelParams, alpha: f64) -> Result<(), TrainError> {
        *teacher = ema_update(teacher, student, alpha)?;
        Ok(())
    }
}

impl TeacherUpdate for SharedBp {
    fn update(&self, teacher: &mut ModelParams, student: &ModelParams, _: f64) -> Result<(), TrainError> {
        teacher.clone_from(student);
        Ok(())
    }
}

impl TeacherUpdate for Frozen {
    fn update(&self, _: &mut ModelParams, _: &ModelParams, _: f64) -> Result<(), TrainError> {
        Ok(())
    }
}

pub fn teacher_updates() -> Registry<dyn TeacherUpdate> {
    Registry::<dyn TeacherUpdate>::new("teacher update").with(Arc::new(Ema)).with(Arc::new(SharedBp)).with(Arc::new(Frozen))
}

pub const TEACHER_INITS: [&str; 2] = ["burn_in", "random"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// `burn_in`: supervised pre-training seeds both networks.
    /// `random`: both start from the seeded initialization.
    pub init: String,
    /// Registry name: `ema`, `shared_bp` or `frozen`.
    pub update: String,
    pub ema_alpha: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { init: "burn_in".into(), update: "ema".into(), ema_alpha: 0.99 }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !TEACHER_INITS.contains(&self.init.as_str()) {
            return Err(format!("teacher.init: unknown '{}' (known: {})", self.init, TEACHER_INITS.join(", ")));
        }
        teacher_updates().resolve(&self.update).map_err(|e| format!("teacher.update: {e}"))?;
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(format!("teacher.ema_alpha: {} not in [0, 1]", self.ema_alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Supervised steps before the semi-supervised loop. With
    /// `teacher.init = "random"` they are run as extra loop steps instead,
    /// so both inits get the same number of optimizer steps.
    pub burn_in_steps: u64,
    pub train_steps: u64,
    pub eval_interval: u64,
    pub n_labeled_batch: usize,
    pub n_unlabeled_batch: usize,
    /// `teacher`, `student`, or `auto` (teacher under EMA, otherwise student).
    pub eval_model: String,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            burn_in_steps: 300,
            train_steps: 900,
            eval_interval: 300,
            n_labeled_batch: 4,
            n_unlabeled_batch: 4,
            eval_model: "auto".into(),
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.eval_interval == 0 {
            return Err("schedule.eval_interval: must be positive".into());
        }
        if self.n_labeled_batch == 0 {
            return Err("schedule.n_labeled_batch: must be positive".into());
        }
        if !["auto", "teacher", "student"].contains(&self.eval_model.as_str()) {
            return Err(format!("schedule.eval_model: unknown '{}'", self.eval_model));
        }
        Ok(())
    }
}

/// Everything one training run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub seed: u64,
    pub num_classes: usize,
    pub augment: StrongAugConfig,
    pub plg: PlgConfig,
    pub loss: LossConfig,
    pub teacher: TeacherConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub assign: AssignConfig,
    pub postprocess: PostProcess,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub opt: OptimState,
    /// Global step counter across burn-in and the semi-supervised loop.
    pub step: u64,
}

impl TrainState {
    pub fn new(settings: &TrainSettings) -> Self {
        let init = ModelParams::init(Arch::new(settings.num_classes), &mut stream(&[settings.seed, RNG_INIT]));
        let opt = OptimState::new(init.len(), settings.optim.clone());
        Self { student: init.clone(), teacher: init, opt, step: 0 }
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub loss_sup: f64,
    pub loss_unsup_cls: f64,
    pub loss_unsup_reg: f64,
    pub n_cls_pseudo: usize,
    pub n_reg_pseudo: usize,
    /// Classification pseudo labels matching an audit box of their class at IoU >= 0.5.
    pub n_cls_correct: usize,
    /// Sum over regression pseudo labels of the best same-class audit IoU.
    pub reg_iou_sum: f64,
}

/// Pseudo-label quality against audit ground truth.
pub fn label_quality(labels: &[PseudoLabel], gt: &GroundTruth) -> (usize, f64) {
    let mut correct = 0;
    let mut iou_sum = 0.0;
    for l in labels {
        let best = gt
            .boxes
            .iter()
            .filter(|g| g.class_id == l.class_id)
            .map(|g| iou(&l.bbox, &g.bbox).unwrap_or(0.0))
            .fold(0.0, f64::max);
        correct += (best >= 0.5) as usize;
        iou_sum += best;
    }
    (correct, iou_sum)
}

fn to_gt(labels: &[PseudoLabel]) -> GroundTruth {
    GroundTruth::new(labels.iter().map(|l| GtBox { class_id: l.class_id, bbox: l.bbox }).collect())
}

fn pick(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n == 0 || k == 0 {
        return Vec::new();
    }
    if k >= n {
        return (0..n).collect();
    }
    sample(rng, n, k).into_vec()
}

/// Weak and strong views of a batch; strong views mix with the next image
/// of the batch when mixup is on.
fn views(
    images: &[&Image],
    boxes: &[GroundTruth],
    aug: &StrongAugConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Image, GroundTruth, Image, GroundTruth, AugRecord)>, AugError> {
    let mut weak_views = Vec::with_capacity(images.len());
    for (img, gt) in images.iter().zip(boxes) {
        let (wi, wg, _) = weak(img, gt, rng)?;
        weak_views.push((wi, wg));
    }
    let n = weak_views.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let partner = if aug.mixup { Some((&weak_views[(i + 1) % n].0, &weak_views[(i + 1) % n].1)) } else { None };
        let (si, sg, rec) = strong(&weak_views[i].0, &weak_views[i].1, rng, aug, partner)?;
        out.push((weak_views[i].0.clone(), weak_views[i].1.clone(), si, sg, rec));
    }
    Ok(out)
}

/// One optimizer step. `semi` selects whether the unlabeled branch runs;
/// it is skipped as well when `lambda_u` is zero or there is no unlabeled data.
pub fn train_step(state: &mut TrainState, data: &DatasetSplit, s: &TrainSettings, semi: bool) -> Result<StepStats, TrainError> {
    let step = state.step;
    train_step_inner(state, data, s, semi).map_err(|e| TrainError::AtStep { step, source: Box::new(e) })
}

fn train_step_inner(state: &mut TrainState, data: &DatasetSplit, s: &TrainSettings, semi: bool) -> Result<StepStats, TrainError> {
    if data.labeled.is_empty() {
        return Err(TrainError::EmptyLabeled);
    }
    let t = state.step;
    let seed = s.seed;
    let losses = classification_losses();
    let sup_loss = losses.resolve(&s.loss.sup_cls_kind).map_err(|e| TrainError::Config(e.to_string()))?;
    let unsup_loss = losses.resolve(&s.loss.cls_kind).map_err(|e| TrainError::Config(e.to_string()))?;
    let (w, h) = (data.labeled[0].0.width, data.labeled[0].0.height);
    let anchor_boxes = anchors(&state.student.arch, w, h);
    let mut assign_rng = stream(&[seed, t, RNG_ASSIGN]);
    let mut batch = Vec::new();
    let mut stats = StepStats::default();

    // Labeled branch: weak and strong copy of each image, averaged.
    let nl = s.schedule.n_labeled_batch.min(data.labeled.len());
    let idx = pick(data.labeled.len(), nl, &mut stream(&[seed, t, RNG_LABELED_PICK]));
    let imgs: Vec<&Image> = idx.iter().map(|&i| &data.labeled[i].0).collect();
    let gts: Vec<GroundTruth> = idx.iter().map(|&i| data.labeled[i].1.clone()).collect();
    let mut rng = stream(&[seed, t, RNG_LABELED_AUG]);
    for (wi, wg, si, sg, _) in views(&imgs, &gts, &s.augment, &mut rng)? {
        for (img, gt) in [(wi, wg), (si, sg)] {
            let targets = assign(&anchor_boxes, &gt, &gt, w as f64, h as f64, &s.assign, &mut assign_rng, None);
            batch.push(TrainExample { image: img, targets, weight: 0.5 / nl as f64, cls_loss: sup_loss.clone(), use_reg: true });
        }
    }
    let n_sup = batch.len();

    // Unlabeled branch.
    let lambda_u = s.loss.lambda_u;
    if semi && lambda_u > 0.0 && !data.unlabeled.is_empty() && s.schedule.n_unlabeled_batch > 0 {
        let nu = s.schedule.n_unlabeled_batch.min(data.unlabeled.len());
        let idx = pick(data.unlabeled.len(), nu, &mut stream(&[seed, t, RNG_UNLABELED_PICK]));
        let mut aug_rng = stream(&[seed, t, RNG_UNLABELED_AUG]);
        let mut plg_rng = stream(&[seed, t, RNG_PLG]);
        let mut weak_views = Vec::with_capacity(nu);
        for &i in &idx {
            let audit = data.unlabeled_audit.get(i).cloned().unwrap_or_default();
            let (wi, wa, _) = weak(&data.unlabeled[i], &audit, &mut aug_rng)?;
            let tv = teacher_view(&wi, &state.teacher, &s.plg, &s.postprocess, &mut plg_rng)?;
            stats.n_cls_pseudo += tv.labels.cls_labels.len();
            stats.n_reg_pseudo += tv.labels.reg_labels.len();
            if !wa.is_empty() {
                stats.n_cls_correct += label_quality(&tv.labels.cls_labels, &wa).0;
                stats.reg_iou_sum += label_quality(&tv.labels.reg_labels, &wa).1;
            }
            weak_views.push((wi, tv));
        }
        let weighted = unsup_loss.reliability_weighted();
        for i in 0..nu {
            let (wi, tv) = &weak_views[i];
            let cls_gt = to_gt(&tv.labels.cls_labels);
            let reg_gt = to_gt(&tv.labels.reg_labels);
            let partner_idx = (i + 1) % nu;
            let partner_cls = to_gt(&weak_views[partner_idx].1.labels.cls_labels);
            let partner_reg = to_gt(&weak_views[partner_idx].1.labels.reg_labels);
            let partner = if s.augment.mixup { Some((&weak_views[partner_idx].0, &partner_cls)) } else { None };
            let (si, s_cls, rec) = strong(wi, &cls_gt, &mut aug_rng, &s.augment, partner)?;
            let s_reg = rec.map_boxes(&reg_gt, s.augment.mixup.then_some(&partner_reg), w as f64, h as f64)?;
            if s_cls.is_empty() && s_reg.is_empty() {
                // No pseudo labels: the image contributes nothing.
                batch.push(TrainExample {
                    image: si,
                    targets: Default::default(),
                    weight: 0.0,
                    cls_loss: unsup_loss.clone(),
                    use_reg: s.loss.use_reg_on_unlabeled,
                });
                continue;
            }
            let inv = rec.geometric_map.inverse()?;
            let bg = &tv.anchor_background;
            let arch = state.teacher.arch;
            let reliability = move |b: &BBox| {
                let (cx, cy) = b.center();
                let (x, y) = inv.apply(cx, cy);
                let stride = arch.stride() as f64;
                let (fw, fh) = (w / arch.stride(), h / arch.stride());
                let j = ((x / stride).floor().max(0.0) as usize).min(fw - 1);
                let i = ((y / stride).floor().max(0.0) as usize).min(fh - 1);
                bg[i * fw + j]
            };
            let targets = assign(
                &anchor_boxes,
                &s_cls,
                &s_reg,
                w as f64,
                h as f64,
                &s.assign,
                &mut assign_rng,
                if weighted { Some(&reliability) } else { None },
            );
            batch.push(TrainExample {
                image: si,
                targets,
                weight: lambda_u / nu as f64,
                cls_loss: unsup_loss.clone(),
                use_reg: s.loss.use_reg_on_unlabeled,
            });
        }
    }

    let cfg = GradConfig { lambda_r: s.loss.lambda_r, focal_gamma: s.loss.focal_gamma };
    let (_, grad, terms) = loss_and_grad_terms(&state.student, &batch, &cfg)?;
    for (ex, t) in batch[..n_sup].iter().zip(&terms) {
        stats.loss_sup += ex.weight * t.total(cfg.lambda_r);
    }
    let n_unsup = batch.len() - n_sup;
    if n_unsup > 0 {
        for t in &terms[n_sup..] {
            stats.loss_unsup_cls += t.cls / n_unsup as f64;
            stats.loss_unsup_reg += t.reg / n_unsup as f64;
        }
    }
    sgd_step(&mut state.student, &grad, &mut state.opt)?;
    if semi {
        let update = teacher_updates().resolve(&s.teacher.update).map_err(|e| TrainError::Config(e.to_string()))?;
        update.update(&mut state.teacher, &state.student, s.teacher.ema_alpha)?;
    }
    state.step += 1;
    Ok(stats)
}

pub fn burn_in(state: &mut TrainState, data: &DatasetSplit, steps: u64, s: &TrainSettings) -> Result<(), TrainError> {
    if data.labeled.is_empty() {
        return Err(TrainError::EmptyLabeled);
    }
    for _ in 0..steps {
        train_step(state, data, s, false)?;
    }
    state.teacher.clone_from(&state.student);
    Ok(())
}

/// One evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub phase: &'static str,
    pub report: EvalReport,
    pub loss_sup: f64,
    pub loss_unsup_cls: f64,
    pub loss_unsup_reg: f64,
    /// Mean pseudo-label counts per step since the previous record.
    pub n_cls_pseudo: f64,
    pub n_reg_pseudo: f64,
    pub cls_precision: Option<f64>,
    pub reg_mean_iou: Option<f64>,
}

impl MetricsRow {
    pub fn header(num_classes: usize) -> String {
        let mut h = String::from("step\tphase\tmap");
        for c in 1..=num_classes {
            h.push_str(&format!("\tap_class{c}"));
        }
        h.push_str("\tloss_sup\tloss_unsup_cls\tloss_unsup_reg\tn_cls_pseudo\tn_reg_pseudo\tcls_pseudo_precision\treg_pseudo_iou");
        h
    }

    pub fn line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}\t{:.3}\t{}\t{}",
            self.step,
            self.phase,
            self.report.row(),
            self.loss_sup,
            self.loss_unsup_cls,
            self.loss_unsup_reg,
            self.n_cls_pseudo,
            self.n_reg_pseudo,
            opt(self.cls_precision),
            opt(self.reg_mean_iou)
        )
    }
}

#[derive(Default)]
struct Accum {
    steps: usize,
    sum: StepStats,
}

impl Accum {
    fn add(&mut self, s: &StepStats) {
        self.steps += 1;
        self.sum.loss_sup += s.loss_sup;
        self.sum.loss_unsup_cls += s.loss_unsup_cls;
        self.sum.loss_unsup_reg += s.loss_unsup_reg;
        self.sum.n_cls_pseudo += s.n_cls_pseudo;
        self.sum.n_reg_pseudo += s.n_reg_pseudo;
        self.sum.n_cls_correct += s.n_cls_correct;
        self.sum.reg_iou_sum += s.reg_iou_sum;
    }

    fn row(&mut self, step: u64, phase: &'static str, report: EvalReport) -> MetricsRow {
        let n = self.steps.max(1) as f64;
        let s = &self.sum;
        let row = MetricsRow {
            step,
            phase,
            report,
            loss_sup: s.loss_sup / n,
            loss_unsup_cls: s.loss_unsup_cls / n,
            loss_unsup_reg: s.loss_unsup_reg / n,
            n_cls_pseudo: s.n_cls_pseudo as f64 / n,
            n_reg_pseudo: s.n_reg_pseudo as f64 / n,
            cls_precision: (s.n_cls_pseudo > 0).then(|| s.n_cls_correct as f64 / s.n_cls_pseudo as f64),
            reg_mean_iou: (s.n_reg_pseudo > 0).then(|| s.reg_iou_sum / s.n_reg_pseudo as f64),
        };
        *self = Accum::default();
        row
    }
}

pub struct TrainOutcome {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub log: Vec<MetricsRow>,
}

impl TrainOutcome {
    pub fn final_map(&self) -> f64 {
        self.log.last().map(|r| r.report.map).unwrap_or(0.0)
    }
}

fn eval_params<'a>(state: &'a TrainState, s: &TrainSettings) -> &'a ModelParams {
    match s.schedule.eval_model.as_str() {
        "teacher" => &state.teacher,
        "student" => &state.student,
        _ if s.teacher.update == "ema" => &state.teacher,
        _ => &state.student,
    }
}

fn test_split(data: &DatasetSplit) -> (Vec<Image>, Vec<GroundTruth>) {
    data.test.iter().cloned().unzip()
}

/// Burn-in (when configured), then the semi-supervised loop, with an
/// evaluation after burn-in, every `eval_interval` loop steps and at the end.
pub fn train(data: &DatasetSplit, s: &TrainSettings) -> Result<TrainOutcome, TrainError> {
    if data.labeled.is_empty() {
        return Err(TrainError::EmptyLabeled);
    }
    let (test_imgs, test_gts) = test_split(data);
    let mut state = TrainState::new(s);
    let mut log = Vec::new();
    let mut acc = Accum::default();
    let mut loop_steps = s.schedule.train_steps;
    if s.teacher.init == "burn_in" {
        for _ in 0..s.schedule.burn_in_steps {
            acc.add(&train_step(&mut state, data, s, false)?);
        }
        state.teacher.clone_from(&state.student);
    } else {
        loop_steps += s.schedule.burn_in_steps;
    }
    let report = evaluate(eval_params(&state, s), &test_imgs, &test_gts, &s.postprocess)?;
    log.push(acc.row(state.step, "burn_in", report));
    for k in 1..=loop_steps {
        acc.add(&train_step(&mut state, data, s, true)?);
        if k % s.schedule.eval_interval == 0 || k == loop_steps {
            let report = evaluate(eval_params(&state, s), &test_imgs, &test_gts, &s.postprocess)?;
            let row = acc.row(state.step, "train", report);
            log::info!("seed {} step {}: mAP {:.2}", s.seed, row.step, 100.0 * row.report.map);
            log.push(row);
        }
    }
    Ok(TrainOutcome { student: state.student, teacher: state.teacher, log })
}

/// Pseudo-label quality of one teacher over the unlabeled split (weak view = identity).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditSummary {
    pub n_candidates: usize,
    pub candidate_precision: f64,
    pub n_cls: usize,
    pub cls_precision: f64,
    pub n_score_reg: usize,
    pub score_reg_iou: f64,
    pub n_double_reg: usize,
    pub double_reg_iou: f64,
}

/// Pseudo-label quality on the unlabeled split against its hidden ground
/// truth, plus the per-image label sets of the configured strategy.
pub fn audit_pseudo(
    teacher: &ModelParams,
    data: &DatasetSplit,
    plg: &PlgConfig,
    post: &PostProcess,
    seed: u64,
) -> Result<(AuditSummary, Vec<(usize, PseudoLabelSet)>), TrainError> {
    let score = PlgConfig { strategy: "score".into(), ..plg.clone() };
    let double = PlgConfig { strategy: "double".into(), ..plg.clone() };
    let mut a = AuditSummary {
        n_candidates: 0,
        candidate_precision: 0.0,
        n_cls: 0,
        cls_precision: 0.0,
        n_score_reg: 0,
        score_reg_iou: 0.0,
        n_double_reg: 0,
        double_reg_iou: 0.0,
    };
    let (mut cand_ok, mut cls_ok, mut s_iou, mut d_iou) = (0usize, 0usize, 0.0, 0.0);
    let mut sets = Vec::with_capacity(data.unlabeled.len());
    for (i, (img, gt)) in data.unlabeled.iter().zip(&data.unlabeled_audit).enumerate() {
        let mut rng = stream(&[seed, i as u64, RNG_PLG]);
        let sv = teacher_view(img, teacher, &score, post, &mut rng)?;
        let dv = teacher_view(img, teacher, &double, post, &mut rng)?;
        let cands: Vec<PseudoLabel> = sv
            .candidates
            .iter()
            .map(|d| PseudoLabel { class_id: d.class_id(), bbox: d.bbox, score: d.foreground_score, variance: None })
            .collect();
        a.n_candidates += cands.len();
        cand_ok += label_quality(&cands, gt).0;
        a.n_cls += sv.labels.cls_labels.len();
        cls_ok += label_quality(&sv.labels.cls_labels, gt).0;
        a.n_score_reg += sv.labels.reg_labels.len();
        s_iou += label_quality(&sv.labels.reg_labels, gt).1;
        a.n_double_reg += dv.labels.reg_labels.len();
        d_iou += label_quality(&dv.labels.reg_labels, gt).1;
        sets.push((i, if plg.strategy == "double" { dv.labels } else { sv.labels }));
    }
    let ratio = |x: f64, n: usize| if n > 0 { x / n as f64 } else { 0.0 };
    a.candidate_precision = ratio(cand_ok as f64, a.n_candidates);
    a.cls_precision = ratio(cls_ok as f64, a.n_cls);
    a.score_reg_iou = ratio(s_iou, a.n_score_reg);
    a.double_reg_iou = ratio(d_iou, a.n_double_reg);
    Ok((a, sets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{make_dataset, SceneConfig};

    fn settings() -> TrainSettings {
        TrainSettings {
            seed: 11,
            num_classes: 4,
            augment: StrongAugConfig::default(),
            plg: PlgConfig::default(),
            loss: LossConfig::default(),
            teacher: TeacherConfig::default(),
            optim: OptimConfig::default(),
            schedule: ScheduleConfig { burn_in_steps: 2, train_steps: 2, eval_interval: 1, ..Default::default() },
            assign: AssignConfig::default(),
            postprocess: PostProcess::default(),
        }
    }

    fn p(v: Vec<f64>) -> ModelParams {
        ModelParams { arch: Arch::new(2), values: v }
    }

    #[test]
    fn ema_fixtures() {
        let t = p(vec![1.0, -2.0]);
        let s = p(vec![0.0, 4.0]);
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t);
        assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s);
        assert_eq!(ema_update(&p(vec![1.0]), &p(vec![0.0]), 0.9).unwrap().values, vec![0.9]);
        assert!(matches!(ema_update(&t, &p(vec![0.0]), 0.5), Err(TrainError::Length(..))));
    }

    #[test]
    fn sgd_fixtures() {
        let cfg = OptimConfig { base_lr: 0.1, warmup_steps: 10, momentum: 0.0, weight_decay: 0.0 };
        assert_eq!(cfg.lr(4), 0.05);
        let mut params = p(vec![1.0, 2.0]);
        let mut opt = OptimState { step: 20, ..OptimState::new(2, cfg) };
        sgd_step(&mut params, &[1.0, -1.0], &mut opt).unwrap();
        assert_eq!(params.values, vec![1.0 - 0.1, 2.0 + 0.1]);
        assert_eq!(opt.step, 21);
        assert!(matches!(sgd_step(&mut params, &[f64::NAN, 0.0], &mut opt), Err(TrainError::NonFiniteGrad)));
    }

    #[test]
    fn momentum_decays_geometrically_under_zero_grad() {
        let cfg = OptimConfig { base_lr: 0.1, warmup_steps: 0, momentum: 0.9, weight_decay: 0.0 };
        let mut params = p(vec![0.0]);
        let mut opt = OptimState::new(1, cfg);
        sgd_step(&mut params, &[1.0], &mut opt).unwrap();
        let mut last = params.values[0];
        for k in 1..200 {
            let v_before = opt.velocity[0];
            sgd_step(&mut params, &[0.0], &mut opt).unwrap();
            assert!((opt.velocity[0] - 0.9 * v_before).abs() < 1e-15);
            assert!((params.values[0] - last).abs() <= 0.1 * 0.9f64.powi(k) + 1e-15);
            last = params.values[0];
        }
        // Limit of p = -lr * sum 0.9^k = -lr / (1 - 0.9).
        assert!((params.values[0] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn teacher_strategies() {
        let s = p(vec![3.0]);
        let mut t = p(vec![1.0]);
        Frozen.update(&mut t, &s, 0.5).unwrap();
        assert_eq!(t.values, vec![1.0]);
        SharedBp.update(&mut t, &s, 0.5).unwrap();
        assert_eq!(t.values, vec![3.0]);
        let mut t = p(vec![1.0]);
        Ema.update(&mut t, &s, 0.5).unwrap();
        assert_eq!(t.values, vec![2.0]);
        assert_eq!(teacher_updates().names(), vec!["ema", "frozen", "shared_bp"]);
    }

    #[test]
    fn zero_burn_in_keeps_initialization() {
        let data = make_dataset(1, 4, 4, 2, &SceneConfig::default()).unwrap();
        let s = settings();
        let mut state = TrainState::new(&s);
        let init = state.student.clone();
        burn_in(&mut state, &data, 0, &s).unwrap();
        assert_eq!(state.student, init);
        assert_eq!(state.teacher, init);
        assert!(burn_in(&mut state, &DatasetSplit::default(), 1, &s).is_err());
    }

    #[test]
    fn zero_train_steps_gives_one_record() {
        let data = make_dataset(1, 4, 4, 2, &SceneConfig::default()).unwrap();
        let mut s = settings();
        s.schedule.train_steps = 0;
        let out = train(&data, &s).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.log[0].step, 2);
        assert_eq!(out.student, out.teacher);
    }

    #[test]
    fn alpha_one_freezes_teacher_and_student_moves() {
        let data = make_dataset(2, 4, 4, 2, &SceneConfig::default()).unwrap();
        let mut s = settings();
        s.teacher.ema_alpha = 1.0;
        let mut state = TrainState::new(&s);
        burn_in(&mut state, &data, 1, &s).unwrap();
        let t0 = state.teacher.clone();
        let s0 = state.student.clone();
        for _ in 0..3 {
            train_step(&mut state, &data, &s, true).unwrap();
        }
        assert_eq!(state.teacher, t0);
        assert_ne!(state.student, s0);
    }
}
