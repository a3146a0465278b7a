//! Experiment configuration, named presets and the multi-seed runner.
//!
//! A config file is TOML. Only `preset` is required; every other key
//! overrides the preset's value at the same path:
//!
//! ```toml
//! preset = "ubt"
//! seeds = [1, 2, 3]
//!
//! [loss]
//! lambda_u = 1.0
//!
//! [schedule]
//! train_steps = 600
//! ```
//!
//! Sections: `dataset` (with nested `dataset.scene`), `augment`, `plg`,
//! `loss`, `teacher`, `optim`, `schedule`, `assign`, `postprocess`.
//! Unknown keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::AssignConfig;
use crate::augment::StrongAugConfig;
use crate::detector::{DetectorError, PostProcess};
use crate::eval::{ap_table_header, EvalReport};
use crate::losses::LossConfig;
use crate::plg::PlgConfig;
use crate::synthdata::{load_dataset, make_dataset, DataError, DatasetSplit, SceneConfig};
use crate::teacher_student::{train, MetricsRow, OptimConfig, ScheduleConfig, TeacherConfig, TrainError, TrainSettings};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown preset '{0}' (known: {known})", known = preset_names().join(", "))]
    UnknownPreset(String),
    #[error("preset '{0}' needs machinery outside this lab and cannot be run")]
    Unsupported(String),
    #[error("run directory {0} already exists (pass --overwrite to replace it)")]
    RunDirExists(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("all seeds failed: {0}")]
    AllSeedsFailed(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl ExperimentError {
    /// Process exit code by failure category: 2 config, 3 io, 4 training,
    /// 5 unsupported preset.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Parse { .. } | Self::Invalid(_) | Self::UnknownPreset(_) => 2,
            Self::Data(DataError::Config(_)) => 2,
            Self::RunDirExists(_) | Self::Io { .. } | Self::Data(_) => 3,
            Self::Detector(DetectorError::Io { .. } | DetectorError::Checkpoint { .. }) => 3,
            Self::Detector(_) | Self::AllSeedsFailed(_) | Self::Train(_) => 4,
            Self::Unsupported(_) => 5,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    /// Load a dumped dataset from this directory instead of generating one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { seed: 7, n_labeled: 60, n_unlabeled: 1200, n_test: 200, path: None, scene: SceneConfig::default() }
    }
}

impl DatasetConfig {
    pub fn build(&self) -> Result<DatasetSplit, DataError> {
        match &self.path {
            Some(p) => load_dataset(Path::new(p)),
            None => make_dataset(self.seed, self.n_labeled, self.n_unlabeled, self.n_test, &self.scene),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub augment: StrongAugConfig,
    pub plg: PlgConfig,
    pub loss: LossConfig,
    pub teacher: TeacherConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub assign: AssignConfig,
    pub postprocess: PostProcess,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: "custom".into(),
            seeds: vec![1, 2, 3],
            dataset: DatasetConfig::default(),
            augment: StrongAugConfig::default(),
            plg: PlgConfig { theta: 0.8, ..PlgConfig::default() },
            loss: LossConfig { lambda_u: 1.0, ..LossConfig::default() },
            teacher: TeacherConfig::default(),
            optim: desk_optim(),
            schedule: desk_schedule(),
            assign: AssignConfig::default(),
            postprocess: PostProcess::default(),
        }
    }
}

/// Optimizer used by every preset at desk scale.
fn desk_optim() -> OptimConfig {
    OptimConfig { base_lr: 0.02, ..OptimConfig::default() }
}

fn desk_schedule() -> ScheduleConfig {
    ScheduleConfig { burn_in_steps: 900, train_steps: 1500, eval_interval: 300, ..ScheduleConfig::default() }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let inv = ExperimentError::Invalid;
        if self.seeds.is_empty() {
            return Err(inv("seeds: at least one seed is required".into()));
        }
        self.dataset.scene.validate().map_err(|e| inv(format!("dataset.scene: {e}")))?;
        if self.dataset.path.is_none() && self.dataset.n_labeled == 0 {
            return Err(inv("dataset.n_labeled: must be positive".into()));
        }
        self.augment.validate().map_err(|e| inv(format!("augment: {e}")))?;
        self.plg.validate().map_err(|e| inv(e.to_string()))?;
        self.loss.validate().map_err(inv)?;
        self.teacher.validate().map_err(inv)?;
        self.optim.validate().map_err(inv)?;
        self.schedule.validate().map_err(inv)?;
        self.assign.validate().map_err(inv)?;
        self.postprocess.validate().map_err(inv)?;
        Ok(())
    }

    pub fn settings(&self, seed: u64) -> TrainSettings {
        TrainSettings {
            seed,
            num_classes: self.dataset.scene.num_classes,
            augment: self.augment.clone(),
            plg: self.plg.clone(),
            loss: self.loss.clone(),
            teacher: self.teacher.clone(),
            optim: self.optim.clone(),
            schedule: self.schedule.clone(),
            assign: self.assign.clone(),
            postprocess: self.postprocess.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Feature combination of one preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PresetDef {
    pub name: &'static str,
    /// Row label in comparison tables.
    pub label: &'static str,
    pub color: bool,
    pub cutout: bool,
    pub mixup: bool,
    pub geo: bool,
    /// `None` for supervised-only presets.
    pub plg: Option<&'static str>,
    pub unsup_cls: Option<&'static str>,
    pub unsup_reg: bool,
    pub init: &'static str,
    pub update: &'static str,
    pub supported: bool,
}

const fn ssod(
    name: &'static str,
    label: &'static str,
    aug: (bool, bool, bool, bool),
    plg: &'static str,
    cls: &'static str,
    reg: bool,
    init: &'static str,
    update: &'static str,
) -> PresetDef {
    PresetDef {
        name,
        label,
        color: aug.0,
        cutout: aug.1,
        mixup: aug.2,
        geo: aug.3,
        plg: Some(plg),
        unsup_cls: Some(cls),
        unsup_reg: reg,
        init,
        update,
        supported: true,
    }
}

// (color, cutout, mixup, geo)
const CC: (bool, bool, bool, bool) = (true, true, false, false);

pub const PRESETS: &[PresetDef] = &[
    PresetDef {
        name: "supervised",
        label: "Supervised(aug)",
        color: true,
        cutout: true,
        mixup: false,
        geo: false,
        plg: None,
        unsup_cls: None,
        unsup_reg: false,
        init: "burn_in",
        update: "frozen",
        supported: true,
    },
    PresetDef {
        name: "supervised-plain",
        label: "Supervised",
        color: false,
        cutout: false,
        mixup: false,
        geo: false,
        plg: None,
        unsup_cls: None,
        unsup_reg: false,
        init: "burn_in",
        update: "frozen",
        supported: true,
    },
    ssod("softt", "SoftT", (true, true, false, true), "double", "wce", true, "random", "ema"),
    ssod("ubt", "UbT", CC, "score", "focal", false, "burn_in", "ema"),
    ssod("ubt-cutout-to-mixup", "UbT (Cutout->Mixup)", (true, false, true, false), "score", "focal", false, "burn_in", "ema"),
    ssod("ubt-fl-to-wce", "UbT (FL->WCE)", CC, "score", "wce", false, "burn_in", "ema"),
    ssod("ubt-with-ureg", "UbT w/ l_u,reg", CC, "score", "focal", true, "burn_in", "ema"),
    ssod("ubt-no-cutout", "UbT w/o Cutout", (true, false, false, false), "score", "focal", false, "burn_in", "ema"),
    ssod("ubt-fl-to-ce", "UbT (FL->CE)", CC, "score", "ce", false, "burn_in", "ema"),
    ssod("softt-no-geo", "SoftT w/o Geo", CC, "double", "wce", true, "random", "ema"),
    ssod("ubt-plus", "UbT+", CC, "double", "focal", true, "burn_in", "ema"),
    PresetDef {
        supported: false,
        ..ssod("stac", "STAC", (true, true, false, true), "score", "ce", true, "burn_in", "frozen")
    },
    PresetDef {
        supported: false,
        ..ssod("inst", "InsT", (true, true, true, false), "score", "ce", true, "random", "shared_bp")
    },
];

/// The ten presets of the comparison grid, in table order.
pub const GRID: [&str; 10] = [
    "supervised",
    "softt",
    "ubt",
    "ubt-cutout-to-mixup",
    "ubt-fl-to-wce",
    "ubt-with-ureg",
    "ubt-no-cutout",
    "ubt-fl-to-ce",
    "softt-no-geo",
    "ubt-plus",
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.name).collect()
}

pub fn preset_def(name: &str) -> Result<&'static PresetDef, ExperimentError> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| ExperimentError::UnknownPreset(name.into()))
}

/// Fully-defaulted config of a preset.
pub fn preset(name: &str) -> Result<ExperimentConfig, ExperimentError> {
    let p = preset_def(name)?;
    let mut cfg = ExperimentConfig { preset: name.into(), ..Default::default() };
    cfg.augment.color = p.color;
    cfg.augment.cutout = p.cutout;
    cfg.augment.mixup = p.mixup;
    cfg.augment.geo = p.geo;
    cfg.teacher.init = p.init.into();
    cfg.teacher.update = p.update.into();
    match (p.plg, p.unsup_cls) {
        (Some(plg), Some(cls)) => {
            cfg.plg.strategy = plg.into();
            cfg.loss.cls_kind = cls.into();
        }
        _ => cfg.loss.lambda_u = 0.0,
    }
    cfg.loss.use_reg_on_unlabeled = p.unsup_reg;
    Ok(cfg)
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse config text: preset defaults, then the file's overrides, then validation.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig, ExperimentError> {
    config_from_table(parse_table(text, origin)?, origin)
}

pub fn parse_table(text: &str, origin: &str) -> Result<toml::Table, ExperimentError> {
    toml::from_str(text).map_err(|e| ExperimentError::Parse { path: origin.into(), msg: e.to_string() })
}

pub fn read_table(path: &Path) -> Result<toml::Table, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_table(&text, &path.display().to_string())
}

pub fn config_from_table(user: toml::Table, origin: &str) -> Result<ExperimentConfig, ExperimentError> {
    let parse_err = |msg: String| ExperimentError::Parse { path: origin.into(), msg };
    let name = match user.get("preset") {
        Some(toml::Value::String(s)) => s.clone(),
        Some(_) => return Err(parse_err("preset: must be a string".into())),
        None => return Err(parse_err("preset: missing (name a preset, or \"custom\")".into())),
    };
    let base = if name == "custom" { ExperimentConfig::default() } else { preset(&name)? };
    let mut merged = toml::Value::try_from(&base).expect("config serializes");
    merge(&mut merged, toml::Value::Table(user));
    let cfg: ExperimentConfig = merged.try_into().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    config_from_table(read_table(path)?, &path.display().to_string())
}

/// Final result of one seed.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub outcome: Result<EvalReport, String>,
    pub log: Vec<MetricsRow>,
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub preset: String,
    pub label: String,
    pub seeds: Vec<SeedResult>,
    /// Index into `seeds` of the best final mAP.
    pub best: usize,
}

impl ExperimentSummary {
    pub fn best_report(&self) -> &EvalReport {
        self.seeds[self.best].outcome.as_ref().expect("best seed succeeded")
    }
}

fn prepare_dir(dir: &Path, overwrite: bool) -> Result<(), ExperimentError> {
    if dir.exists() {
        if !overwrite {
            return Err(ExperimentError::RunDirExists(dir.display().to_string()));
        }
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write(path: &Path, text: &str) -> Result<(), ExperimentError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Train once per seed, best-of-seeds summary. With `out` set, writes
/// `effective_config.toml`, `seed-<s>/{metrics.tsv,student.ckpt,teacher.ckpt}`,
/// `summary.tsv` and `ap_table.tsv`.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>, overwrite: bool) -> Result<ExperimentSummary, ExperimentError> {
    cfg.validate()?;
    let label = match preset_def(&cfg.preset) {
        Ok(p) if !p.supported => return Err(ExperimentError::Unsupported(p.name.into())),
        Ok(p) => p.label.to_string(),
        Err(_) => cfg.preset.clone(),
    };
    if let Some(dir) = out {
        prepare_dir(dir, overwrite)?;
        write(&dir.join("effective_config.toml"), &cfg.to_toml())?;
    }
    let data = cfg.dataset.build()?;
    let num_classes = cfg.dataset.scene.num_classes;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        log::info!("preset {} seed {seed}: training", cfg.preset);
        let result = train(&data, &cfg.settings(seed));
        let seed_dir = out.map(|d| d.join(format!("seed-{seed}")));
        if let Some(sd) = &seed_dir {
            fs::create_dir_all(sd).map_err(io_err(sd))?;
        }
        match result {
            Ok(outcome) => {
                if let Some(sd) = &seed_dir {
                    let mut text = MetricsRow::header(num_classes);
                    text.push('\n');
                    for row in &outcome.log {
                        text.push_str(&row.line());
                        text.push('\n');
                    }
                    write(&sd.join("metrics.tsv"), &text)?;
                    outcome.student.save(&sd.join("student.ckpt"))?;
                    outcome.teacher.save(&sd.join("teacher.ckpt"))?;
                }
                let report = outcome.log.last().expect("train logs at least one record").report.clone();
                seeds.push(SeedResult { seed, outcome: Ok(report), log: outcome.log });
            }
            Err(e) => {
                log::error!("preset {} seed {seed} failed: {e}", cfg.preset);
                if let Some(sd) = &seed_dir {
                    write(&sd.join("error.txt"), &format!("{e}\n"))?;
                }
                seeds.push(SeedResult { seed, outcome: Err(e.to_string()), log: Vec::new() });
            }
        }
    }
    let best = seeds
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.outcome.as_ref().ok().map(|r| (i, r.map)))
        .fold(None, |acc: Option<(usize, f64)>, (i, m)| match acc {
            Some((_, bm)) if bm >= m => acc,
            _ => Some((i, m)),
        })
        .map(|(i, _)| i);
    let Some(best) = best else {
        let msgs: Vec<String> = seeds.iter().filter_map(|s| s.outcome.as_ref().err().cloned()).collect();
        return Err(ExperimentError::AllSeedsFailed(msgs.join("; ")));
    };
    let summary = ExperimentSummary { preset: cfg.preset.clone(), label, seeds, best };
    if let Some(dir) = out {
        write(&dir.join("summary.tsv"), &summary_table(&summary, num_classes))?;
        write(&dir.join("ap_table.tsv"), &ap_table(std::slice::from_ref(&summary), num_classes))?;
    }
    Ok(summary)
}

/// One row per seed, then the best seed.
pub fn summary_table(s: &ExperimentSummary, num_classes: usize) -> String {
    let mut out = String::from("seed\tstatus\t");
    out.push_str(&ap_table_header(num_classes).replacen("name\t", "", 1));
    out.push('\n');
    for r in &s.seeds {
        match &r.outcome {
            Ok(rep) => {
                let _ = writeln!(out, "{}\tok\t{}", r.seed, rep.row());
            }
            Err(e) => {
                let _ = writeln!(out, "{}\tfailed: {}\t", r.seed, e.replace(['\t', '\n'], " "));
            }
        }
    }
    let _ = writeln!(out, "best={}\tok\t{}", s.seeds[s.best].seed, s.best_report().row());
    out
}

/// Comparison table: one row per experiment with its best seed.
pub fn ap_table(rows: &[ExperimentSummary], num_classes: usize) -> String {
    let mut out = ap_table_header(num_classes);
    out.push('\n');
    for s in rows {
        let _ = writeln!(out, "{}\t{}", s.label, s.best_report().row());
    }
    out
}

/// Run several presets with shared overrides applied to each. A `preset`
/// key in `overrides` is ignored.
pub fn run_grid(
    names: &[&str],
    overrides: &toml::Table,
    out: Option<&Path>,
    overwrite: bool,
) -> Result<(Vec<ExperimentSummary>, String), ExperimentError> {
    for n in names {
        if !preset_def(n)?.supported {
            return Err(ExperimentError::Unsupported((*n).into()));
        }
    }
    if let Some(dir) = out {
        if dir.exists() && !overwrite {
            return Err(ExperimentError::RunDirExists(dir.display().to_string()));
        }
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut rows = Vec::with_capacity(names.len());
    let mut num_classes = SceneConfig::default().num_classes;
    for n in names {
        let mut t = overrides.clone();
        t.insert("preset".into(), toml::Value::String((*n).into()));
        let cfg = config_from_table(t, "grid")?;
        num_classes = cfg.dataset.scene.num_classes;
        let sub: Option<PathBuf> = out.map(|d| d.join(n));
        rows.push(run_experiment(&cfg, sub.as_deref(), overwrite)?);
    }
    let table = ap_table(&rows, num_classes);
    if let Some(dir) = out {
        write(&dir.join("grid.tsv"), &table)?;
    }
    Ok((rows, table))
}
