//! `ssod` command line: dataset generation, training runs, preset grids,
//! checkpoint evaluation and pseudo-label audits.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssod::detector::ModelParams;
use ssod::eval::{ap_table_header, evaluate};
use ssod::experiment::{self, config_from_table, load_config, preset, read_table, run_experiment, run_grid, ExperimentConfig, ExperimentError, GRID};
use ssod::plg::write_audit;
use ssod::synthdata::dump_dataset;
use ssod::teacher_student::{audit_pseudo, burn_in, TrainState};

#[derive(Parser)]
#[command(name = "ssod", version, about = "Semi-supervised lesion detection lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset name; overrides the config's preset when both are given.
    #[arg(long)]
    preset: Option<String>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path. Defaults to a directory under $SSOD_OUT_ROOT (or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the configured dataset splits as PGM images plus box files.
    GenData(Common),
    /// Train every configured seed and write logs, checkpoints and a summary.
    Train(Common),
    /// Run several presets and write a comparison table.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Comma-separated preset names (default: the ten-row comparison grid).
        #[arg(long, value_delimiter = ',')]
        presets: Vec<String>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score pseudo labels on the unlabeled split against hidden ground truth.
    AuditPseudo {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint; without one, a fresh model is burned in first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// List presets.
    Presets,
}

fn out_root() -> PathBuf {
    std::env::var_os("SSOD_OUT_ROOT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn resolve(c: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(path), None) => load_config(path)?,
        (Some(path), Some(name)) => {
            let mut t = read_table(path)?;
            t.insert("preset".into(), toml::Value::String(name.clone()));
            config_from_table(t, &path.display().to_string())?
        }
        (None, Some(name)) => preset(name)?,
        (None, None) => preset("ubt")?,
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common, default: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| out_root().join(default))
}

fn ensure_fresh(path: &Path, overwrite: bool) -> Result<(), ExperimentError> {
    if path.exists() && !overwrite {
        return Err(ExperimentError::RunDirExists(path.display().to_string()));
    }
    Ok(())
}

fn run(cmd: Cmd) -> Result<(), ExperimentError> {
    match cmd {
        Cmd::GenData(c) => {
            let cfg = resolve(&c)?;
            let dir = out_dir(&c, "dataset");
            ensure_fresh(&dir, c.overwrite)?;
            let data = cfg.dataset.build()?;
            dump_dataset(&dir, &data)?;
            println!("wrote {} labeled, {} unlabeled, {} test scenes to {}", data.labeled.len(), data.unlabeled.len(), data.test.len(), dir.display());
        }
        Cmd::Train(c) => {
            let cfg = resolve(&c)?;
            let dir = out_dir(&c, &cfg.preset);
            let summary = run_experiment(&cfg, Some(&dir), c.overwrite)?;
            print!("{}", experiment::summary_table(&summary, cfg.dataset.scene.num_classes));
            println!("run directory: {}", dir.display());
        }
        Cmd::Grid { common, presets } => {
            let names: Vec<String> = if presets.is_empty() { GRID.iter().map(|s| s.to_string()).collect() } else { presets };
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let mut overrides = match &common.config {
                Some(p) => read_table(p)?,
                None => toml::Table::new(),
            };
            if let Some(s) = common.seed {
                overrides.insert("seeds".into(), toml::Value::Array(vec![toml::Value::Integer(s as i64)]));
            }
            let dir = out_dir(&common, "grid");
            let (_, table) = run_grid(&names, &overrides, Some(&dir), common.overwrite)?;
            print!("{table}");
        }
        Cmd::Eval { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let params = ModelParams::load(&checkpoint)?;
            let data = cfg.dataset.build()?;
            let (imgs, gts): (Vec<_>, Vec<_>) = data.test.into_iter().unzip();
            let report = evaluate(&params, &imgs, &gts, &cfg.postprocess)?;
            println!("{}", ap_table_header(params.arch.num_classes));
            println!("{}\t{}", checkpoint.display(), report.row());
        }
        Cmd::AuditPseudo { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let seed = cfg.seeds[0];
            let data = cfg.dataset.build()?;
            let teacher = match checkpoint {
                Some(p) => ModelParams::load(&p)?,
                None => {
                    let settings = cfg.settings(seed);
                    let mut state = TrainState::new(&settings);
                    burn_in(&mut state, &data, settings.schedule.burn_in_steps, &settings)?;
                    state.student
                }
            };
            let (summary, sets) = audit_pseudo(&teacher, &data, &cfg.plg, &cfg.postprocess, seed)?;
            let path = out_dir(&common, "audit.tsv");
            ensure_fresh(&path, common.overwrite)?;
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|source| ExperimentError::Io { path: parent.display().to_string(), source })?;
            }
            write_audit(&path, &sets).map_err(|e| ExperimentError::Io { path: path.display().to_string(), source: std::io::Error::other(e.to_string()) })?;
            println!("candidates\t{}\tprecision\t{:.4}", summary.n_candidates, summary.candidate_precision);
            println!("score_filtered\t{}\tprecision\t{:.4}", summary.n_cls, summary.cls_precision);
            println!("score_reg\t{}\tmean_iou\t{:.4}", summary.n_score_reg, summary.score_reg_iou);
            println!("double_reg\t{}\tmean_iou\t{:.4}", summary.n_double_reg, summary.double_reg_iou);
            println!("labels written to {}", path.display());
        }
        Cmd::Presets => {
            for p in experiment::PRESETS {
                let note = if p.supported { "" } else { "\t(unsupported)" };
                println!("{}\t{}{note}", p.name, p.label);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
