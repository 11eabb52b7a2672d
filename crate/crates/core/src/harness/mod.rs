//! Experiment orchestration over (objective × transform × task × seed) grids.
//!
//! Layout under `output_dir`:
//! `data/<transform>/` (see [`data`]), `runs/<transform>/<objective>/seed<k>/`
//! holding the pre-trained checkpoint, trajectory, tuned models and result
//! rows, and `report/` with the files of [`report::REPORT_FILES`]. Every file
//! is written whole through a rename, and finished stages are skipped on
//! re-runs, so an interrupted grid can simply be started again.

pub mod config;
pub mod data;
pub mod pretrain;
pub mod report;
pub mod transfer;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

pub use config::{DataConfig, ExperimentConfig, OneOrMany};
pub use data::{gen_data, load_bundle, DataBundle, GenOutcome, Manifest};
pub use pretrain::{objective_label, pretrain, run_dir, PretrainOutcome, TrajectoryPoint};
pub use report::{read_rows, write_report, CellMean, Correlation, Report, ReportRow};
pub use transfer::{eval_run, finetune_run};

use crate::error::{Error, Result};

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(path, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Tokenizer only, written into each transform's data directory.
pub fn cmd_train_bpe(cfg: &ExperimentConfig) -> Result<()> {
    for spec in cfg.transforms() {
        let dir = data::data_dir(cfg, &spec);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (_, _, _, bpe) = data::train_tokenizer(cfg, &spec)?;
        bpe.write(&dir.join("bpe.merges"), &dir.join("bpe.vocab"))?;
        log::info!("{}: {} tokens", dir.display(), bpe.vocab_size());
    }
    Ok(())
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<Vec<GenOutcome>> {
    cfg.transforms().iter().map(|s| gen_data(cfg, s)).collect()
}

/// Calls `f` for every run of the grid with the transform's data loaded.
fn for_each_run(cfg: &ExperimentConfig, mut f: impl FnMut(&DataBundle, &crate::objectives::ObjectiveSpec, u64, &Path) -> Result<()>) -> Result<()> {
    for spec in cfg.transforms() {
        gen_data(cfg, &spec)?;
        let bundle = load_bundle(cfg, &spec)?;
        for objective in cfg.objectives() {
            for &seed in &cfg.seeds {
                let dir = run_dir(cfg, &spec, &objective, seed);
                f(&bundle, &objective, seed, &dir)?;
            }
        }
    }
    Ok(())
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    for_each_run(cfg, |bundle, objective, seed, dir| pretrain(cfg, bundle, objective, seed, Some(dir)).map(|_| ()))
}

pub fn cmd_finetune(cfg: &ExperimentConfig) -> Result<()> {
    for_each_run(cfg, |bundle, _, seed, dir| finetune_run(cfg, bundle, dir, seed))
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for_each_run(cfg, |bundle, objective, seed, dir| {
        rows.extend(eval_run(cfg, bundle, dir, objective, seed)?);
        Ok(())
    })?;
    Ok(rows)
}

/// Result rows of every run in the grid, in grid order. Runs without rows
/// are an error unless their (objective, transform) cell is in `absent`.
pub fn collect_rows(cfg: &ExperimentConfig, absent: &BTreeSet<(String, String)>) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for spec in cfg.transforms() {
        for objective in cfg.objectives() {
            let cell = (objective_label(&objective), spec.to_string());
            if absent.contains(&cell) {
                continue;
            }
            for &seed in &cfg.seeds {
                let dir = run_dir(cfg, &spec, &objective, seed);
                match transfer::run_rows(&dir)? {
                    Some(r) => rows.extend(r),
                    None => {
                        return Err(Error::Config(format!("{} has no results; run eval first or mark the cell absent", dir.display())))
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn cmd_report(cfg: &ExperimentConfig, absent: &BTreeSet<(String, String)>) -> Result<Report> {
    let rows = collect_rows(cfg, absent)?;
    write_report(&rows, absent, &cfg.output_dir.join("report"))
}

/// The whole grid, skipping every stage whose output already exists.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<Report> {
    for_each_run(cfg, |bundle, objective, seed, dir| {
        if transfer::run_rows(dir)?.is_some() {
            return Ok(());
        }
        pretrain(cfg, bundle, objective, seed, Some(dir))?;
        finetune_run(cfg, bundle, dir, seed)?;
        eval_run(cfg, bundle, dir, objective, seed)?;
        Ok(())
    })?;
    cmd_report(cfg, &BTreeSet::new())
}
