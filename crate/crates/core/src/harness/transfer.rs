//! B_S and B_Z for one pre-trained model: fine-tune on derived and on
//! original task data, then test both on the derived test split.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::data::DataBundle;
use super::pretrain::{alignment_of, objective_label, CHECKPOINT};
use super::report::{read_rows, rows_csv, ReportRow};
use super::write_atomic;
use crate::corpus::Language;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, ModelState};
use crate::objectives::ObjectiveSpec;
use crate::rng::derive_seed;
use crate::tasks::{evaluate, finetune, FinetuneConfig, Task};

pub const ROWS: &str = "rows.csv";

pub fn finetuned_path(run: &Path, task: Task, train_lang: Language) -> PathBuf {
    let l = if train_lang == Language::Original { "original" } else { "derived" };
    run.join(format!("finetuned.{}.{l}.ckpt", task.name().to_lowercase()))
}

pub fn finetune_config(cfg: &ExperimentConfig, seed: u64) -> FinetuneConfig {
    FinetuneConfig {
        seed: derive_seed(cfg.finetune.seed, seed),
        ..cfg.finetune.clone()
    }
}

pub fn load_pretrained(run: &Path, total_steps: u64) -> Result<ModelState> {
    let (state, _) = load_checkpoint(&run.join(CHECKPOINT))?;
    if state.step() < total_steps {
        return Err(Error::Checkpoint(format!(
            "{} stopped at step {} of {total_steps}; finish pre-training first",
            run.display(),
            state.step()
        )));
    }
    Ok(state)
}

/// Fine-tunes the pre-trained model of `run` on each task in both
/// languages and saves the tuned models next to it. Existing ones are kept.
pub fn finetune_run(cfg: &ExperimentConfig, bundle: &DataBundle, run: &Path, seed: u64) -> Result<()> {
    let pretrained = load_pretrained(run, cfg.train.total_steps)?;
    let ft = finetune_config(cfg, seed);
    for &task in &cfg.tasks {
        let (orig, der) = bundle.task(task)?;
        for (train, lang) in [(der, Language::Derived), (orig, Language::Original)] {
            let path = finetuned_path(run, task, lang);
            if path.exists() {
                continue;
            }
            let tuned = finetune(&pretrained, &bundle.bpe, train, &ft)?;
            let tmp = path.with_extension("tmp");
            save_checkpoint(&tmp, &tuned, None)?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// Scores the tuned models of `run` on the derived test split and writes its
/// result rows.
pub fn eval_run(cfg: &ExperimentConfig, bundle: &DataBundle, run: &Path, objective: &ObjectiveSpec, seed: u64) -> Result<Vec<ReportRow>> {
    let pretrained = load_pretrained(run, cfg.train.total_steps)?;
    let alignment = alignment_of(&pretrained, bundle, &bundle.l2_vocab())?;
    let transform = bundle.transformer.spec.to_string();
    let mut rows = Vec::new();
    for &task in &cfg.tasks {
        let (_, der) = bundle.task(task)?;
        let score = |lang: Language| -> Result<f64> {
            let (tuned, _) = load_checkpoint(&finetuned_path(run, task, lang))?;
            evaluate(&tuned, &bundle.bpe, der)
        };
        let b_s = score(Language::Derived)?;
        let b_z = score(Language::Original)?;
        rows.push(ReportRow::new(&objective_label(objective), &transform, task.name(), seed, b_s, b_z, alignment));
    }
    write_atomic(&run.join(ROWS), &rows_csv(&rows)?)?;
    Ok(rows)
}

/// Rows of a finished run, if it has any.
pub fn run_rows(run: &Path) -> Result<Option<Vec<ReportRow>>> {
    let p = run.join(ROWS);
    if !p.exists() {
        return Ok(None);
    }
    read_rows(&p).map(Some)
}
