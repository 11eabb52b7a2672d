//! The pre-training loop: equal step budgets for every objective, loss and
//! alignment logged every `log_every` steps, resumable from the last log
//! point.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{transform_slug, DataBundle};
use super::write_atomic;
use crate::error::{Error, Result};
use crate::instances::{MaskingConfig, TrainingInstance};
use crate::metrics::alignment_on_table;
use crate::model::{backward, load_checkpoint, save_checkpoint, Graph, Mode, ModelState};
use crate::objectives::{epoch_stream, training_loss, ObjectiveKind, ObjectiveSpec, PretrainPool};
use crate::rng::{derive_seed, rng_for, stream};
use crate::tokenizer::{sample_dictionary, BilingualDictionary};
use crate::transform::TransformSpec;

pub const CHECKPOINT: &str = "pretrained.ckpt";
pub const TRAJECTORY: &str = "trajectory.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: u64,
    /// Total loss of the batch at this step.
    pub loss: f64,
    pub mlm: f64,
    /// L_ALIGN, for ALIGN-MLM only.
    pub align: Option<f64>,
    /// Alignment score of the embedding table after the step.
    pub alignment: f64,
}

/// Short name of an objective; parameters that differ from the defaults are
/// appended, e.g. `ALIGN_MLM(alpha=1)`.
pub fn objective_label(spec: &ObjectiveSpec) -> String {
    let d = ObjectiveSpec::new(spec.kind);
    let mut parts = Vec::new();
    if spec.kind == ObjectiveKind::AlignMlm && spec.alpha != d.alpha {
        parts.push(format!("alpha={}", spec.alpha));
    }
    if spec.kind == ObjectiveKind::Xlm && spec.tlm_fraction != d.tlm_fraction {
        parts.push(format!("tlm={}", spec.tlm_fraction));
    }
    if spec.uses_dictionary() && spec.dict_fraction != d.dict_fraction {
        parts.push(format!("dict={}", spec.dict_fraction));
    }
    if spec.kind == ObjectiveKind::Dict && spec.switch_prob != d.switch_prob {
        parts.push(format!("switch={}", spec.switch_prob));
    }
    if parts.is_empty() {
        spec.kind.name().to_string()
    } else {
        format!("{}({})", spec.kind.name(), parts.join(","))
    }
}

fn dir_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' { c } else { '_' }).collect()
}

pub fn run_dir(cfg: &ExperimentConfig, transform: &TransformSpec, objective: &ObjectiveSpec, seed: u64) -> PathBuf {
    cfg.output_dir
        .join("runs")
        .join(transform_slug(transform))
        .join(dir_safe(&objective_label(objective)))
        .join(format!("seed{seed}"))
}

/// The dictionary an objective trains with: a seed-dependent
/// `dict_fraction` sample of the token correspondence.
pub fn objective_dictionary(bundle: &DataBundle, objective: &ObjectiveSpec, seed: u64) -> Result<BilingualDictionary> {
    if !objective.uses_dictionary() {
        return Ok(BilingualDictionary::default());
    }
    sample_dictionary(&bundle.correspondence, objective.dict_fraction, seed, bundle.bpe.vocab_size())
}

pub fn alignment_of(state: &ModelState, bundle: &DataBundle, l2_vocab: &[u32]) -> Result<f64> {
    Ok(alignment_on_table(state.params.token_embeddings(), &bundle.correspondence, l2_vocab)?.mean)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: ModelState,
    pub trajectory: Vec<TrajectoryPoint>,
    /// Steps actually run in this call; 0 when the run was already complete.
    pub steps_run: u64,
}

fn write_trajectory(path: &Path, points: &[TrajectoryPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p).map_err(|e| Error::Config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| {
            rec.map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: i + 2,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Pre-trains `objective` on `bundle`. With `dir`, progress is checkpointed
/// at every log point and an interrupted run resumes where it stopped; a
/// finished run is returned as is.
pub fn pretrain(cfg: &ExperimentConfig, bundle: &DataBundle, objective: &ObjectiveSpec, seed: u64, dir: Option<&Path>) -> Result<PretrainOutcome> {
    objective.validate()?;
    cfg.train.validate()?;
    let vocab = bundle.bpe.vocab_size();
    let encoder = cfg.encoder_for(vocab);
    let h = cfg.data.instance_len;

    let (mut state, mut trajectory) = match dir.map(|d| d.join(CHECKPOINT)).filter(|p| p.exists()) {
        Some(ckpt) => {
            let (state, _) = load_checkpoint(&ckpt)?;
            if state.params.config != encoder {
                return Err(Error::Checkpoint(format!("{} was trained with a different encoder config", ckpt.display())));
            }
            let traj_path = ckpt.with_file_name(TRAJECTORY);
            let mut t = if traj_path.exists() { read_trajectory(&traj_path)? } else { Vec::new() };
            t.retain(|p| p.step <= state.step());
            (state, t)
        }
        None => (ModelState::new(&encoder, derive_seed(seed, stream::INIT))?, Vec::new()),
    };
    let start = state.step();
    let total = cfg.train.total_steps;
    if start >= total {
        return Ok(PretrainOutcome { state, trajectory, steps_run: 0 });
    }
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let masking = MaskingConfig {
        seed: derive_seed(cfg.masking.seed, seed),
        ..cfg.masking.clone()
    };
    let tlm = if objective.kind == ObjectiveKind::Xlm {
        bundle.tlm_instances(objective.tlm_fraction, seed, h)?
    } else {
        Vec::new()
    };
    let pool = PretrainPool { mono: bundle.mono.clone(), tlm };
    let dict = objective_dictionary(bundle, objective, seed)?;
    let l2_vocab = bundle.l2_vocab();
    let bs = cfg.train.batch_size;

    let mut cached: Option<(u64, Vec<TrainingInstance>)> = None;
    for step in start..total {
        let n_stream = pool.mono.len() + if objective.kind == ObjectiveKind::Xlm { pool.tlm.len() } else { 0 };
        if n_stream == 0 {
            return Err(Error::Config("no pre-training instances".into()));
        }
        let per_epoch = n_stream.div_ceil(bs) as u64;
        let epoch = step / per_epoch;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let (instances, _) = epoch_stream(&pool, objective, &dict, &masking, vocab, epoch);
            cached = Some((epoch, instances));
        }
        let instances = &cached.as_ref().map(|c| &c.1).expect("stream cached above");
        let off = ((step % per_epoch) as usize) * bs;
        let batch = &instances[off..(off + bs).min(instances.len())];

        let mut g = Graph::new();
        let bound = state.params.bind(&mut g);
        let mut drop_rng = rng_for(derive_seed(seed, stream::DROPOUT), step);
        let mut mode = Mode { dropout_rng: Some(&mut drop_rng) };
        let nodes = training_loss(&mut g, &state.params, &bound, batch, objective, &dict, &mut mode)?;
        let grads = backward(&g, nodes.total, &state.params)?;
        state.optimizer_step(&grads, &cfg.train)?;

        let t = step + 1;
        if t % cfg.log_every == 0 || t == total {
            let point = TrajectoryPoint {
                step: t,
                loss: g.scalar(nodes.total),
                mlm: g.scalar(nodes.mlm),
                align: nodes.align.map(|a| g.scalar(a)),
                alignment: alignment_of(&state, bundle, &l2_vocab)?,
            };
            log::info!(
                "{} seed {seed} step {t}/{total}: loss {:.4}, alignment {:.1}",
                objective_label(objective),
                point.loss,
                point.alignment
            );
            trajectory.push(point);
            if let Some(d) = dir {
                // Trajectory first: on resume, points past the checkpoint are dropped.
                write_trajectory(&d.join(TRAJECTORY), &trajectory)?;
                let tmp = d.join(format!("{CHECKPOINT}.tmp"));
                save_checkpoint(&tmp, &state, Some(&cfg.train))?;
                fs::rename(&tmp, d.join(CHECKPOINT)).map_err(|e| Error::io(d, e))?;
            }
        }
    }
    Ok(PretrainOutcome { state, trajectory, steps_run: total - start })
}
