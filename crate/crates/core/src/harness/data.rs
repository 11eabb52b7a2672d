//! Data preparation: corpora, derived language, tokenizer, token
//! correspondence, packed instances and task datasets, all under
//! `<output_dir>/data/<transform>/` with a manifest of content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::write_atomic;
use crate::corpus::{load_labeled_corpus, load_text_corpus, write_corpus, Corpus, Language, TextFormat};
use crate::error::{Error, Result};
use crate::instances::{pack_mono, pack_tlm, read_instances, write_instances, InstanceFileMeta, TrainingInstance};
use crate::objectives::{sample_tlm_pairs, tlm_pair_count};
use crate::tasks::{generate_corpus, generate_task, grammar_vocabulary, Task, TaskDataset};
use crate::tokenizer::{is_special, token_correspondence, train_bpe, BilingualDictionary, BpeModel};
use crate::transform::{attach_parses, read_conllu, ScriptMap, TransformSpec, Transformer};

pub const MANIFEST: &str = "manifest.json";

/// Directory-safe name of a transform, e.g. `trans_inv`.
pub fn transform_slug(spec: &TransformSpec) -> String {
    spec.to_string().to_lowercase().replace('+', "_")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Hash of every input that determines the files below.
    pub inputs: String,
    pub transform: String,
    pub steps: Vec<String>,
    pub vocab_size: usize,
    pub instance_len: usize,
    pub mono_instances: usize,
    pub dropped_sentences: usize,
    pub correspondence_pairs: usize,
    /// Relative path → sha256 of the file contents.
    pub files: BTreeMap<String, String>,
}

/// Everything a pre-training or fine-tuning run reads for one transform.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub dir: PathBuf,
    pub transformer: Transformer,
    pub original: Corpus,
    pub derived: Corpus,
    pub bpe: BpeModel,
    /// Corresponding (original, derived) token pairs.
    pub correspondence: Vec<(u32, u32)>,
    /// Packed monolingual instances, original first.
    pub mono: Vec<TrainingInstance>,
    pub tasks: Vec<(TaskDataset, TaskDataset)>,
}

impl DataBundle {
    /// Derived-side tokens of the correspondence, sorted: the candidate set
    /// of the alignment score.
    pub fn l2_vocab(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.correspondence.iter().map(|p| p.1).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Parallel TLM instances for `tlm_fraction` of the original sentences.
    pub fn tlm_instances(&self, tlm_fraction: f64, seed: u64, h: usize) -> Result<Vec<TrainingInstance>> {
        let n = self.original.len();
        let idx = sample_tlm_pairs(n, tlm_pair_count(n, tlm_fraction), seed);
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = idx
            .iter()
            .map(|&i| {
                (
                    self.bpe.encode(self.original.records[i].sentence.words()),
                    self.bpe.encode(self.derived.records[i].sentence.words()),
                )
            })
            .collect();
        Ok(pack_tlm(&pairs, h)?.instances)
    }

    pub fn task(&self, task: Task) -> Result<&(TaskDataset, TaskDataset)> {
        self.tasks
            .iter()
            .find(|(o, _)| o.task == task)
            .ok_or_else(|| Error::Config(format!("no {} data under {}", task.name(), self.dir.display())))
    }
}

pub fn data_dir(cfg: &ExperimentConfig, spec: &TransformSpec) -> PathBuf {
    cfg.output_dir.join("data").join(transform_slug(spec))
}

/// Hash of the config fields and input files the data stage depends on.
fn input_hash(cfg: &ExperimentConfig, spec: &TransformSpec) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&cfg.data)?);
    h.update(serde_json::to_vec(spec)?);
    h.update(serde_json::to_vec(&cfg.tasks)?);
    for p in [&cfg.data.corpus, &cfg.data.parses].into_iter().flatten() {
        h.update(file_hash(p)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// The original pre-training corpus: the configured file, or grammar
/// sentences.
pub fn original_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let Some(path) = &cfg.data.corpus else {
        return generate_corpus(cfg.data.synthetic_sentences, cfg.data.grammar_seed);
    };
    let format = if cfg.data.corpus_format == "jsonl" { TextFormat::Jsonl } else { TextFormat::Plain };
    let mut corpus = load_text_corpus(path, format)?;
    if let Some(parses) = &cfg.data.parses {
        attach_parses(&mut corpus, &read_conllu(parses)?)?;
    }
    Ok(corpus)
}

fn task_file(dir: &Path, task: Task, lang: Language, split: &str) -> PathBuf {
    let l = if lang == Language::Original { "original" } else { "derived" };
    dir.join("tasks").join(format!("{}.{l}.{split}.jsonl", task.name().to_lowercase()))
}

const SPLITS: [&str; 3] = ["train", "dev", "test"];

fn with_language(mut c: Corpus, lang: Language) -> Corpus {
    c.language = lang;
    c
}

/// Outcome of [`gen_data`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenOutcome {
    Written,
    /// A manifest with matching inputs and file hashes was already present.
    UpToDate,
}

fn manifest_current(dir: &Path, inputs: &str) -> bool {
    let Ok(text) = fs::read_to_string(dir.join(MANIFEST)) else {
        return false;
    };
    let Ok(m) = serde_json::from_str::<Manifest>(&text) else {
        return false;
    };
    m.inputs == inputs && m.files.iter().all(|(rel, hash)| file_hash(&dir.join(rel)).ok().as_deref() == Some(hash.as_str()))
}

/// Corpus, transform and BPE only; `gen_data` continues from here.
pub fn train_tokenizer(cfg: &ExperimentConfig, spec: &TransformSpec) -> Result<(Transformer, Corpus, Corpus, BpeModel)> {
    let original = original_corpus(cfg)?;
    let mut vocabulary = original.word_types();
    vocabulary.extend(grammar_vocabulary());
    vocabulary.sort();
    vocabulary.dedup();
    let transformer = Transformer::new(spec.clone(), &vocabulary)?;
    let derived = transformer.corpus(&original)?;
    let full = train_bpe(&[&original, &derived], cfg.data.vocab_size)?;
    let bpe = paired_merges(full, &transformer.script_map, spec)?;
    Ok((transformer, original, derived, bpe))
}

/// Equal-count merges of the two scripts are learned one language after the
/// other, so the vocabulary budget can end between a merge and its image.
/// Drops merges from the end until every word encodes like its image.
fn paired_merges(full: BpeModel, map: &ScriptMap, spec: &TransformSpec) -> Result<BpeModel> {
    if spec.transliterate_step().is_none() {
        return Ok(full);
    }
    let mut bpe = full.clone();
    let mut n = full.merges().len();
    loop {
        match token_correspondence(&bpe, map) {
            Ok(_) => break,
            Err(e) if n == 0 => return Err(e),
            Err(_) => {
                n -= 1;
                bpe = full.truncated(n)?;
            }
        }
    }
    if n < full.merges().len() {
        log::info!("dropped {} unpaired merges; vocabulary {} of {}", full.merges().len() - n, bpe.vocab_size(), full.vocab_size());
    }
    Ok(bpe)
}

/// Token pairs the alignment score and dictionaries draw from. When the
/// languages share all their tokens (no transliteration, or full overlap),
/// each token corresponds to itself.
pub fn correspondence(bpe: &BpeModel, map: &ScriptMap, spec: &TransformSpec) -> Result<Vec<(u32, u32)>> {
    if spec.transliterate_step().is_some() {
        let pairs = token_correspondence(bpe, map)?;
        if !pairs.is_empty() {
            return Ok(pairs);
        }
    }
    Ok((0..bpe.vocab_size() as u32).filter(|&t| !is_special(t)).map(|t| (t, t)).collect())
}

/// Writes the data directory for `spec`, unless an up-to-date one exists.
pub fn gen_data(cfg: &ExperimentConfig, spec: &TransformSpec) -> Result<GenOutcome> {
    let dir = data_dir(cfg, spec);
    let inputs = input_hash(cfg, spec)?;
    if manifest_current(&dir, &inputs) {
        log::info!("{}: data up to date", dir.display());
        return Ok(GenOutcome::UpToDate);
    }
    fs::create_dir_all(dir.join("tasks")).map_err(|e| Error::io(&dir, e))?;
    let (transformer, original, derived, bpe) = train_tokenizer(cfg, spec)?;
    let pairs = correspondence(&bpe, &transformer.script_map, spec)?;
    let h = cfg.data.instance_len;
    let encode = |c: &Corpus| -> Vec<Vec<u32>> { c.sentences().map(|s| bpe.encode(s.words())).collect() };
    let p1 = pack_mono(&encode(&original), h, Language::Original);
    let p2 = pack_mono(&encode(&derived), h, Language::Derived);
    let mut mono = p1.instances;
    mono.extend(p2.instances);

    let mut files = Vec::new();
    let mut put = |rel: &str| {
        files.push(rel.to_string());
        dir.join(rel)
    };
    write_corpus(&put("original.jsonl"), &original)?;
    write_corpus(&put("derived.jsonl"), &derived)?;
    transformer.script_map.write_tsv(&put("script_map.tsv"))?;
    bpe.write(&put("bpe.merges"), &put("bpe.vocab"))?;
    BilingualDictionary { entries: pairs.clone() }.write_tsv(&put("correspondence.tsv"))?;
    let meta = InstanceFileMeta {
        h,
        vocab_size: bpe.vocab_size(),
        count: mono.len(),
        dropped_sentences: p1.dropped + p2.dropped,
        dropped_pairs: 0,
    };
    write_instances(&put("mono.bin"), &put("mono.json"), &mono, &meta)?;
    for &task in &cfg.tasks {
        let orig = generate_task(task, cfg.data.grammar_seed, cfg.data.task_sizes)?;
        let der = crate::tasks::derive_task(&orig, &transformer)?;
        for (ds, lang) in [(&orig, Language::Original), (&der, Language::Derived)] {
            for (split, corpus) in SPLITS.iter().zip(ds.splits()) {
                let path = task_file(&dir, task, lang, split);
                files.push(path.strip_prefix(&dir).unwrap_or(&path).to_string_lossy().into_owned());
                write_corpus(&path, corpus)?;
            }
        }
    }
    let mut hashes = BTreeMap::new();
    for rel in files {
        hashes.insert(rel.clone(), file_hash(&dir.join(&rel))?);
    }
    let manifest = Manifest {
        inputs,
        transform: spec.to_string(),
        steps: spec.steps.iter().map(|s| s.short_name().to_string()).collect(),
        vocab_size: bpe.vocab_size(),
        instance_len: h,
        mono_instances: mono.len(),
        dropped_sentences: meta.dropped_sentences,
        correspondence_pairs: pairs.len(),
        files: hashes,
    };
    write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    log::info!(
        "{}: vocab {}, {} instances, {} corresponding token pairs",
        dir.display(),
        manifest.vocab_size,
        manifest.mono_instances,
        manifest.correspondence_pairs
    );
    Ok(GenOutcome::Written)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads the bundle written by [`gen_data`], verifying file hashes.
pub fn load_bundle(cfg: &ExperimentConfig, spec: &TransformSpec) -> Result<DataBundle> {
    let dir = data_dir(cfg, spec);
    let manifest = read_manifest(&dir)?;
    for (rel, hash) in &manifest.files {
        if &file_hash(&dir.join(rel))? != hash {
            return Err(Error::Config(format!("{} changed since gen-data; re-run it", dir.join(rel).display())));
        }
    }
    let script_map = ScriptMap::read_tsv(&dir.join("script_map.tsv"))?;
    let transformer = Transformer::with_map(spec.clone(), script_map)?;
    let original = load_text_corpus(&dir.join("original.jsonl"), TextFormat::Jsonl)?;
    let derived = with_language(load_text_corpus(&dir.join("derived.jsonl"), TextFormat::Jsonl)?, Language::Derived);
    let bpe = BpeModel::read(&dir.join("bpe.merges"), &dir.join("bpe.vocab"))?;
    let correspondence = BilingualDictionary::read_tsv(&dir.join("correspondence.tsv"), bpe.vocab_size())?.entries;
    let (mono, _) = read_instances(&dir.join("mono.bin"), &dir.join("mono.json"))?;
    let mut tasks = Vec::new();
    for &task in &cfg.tasks {
        let labels = crate::tasks::labels(task);
        let load = |lang: Language| -> Result<TaskDataset> {
            let mut splits = Vec::new();
            for split in SPLITS {
                splits.push(with_language(load_labeled_corpus(&task_file(&dir, task, lang, split), task.kind())?, lang));
            }
            let test = splits.pop().unwrap_or_else(|| Corpus::new(Vec::new(), lang));
            let dev = splits.pop().unwrap_or_else(|| Corpus::new(Vec::new(), lang));
            let train = splits.pop().unwrap_or_else(|| Corpus::new(Vec::new(), lang));
            Ok(TaskDataset { task, train, dev, test, labels: labels.clone() })
        };
        tasks.push((load(Language::Original)?, load(Language::Derived)?));
    }
    Ok(DataBundle { dir, transformer, original, derived, bpe, correspondence, mono, tasks })
}
