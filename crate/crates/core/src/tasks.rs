//! Synthetic downstream tasks: a small template grammar with dependency
//! parses, sentence-pair classification, BIO entity tagging and POS tagging,
//! and fine-tuning / evaluation of a pre-trained encoder on them.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, LabeledSentence, Language, Sentence, TaskKind};
use crate::error::{Error, Result};
use crate::instances::{TrainingInstance, IGNORE, PAD_INDEX};
use crate::metrics::{span_f1, task_accuracy, token_f1};
use crate::model::graph::Graph;
use crate::model::{classify_logits, encode, tag_logits, HeadKind, HeadSpec, Mode, ModelState, Tensor, TrainConfig};
use crate::rng::{derive_seed, rng_for, stream};
use crate::tokenizer::{BpeModel, CLS, PAD, SEP};
use crate::transform::{DependencyParse, Transformer};

const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "farmer", "teacher", "child", "horse", "baker", "doctor", "sailor", "fox", "king", "queen",
    "student", "painter", "wolf", "goat", "miner", "nurse", "pilot", "tiger", "singer", "rabbit", "judge", "owl",
    "clerk", "lion", "cook", "duck", "poet", "mouse", "guard",
];
const ADJECTIVES: &[&str] = &[
    "big", "small", "old", "young", "red", "green", "happy", "sad", "quick", "slow", "brave", "quiet", "tall",
    "clever", "lazy", "angry", "gentle", "proud", "tired", "strange",
];
const TRANSITIVE: &[&str] = &[
    "saw", "chased", "helped", "liked", "found", "called", "visited", "watched", "followed", "met", "feared",
    "praised", "pushed", "greeted", "ignored", "thanked", "taught", "fed", "heard", "admired",
];
const INTRANSITIVE: &[&str] = &["slept", "ran", "laughed", "waited", "danced", "cried", "smiled", "arrived"];
const DETERMINERS: &[&str] = &["the", "a", "this", "every"];
const FIRST_NAMES: &[&str] = &[
    "Alice", "Bruno", "Clara", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Ines", "Jonas", "Keiko", "Lars", "Mira",
    "Nadia", "Omar", "Paula",
];
const LAST_NAMES: &[&str] = &["Berg", "Costa", "Novak", "Silva", "Weber", "Moreau", "Ito", "Haas", "Rossi", "Kaya"];
const PLACES: &[&str] = &["Paris", "Lima", "Oslo", "Cairo", "Quito", "Riga", "Perth", "Accra"];
const PLACE_PREFIXES: &[&str] = &["New", "Port", "San"];
const PREPOSITIONS: &[&str] = &["in", "near"];
pub const SENTENCE_END: &str = ".";

/// Every word the grammar can emit.
pub fn grammar_vocabulary() -> Vec<String> {
    [NOUNS, ADJECTIVES, TRANSITIVE, INTRANSITIVE, DETERMINERS, FIRST_NAMES, LAST_NAMES, PLACES, PLACE_PREFIXES, PREPOSITIONS, &[SENTENCE_END]]
        .iter()
        .flat_map(|l| l.iter().map(|w| w.to_string()))
        .collect()
}

/// One word under construction: surface, UPOS, local head (index into the
/// sentence being built, `None` for root), relation and entity tag.
#[derive(Debug, Clone)]
struct Tok {
    word: String,
    upos: &'static str,
    head: Option<usize>,
    rel: &'static str,
    ner: String,
}

#[derive(Default)]
struct Builder {
    toks: Vec<Tok>,
}

impl Builder {
    fn push(&mut self, word: &str, upos: &'static str, head: Option<usize>, rel: &'static str, ner: String) -> usize {
        self.toks.push(Tok {
            word: word.to_string(),
            upos,
            head,
            rel,
            ner,
        });
        self.toks.len() - 1
    }

    /// Determiner, noun, then 0–2 adjectives after the noun. The caller
    /// attaches the returned noun index to its head.
    fn noun_phrase(&mut self, rng: &mut ChaCha8Rng) -> (usize, NounPhrase) {
        let det = *DETERMINERS.choose(rng).unwrap();
        let noun = *NOUNS.choose(rng).unwrap();
        let d = self.push(det, "DET", None, "det", "O".into());
        let n = self.push(noun, "NOUN", None, "", "O".into());
        self.toks[d].head = Some(n);
        let n_adj = [0, 0, 1, 1, 2][rng.gen_range(0..5)];
        let mut adjs = Vec::new();
        for _ in 0..n_adj {
            let a = *ADJECTIVES.choose(rng).unwrap();
            if adjs.contains(&a) {
                continue;
            }
            adjs.push(a);
            self.push(a, "ADJ", Some(n), "amod", "O".into());
        }
        (n, NounPhrase { head: noun.to_string(), adjectives: adjs.iter().map(|s| s.to_string()).collect(), det: det.to_string(), person: None })
    }

    fn person(&mut self, rng: &mut ChaCha8Rng) -> (usize, NounPhrase) {
        let first = *FIRST_NAMES.choose(rng).unwrap();
        let f = self.push(first, "PROPN", None, "", "B-PER".into());
        let mut full = vec![first.to_string()];
        if rng.gen_bool(0.5) {
            let last = *LAST_NAMES.choose(rng).unwrap();
            self.push(last, "PROPN", Some(f), "flat", "I-PER".into());
            full.push(last.to_string());
        }
        (f, NounPhrase { head: first.to_string(), adjectives: vec![], det: String::new(), person: Some(full) })
    }

    fn place(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if rng.gen_bool(0.3) {
            let pre = *PLACE_PREFIXES.choose(rng).unwrap();
            let p = self.push(pre, "PROPN", None, "", "B-LOC".into());
            let name = *PLACES.choose(rng).unwrap();
            self.push(name, "PROPN", Some(p), "flat", "I-LOC".into());
            p
        } else {
            let name = *PLACES.choose(rng).unwrap();
            self.push(name, "PROPN", None, "", "B-LOC".into())
        }
    }

    fn argument(&mut self, rng: &mut ChaCha8Rng) -> (usize, NounPhrase) {
        if rng.gen_bool(0.35) {
            self.person(rng)
        } else {
            self.noun_phrase(rng)
        }
    }

    fn finish(self) -> Result<(Sentence, Vec<String>, Vec<String>)> {
        let words: Vec<String> = self.toks.iter().map(|t| t.word.clone()).collect();
        let parse = DependencyParse {
            head: self.toks.iter().map(|t| t.head.map_or(0, |h| h + 1)).collect(),
            upos: self.toks.iter().map(|t| t.upos.to_string()).collect(),
            deprel: self.toks.iter().map(|t| if t.head.is_none() { "root" } else { t.rel }.to_string()).collect(),
        };
        let pos = parse.upos.clone();
        let ner = self.toks.iter().map(|t| t.ner.clone()).collect();
        Ok((Sentence::new(words)?.with_parse(parse)?, pos, ner))
    }
}

#[derive(Debug, Clone)]
struct NounPhrase {
    head: String,
    adjectives: Vec<String>,
    det: String,
    person: Option<Vec<String>>,
}

/// Skeleton of a generated clause, kept for building hypotheses.
#[derive(Debug, Clone)]
struct Clause {
    subject: NounPhrase,
    verb: String,
    object: Option<NounPhrase>,
}

/// Subject, verb, optional object, optional place phrase, final period.
/// Word order is SVO with adjectives after their noun.
fn clause(rng: &mut ChaCha8Rng, transitive: Option<bool>) -> Result<(Sentence, Vec<String>, Vec<String>, Clause)> {
    let mut b = Builder::default();
    let (s, subject) = b.argument(rng);
    let transitive = transitive.unwrap_or_else(|| rng.gen_bool(0.75));
    let verb = if transitive { *TRANSITIVE.choose(rng).unwrap() } else { *INTRANSITIVE.choose(rng).unwrap() };
    let v = b.push(verb, "VERB", None, "root", "O".into());
    b.toks[s].head = Some(v);
    b.toks[s].rel = "nsubj";
    let object = if transitive {
        let (o, np) = b.argument(rng);
        b.toks[o].head = Some(v);
        b.toks[o].rel = "obj";
        Some(np)
    } else {
        None
    };
    if rng.gen_bool(0.4) {
        let prep = *PREPOSITIONS.choose(rng).unwrap();
        let c = b.push(prep, "ADP", None, "case", "O".into());
        let p = b.place(rng);
        b.toks[c].head = Some(p);
        b.toks[p].head = Some(v);
        b.toks[p].rel = "obl";
    }
    b.push(SENTENCE_END, "PUNCT", Some(v), "punct", "O".into());
    let (sent, pos, ner) = b.finish()?;
    Ok((sent, pos, ner, Clause { subject, verb: verb.to_string(), object }))
}

/// A pre-training corpus of `n` parsed grammar sentences.
pub fn generate_corpus(n: usize, seed: u64) -> Result<Corpus> {
    let mut rng = rng_for(seed, stream::TASK);
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        records.push(LabeledSentence::plain(clause(&mut rng, None)?.0));
    }
    Ok(Corpus::new(records, Language::Original))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Sentence-pair entailment / contradiction, scored by accuracy.
    Nli,
    /// BIO person / location tagging, scored by span F1.
    Ner,
    /// Universal POS tagging, scored by token F1.
    Pos,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Nli, Task::Ner, Task::Pos];

    pub fn name(self) -> &'static str {
        match self {
            Task::Nli => "NLI",
            Task::Ner => "NER",
            Task::Pos => "POS",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nli" | "xnli" => Ok(Task::Nli),
            "ner" => Ok(Task::Ner),
            "pos" => Ok(Task::Pos),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }

    pub fn kind(self) -> TaskKind {
        match self {
            Task::Nli => TaskKind::PairClassify,
            Task::Ner | Task::Pos => TaskKind::Tag,
        }
    }

    pub fn is_tagging(self) -> bool {
        self.kind() == TaskKind::Tag
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: Task,
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
    /// Label inventory: class names or tags, in a fixed order.
    pub labels: Vec<String>,
}

impl TaskDataset {
    pub fn language(&self) -> Language {
        self.test.language
    }

    pub fn splits(&self) -> [&Corpus; 3] {
        [&self.train, &self.dev, &self.test]
    }
}

pub const NLI_LABELS: [&str; 2] = ["entailment", "contradiction"];
pub const POS_TAGS: [&str; 7] = ["ADJ", "ADP", "DET", "NOUN", "PROPN", "PUNCT", "VERB"];
pub const NER_TAGS: [&str; 5] = ["B-LOC", "B-PER", "I-LOC", "I-PER", "O"];

fn np_words(np: &NounPhrase, keep_adjectives: bool) -> Vec<String> {
    match &np.person {
        Some(name) => name.clone(),
        None => {
            let mut w = vec![np.det.clone(), np.head.clone()];
            if keep_adjectives {
                w.extend(np.adjectives.iter().cloned());
            }
            w
        }
    }
}

/// A hypothesis for `c`: entailed ones restate subject, verb and object
/// without modifiers; contradicting ones change the verb or the object head.
fn hypothesis(c: &Clause, entail: bool, rng: &mut ChaCha8Rng) -> Result<Sentence> {
    let object = c.object.as_ref().expect("pair premises are transitive");
    let mut verb = c.verb.clone();
    let mut obj = object.clone();
    if !entail {
        if rng.gen_bool(0.5) {
            while verb == c.verb {
                verb = TRANSITIVE.choose(rng).unwrap().to_string();
            }
        } else {
            obj.person = None;
            obj.det = "the".into();
            obj.adjectives.clear();
            while obj.head == object.head {
                obj.head = NOUNS.choose(rng).unwrap().to_string();
            }
        }
    }
    let mut b = Builder::default();
    let subj = np_words(&c.subject, false);
    let s_head = push_np(&mut b, &subj, c.subject.person.is_some());
    let v = b.push(&verb, "VERB", None, "root", "O".into());
    b.toks[s_head].head = Some(v);
    b.toks[s_head].rel = "nsubj";
    let o_head = push_np(&mut b, &np_words(&obj, false), obj.person.is_some());
    b.toks[o_head].head = Some(v);
    b.toks[o_head].rel = "obj";
    b.push(SENTENCE_END, "PUNCT", Some(v), "punct", "O".into());
    Ok(b.finish()?.0)
}

fn push_np(b: &mut Builder, words: &[String], person: bool) -> usize {
    if person {
        let f = b.push(&words[0], "PROPN", None, "", "B-PER".into());
        for w in &words[1..] {
            b.push(w, "PROPN", Some(f), "flat", "I-PER".into());
        }
        f
    } else {
        let d = b.push(&words[0], "DET", None, "det", "O".into());
        let n = b.push(&words[1], "NOUN", None, "", "O".into());
        b.toks[d].head = Some(n);
        n
    }
}

fn generate_record(task: Task, rng: &mut ChaCha8Rng) -> Result<LabeledSentence> {
    match task {
        Task::Pos => {
            let (s, pos, _, _) = clause(rng, None)?;
            LabeledSentence::tagged(s, pos)
        }
        Task::Ner => {
            let (s, _, ner, _) = clause(rng, None)?;
            LabeledSentence::tagged(s, ner)
        }
        Task::Nli => {
            let (s, _, _, c) = clause(rng, Some(true))?;
            let entail = rng.gen_bool(0.5);
            let h = hypothesis(&c, entail, rng)?;
            Ok(LabeledSentence::pair(s, h, NLI_LABELS[usize::from(!entail)]))
        }
    }
}

fn record_key(r: &LabeledSentence) -> (Vec<String>, Option<Vec<String>>) {
    (r.sentence.words().to_vec(), r.pair_sentence.as_ref().map(|s| s.words().to_vec()))
}

/// Deterministic dataset of distinct sentences split into train/dev/test.
pub fn generate_task(task: Task, seed: u64, sizes: Sizes) -> Result<TaskDataset> {
    if sizes.train == 0 || sizes.dev == 0 || sizes.test == 0 {
        return Err(Error::Config(format!("task split sizes must be positive, got {sizes:?}")));
    }
    let total = sizes.train + sizes.dev + sizes.test;
    let mut rng = rng_for(derive_seed(seed, stream::TASK), task as u64 + 1);
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while records.len() < total {
        attempts += 1;
        if attempts > total * 50 {
            return Err(Error::Config(format!("grammar cannot produce {total} distinct {task} examples")));
        }
        let r = generate_record(task, &mut rng)?;
        if seen.insert(record_key(&r)) {
            records.push(r);
        }
    }
    let test = records.split_off(sizes.train + sizes.dev);
    let dev = records.split_off(sizes.train);
    Ok(TaskDataset {
        task,
        train: Corpus::new(records, Language::Original),
        dev: Corpus::new(dev, Language::Original),
        test: Corpus::new(test, Language::Original),
        labels: labels(task),
    })
}

/// Label inventory of `task`, in head-column order.
pub fn labels(task: Task) -> Vec<String> {
    let names: &[&str] = match task {
        Task::Nli => &NLI_LABELS,
        Task::Ner => &NER_TAGS,
        Task::Pos => &POS_TAGS,
    };
    names.iter().map(|s| s.to_string()).collect()
}

/// Applies the transformer to every split. Each split uses its own block of
/// random streams so that reordering does not depend on split sizes.
pub fn derive_task(dataset: &TaskDataset, transformer: &Transformer) -> Result<TaskDataset> {
    let split = |c: &Corpus, k: u64| -> Result<Corpus> {
        let records = c
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| transformer.labeled(r, (k << 32) | i as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus::new(records, Language::Derived))
    };
    Ok(TaskDataset {
        task: dataset.task,
        train: split(&dataset.train, 1)?,
        dev: split(&dataset.dev, 2)?,
        test: split(&dataset.test, 3)?,
        labels: dataset.labels.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl FinetuneConfig {
    /// Full-scale fine-tuning values for `task`.
    pub fn full(task: Task) -> Self {
        FinetuneConfig {
            learning_rate: 2e-5,
            epochs: if task == Task::Nli { 5 } else { 10 },
            batch_size: 32,
            max_seq_len: 128,
            warmup_fraction: 0.0,
            seed: 0,
        }
    }

    /// Desk-scale values: a tiny model from a short pre-training run needs a
    /// much larger step size than the full-scale one.
    pub fn desk(task: Task) -> Self {
        FinetuneConfig {
            learning_rate: 1e-3,
            epochs: if task == Task::Nli { 5 } else { 3 },
            batch_size: 32,
            max_seq_len: 64,
            warmup_fraction: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.max_seq_len < 2 {
            return Err(Error::Config("fine-tuning needs epochs, batch_size > 0 and max_seq_len ≥ 2".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("fine-tuning learning rate must be positive and warmup_fraction in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One encoded fine-tuning example.
#[derive(Debug, Clone)]
pub struct Example {
    pub instance: TrainingInstance,
    /// Sentence label index (classification).
    pub class: Option<usize>,
    /// `(position of the word's first subword, tag index)`; words cut off by
    /// truncation are absent.
    pub word_targets: Vec<(usize, usize)>,
    /// Number of words, including truncated ones.
    pub n_words: usize,
}

fn label_index(labels: &[String]) -> HashMap<&str, usize> {
    labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect()
}

/// `[CLS] words` for tagging, `[CLS] premise [SEP] hypothesis [SEP]` for
/// pairs, truncated to `max_len` tokens.
pub fn encode_example(
    bpe: &BpeModel,
    record: &LabeledSentence,
    labels: &[String],
    language: Language,
    max_len: usize,
    cache: &mut HashMap<String, Vec<u32>>,
) -> Result<Example> {
    let index = label_index(labels);
    let mut tokens = vec![CLS];
    let (ids, starts) = bpe.encode_with_offsets(record.sentence.words(), cache);
    tokens.extend(&ids);
    let mut word_targets = Vec::new();
    if let Some(tags) = &record.tags {
        for (w, t) in tags.iter().enumerate() {
            let k = *index.get(t.as_str()).ok_or_else(|| Error::Config(format!("tag {t:?} is not in the label inventory")))?;
            let pos = 1 + starts[w];
            if pos < max_len {
                word_targets.push((pos, k));
            }
        }
    }
    if let Some(h) = &record.pair_sentence {
        tokens.push(SEP);
        tokens.extend(bpe.encode_with_offsets(h.words(), cache).0);
        tokens.push(SEP);
    }
    tokens.truncate(max_len);
    let class = match (&record.label, record.tags.is_none()) {
        (Some(l), true) => Some(*index.get(l.as_str()).ok_or_else(|| Error::Config(format!("label {l:?} is not in the label inventory")))?),
        _ => None,
    };
    let mut inst = TrainingInstance {
        token_ids: vec![PAD; max_len],
        position_ids: vec![PAD_INDEX; max_len],
        language_ids: vec![PAD_INDEX; max_len],
        mlm_labels: vec![IGNORE; max_len],
    };
    for (i, &t) in tokens.iter().enumerate() {
        inst.token_ids[i] = t;
        inst.position_ids[i] = i as u32;
        inst.language_ids[i] = language.id();
    }
    Ok(Example {
        instance: inst,
        class,
        word_targets,
        n_words: record.sentence.len(),
    })
}

pub fn encode_split(bpe: &BpeModel, corpus: &Corpus, labels: &[String], max_len: usize) -> Result<Vec<Example>> {
    let mut cache = HashMap::new();
    corpus.records.iter().map(|r| encode_example(bpe, r, labels, corpus.language, max_len, &mut cache)).collect()
}

fn head_for(task: Task, labels: &[String]) -> HeadSpec {
    HeadSpec {
        kind: if task.is_tagging() { HeadKind::Tag } else { HeadKind::Classify },
        n_labels: labels.len(),
    }
}

fn check_vocab(state: &ModelState, bpe: &BpeModel) -> Result<()> {
    if state.config().vocab_size != bpe.vocab_size() {
        return Err(Error::Config(format!(
            "checkpoint vocabulary has {} entries, tokenizer {}",
            state.config().vocab_size,
            bpe.vocab_size()
        )));
    }
    Ok(())
}

/// Builds the task loss for a batch of examples.
fn batch_loss(g: &mut Graph, state: &ModelState, batch: &[&Example], task: Task) -> Result<usize> {
    let params = &state.params;
    let bound = params.bind(g);
    let insts: Vec<TrainingInstance> = batch.iter().map(|e| e.instance.clone()).collect();
    let enc = encode(g, params, &bound, &insts, &mut Mode::eval())?;
    if task.is_tagging() {
        let logits = tag_logits(g, params, &bound, &enc)?;
        let h = insts[0].len();
        let idx = enc.index(insts.len(), h);
        let (mut rows, mut targets) = (Vec::new(), Vec::new());
        for (b, e) in batch.iter().enumerate() {
            for &(pos, k) in &e.word_targets {
                rows.push(idx[b][pos].expect("target inside content"));
                targets.push(k as u32);
            }
        }
        let sel = g.select_rows(logits, &rows);
        Ok(g.cross_entropy(sel, &targets))
    } else {
        let logits = classify_logits(g, params, &bound, &enc)?;
        let targets: Vec<u32> = batch
            .iter()
            .map(|e| e.class.map(|c| c as u32).ok_or_else(|| Error::Config("classification example without label".into())))
            .collect::<Result<_>>()?;
        Ok(g.cross_entropy(logits, &targets))
    }
}

/// Fine-tunes a copy of `pretrained` with a fresh task head.
pub fn finetune(pretrained: &ModelState, bpe: &BpeModel, train: &TaskDataset, cfg: &FinetuneConfig) -> Result<ModelState> {
    cfg.validate()?;
    check_vocab(pretrained, bpe)?;
    let examples = encode_split(bpe, &train.train, &train.labels, cfg.max_seq_len.min(pretrained.config().max_positions))?;
    if examples.is_empty() {
        return Err(Error::Config("empty fine-tuning split".into()));
    }
    let mut state = pretrained.clone();
    state.attach_head(head_for(train.task, &train.labels), derive_seed(cfg.seed, train.task as u64))?;
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = (steps_per_epoch * cfg.epochs) as u64;
    let schedule = TrainConfig {
        learning_rate: cfg.learning_rate,
        warmup_steps: (total as f64 * cfg.warmup_fraction).round() as u64,
        batch_size: cfg.batch_size,
        total_steps: total,
        decay_to_zero: true,
        weight_decay: 0.0,
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(derive_seed(cfg.seed, stream::FINETUNE), epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut g = Graph::new();
            let loss = batch_loss(&mut g, &state, &batch, train.task)?;
            let grads = crate::model::backward(&g, loss, &state.params)?;
            state.optimizer_step(&grads, &schedule)?;
        }
    }
    Ok(state)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_BATCH: usize = 64;
const EVAL_MAX_LEN: usize = 128;

/// Predicted label indices: one per sentence for classification, one per
/// word for tagging (truncated words get label 0).
pub fn predict(state: &ModelState, examples: &[Example], task: Task) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let insts: Vec<TrainingInstance> = chunk.iter().map(|e| e.instance.clone()).collect();
        if task.is_tagging() {
            let logits = crate::model::forward_tag(&state.params, &insts)?;
            for (e, l) in chunk.iter().zip(&logits) {
                let mut p = vec![0; e.n_words];
                for (w, &(pos, _)) in e.word_targets.iter().enumerate() {
                    p[w] = argmax(l.row(pos));
                }
                out.push(p);
            }
        } else {
            let logits: Tensor = crate::model::forward_classify(&state.params, &insts)?;
            for r in 0..chunk.len() {
                out.push(vec![argmax(logits.row(r))]);
            }
        }
    }
    Ok(out)
}

/// Task score on a 0–100 scale: accuracy for pair classification, span F1
/// for entity tagging, token F1 for POS.
pub fn evaluate(state: &ModelState, bpe: &BpeModel, test: &TaskDataset) -> Result<f64> {
    check_vocab(state, bpe)?;
    let examples = encode_split(bpe, &test.test, &test.labels, state.config().max_positions.min(EVAL_MAX_LEN))?;
    let preds = predict(state, &examples, test.task)?;
    score(test, &preds)
}

/// Scores label-index predictions against the test split of `data`.
pub fn score(data: &TaskDataset, preds: &[Vec<usize>]) -> Result<f64> {
    let recs = &data.test.records;
    if preds.len() != recs.len() {
        return Err(Error::Shape(format!("{} predictions for {} test records", preds.len(), recs.len())));
    }
    match data.task {
        Task::Nli => {
            let index = label_index(&data.labels);
            let gold: Vec<usize> = recs.iter().map(|r| index[r.label.as_deref().unwrap_or("")]).collect();
            let p: Vec<usize> = preds.iter().map(|p| p[0]).collect();
            task_accuracy(&p, &gold)
        }
        Task::Ner | Task::Pos => {
            let gold: Vec<Vec<String>> = recs.iter().map(|r| r.tags.clone().unwrap_or_default()).collect();
            let pred: Vec<Vec<String>> = preds.iter().map(|p| p.iter().map(|&k| data.labels[k].clone()).collect()).collect();
            let f = if data.task == Task::Ner { span_f1(&pred, &gold)? } else { token_f1(&pred, &gold)? };
            Ok(100.0 * f.f1)
        }
    }
}

/// Fine-tunes on `train`'s training split and scores on `test`'s test split.
/// Training on derived data and testing on derived data gives B_S; training
/// on original data and testing on derived data gives B_Z.
pub fn finetune_eval(pretrained: &ModelState, bpe: &BpeModel, train: &TaskDataset, test: &TaskDataset, cfg: &FinetuneConfig) -> Result<f64> {
    if train.task != test.task || train.labels != test.labels {
        return Err(Error::Config("train and test datasets are for different tasks".into()));
    }
    let tuned = finetune(pretrained, bpe, train, cfg)?;
    evaluate(&tuned, bpe, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::TransformSpec;

    fn sizes() -> Sizes {
        Sizes { train: 200, dev: 50, test: 50 }
    }

    #[test]
    fn sizes_and_determinism() {
        let a = generate_task(Task::Pos, 3, sizes()).unwrap();
        assert_eq!(a.train.len() + a.dev.len() + a.test.len(), 300);
        assert_eq!(a, generate_task(Task::Pos, 3, sizes()).unwrap());
        assert_ne!(a, generate_task(Task::Pos, 4, sizes()).unwrap());
        for r in a.splits().iter().flat_map(|c| &c.records) {
            assert!(r.tags.as_ref().unwrap().iter().all(|t| a.labels.contains(t)));
            assert!(r.sentence.parse().is_some());
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let d = generate_task(Task::Ner, 1, sizes()).unwrap();
        let keys = |c: &Corpus| c.records.iter().map(record_key).collect::<HashSet<_>>();
        let (tr, de, te) = (keys(&d.train), keys(&d.dev), keys(&d.test));
        assert!(tr.is_disjoint(&de) && tr.is_disjoint(&te) && de.is_disjoint(&te));
    }

    #[test]
    fn ner_tags_are_valid_bio() {
        let d = generate_task(Task::Ner, 2, sizes()).unwrap();
        assert!(d.train.records.iter().all(|r| crate::transform::is_valid_bio(r.tags.as_ref().unwrap())));
        assert!(d.train.records.iter().any(|r| r.tags.as_ref().unwrap().iter().any(|t| t == "I-PER")));
    }

    #[test]
    fn pair_task_is_balanced_and_shares_vocabulary() {
        let d = generate_task(Task::Nli, 5, sizes()).unwrap();
        let vocab: HashSet<String> = grammar_vocabulary().into_iter().collect();
        let mut ent = 0;
        for r in &d.train.records {
            let h = r.pair_sentence.as_ref().unwrap();
            assert!(h.words().iter().chain(r.sentence.words()).all(|w| vocab.contains(w)));
            ent += usize::from(r.label.as_deref() == Some("entailment"));
        }
        assert!((70..=130).contains(&ent), "{ent}");
    }

    #[test]
    fn deriving_preserves_labels() {
        let d = generate_task(Task::Ner, 2, sizes()).unwrap();
        let t = Transformer::new(TransformSpec::trans_syn(1), &grammar_vocabulary()).unwrap();
        let x = derive_task(&d, &t).unwrap();
        assert_eq!(x.language(), Language::Derived);
        for (a, b) in d.test.records.iter().zip(&x.test.records) {
            let mut ta: Vec<_> = a.tags.clone().unwrap().into_iter().filter(|t| t != "O").map(|t| t[2..].to_string()).collect();
            let mut tb: Vec<_> = b.tags.clone().unwrap().into_iter().filter(|t| t != "O").map(|t| t[2..].to_string()).collect();
            ta.sort();
            tb.sort();
            assert_eq!(ta, tb);
            assert!(crate::transform::is_valid_bio(b.tags.as_ref().unwrap()));
        }
        let inv = Transformer::new(TransformSpec::trans_inv(), &grammar_vocabulary()).unwrap();
        let y = derive_task(&d, &inv).unwrap();
        let (a, b) = (&d.train.records[0], &y.train.records[0]);
        assert_eq!(a.sentence.len(), b.sentence.len());
        let orig: HashSet<&String> = d.train.records.iter().flat_map(|r| r.sentence.words()).collect();
        assert!(y.train.records.iter().flat_map(|r| r.sentence.words()).all(|w| !orig.contains(w)));
    }

    #[test]
    fn identity_spec_only_flips_language() {
        let d = generate_task(Task::Pos, 2, sizes()).unwrap();
        let t = Transformer::new(TransformSpec { steps: vec![] }, &grammar_vocabulary()).unwrap();
        let x = derive_task(&d, &t).unwrap();
        assert_eq!(x.train.records, d.train.records);
        assert_eq!(x.train.language, Language::Derived);
    }

    #[test]
    fn full_finetune_defaults() {
        let c = FinetuneConfig::full(Task::Nli);
        assert_eq!((c.learning_rate, c.epochs, c.batch_size, c.max_seq_len), (2e-5, 5, 32, 128));
        assert_eq!(FinetuneConfig::full(Task::Pos).epochs, 10);
    }
}
