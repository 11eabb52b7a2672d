//! Derived-language construction: transliteration, inversion and syntax
//! reordering, applied to corpora and to labeled task data.
//!
//! Transformations compose right to left: the spec `[Transliterate, Invert]`
//! inverts first and then transliterates, matching `Trans ∘ Inv`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, LabeledSentence, Language, Sentence};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tokenizer::SPECIAL_TOKENS;

/// Dependency parse of one sentence. `head[i]` is the 1-based index of the
/// head of word `i`, or 0 for the root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyParse {
    pub head: Vec<usize>,
    pub upos: Vec<String>,
    pub deprel: Vec<String>,
}

impl DependencyParse {
    pub fn len(&self) -> usize {
        self.head.len()
    }

    pub fn is_empty(&self) -> bool {
        self.head.is_empty()
    }

    /// Checks for a single root and an acyclic, connected head structure.
    pub fn validate(&self) -> Result<()> {
        let n = self.head.len();
        if self.upos.len() != n || self.deprel.len() != n {
            return Err(Error::MalformedParse("column lengths differ".into()));
        }
        let roots = self.head.iter().filter(|&&h| h == 0).count();
        if roots != 1 {
            return Err(Error::MalformedParse(format!("{roots} roots")));
        }
        if let Some(i) = self.head.iter().position(|&h| h > n) {
            return Err(Error::MalformedParse(format!(
                "word {} has head {} beyond sentence length {n}",
                i + 1,
                self.head[i]
            )));
        }
        // With one root, every node reaching it in at most n steps means no
        // cycle and a connected tree.
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while self.head[cur] != 0 {
                cur = self.head[cur] - 1;
                steps += 1;
                if steps > n {
                    return Err(Error::MalformedParse(format!(
                        "cycle through word {}",
                        start + 1
                    )));
                }
            }
        }
        Ok(())
    }

    fn children(&self) -> Vec<Vec<usize>> {
        let mut kids = vec![Vec::new(); self.len()];
        for (i, &h) in self.head.iter().enumerate() {
            if h != 0 {
                kids[h - 1].push(i);
            }
        }
        kids
    }

    fn subtree(&self, node: usize, kids: &[Vec<usize>]) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            out.insert(n);
            stack.extend(&kids[n]);
        }
        out
    }

    /// The parse re-indexed after words move: `order[new] = old`.
    fn permuted(&self, order: &[usize]) -> DependencyParse {
        let mut new_pos = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            new_pos[old] = new;
        }
        DependencyParse {
            head: order
                .iter()
                .map(|&old| match self.head[old] {
                    0 => 0,
                    h => new_pos[h - 1] + 1,
                })
                .collect(),
            upos: order.iter().map(|&o| self.upos[o].clone()).collect(),
            deprel: order.iter().map(|&o| self.deprel[o].clone()).collect(),
        }
    }
}

/// Reads tab-separated parses with columns index, word, upos, head, deprel.
/// Sentences are separated by blank lines; `#` lines are comments.
pub fn read_conllu(path: &Path) -> Result<Vec<Sentence>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut words = Vec::new();
    let mut parse = DependencyParse {
        head: vec![],
        upos: vec![],
        deprel: vec![],
    };
    let flush = |words: &mut Vec<String>, parse: &mut DependencyParse, out: &mut Vec<Sentence>| {
        if words.is_empty() {
            return Ok(());
        }
        let p = std::mem::replace(
            parse,
            DependencyParse {
                head: vec![],
                upos: vec![],
                deprel: vec![],
            },
        );
        out.push(Sentence::new(std::mem::take(words))?.with_parse(p)?);
        Ok::<(), Error>(())
    };
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end();
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            flush(&mut words, &mut parse, &mut out)?;
            continue;
        }
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 5 {
            return Err(malformed(format!("expected 5 columns, found {}", cols.len())));
        }
        let index: usize = cols[0]
            .parse()
            .map_err(|_| malformed(format!("bad index {:?}", cols[0])))?;
        if index != words.len() + 1 {
            return Err(malformed(format!("index {index} out of sequence")));
        }
        let head: usize = cols[3]
            .parse()
            .map_err(|_| malformed(format!("bad head {:?}", cols[3])))?;
        words.push(cols[1].to_string());
        parse.upos.push(cols[2].to_string());
        parse.head.push(head);
        parse.deprel.push(cols[4].to_string());
    }
    flush(&mut words, &mut parse, &mut out)?;
    Ok(out)
}

pub fn write_conllu(path: &Path, sentences: &[Sentence]) -> Result<()> {
    let mut buf = String::new();
    for s in sentences {
        let p = s
            .parse()
            .ok_or_else(|| Error::MalformedParse("sentence without parse".into()))?;
        for (i, w) in s.words().iter().enumerate() {
            buf.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                i + 1,
                w,
                p.upos[i],
                p.head[i],
                p.deprel[i]
            ));
        }
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Attaches parses, in order, to the corpus sentences they describe.
pub fn attach_parses(corpus: &mut Corpus, parsed: &[Sentence]) -> Result<()> {
    let n: usize = corpus.sentences().count();
    if n != parsed.len() {
        return Err(Error::MalformedParse(format!(
            "{} parses for {n} sentences",
            parsed.len()
        )));
    }
    let mut it = parsed.iter();
    let mut attach = |s: &mut Sentence| -> Result<()> {
        let p = it.next().expect("counted above");
        if p.words() != s.words() {
            return Err(Error::MalformedParse(format!(
                "parse words {:?} do not match sentence {:?}",
                p.words(),
                s.words()
            )));
        }
        *s = s.clone().with_parse(p.parse().cloned().expect("parsed"))?;
        Ok(())
    };
    for r in &mut corpus.records {
        attach(&mut r.sentence)?;
        if let Some(h) = r.pair_sentence.as_mut() {
            attach(h)?;
        }
    }
    Ok(())
}

/// Image of a word in the derived script: every BMP character `c` becomes
/// `U+F0000 + c`. Characters outside the BMP are kept as they are.
pub fn derive_word(word: &str) -> String {
    word.chars()
        .map(|c| {
            let cp = c as u32;
            if cp <= 0xFFFF {
                char::from_u32(0xF0000 + cp).expect("private use plane A")
            } else {
                c
            }
        })
        .collect()
}

/// Inverse of [`derive_word`] on derived-script characters.
pub fn underive_word(word: &str) -> String {
    word.chars()
        .map(|c| {
            let cp = c as u32;
            if (0xF0000..=0xFFFFF).contains(&cp) {
                char::from_u32(cp - 0xF0000).unwrap_or(c)
            } else {
                c
            }
        })
        .collect()
}

/// Word-level bijection from original to derived surface forms.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ScriptMap {
    word_map: BTreeMap<String, String>,
    overlap: BTreeSet<String>,
}

impl ScriptMap {
    /// Samples `⌊overlap_fraction · n⌋` of the non-reserved word types to map
    /// to themselves; every other type maps to its derived-script copy.
    pub fn build<S: AsRef<str>>(words: &[S], overlap_fraction: f64, seed: u64) -> Result<Self> {
        check_fraction("overlap_fraction", overlap_fraction)?;
        let types: BTreeSet<&str> = words.iter().map(AsRef::as_ref).collect();
        let mut candidates: Vec<&str> = types
            .iter()
            .copied()
            .filter(|w| !SPECIAL_TOKENS.contains(w))
            .collect();
        let k = (overlap_fraction * candidates.len() as f64).floor() as usize;
        candidates.shuffle(&mut rng_for(seed, stream::SCRIPT_MAP));
        let overlap: BTreeSet<String> = candidates[..k].iter().map(|w| w.to_string()).collect();
        let mut word_map = BTreeMap::new();
        for w in types {
            let image = if overlap.contains(w) || SPECIAL_TOKENS.contains(&w) {
                w.to_string()
            } else {
                derive_word(w)
            };
            word_map.insert(w.to_string(), image);
        }
        let map = ScriptMap { word_map, overlap };
        map.check_bijective()?;
        Ok(map)
    }

    fn check_bijective(&self) -> Result<()> {
        let images: BTreeSet<&String> = self.word_map.values().collect();
        if images.len() != self.word_map.len() {
            return Err(Error::Config(
                "script map is not injective (input already contains derived-script words)".into(),
            ));
        }
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&str> {
        self.word_map.get(word).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.word_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_map.is_empty()
    }

    pub fn overlap(&self) -> &BTreeSet<String> {
        &self.overlap
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.word_map.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn inverse(&self) -> HashMap<&str, &str> {
        self.iter().map(|(a, b)| (b, a)).collect()
    }

    /// Two-column TSV: original word, derived word.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for (a, b) in self.iter() {
            writeln!(f, "{a}\t{b}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut word_map = BTreeMap::new();
        let mut overlap = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let (a, b) = line.split_once('\t').ok_or_else(|| Error::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "expected two tab-separated columns".into(),
            })?;
            if a == b && !SPECIAL_TOKENS.contains(&a) {
                overlap.insert(a.to_string());
            }
            word_map.insert(a.to_string(), b.to_string());
        }
        let map = ScriptMap { word_map, overlap };
        map.check_bijective()?;
        Ok(map)
    }
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} is outside [0, 1]")))
    }
}

/// One transformation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformStep {
    Transliterate {
        overlap_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
    Invert,
    Syntax {
        p_sov: f64,
        p_an: f64,
        seed: u64,
    },
}

impl TransformStep {
    pub fn short_name(&self) -> &'static str {
        match self {
            TransformStep::Transliterate { .. } => "Trans",
            TransformStep::Invert => "Inv",
            TransformStep::Syntax { .. } => "Syn",
        }
    }
}

/// Composition of steps, written outermost first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TransformSpec {
    pub steps: Vec<TransformStep>,
}

impl TransformSpec {
    pub fn new(steps: Vec<TransformStep>) -> Result<Self> {
        let spec = TransformSpec { steps };
        spec.validate()?;
        Ok(spec)
    }

    pub fn trans() -> Self {
        TransformSpec {
            steps: vec![TransformStep::Transliterate {
                overlap_fraction: 0.0,
                seed: 0,
            }],
        }
    }

    pub fn trans_inv() -> Self {
        TransformSpec {
            steps: vec![
                TransformStep::Transliterate {
                    overlap_fraction: 0.0,
                    seed: 0,
                },
                TransformStep::Invert,
            ],
        }
    }

    pub fn trans_syn(seed: u64) -> Self {
        TransformSpec {
            steps: vec![
                TransformStep::Transliterate {
                    overlap_fraction: 0.0,
                    seed: 0,
                },
                TransformStep::Syntax {
                    p_sov: 1.0,
                    p_an: 1.0,
                    seed,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for step in &self.steps {
            match *step {
                TransformStep::Transliterate {
                    overlap_fraction, ..
                } => check_fraction("overlap_fraction", overlap_fraction)?,
                TransformStep::Syntax { p_sov, p_an, .. } => {
                    check_fraction("p_sov", p_sov)?;
                    check_fraction("p_an", p_an)?;
                }
                TransformStep::Invert => {}
            }
        }
        Ok(())
    }

    pub fn needs_parses(&self) -> bool {
        self.steps
            .iter()
            .any(|s| matches!(s, TransformStep::Syntax { .. }))
    }

    pub fn transliterate_step(&self) -> Option<(f64, u64)> {
        self.steps.iter().find_map(|s| match *s {
            TransformStep::Transliterate {
                overlap_fraction,
                seed,
            } => Some((overlap_fraction, seed)),
            _ => None,
        })
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.steps.is_empty() {
            return f.write_str("Identity");
        }
        let names: Vec<&str> = self.steps.iter().map(TransformStep::short_name).collect();
        f.write_str(&names.join("+"))
    }
}

impl std::str::FromStr for TransformSpec {
    type Err = Error;

    /// Parses names such as `Trans+Inv`, with default parameters: no
    /// overlap, and SOV and AN order always applied by syntax steps.
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("identity") {
            return Ok(TransformSpec::default());
        }
        let steps = s
            .split('+')
            .map(|name| match name.trim().to_ascii_lowercase().as_str() {
                "trans" => Ok(TransformStep::Transliterate { overlap_fraction: 0.0, seed: 0 }),
                "inv" => Ok(TransformStep::Invert),
                "syn" => Ok(TransformStep::Syntax { p_sov: 1.0, p_an: 1.0, seed: 0 }),
                other => Err(Error::Config(format!("unknown transform step {other:?} (expected Trans, Inv or Syn)"))),
            })
            .collect::<Result<Vec<_>>>()?;
        TransformSpec::new(steps)
    }
}

/// Word-wise image under the map.
pub fn transliterate(sentence: &Sentence, map: &ScriptMap) -> Result<Sentence> {
    let words = sentence
        .words()
        .iter()
        .map(|w| {
            map.get(w)
                .map(str::to_string)
                .ok_or_else(|| Error::OutOfVocabulary(w.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sentence::from_parts(words, sentence.parse().cloned()))
}

pub fn invert(sentence: &Sentence) -> Sentence {
    let order: Vec<usize> = (0..sentence.len()).rev().collect();
    reorder(sentence, &order)
}

fn reorder(sentence: &Sentence, order: &[usize]) -> Sentence {
    let words = order.iter().map(|&i| sentence.words()[i].clone()).collect();
    Sentence::from_parts(words, sentence.parse().map(|p| p.permuted(order)))
}

fn is_object(rel: &str) -> bool {
    matches!(rel, "obj" | "dobj")
}

fn is_adjective(rel: &str, upos: &str) -> bool {
    rel == "amod" || upos == "ADJ"
}

/// The word order produced by syntax reordering, as `order[new] = old`.
///
/// Heads are visited left to right. For a `VERB` head, each object subtree is
/// moved, with probability `p_sov`, to just before the verb. For a `NOUN` or
/// `PROPN` head, each adjective dependent subtree is moved, with probability
/// `p_an`, to just before the noun. Moved subtrees keep their internal order.
/// One uniform draw is consumed per eligible dependent regardless of the
/// probabilities, so the random stream does not depend on them.
pub fn syntax_order<R: Rng>(
    parse: &DependencyParse,
    p_sov: f64,
    p_an: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    parse.validate()?;
    let kids = parse.children();
    let mut order: Vec<usize> = (0..parse.len()).collect();
    for head in 0..parse.len() {
        let (prob, eligible): (f64, Vec<usize>) = match parse.upos[head].as_str() {
            "VERB" => (
                p_sov,
                kids[head]
                    .iter()
                    .copied()
                    .filter(|&k| is_object(&parse.deprel[k]))
                    .collect(),
            ),
            "NOUN" | "PROPN" => (
                p_an,
                kids[head]
                    .iter()
                    .copied()
                    .filter(|&k| is_adjective(&parse.deprel[k], &parse.upos[k]))
                    .collect(),
            ),
            _ => continue,
        };
        for dep in eligible {
            let draw: f64 = rng.gen();
            if draw < prob {
                let moved = parse.subtree(dep, &kids);
                let block: Vec<usize> = order.iter().copied().filter(|i| moved.contains(i)).collect();
                order.retain(|i| !moved.contains(i));
                let at = order.iter().position(|&i| i == head).expect("head not moved");
                order.splice(at..at, block);
            }
        }
    }
    Ok(order)
}

/// Stochastic SVO→SOV and NA→AN reordering; see [`syntax_order`].
pub fn syntax_permute<R: Rng>(
    sentence: &Sentence,
    parse: &DependencyParse,
    p_sov: f64,
    p_an: f64,
    rng: &mut R,
) -> Result<Sentence> {
    if parse.len() != sentence.len() {
        return Err(Error::MalformedParse(format!(
            "parse has {} nodes for a {}-word sentence",
            parse.len(),
            sentence.len()
        )));
    }
    let order = syntax_order(parse, p_sov, p_an, rng)?;
    let words = order.iter().map(|&i| sentence.words()[i].clone()).collect();
    Ok(Sentence::from_parts(words, Some(parse.permuted(&order))))
}

/// A transform spec bound to the script map it transliterates with.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub spec: TransformSpec,
    pub script_map: ScriptMap,
}

impl Transformer {
    /// Builds the script map over the given vocabulary. Every corpus later
    /// transformed must draw its words from it.
    pub fn new<S: AsRef<str>>(spec: TransformSpec, vocabulary: &[S]) -> Result<Self> {
        spec.validate()?;
        let script_map = match spec.transliterate_step() {
            Some((overlap, seed)) => ScriptMap::build(vocabulary, overlap, seed)?,
            None => ScriptMap::default(),
        };
        Ok(Transformer { spec, script_map })
    }

    pub fn with_map(spec: TransformSpec, script_map: ScriptMap) -> Result<Self> {
        spec.validate()?;
        Ok(Transformer { spec, script_map })
    }

    /// Applies all steps to one sentence, returning it with `order[new] = old`.
    /// `index` selects the sentence's random stream for syntax reordering.
    pub fn sentence(&self, sentence: &Sentence, index: u64) -> Result<(Sentence, Vec<usize>)> {
        let mut cur = sentence.clone();
        let mut order: Vec<usize> = (0..sentence.len()).collect();
        for step in self.spec.steps.iter().rev() {
            match *step {
                TransformStep::Transliterate { .. } => {
                    cur = transliterate(&cur, &self.script_map)?;
                }
                TransformStep::Invert => {
                    cur = invert(&cur);
                    order.reverse();
                }
                TransformStep::Syntax { p_sov, p_an, seed } => {
                    let parse = cur.parse().cloned().ok_or_else(|| {
                        Error::Config("syntax step needs a dependency parse on every sentence".into())
                    })?;
                    let mut rng = rng_for(seed ^ stream::SYNTAX, index);
                    let step_order = syntax_order(&parse, p_sov, p_an, &mut rng)?;
                    cur = reorder(&cur, &step_order);
                    order = step_order.iter().map(|&i| order[i]).collect();
                }
            }
        }
        Ok((cur, order))
    }

    /// Transforms a labeled record. Tags travel with their words and BIO tags
    /// are repaired afterwards; a pair's second sentence is transformed too.
    pub fn labeled(&self, labeled: &LabeledSentence, index: u64) -> Result<LabeledSentence> {
        let (sentence, order) = self.sentence(&labeled.sentence, 2 * index)?;
        let tags = labeled.tags.as_ref().map(|tags| {
            let moved: Vec<String> = order.iter().map(|&i| tags[i].clone()).collect();
            if is_bio(tags) {
                repair_bio(tags, &order)
            } else {
                moved
            }
        });
        let pair_sentence = match &labeled.pair_sentence {
            Some(h) => Some(self.sentence(h, 2 * index + 1)?.0),
            None => None,
        };
        Ok(LabeledSentence {
            sentence,
            tags,
            pair_sentence,
            label: labeled.label.clone(),
        })
    }

    /// Transforms every record; record `i` uses random stream `i`.
    pub fn corpus(&self, corpus: &Corpus) -> Result<Corpus> {
        let records = corpus
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| self.labeled(r, i as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus::new(records, Language::Derived))
    }
}

/// Builds the script map from `corpus` itself and transforms it.
pub fn apply_transform(spec: &TransformSpec, corpus: &Corpus) -> Result<Corpus> {
    Transformer::new(spec.clone(), &corpus.word_types())?.corpus(corpus)
}

/// Convenience wrapper around [`Transformer::labeled`] for a single record.
pub fn transform_labeled(
    transformer: &Transformer,
    labeled: &LabeledSentence,
) -> Result<LabeledSentence> {
    transformer.labeled(labeled, 0)
}

pub fn is_bio(tags: &[String]) -> bool {
    tags.iter().any(|t| t.starts_with("B-") || t.starts_with("I-"))
}

/// Splits a BIO sequence into spans; returns the span id of each position
/// (`None` for `O`) and the entity type of each span.
fn bio_spans(tags: &[String]) -> (Vec<Option<usize>>, Vec<String>) {
    let mut ids = Vec::with_capacity(tags.len());
    let mut types: Vec<String> = Vec::new();
    let mut prev: Option<usize> = None;
    for t in tags {
        let id = if let Some(ty) = t.strip_prefix("B-") {
            types.push(ty.to_string());
            Some(types.len() - 1)
        } else if let Some(ty) = t.strip_prefix("I-") {
            match prev {
                Some(p) if types[p] == ty => Some(p),
                _ => {
                    types.push(ty.to_string());
                    Some(types.len() - 1)
                }
            }
        } else {
            None
        };
        ids.push(id);
        prev = id;
    }
    (ids, types)
}

/// Re-serializes BIO tags after words moved (`order[new] = old`): each
/// contiguous run of one original span becomes `B-x` followed by `I-x`.
pub fn repair_bio(tags: &[String], order: &[usize]) -> Vec<String> {
    let (ids, types) = bio_spans(tags);
    let mut out = Vec::with_capacity(order.len());
    let mut prev: Option<usize> = None;
    for &old in order {
        let id = ids[old];
        out.push(match id {
            None => "O".to_string(),
            Some(s) if prev == Some(s) => format!("I-{}", types[s]),
            Some(s) => format!("B-{}", types[s]),
        });
        prev = id;
    }
    out
}

/// A BIO sequence is valid when every `I-x` continues a `B-x` or `I-x`.
pub fn is_valid_bio(tags: &[String]) -> bool {
    let mut prev: Option<&str> = None;
    for t in tags {
        if let Some(ty) = t.strip_prefix("I-") {
            if prev != Some(ty) {
                return false;
            }
        }
        prev = t
            .strip_prefix("B-")
            .or_else(|| t.strip_prefix("I-"));
    }
    true
}
