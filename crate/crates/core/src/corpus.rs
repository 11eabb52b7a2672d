//! Sentences, labeled records and the on-disk corpus formats.
//!
//! Two formats are read:
//!
//! * plain text: one document per line, whitespace-tokenized, segmented into
//!   sentences at the period token;
//! * JSONL: one sentence per record. Unlabeled records are `{"words": [...]}`,
//!   tagging records `{"words": [...], "tags": [...]}`, sentence
//!   classification `{"words": [...], "label": ...}` and pair classification
//!   `{"premise": [...], "hypothesis": [...], "label": ...}`.
//!
//! Records may carry an optional dependency parse (`parse`, or
//! `premise_parse` / `hypothesis_parse` for pairs) so that syntax reordering
//! can be applied after a round trip through disk.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::DependencyParse;

/// Word that terminates a sentence.
pub const SENTENCE_BOUNDARY: &str = ".";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Language {
    Original,
    Derived,
}

impl Language {
    pub fn id(self) -> u32 {
        match self {
            Language::Original => 0,
            Language::Derived => 1,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(Language::Original),
            1 => Some(Language::Derived),
            _ => None,
        }
    }
}

/// A non-empty sequence of non-empty words, optionally with its parse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    words: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parse: Option<DependencyParse>,
}

impl Sentence {
    pub fn new<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let words: Vec<String> = words.into_iter().map(Into::into).collect();
        if words.is_empty() {
            return Err(Error::InvalidSentence("sentence has no words".into()));
        }
        if let Some(i) = words.iter().position(|w| w.is_empty()) {
            return Err(Error::InvalidSentence(format!("word {i} is empty")));
        }
        Ok(Sentence { words, parse: None })
    }

    /// Attaches a parse; it must cover the sentence word for word.
    pub fn with_parse(mut self, parse: DependencyParse) -> Result<Self> {
        if parse.len() != self.words.len() {
            return Err(Error::MalformedParse(format!(
                "parse has {} nodes for a {}-word sentence",
                parse.len(),
                self.words.len()
            )));
        }
        parse.validate()?;
        self.parse = Some(parse);
        Ok(self)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn parse(&self) -> Option<&DependencyParse> {
        self.parse.as_ref()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub(crate) fn from_parts(words: Vec<String>, parse: Option<DependencyParse>) -> Self {
        debug_assert!(!words.is_empty());
        Sentence { words, parse }
    }

    pub fn into_words(self) -> Vec<String> {
        self.words
    }
}

/// A sentence with whatever task annotation it carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSentence {
    pub sentence: Sentence,
    pub tags: Option<Vec<String>>,
    pub pair_sentence: Option<Sentence>,
    pub label: Option<String>,
}

impl LabeledSentence {
    pub fn plain(sentence: Sentence) -> Self {
        LabeledSentence {
            sentence,
            tags: None,
            pair_sentence: None,
            label: None,
        }
    }

    pub fn tagged(sentence: Sentence, tags: Vec<String>) -> Result<Self> {
        if tags.len() != sentence.len() {
            return Err(Error::InvalidSentence(format!(
                "{} tags for {} words",
                tags.len(),
                sentence.len()
            )));
        }
        Ok(LabeledSentence {
            sentence,
            tags: Some(tags),
            pair_sentence: None,
            label: None,
        })
    }

    pub fn classified(sentence: Sentence, label: impl Into<String>) -> Self {
        LabeledSentence {
            sentence,
            tags: None,
            pair_sentence: None,
            label: Some(label.into()),
        }
    }

    pub fn pair(premise: Sentence, hypothesis: Sentence, label: impl Into<String>) -> Self {
        LabeledSentence {
            sentence: premise,
            tags: None,
            pair_sentence: Some(hypothesis),
            label: Some(label.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classify,
    PairClassify,
    Tag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextFormat {
    Plain,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<LabeledSentence>,
    pub language: Language,
}

impl Corpus {
    pub fn new(records: Vec<LabeledSentence>, language: Language) -> Self {
        Corpus { records, language }
    }

    pub fn from_sentences(sentences: Vec<Sentence>, language: Language) -> Self {
        Corpus {
            records: sentences.into_iter().map(LabeledSentence::plain).collect(),
            language,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Every sentence in the corpus, including the second sentence of pairs.
    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.records
            .iter()
            .flat_map(|r| std::iter::once(&r.sentence).chain(r.pair_sentence.as_ref()))
    }

    /// Distinct words in first-occurrence order.
    pub fn word_types(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for s in self.sentences() {
            for w in s.words() {
                if seen.insert(w.as_str()) {
                    out.push(w.clone());
                }
            }
        }
        out
    }
}

/// Splits a word stream into sentences. Each boundary word closes the
/// sentence it ends; a trailing fragment is kept as its own sentence.
pub fn split_sentences<S: AsRef<str>>(words: &[S], boundary: &str) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    for w in words {
        let w = w.as_ref();
        current.push(w.to_string());
        if w == boundary {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads an unlabeled corpus. Plain text is segmented at periods; each JSONL
/// record is taken as one sentence.
pub fn load_text_corpus(path: &Path, format: TextFormat) -> Result<Corpus> {
    let reader = open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match format {
            TextFormat::Plain => {
                let words: Vec<&str> = line.split_whitespace().collect();
                for s in split_sentences(&words, SENTENCE_BOUNDARY) {
                    records.push(LabeledSentence::plain(Sentence::from_parts(s, None)));
                }
            }
            TextFormat::Jsonl => {
                let rec = parse_json_line(path, lineno + 1, &line)?;
                let sentence = rec
                    .sentence("words", rec.words.clone(), rec.parse.clone())
                    .map_err(|reason| Error::Malformed {
                        path: path.to_path_buf(),
                        line: lineno + 1,
                        reason,
                    })?;
                records.push(LabeledSentence::plain(sentence));
            }
        }
    }
    Ok(Corpus::new(records, Language::Original))
}

/// Reads task data in the JSONL schema for `kind`.
pub fn load_labeled_corpus(path: &Path, kind: TaskKind) -> Result<Corpus> {
    let reader = open(path)?;
    let mut records = Vec::new();
    let mut index = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_json_line(path, lineno + 1, &line)?;
        let labeled = rec
            .into_labeled(kind)
            .map_err(|reason| Error::Schema { index, reason })?;
        records.push(labeled);
        index += 1;
    }
    Ok(Corpus::new(records, Language::Original))
}

/// Writes the corpus as JSONL in the schema matching each record's shape.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut buf = Vec::new();
    for r in &corpus.records {
        let rec = JsonRecord::from_labeled(r);
        serde_json::to_writer(&mut buf, &rec)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn parse_json_line(path: &Path, line: usize, text: &str) -> Result<JsonRecord> {
    serde_json::from_str(text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        line,
        reason: e.to_string(),
    })
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct JsonRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    words: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    premise: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hypothesis: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<JsonLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parse: Option<DependencyParse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    premise_parse: Option<DependencyParse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hypothesis_parse: Option<DependencyParse>,
}

/// Labels may be written as strings or numbers; both read back as strings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum JsonLabel {
    Text(String),
    Number(serde_json::Number),
}

impl JsonLabel {
    fn into_string(self) -> String {
        match self {
            JsonLabel::Text(s) => s,
            JsonLabel::Number(n) => n.to_string(),
        }
    }
}

impl JsonRecord {
    fn sentence(
        &self,
        field: &str,
        words: Option<Vec<String>>,
        parse: Option<DependencyParse>,
    ) -> Result<Sentence, String> {
        let words = words.ok_or_else(|| format!("missing field `{field}`"))?;
        let s = Sentence::new(words).map_err(|e| format!("`{field}`: {e}"))?;
        match parse {
            Some(p) => s.with_parse(p).map_err(|e| format!("`{field}`: {e}")),
            None => Ok(s),
        }
    }

    fn into_labeled(self, kind: TaskKind) -> Result<LabeledSentence, String> {
        match kind {
            TaskKind::Tag => {
                let s = self.sentence("words", self.words.clone(), self.parse.clone())?;
                let tags = self.tags.ok_or("missing field `tags`")?;
                LabeledSentence::tagged(s, tags).map_err(|e| e.to_string())
            }
            TaskKind::Classify => {
                let s = self.sentence("words", self.words.clone(), self.parse.clone())?;
                let label = self.label.ok_or("missing field `label`")?;
                Ok(LabeledSentence::classified(s, label.into_string()))
            }
            TaskKind::PairClassify => {
                let p =
                    self.sentence("premise", self.premise.clone(), self.premise_parse.clone())?;
                let h = self.sentence(
                    "hypothesis",
                    self.hypothesis.clone(),
                    self.hypothesis_parse.clone(),
                )?;
                let label = self.label.ok_or("missing field `label`")?;
                Ok(LabeledSentence::pair(p, h, label.into_string()))
            }
        }
    }

    fn from_labeled(r: &LabeledSentence) -> Self {
        let label = r.label.clone().map(JsonLabel::Text);
        match &r.pair_sentence {
            Some(h) => JsonRecord {
                premise: Some(r.sentence.words().to_vec()),
                hypothesis: Some(h.words().to_vec()),
                premise_parse: r.sentence.parse().cloned(),
                hypothesis_parse: h.parse().cloned(),
                label,
                ..Default::default()
            },
            None => JsonRecord {
                words: Some(r.sentence.words().to_vec()),
                tags: r.tags.clone(),
                parse: r.sentence.parse().cloned(),
                label,
                ..Default::default()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn words(s: &Sentence) -> Vec<&str> {
        s.words().iter().map(String::as_str).collect()
    }

    #[test]
    fn plain_text_splits_at_periods() {
        let f = write_tmp("I am Sam . I am\n");
        let c = load_text_corpus(f.path(), TextFormat::Plain).unwrap();
        let got: Vec<Vec<&str>> = c.sentences().map(words).collect();
        assert_eq!(got, vec![vec!["I", "am", "Sam", "."], vec!["I", "am"]]);
        assert_eq!(c.language, Language::Original);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let f = write_tmp("");
        assert!(load_text_corpus(f.path(), TextFormat::Plain)
            .unwrap()
            .is_empty());
        assert!(load_text_corpus(f.path(), TextFormat::Jsonl)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn jsonl_records_are_sentences() {
        let f = write_tmp("{\"words\":[\"a\"]}\n{\"words\":[\"b\"]}\n{\"words\":[\".\"]}\n");
        let c = load_text_corpus(f.path(), TextFormat::Jsonl).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.sentences().all(|s| s.len() == 1));
    }

    #[test]
    fn malformed_jsonl_reports_line() {
        let f = write_tmp("{\"words\":[\"a\"]}\n\n{not json\n");
        match load_text_corpus(f.path(), TextFormat::Jsonl) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_text_corpus(Path::new("/nonexistent/x.txt"), TextFormat::Plain);
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    #[test]
    fn split_sentence_cases() {
        assert_eq!(
            split_sentences(&["a", "b", ".", "c"], "."),
            vec![vec!["a", "b", "."], vec!["c"]]
        );
        assert_eq!(split_sentences(&["a", "b", "c"], "."), vec![vec!["a", "b", "c"]]);
        assert_eq!(split_sentences(&["."], "."), vec![vec!["."]]);
        assert!(split_sentences::<&str>(&[], ".").is_empty());
    }

    #[test]
    fn labeled_records() {
        let f = write_tmp("{\"words\":[\"Sara\",\"ate\"],\"tags\":[\"NOUN\",\"VERB\"]}\n");
        let c = load_labeled_corpus(f.path(), TaskKind::Tag).unwrap();
        assert_eq!(c.records[0].tags.as_ref().unwrap().len(), 2);

        let f = write_tmp(
            "{\"premise\":[\"a\",\"b\"],\"hypothesis\":[\"a\"],\"label\":\"entail\"}\n",
        );
        let c = load_labeled_corpus(f.path(), TaskKind::PairClassify).unwrap();
        assert!(c.records[0].pair_sentence.is_some());
        assert_eq!(c.records[0].label.as_deref(), Some("entail"));

        let f = write_tmp("{\"words\":[\"a\"],\"label\":3}\n");
        let c = load_labeled_corpus(f.path(), TaskKind::Classify).unwrap();
        assert_eq!(c.records[0].label.as_deref(), Some("3"));
    }

    #[test]
    fn tag_count_mismatch_is_schema_error() {
        let f = write_tmp(
            "{\"words\":[\"x\"],\"tags\":[\"O\"]}\n{\"words\":[\"Sara\",\"ate\"],\"tags\":[\"A\",\"B\",\"C\"]}\n",
        );
        match load_labeled_corpus(f.path(), TaskKind::Tag) {
            Err(Error::Schema { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pair_schema_requires_hypothesis() {
        let f = write_tmp("{\"premise\":[\"a\"],\"label\":\"x\"}\n");
        assert!(matches!(
            load_labeled_corpus(f.path(), TaskKind::PairClassify),
            Err(Error::Schema { index: 0, .. })
        ));
    }

    #[test]
    fn sentence_invariants() {
        assert!(Sentence::new(Vec::<String>::new()).is_err());
        assert!(Sentence::new(["a", ""]).is_err());
        assert!(Sentence::new(["a"]).is_ok());
    }

    #[test]
    fn write_then_load_round_trips() {
        let c = Corpus::new(
            vec![
                LabeledSentence::tagged(Sentence::new(["New", "York"]).unwrap(), vec![
                    "B-LOC".into(),
                    "I-LOC".into(),
                ])
                .unwrap(),
            ],
            Language::Original,
        );
        let f = tempfile::NamedTempFile::new().unwrap();
        write_corpus(f.path(), &c).unwrap();
        assert_eq!(load_labeled_corpus(f.path(), TaskKind::Tag).unwrap(), c);
    }

    proptest::proptest! {
        #[test]
        fn split_is_a_partition(ws in proptest::collection::vec(
            proptest::prop_oneof![proptest::strategy::Just(".".to_string()), "[a-c]{1,2}"], 0..40)) {
            let parts = split_sentences(&ws, ".");
            let flat: Vec<String> = parts.iter().flatten().cloned().collect();
            proptest::prop_assert_eq!(flat, ws);
            for p in &parts[..parts.len().saturating_sub(1)] {
                proptest::prop_assert_eq!(p.last().map(String::as_str), Some("."));
            }
        }

        #[test]
        fn plain_corpus_round_trips(docs in proptest::collection::vec(
            proptest::collection::vec(proptest::prop_oneof![
                proptest::strategy::Just(".".to_string()), "[a-zé]{1,4}"], 1..12), 0..6)) {
            let text: String = docs.iter().map(|d| d.join(" ") + "\n").collect();
            let f = write_tmp(&text);
            let c = load_text_corpus(f.path(), TextFormat::Plain).unwrap();
            let out = tempfile::NamedTempFile::new().unwrap();
            write_corpus(out.path(), &c).unwrap();
            let back = load_text_corpus(out.path(), TextFormat::Jsonl).unwrap();
            proptest::prop_assert_eq!(back, c);
        }
    }
}
