//! Shared byte-pair-encoding vocabulary and the bilingual token dictionary.
//!
//! Merges are learned within words. A word is split into characters and its
//! last character carries an end-of-word marker, so `ab` and `ab</w>` are
//! different symbols. At each step the most frequent adjacent pair is merged;
//! frequency ties go to the lexicographically greatest `(left, right)` pair,
//! comparing symbol text first and the end-of-word flag second.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::transform::ScriptMap;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;

/// Reserved tokens, in id order.
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];
pub const N_SPECIAL: u32 = SPECIAL_TOKENS.len() as u32;

const END_OF_WORD: &str = "</w>";

pub fn is_special(id: u32) -> bool {
    id < N_SPECIAL
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Symbol {
    text: String,
    word_final: bool,
}

impl Symbol {
    fn token(&self) -> String {
        if self.word_final {
            format!("{}{END_OF_WORD}", self.text)
        } else {
            self.text.clone()
        }
    }

    fn parse(token: &str) -> Symbol {
        match token.strip_suffix(END_OF_WORD) {
            Some(text) if !text.is_empty() => Symbol {
                text: text.to_string(),
                word_final: true,
            },
            _ => Symbol {
                text: token.to_string(),
                word_final: false,
            },
        }
    }

    fn merge(&self, right: &Symbol) -> Symbol {
        Symbol {
            text: format!("{}{}", self.text, right.text),
            word_final: right.word_final,
        }
    }
}

fn word_symbols(word: &str) -> Vec<Symbol> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| Symbol {
            text: c.to_string(),
            word_final: i + 1 == chars.len(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    vocab: HashMap<String, u32>,
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
}

impl BpeModel {
    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let vocab: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if vocab.len() != tokens.len() {
            return Err(Error::Config("duplicate token in vocabulary".into()));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Config(format!("special token {s} must have id {i}")));
            }
        }
        let mut merge_rank = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |t: &str| {
                vocab
                    .get(t)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("merge uses unknown token {t:?}")))
            };
            let merged = Symbol::parse(l).merge(&Symbol::parse(r)).token();
            merge_rank.insert((lookup(l)?, lookup(r)?), (rank, lookup(&merged)?));
        }
        Ok(BpeModel {
            merges,
            tokens,
            vocab,
            merge_rank,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// The model after only its first `n_merges` merges. Ids of the kept
    /// tokens are unchanged.
    pub fn truncated(&self, n_merges: usize) -> Result<BpeModel> {
        let n = n_merges.min(self.merges.len());
        let product = |(l, r): &(String, String)| Symbol::parse(l).merge(&Symbol::parse(r)).token();
        let all: HashSet<String> = self.merges.iter().map(product).collect();
        let kept: HashSet<String> = self.merges[..n].iter().map(product).collect();
        let tokens = self.tokens.iter().filter(|t| !all.contains(*t) || kept.contains(*t)).cloned().collect();
        BpeModel::from_parts(tokens, self.merges[..n].to_vec())
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    /// Tokens of one word. Characters outside the alphabet become UNK.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        if let Some(i) = SPECIAL_TOKENS.iter().position(|s| *s == word) {
            return vec![i as u32];
        }
        let mut ids: Vec<u32> = word_symbols(word)
            .iter()
            .map(|s| self.vocab.get(&s.token()).copied().unwrap_or(UNK))
            .collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).map(|&(r, m)| (r, w[0], w[1], m)))
                .min();
            let Some((_, l, r, merged)) = best else { break };
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    pub fn encode(&self, words: &[String]) -> Vec<u32> {
        words.iter().flat_map(|w| self.encode_word(w)).collect()
    }

    /// Encodes with a per-word cache; returns tokens and, for each word, the
    /// index of its first token.
    pub fn encode_with_offsets(
        &self,
        words: &[String],
        cache: &mut HashMap<String, Vec<u32>>,
    ) -> (Vec<u32>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut starts = Vec::with_capacity(words.len());
        for w in words {
            starts.push(ids.len());
            let enc = cache
                .entry(w.clone())
                .or_insert_with(|| self.encode_word(w));
            ids.extend_from_slice(enc);
        }
        (ids, starts)
    }

    /// Inverse of [`encode`](Self::encode) on in-vocabulary text. Padding is
    /// skipped; other special tokens decode as their own words.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        let mut words = Vec::new();
        let mut cur = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::InvalidTokenId(id))?;
            if id == PAD {
                continue;
            }
            if is_special(id) && id != UNK {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(tok.to_string());
                continue;
            }
            let sym = Symbol::parse(tok);
            cur.push_str(&sym.text);
            if sym.word_final {
                words.push(std::mem::take(&mut cur));
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        Ok(words)
    }

    /// Merges file: one `left right` pair per line, in learned order.
    pub fn write(&self, merges_path: &Path, vocab_path: &Path) -> Result<()> {
        let mut m = String::new();
        for (l, r) in &self.merges {
            m.push_str(&format!("{l} {r}\n"));
        }
        fs::write(merges_path, m).map_err(|e| Error::io(merges_path, e))?;
        let mut f = fs::File::create(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(f, "{t}\t{i}").map_err(|e| Error::io(vocab_path, e))?;
        }
        Ok(())
    }

    pub fn read(merges_path: &Path, vocab_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (l, r) = line.split_once(' ').ok_or_else(|| Error::Malformed {
                path: merges_path.to_path_buf(),
                line: i + 1,
                reason: "expected `left right`".into(),
            })?;
            merges.push((l.to_string(), r.to_string()));
        }
        let text = fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let malformed = |reason: &str| Error::Malformed {
                path: vocab_path.to_path_buf(),
                line: i + 1,
                reason: reason.into(),
            };
            let (t, id) = line.rsplit_once('\t').ok_or_else(|| malformed("expected `token\\tid`"))?;
            let id: usize = id.parse().map_err(|_| malformed("bad id"))?;
            if id != tokens.len() {
                return Err(malformed("ids must be dense and ascending"));
            }
            tokens.push(t.to_string());
        }
        BpeModel::from_parts(tokens, merges)
    }
}

/// Number of distinct initial symbols in the corpora.
pub fn alphabet_size(corpora: &[&Corpus]) -> usize {
    let mut set = HashSet::new();
    for c in corpora {
        for s in c.sentences() {
            for w in s.words() {
                set.extend(word_symbols(w));
            }
        }
    }
    set.len()
}

/// Learns merges over the concatenated corpora until the vocabulary holds
/// `vocab_size` tokens or no pair is left to merge.
pub fn train_bpe(corpora: &[&Corpus], vocab_size: usize) -> Result<BpeModel> {
    // Word types in first-occurrence order with their counts.
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut words: Vec<(Vec<Symbol>, u64)> = Vec::new();
    for c in corpora {
        for s in c.sentences() {
            for w in s.words() {
                if SPECIAL_TOKENS.contains(&w.as_str()) {
                    continue;
                }
                match index.get(w.as_str()) {
                    Some(&i) => words[i].1 += 1,
                    None => {
                        index.insert(w.as_str(), words.len());
                        words.push((word_symbols(w), 1));
                    }
                }
            }
        }
    }

    let alphabet: std::collections::BTreeSet<Symbol> =
        words.iter().flat_map(|(w, _)| w.iter().cloned()).collect();
    let minimum = SPECIAL_TOKENS.len() + alphabet.len();
    if vocab_size < minimum {
        return Err(Error::VocabTooSmall {
            requested: vocab_size,
            minimum,
        });
    }
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.iter().map(Symbol::token));
    let mut known: HashSet<String> = tokens.iter().cloned().collect();
    let mut merges = Vec::new();

    while tokens.len() < vocab_size {
        let mut counts: BTreeMap<(&Symbol, &Symbol), u64> = BTreeMap::new();
        for (w, n) in &words {
            for pair in w.windows(2) {
                *counts.entry((&pair[0], &pair[1])).or_default() += n;
            }
        }
        // BTreeMap iterates in ascending pair order, so `max_by_key` keeps the
        // greatest pair among equal counts.
        let Some(((l, r), _)) = counts.into_iter().max_by_key(|&(_, n)| n) else {
            break;
        };
        let (l, r) = (l.clone(), r.clone());
        let merged = l.merge(&r);
        for (w, _) in &mut words {
            let mut i = 0;
            while i + 1 < w.len() {
                if w[i] == l && w[i + 1] == r {
                    w[i] = merged.clone();
                    w.remove(i + 1);
                }
                i += 1;
            }
        }
        merges.push((l.token(), r.token()));
        if known.insert(merged.token()) {
            tokens.push(merged.token());
        }
    }
    BpeModel::from_parts(tokens, merges)
}

/// 1-to-1 pairs of token ids, original language first.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BilingualDictionary {
    pub entries: Vec<(u32, u32)>,
}

impl BilingualDictionary {
    pub fn new(entries: Vec<(u32, u32)>, vocab_size: usize) -> Result<Self> {
        let d = BilingualDictionary { entries };
        d.validate(vocab_size)?;
        Ok(d)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let mut left = HashSet::new();
        let mut right = HashSet::new();
        for &(a, b) in &self.entries {
            for id in [a, b] {
                if id as usize >= vocab_size {
                    return Err(Error::InvalidTokenId(id));
                }
                if is_special(id) {
                    return Err(Error::Config(format!("special token {id} in dictionary")));
                }
            }
            if !left.insert(a) || !right.insert(b) {
                return Err(Error::Config(format!("pair ({a}, {b}) breaks the 1-to-1 property")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn flipped(&self) -> Self {
        BilingualDictionary {
            entries: self.entries.iter().map(|&(a, b)| (b, a)).collect(),
        }
    }

    /// Translation lookup in both directions.
    pub fn translations(&self) -> HashMap<u32, u32> {
        self.entries
            .iter()
            .flat_map(|&(a, b)| [(a, b), (b, a)])
            .collect()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (a, b) in &self.entries {
            s.push_str(&format!("{a}\t{b}\n"));
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path, vocab_size: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let parse = || -> Option<(u32, u32)> {
                let (a, b) = line.split_once('\t')?;
                Some((a.parse().ok()?, b.parse().ok()?))
            };
            entries.push(parse().ok_or_else(|| Error::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "expected two tab-separated ids".into(),
            })?);
        }
        BilingualDictionary::new(entries, vocab_size)
    }
}

/// Token-level bijection induced by a word-level script map: every
/// transliterated word is encoded in both scripts and tokens are paired by
/// position. Tokens shared by both languages (overlap) are left out, and so
/// are tokens that would be paired with two different partners.
pub fn token_correspondence(model: &BpeModel, map: &ScriptMap) -> Result<Vec<(u32, u32)>> {
    let mut forward: BTreeMap<u32, u32> = BTreeMap::new();
    let mut backward: HashMap<u32, u32> = HashMap::new();
    let mut conflicted: HashSet<u32> = HashSet::new();
    for (orig, derived) in map.iter() {
        if orig == derived {
            continue;
        }
        let a = model.encode_word(orig);
        let b = model.encode_word(derived);
        if a.len() != b.len() {
            return Err(Error::Config(format!(
                "word {orig:?} encodes to {} tokens but its image to {}; \
                 the vocabulary budget cut the merges of one language short",
                a.len(),
                b.len()
            )));
        }
        for (&x, &y) in a.iter().zip(&b) {
            if x == y || is_special(x) || is_special(y) {
                continue;
            }
            match (forward.get(&x), backward.get(&y)) {
                (Some(&fy), _) if fy != y => {
                    conflicted.insert(x);
                }
                (_, Some(&bx)) if bx != x => {
                    conflicted.insert(bx);
                    conflicted.insert(x);
                }
                _ => {
                    forward.insert(x, y);
                    backward.insert(y, x);
                }
            }
        }
    }
    Ok(forward
        .into_iter()
        .filter(|(x, _)| !conflicted.contains(x))
        .collect())
}

/// Uniformly samples `⌊fraction · n⌋` of the `n` corresponding token pairs.
pub fn build_dictionary(
    model: &BpeModel,
    map: &ScriptMap,
    fraction: f64,
    seed: u64,
) -> Result<BilingualDictionary> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("dictionary fraction {fraction} is outside [0, 1]")));
    }
    let pairs = token_correspondence(model, map)?;
    sample_dictionary(&pairs, fraction, seed, model.vocab_size())
}

pub fn sample_dictionary(
    pairs: &[(u32, u32)],
    fraction: f64,
    seed: u64,
    vocab_size: usize,
) -> Result<BilingualDictionary> {
    let k = (fraction * pairs.len() as f64).floor() as usize;
    let mut shuffled = pairs.to_vec();
    shuffled.shuffle(&mut rng_for(seed, stream::DICTIONARY));
    let mut entries = shuffled[..k].to_vec();
    entries.sort_unstable();
    BilingualDictionary::new(entries, vocab_size)
}
