//! Fixed-length training instances: monolingual packing, parallel (TLM)
//! packing, masking and dictionary label switching.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Language;
use crate::error::{Error, Result};
use crate::tokenizer::{is_special, MASK, N_SPECIAL, PAD};

/// Padding marker for the position and language channels.
pub const PAD_INDEX: u32 = u32::MAX;
/// Label of positions that carry no prediction target.
pub const IGNORE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TrainingInstance {
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub language_ids: Vec<u32>,
    pub mlm_labels: Vec<u32>,
}

impl TrainingInstance {
    fn empty(h: usize) -> Self {
        TrainingInstance {
            token_ids: vec![PAD; h],
            position_ids: vec![PAD_INDEX; h],
            language_ids: vec![PAD_INDEX; h],
            mlm_labels: vec![IGNORE; h],
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn is_content(&self, i: usize) -> bool {
        self.position_ids[i] != PAD_INDEX
    }

    pub fn content_len(&self) -> usize {
        self.position_ids.iter().filter(|&&p| p != PAD_INDEX).count()
    }

    pub fn labeled_count(&self) -> usize {
        self.mlm_labels.iter().filter(|&&l| l != IGNORE).count()
    }

    fn write_segment(&mut self, offset: usize, tokens: &[u32], language: Language) {
        for (j, &t) in tokens.iter().enumerate() {
            self.token_ids[offset + j] = t;
            self.position_ids[offset + j] = j as u32;
            self.language_ids[offset + j] = language.id();
        }
    }

    /// Checks channel lengths and that padding is consistent across channels.
    pub fn validate(&self, h: usize) -> Result<()> {
        let lens = [
            self.token_ids.len(),
            self.position_ids.len(),
            self.language_ids.len(),
            self.mlm_labels.len(),
        ];
        if lens.iter().any(|&l| l != h) {
            return Err(Error::Shape(format!("channel lengths {lens:?}, expected {h}")));
        }
        for i in 0..h {
            let pad = self.position_ids[i] == PAD_INDEX;
            if pad
                && (self.token_ids[i] != PAD
                    || self.language_ids[i] != PAD_INDEX
                    || self.mlm_labels[i] != IGNORE)
            {
                return Err(Error::Shape(format!("position {i} is only partly padded")));
            }
        }
        Ok(())
    }
}

/// Instances plus how many inputs were too long to place.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Packed {
    pub instances: Vec<TrainingInstance>,
    pub dropped: usize,
}

/// Greedily concatenates whole sentences until the next one would overflow
/// `h` tokens. Sentences longer than `h` (and empty ones) are dropped.
pub fn pack_mono(sentences: &[Vec<u32>], h: usize, language: Language) -> Packed {
    let mut out = Packed::default();
    let mut current: Vec<u32> = Vec::new();
    let flush = |current: &mut Vec<u32>, out: &mut Packed| {
        if !current.is_empty() {
            let mut inst = TrainingInstance::empty(h);
            inst.write_segment(0, current, language);
            out.instances.push(inst);
            current.clear();
        }
    };
    for s in sentences {
        if s.is_empty() || s.len() > h {
            out.dropped += 1;
            continue;
        }
        if current.len() + s.len() > h {
            flush(&mut current, &mut out);
        }
        current.extend_from_slice(s);
    }
    flush(&mut current, &mut out);
    out
}

/// Packs parallel pairs as `[L1 tokens, pad to h/2, L2 tokens, pad to h]`,
/// adding whole pairs while both halves stay within `h/2` tokens. A pair
/// with either side longer than `h/2` is dropped.
pub fn pack_tlm(pairs: &[(Vec<u32>, Vec<u32>)], h: usize) -> Result<Packed> {
    if h % 2 != 0 {
        return Err(Error::Config(format!("TLM instance length {h} must be even")));
    }
    let half = h / 2;
    let mut out = Packed::default();
    let (mut a, mut b): (Vec<u32>, Vec<u32>) = (Vec::new(), Vec::new());
    let flush = |a: &mut Vec<u32>, b: &mut Vec<u32>, out: &mut Packed| {
        if !a.is_empty() || !b.is_empty() {
            let mut inst = TrainingInstance::empty(h);
            inst.write_segment(0, a, Language::Original);
            inst.write_segment(half, b, Language::Derived);
            out.instances.push(inst);
            a.clear();
            b.clear();
        }
    };
    for (x, y) in pairs {
        if x.len() > half || y.len() > half || (x.is_empty() && y.is_empty()) {
            out.dropped += 1;
            continue;
        }
        if a.len() + x.len() > half || b.len() + y.len() > half {
            flush(&mut a, &mut b, &mut out);
        }
        a.extend_from_slice(x);
        b.extend_from_slice(y);
    }
    flush(&mut a, &mut b, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub mask_prob: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mask_prob: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
            seed: 0,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.mask_prob, self.mask_frac, self.random_frac, self.keep_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("masking probabilities must lie in [0, 1]".into()));
        }
        let total = self.mask_frac + self.random_frac + self.keep_frac;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("corruption split sums to {total}, not 1")));
        }
        Ok(())
    }
}

/// Selects each content, non-special position with probability `mask_prob`.
/// A selected position keeps its original id as label and its input becomes
/// MASK, a uniform random non-special id, or stays, per the corruption split.
///
/// Draw protocol: one uniform per eligible position for selection; for a
/// selected position, one uniform for the corruption choice and, when
/// replacing randomly, one `gen_range` for the id.
pub fn apply_masking<R: Rng>(
    instance: &TrainingInstance,
    cfg: &MaskingConfig,
    vocab_size: usize,
    rng: &mut R,
) -> TrainingInstance {
    let mut out = instance.clone();
    out.mlm_labels.iter_mut().for_each(|l| *l = IGNORE);
    for i in 0..out.len() {
        let tok = instance.token_ids[i];
        if !instance.is_content(i) || is_special(tok) {
            continue;
        }
        if rng.gen::<f64>() >= cfg.mask_prob {
            continue;
        }
        out.mlm_labels[i] = tok;
        let choice: f64 = rng.gen();
        if choice < cfg.mask_frac {
            out.token_ids[i] = MASK;
        } else if choice < cfg.mask_frac + cfg.random_frac {
            out.token_ids[i] = rng.gen_range(N_SPECIAL..vocab_size as u32);
        }
    }
    out
}

/// For each labeled position, with probability `switch_prob` replaces the
/// label by its dictionary translation when one exists. One uniform is drawn
/// per labeled position. Inputs are untouched.
pub fn apply_dict_switch<R: Rng>(
    masked: &TrainingInstance,
    translations: &HashMap<u32, u32>,
    switch_prob: f64,
    rng: &mut R,
) -> (TrainingInstance, usize) {
    let mut out = masked.clone();
    let mut switched = 0;
    for l in out.mlm_labels.iter_mut().filter(|l| **l != IGNORE) {
        if rng.gen::<f64>() < switch_prob {
            if let Some(&t) = translations.get(l) {
                *l = t;
                switched += 1;
            }
        }
    }
    (out, switched)
}

/// Sidecar metadata for a binary instance file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceFileMeta {
    pub h: usize,
    pub vocab_size: usize,
    pub count: usize,
    pub dropped_sentences: usize,
    pub dropped_pairs: usize,
}

/// Writes `4 × h` little-endian u32 per instance (tokens, positions,
/// languages, labels; padding and IGNORE are `0xFFFFFFFF`, i.e. -1 as i32),
/// plus a JSON sidecar.
pub fn write_instances(
    bin_path: &Path,
    meta_path: &Path,
    instances: &[TrainingInstance],
    meta: &InstanceFileMeta,
) -> Result<()> {
    let mut buf = Vec::with_capacity(instances.len() * meta.h * 16);
    for inst in instances {
        inst.validate(meta.h)?;
        for ch in [
            &inst.token_ids,
            &inst.position_ids,
            &inst.language_ids,
            &inst.mlm_labels,
        ] {
            for v in ch {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(bin_path, buf).map_err(|e| Error::io(bin_path, e))?;
    let json = serde_json::to_string_pretty(meta)?;
    fs::write(meta_path, json).map_err(|e| Error::io(meta_path, e))
}

pub fn read_instances(
    bin_path: &Path,
    meta_path: &Path,
) -> Result<(Vec<TrainingInstance>, InstanceFileMeta)> {
    let meta_text = fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
    let meta: InstanceFileMeta = serde_json::from_str(&meta_text)?;
    let bytes = fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
    let record = meta.h * 16;
    if record == 0 || bytes.len() != record * meta.count {
        return Err(Error::Shape(format!(
            "{} bytes for {} records of {record} bytes",
            bytes.len(),
            meta.count
        )));
    }
    let words: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let instances = words
        .chunks_exact(meta.h * 4)
        .map(|r| {
            let ch = |k: usize| r[k * meta.h..(k + 1) * meta.h].to_vec();
            TrainingInstance {
                token_ids: ch(0),
                position_ids: ch(1),
                language_ids: ch(2),
                mlm_labels: ch(3),
            }
        })
        .collect();
    Ok((instances, meta))
}
