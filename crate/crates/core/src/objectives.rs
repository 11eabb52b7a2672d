//! The pre-training losses (MLM, TLM-as-MLM, DICT-MLM, ALIGN, ALIGN-MLM) and
//! the per-epoch instance streams each objective trains on.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{apply_dict_switch, apply_masking, MaskingConfig, TrainingInstance, IGNORE};
use crate::model::graph::cosine;
use crate::model::{encode, mlm_logits_at, Bound, Graph, Mode, NodeId, Parameters, Tensor};
use crate::rng::{derive_seed, rng_for, stream};
use crate::tokenizer::BilingualDictionary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "MLM")]
    Mlm,
    #[serde(rename = "XLM")]
    Xlm,
    #[serde(rename = "DICT")]
    Dict,
    #[serde(rename = "ALIGN_MLM")]
    AlignMlm,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 4] = [ObjectiveKind::Mlm, ObjectiveKind::Xlm, ObjectiveKind::Dict, ObjectiveKind::AlignMlm];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Mlm => "MLM",
            ObjectiveKind::Xlm => "XLM",
            ObjectiveKind::Dict => "DICT",
            ObjectiveKind::AlignMlm => "ALIGN_MLM",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "MLM" => Ok(ObjectiveKind::Mlm),
            "XLM" => Ok(ObjectiveKind::Xlm),
            "DICT" | "DICT_MLM" => Ok(ObjectiveKind::Dict),
            "ALIGN" | "ALIGN_MLM" => Ok(ObjectiveKind::AlignMlm),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_alpha() -> f64 {
    10.0
}
fn default_tlm_fraction() -> f64 {
    0.25
}
fn default_dict_fraction() -> f64 {
    0.25
}
fn default_switch_prob() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_tlm_fraction")]
    pub tlm_fraction: f64,
    #[serde(default = "default_dict_fraction")]
    pub dict_fraction: f64,
    #[serde(default = "default_switch_prob")]
    pub switch_prob: f64,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind) -> Self {
        ObjectiveSpec {
            kind,
            alpha: default_alpha(),
            tlm_fraction: default_tlm_fraction(),
            dict_fraction: default_dict_fraction(),
            switch_prob: default_switch_prob(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha {} must be finite and non-negative", self.alpha)));
        }
        for (name, v) in [("tlm_fraction", self.tlm_fraction), ("dict_fraction", self.dict_fraction), ("switch_prob", self.switch_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Whether training needs a bilingual dictionary.
    pub fn uses_dictionary(&self) -> bool {
        matches!(self.kind, ObjectiveKind::Dict | ObjectiveKind::AlignMlm)
    }
}

/// Mean cross-entropy over labeled positions of dense `[H, V]` logits.
/// Returns 0 when nothing is labeled.
pub fn loss_mlm(logits: &[Tensor], labels: &[Vec<u32>]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} logit matrices for {} label rows", logits.len(), labels.len())));
    }
    let (mut total, mut n) = (0.0, 0usize);
    for (lg, lb) in logits.iter().zip(labels) {
        if lg.rows != lb.len() {
            return Err(Error::Shape(format!("logits have {} rows, labels {}", lg.rows, lb.len())));
        }
        for (i, &l) in lb.iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            let row = lg.row(i);
            let t = row.get(l as usize).ok_or(Error::InvalidTokenId(l))?;
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - t;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// `−(1/|B|) Σ cos(E[a], E[b])` over dictionary entries.
pub fn loss_align(embeddings: &Tensor, dict: &BilingualDictionary) -> Result<f64> {
    if dict.is_empty() {
        return Err(Error::Config("alignment loss needs a non-empty dictionary".into()));
    }
    if let Some(&(a, b)) = dict.entries.iter().find(|&&(a, b)| a as usize >= embeddings.rows || b as usize >= embeddings.rows) {
        return Err(Error::InvalidTokenId(a.max(b)));
    }
    let sum: f64 = dict.entries.iter().map(|&(a, b)| cosine(embeddings.row(a as usize), embeddings.row(b as usize))).sum();
    Ok(-sum / dict.len() as f64)
}

pub fn loss_align_mlm(mlm: f64, align: f64, alpha: f64) -> f64 {
    mlm + alpha * align
}

/// Adds the masked-LM loss of `batch` to `g`, evaluating logits only at
/// labeled positions. Returns the loss node and the number of labels.
pub fn mlm_loss_node(g: &mut Graph, params: &Parameters, bound: &Bound, batch: &[TrainingInstance], mode: &mut Mode<'_>) -> Result<(NodeId, usize)> {
    let enc = encode(g, params, bound, batch, mode)?;
    let h = batch.first().map_or(0, TrainingInstance::len);
    let idx = enc.index(batch.len(), h);
    let (mut rows, mut targets) = (Vec::new(), Vec::new());
    for (b, inst) in batch.iter().enumerate() {
        for (i, &l) in inst.mlm_labels.iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            if l as usize >= params.config.vocab_size {
                return Err(Error::InvalidTokenId(l));
            }
            let r = idx[b][i].ok_or_else(|| Error::Shape(format!("label at padding position {i} of instance {b}")))?;
            rows.push(r);
            targets.push(l);
        }
    }
    let logits = mlm_logits_at(g, params, bound, &enc, &rows);
    Ok((g.cross_entropy(logits, &targets), targets.len()))
}

pub fn align_loss_node(g: &mut Graph, params: &Parameters, bound: &Bound, dict: &BilingualDictionary) -> NodeId {
    g.neg_mean_cosine(bound.nodes[params.token_embedding_slot()], &dict.entries)
}

/// Loss nodes of one training step.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub mlm: NodeId,
    pub align: Option<NodeId>,
    pub labeled: usize,
}

/// The objective's loss on `batch`. MLM, XLM and DICT differ only in their
/// instance streams, so they share the masked-LM loss; ALIGN-MLM adds
/// `alpha · L_ALIGN` over the whole dictionary.
pub fn training_loss(
    g: &mut Graph,
    params: &Parameters,
    bound: &Bound,
    batch: &[TrainingInstance],
    spec: &ObjectiveSpec,
    dict: &BilingualDictionary,
    mode: &mut Mode<'_>,
) -> Result<LossNodes> {
    let (mlm, labeled) = mlm_loss_node(g, params, bound, batch, mode)?;
    if spec.kind != ObjectiveKind::AlignMlm || dict.is_empty() {
        return Ok(LossNodes { total: mlm, mlm, align: None, labeled });
    }
    let align = align_loss_node(g, params, bound, dict);
    let weighted = g.scale(align, spec.alpha);
    let total = g.add(mlm, weighted);
    Ok(LossNodes { total, mlm, align: Some(align), labeled })
}

/// Number of parallel pairs XLM consumes for `mlm_sentences` monolingual
/// source sentences.
pub fn tlm_pair_count(mlm_sentences: usize, tlm_fraction: f64) -> usize {
    (mlm_sentences as f64 * tlm_fraction + 1e-9).floor() as usize
}

/// Indices of the parallel pairs used for TLM, drawn without replacement.
pub fn sample_tlm_pairs(n_available: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(seed, stream::TLM_SAMPLE);
    let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, n_available, count.min(n_available)).into_vec();
    idx.sort_unstable();
    idx
}

/// Unmasked instances available to an objective.
#[derive(Debug, Clone, Default)]
pub struct PretrainPool {
    /// Monolingual instances of both languages.
    pub mono: Vec<TrainingInstance>,
    /// Parallel instances; only XLM uses them.
    pub tlm: Vec<TrainingInstance>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamStats {
    pub mono_instances: usize,
    pub tlm_instances: usize,
    pub original_tokens: usize,
    pub derived_tokens: usize,
    pub labeled: usize,
    pub switched: usize,
}

impl StreamStats {
    pub fn switched_fraction(&self) -> f64 {
        if self.labeled == 0 {
            0.0
        } else {
            self.switched as f64 / self.labeled as f64
        }
    }
}

/// Plain MLM: mask every monolingual instance, then shuffle.
pub fn build_mlm_stream(mono: &[TrainingInstance], masking: &MaskingConfig, vocab_size: usize, epoch: u64) -> Vec<TrainingInstance> {
    let mut rng = rng_for(derive_seed(masking.seed, stream::MASKING), epoch);
    let mut out: Vec<TrainingInstance> = mono.iter().map(|x| apply_masking(x, masking, vocab_size, &mut rng)).collect();
    out.shuffle(&mut rng_for(derive_seed(masking.seed, stream::SHUFFLE), epoch));
    out
}

/// MLM on both monolingual sets plus MLM on TLM-packed parallel instances,
/// shuffled together. The monolingual part is masked exactly as in
/// [`build_mlm_stream`], so with no TLM instances the two coincide.
pub fn build_xlm_stream(mono: &[TrainingInstance], tlm: &[TrainingInstance], masking: &MaskingConfig, vocab_size: usize, epoch: u64) -> Vec<TrainingInstance> {
    let mut rng = rng_for(derive_seed(masking.seed, stream::MASKING), epoch);
    let mut out: Vec<TrainingInstance> = mono.iter().chain(tlm).map(|x| apply_masking(x, masking, vocab_size, &mut rng)).collect();
    out.shuffle(&mut rng_for(derive_seed(masking.seed, stream::SHUFFLE), epoch));
    out
}

/// Switches the labels of an already masked stream through the dictionary
/// in both directions.
pub fn build_dict_stream(masked: &[TrainingInstance], dict: &BilingualDictionary, switch_prob: f64, seed: u64, epoch: u64) -> (Vec<TrainingInstance>, usize) {
    let translations: HashMap<u32, u32> = dict.translations();
    let mut rng = rng_for(derive_seed(seed, stream::DICT_SWITCH), epoch);
    let mut switched = 0;
    let out = masked
        .iter()
        .map(|x| {
            let (y, s) = apply_dict_switch(x, &translations, switch_prob, &mut rng);
            switched += s;
            y
        })
        .collect();
    (out, switched)
}

/// The instances `spec` trains on during `epoch`, with stream statistics.
pub fn epoch_stream(
    pool: &PretrainPool,
    spec: &ObjectiveSpec,
    dict: &BilingualDictionary,
    masking: &MaskingConfig,
    vocab_size: usize,
    epoch: u64,
) -> (Vec<TrainingInstance>, StreamStats) {
    let tlm: &[TrainingInstance] = if spec.kind == ObjectiveKind::Xlm { &pool.tlm } else { &[] };
    let mut instances = build_xlm_stream(&pool.mono, tlm, masking, vocab_size, epoch);
    let mut stats = StreamStats {
        mono_instances: pool.mono.len(),
        tlm_instances: tlm.len(),
        ..Default::default()
    };
    if spec.kind == ObjectiveKind::Dict {
        let (switched, n) = build_dict_stream(&instances, dict, spec.switch_prob, masking.seed, epoch);
        instances = switched;
        stats.switched = n;
    }
    for inst in &instances {
        stats.labeled += inst.labeled_count();
        for i in 0..inst.len() {
            if inst.is_content(i) {
                if inst.language_ids[i] == 0 {
                    stats.original_tokens += 1;
                } else {
                    stats.derived_tokens += 1;
                }
            }
        }
    }
    (instances, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Language;
    use crate::instances::pack_mono;

    fn t(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::from_vec(rows, cols, v)
    }

    #[test]
    fn mlm_loss_examples() {
        let v = 7usize;
        let uniform = t(1, v, vec![0.3; v]);
        assert!((loss_mlm(&[uniform], &[vec![2]]).unwrap() - (v as f64).ln()).abs() < 1e-12);

        let mut sharp = vec![-50.0; v];
        sharp[4] = 50.0;
        assert!(loss_mlm(&[t(1, v, sharp)], &[vec![4]]).unwrap() < 1e-30);

        let lg = t(3, 2, vec![0.0, 1.0, 2.0, 0.0, 5.0, 5.0]);
        let ce = |row: &[f64], k: usize| -> f64 { (row[0].exp() + row[1].exp()).ln() - row[k] };
        let want = (ce(&[0.0, 1.0], 0) + ce(&[2.0, 0.0], 0)) / 2.0;
        assert!((loss_mlm(&[lg.clone()], &[vec![0, 0, IGNORE]]).unwrap() - want).abs() < 1e-12);
        assert_eq!(loss_mlm(&[lg], &[vec![IGNORE; 3]]).unwrap(), 0.0);
    }

    #[test]
    fn align_loss_examples() {
        let e = t(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 2.0, 1.0, 1.0]);
        let identical = BilingualDictionary { entries: vec![(0, 1)] };
        assert!((loss_align(&e, &identical).unwrap() + 1.0).abs() < 1e-7);
        let ortho = BilingualDictionary { entries: vec![(0, 2)] };
        assert!(loss_align(&e, &ortho).unwrap().abs() < 1e-12);
        // cos 60° = 0.5
        let e2 = t(4, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.5, 0.75f64.sqrt()]);
        let d = BilingualDictionary { entries: vec![(0, 1), (2, 3)] };
        assert!((loss_align(&e2, &d).unwrap() + 0.75).abs() < 1e-7);
        assert!(loss_align(&e, &BilingualDictionary { entries: vec![] }).is_err());
    }

    #[test]
    fn align_mlm_arithmetic() {
        assert_eq!(loss_align_mlm(2.0, -0.9, 10.0), -7.0);
        assert_eq!(loss_align_mlm(2.5, -0.3, 0.0), 2.5);
        assert_eq!(loss_align_mlm(2.5, -1.0, 10.0), 2.5 - 10.0);
    }

    #[test]
    fn tlm_counts() {
        assert_eq!(tlm_pair_count(1000, 0.25), 250);
        assert_eq!(tlm_pair_count(1000, 1.0), 1000);
        assert_eq!(tlm_pair_count(1000, 0.0), 0);
        let s = sample_tlm_pairs(1000, 250, 4);
        assert_eq!(s.len(), 250);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    fn pool() -> PretrainPool {
        let sents: Vec<Vec<u32>> = (0..60).map(|i| (0..8).map(|j| 5 + ((i * 7 + j * 3) % 40) as u32).collect()).collect();
        let mut mono = pack_mono(&sents, 16, Language::Original).instances;
        let derived: Vec<Vec<u32>> = sents.iter().map(|s| s.iter().map(|x| x + 40).collect()).collect();
        mono.extend(pack_mono(&derived, 16, Language::Derived).instances);
        PretrainPool { mono, tlm: vec![] }
    }

    #[test]
    fn neutral_streams_reduce_to_mlm() {
        let p = pool();
        let m = MaskingConfig { seed: 3, ..Default::default() };
        let mlm = build_mlm_stream(&p.mono, &m, 90, 2);
        assert_eq!(build_xlm_stream(&p.mono, &[], &m, 90, 2), mlm);
        let empty = BilingualDictionary { entries: vec![] };
        let (d, n) = build_dict_stream(&mlm, &empty, 0.5, 3, 2);
        assert_eq!(d, mlm);
        assert_eq!(n, 0);
        let mut spec = ObjectiveSpec::new(ObjectiveKind::Dict);
        assert_eq!(epoch_stream(&p, &spec, &empty, &m, 90, 2).0, mlm);
        spec.kind = ObjectiveKind::AlignMlm;
        assert_eq!(epoch_stream(&p, &spec, &empty, &m, 90, 2).0, mlm);
    }

    #[test]
    fn dict_switch_rate_is_about_half() {
        let p = pool();
        let m = MaskingConfig { seed: 11, mask_prob: 0.5, ..Default::default() };
        let full = BilingualDictionary { entries: (5..45).map(|a| (a, a + 40)).collect() };
        let spec = ObjectiveSpec::new(ObjectiveKind::Dict);
        let (a, stats) = epoch_stream(&p, &spec, &full, &m, 90, 0);
        let n = stats.labeled as f64;
        let sd = (n * 0.25).sqrt();
        assert!((stats.switched as f64 - n / 2.0).abs() < 4.0 * sd, "{stats:?}");
        assert_eq!(epoch_stream(&p, &spec, &full, &m, 90, 0).0, a);
    }

    #[test]
    fn alpha_zero_loss_equals_mlm() {
        use crate::model::EncoderConfig;
        let cfg = EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 8,
            max_positions: 16,
            vocab_size: 90,
            n_languages: 0,
            dropout: 0.0,
        };
        let params = Parameters::init(&cfg, 1).unwrap();
        let m = MaskingConfig { seed: 3, ..Default::default() };
        let batch = build_mlm_stream(&pool().mono[..4], &m, 90, 0);
        let dict = BilingualDictionary { entries: vec![(5, 45), (6, 46)] };
        let run = |alpha: f64, kind: ObjectiveKind| {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let spec = ObjectiveSpec { alpha, ..ObjectiveSpec::new(kind) };
            let l = training_loss(&mut g, &params, &b, &batch, &spec, &dict, &mut Mode::eval()).unwrap();
            (g.scalar(l.total), g.scalar(l.mlm))
        };
        let (mlm, _) = run(10.0, ObjectiveKind::Mlm);
        let (zero, _) = run(0.0, ObjectiveKind::AlignMlm);
        assert_eq!(mlm.to_bits(), zero.to_bits());
        let (full, part) = run(10.0, ObjectiveKind::AlignMlm);
        let align = loss_align(params.token_embeddings(), &dict).unwrap();
        assert!((full - loss_align_mlm(part, align, 10.0)).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        assert!(ObjectiveSpec { alpha: -1.0, ..ObjectiveSpec::new(ObjectiveKind::AlignMlm) }.validate().is_err());
        assert!(ObjectiveSpec { switch_prob: 1.5, ..ObjectiveSpec::new(ObjectiveKind::Dict) }.validate().is_err());
        assert_eq!(ObjectiveKind::parse("align-mlm").unwrap(), ObjectiveKind::AlignMlm);
    }
}
