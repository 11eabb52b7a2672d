//! The transformer encoder, its parameter layout, and the MLM and task heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::instances::{TrainingInstance, PAD_INDEX};
use crate::rng::{derive_seed, rng_for, stream};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Hidden width of each feed-forward block.
    pub d_ff: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    /// 0 (no language embedding) or 2.
    pub n_languages: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// The full-scale architecture (8 layers, 8 heads, 512 wide).
    pub fn full(vocab_size: usize) -> Self {
        EncoderConfig {
            n_layers: 8,
            n_heads: 8,
            d_model: 512,
            d_ff: 2048,
            max_positions: 512,
            vocab_size,
            n_languages: 0,
            dropout: 0.1,
        }
    }

    /// A configuration that trains in minutes on one CPU core.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 256,
            max_positions: 128,
            vocab_size,
            n_languages: 0,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_languages != 0 && self.n_languages != 2 {
            return Err(Error::Config(format!("n_languages must be 0 or 2, got {}", self.n_languages)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.vocab_size == 0 || self.max_positions == 0 || self.d_ff == 0 {
            return Err(Error::Config("vocab_size, max_positions and d_ff must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Tanh-pooled first position, then a linear layer.
    Classify,
    /// A linear layer on every content position.
    Tag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub n_labels: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerSlots {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
enum HeadSlots {
    Classify { wp: usize, bp: usize, wc: usize, bc: usize },
    Tag { wt: usize, bt: usize },
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    pos: usize,
    lang: Option<usize>,
    layers: Vec<LayerSlots>,
    final_ln: Option<(usize, usize)>,
    mlm_bias: usize,
    head: Option<HeadSlots>,
}

/// Named parameter tensors of one encoder plus an optional task head.
///
/// The MLM output projection reuses the token embedding slot, so tying is a
/// matter of storage identity rather than synchronisation.
#[derive(Debug, Clone)]
pub struct Parameters {
    pub config: EncoderConfig,
    pub head: Option<HeadSpec>,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    layout: Layout,
}

fn uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    // Uniform with the same standard deviation as N(0, INIT_STD²).
    let a = INIT_STD * 3f64.sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect())
}

struct Builder<'r, R: Rng> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'r mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }
    fn random(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let t = uniform(rows, cols, self.rng);
        self.push(name, t)
    }
    fn zeros(&mut self, name: String, cols: usize) -> usize {
        self.push(name, Tensor::zeros(1, cols))
    }
    fn ones(&mut self, name: String, cols: usize) -> usize {
        self.push(name, Tensor::from_vec(1, cols, vec![1.0; cols]))
    }
}

impl Parameters {
    /// Fresh parameters. The language table draws from its own stream, so
    /// every other tensor is identical whether or not it is present.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.d_ff);
        let mut rng = rng_for(seed, stream::INIT);
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: &mut rng,
        };
        let tok = b.random("embeddings.token".into(), config.vocab_size, d);
        let pos = b.random("embeddings.position".into(), config.max_positions, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerSlots {
                ln1_g: b.ones(n("ln1.gain"), d),
                ln1_b: b.zeros(n("ln1.bias"), d),
                wq: b.random(n("attn.wq"), d, d),
                bq: b.zeros(n("attn.bq"), d),
                wk: b.random(n("attn.wk"), d, d),
                bk: b.zeros(n("attn.bk"), d),
                wv: b.random(n("attn.wv"), d, d),
                bv: b.zeros(n("attn.bv"), d),
                wo: b.random(n("attn.wo"), d, d),
                bo: b.zeros(n("attn.bo"), d),
                ln2_g: b.ones(n("ln2.gain"), d),
                ln2_b: b.zeros(n("ln2.bias"), d),
                w1: b.random(n("ffn.w1"), d, f),
                b1: b.zeros(n("ffn.b1"), f),
                w2: b.random(n("ffn.w2"), f, d),
                b2: b.zeros(n("ffn.b2"), d),
            });
        }
        let final_ln = (config.n_layers > 0).then(|| (b.ones("final_ln.gain".into(), d), b.zeros("final_ln.bias".into(), d)));
        let mlm_bias = b.zeros("mlm.bias".into(), config.vocab_size);
        let lang = if config.n_languages > 0 {
            let mut lrng = rng_for(derive_seed(seed, stream::INIT), 1);
            let t = uniform(config.n_languages, d, &mut lrng);
            Some(b.push("embeddings.language".into(), t))
        } else {
            None
        };
        let Builder { names, tensors, .. } = b;
        Ok(Parameters {
            config: config.clone(),
            head: None,
            names,
            tensors,
            layout: Layout {
                tok,
                pos,
                lang,
                layers,
                final_ln,
                mlm_bias,
                head: None,
            },
        })
    }

    /// Replaces any existing task head with a freshly initialised one.
    pub fn attach_head(&mut self, spec: HeadSpec, seed: u64) -> Result<()> {
        if spec.n_labels == 0 {
            return Err(Error::Config("task head needs at least one label".into()));
        }
        self.detach_head();
        let d = self.config.d_model;
        let mut rng = rng_for(seed, stream::FINETUNE);
        let mut b = Builder {
            names: std::mem::take(&mut self.names),
            tensors: std::mem::take(&mut self.tensors),
            rng: &mut rng,
        };
        let slots = match spec.kind {
            HeadKind::Classify => HeadSlots::Classify {
                wp: b.random("head.pool.w".into(), d, d),
                bp: b.zeros("head.pool.b".into(), d),
                wc: b.random("head.out.w".into(), d, spec.n_labels),
                bc: b.zeros("head.out.b".into(), spec.n_labels),
            },
            HeadKind::Tag => HeadSlots::Tag {
                wt: b.random("head.out.w".into(), d, spec.n_labels),
                bt: b.zeros("head.out.b".into(), spec.n_labels),
            },
        };
        self.names = b.names;
        self.tensors = b.tensors;
        self.layout.head = Some(slots);
        self.head = Some(spec);
        Ok(())
    }

    pub fn detach_head(&mut self) {
        if self.layout.head.take().is_some() {
            let keep = self.names.iter().position(|n| n.starts_with("head.")).unwrap_or(self.names.len());
            self.names.truncate(keep);
            self.tensors.truncate(keep);
        }
        self.head = None;
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn token_embeddings(&self) -> &Tensor {
        &self.tensors[self.layout.tok]
    }

    pub fn token_embedding_slot(&self) -> usize {
        self.layout.tok
    }

    /// Slots of encoder-layer parameters (everything between the embeddings
    /// and the output heads).
    pub fn layer_slots(&self) -> Vec<usize> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("layer") || n.starts_with("final_ln"))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Puts every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            nodes: self.tensors.iter().enumerate().map(|(i, t)| g.param(i, t.clone())).collect(),
        }
    }

    /// Restores a parameter set from names and tensors, checking that they
    /// match what `config` and `head` imply.
    pub fn from_tensors(config: &EncoderConfig, head: Option<HeadSpec>, names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        let mut p = Parameters::init(config, 0)?;
        if let Some(h) = head {
            p.attach_head(h, 0)?;
        }
        if p.names != names {
            return Err(Error::Checkpoint("parameter names do not match the configuration".into()));
        }
        for (i, (a, b)) in p.tensors.iter().zip(&tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!("parameter {} has shape {:?}, expected {:?}", names[i], b.shape(), a.shape())));
            }
        }
        p.tensors = tensors;
        Ok(p)
    }
}

/// Graph nodes of a bound parameter set.
#[derive(Debug, Clone)]
pub struct Bound {
    pub nodes: Vec<NodeId>,
}

/// Encoder output for the content positions of a batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[n_content, d_model]`, instances back to back.
    pub hidden: NodeId,
    /// `(instance, position)` of each hidden row.
    pub rows: Vec<(usize, usize)>,
    /// Instance `b` occupies hidden rows `offsets[b]..offsets[b + 1]`.
    pub offsets: Vec<usize>,
}

impl Encoded {
    /// Hidden-row index of every `(instance, position)` pair, or `None` at padding.
    pub fn index(&self, batch: usize, h: usize) -> Vec<Vec<Option<usize>>> {
        let mut idx = vec![vec![None; h]; batch];
        for (r, &(b, p)) in self.rows.iter().enumerate() {
            idx[b][p] = Some(r);
        }
        idx
    }
}

fn check_batch(params: &Parameters, batch: &[TrainingInstance]) -> Result<usize> {
    let cfg = &params.config;
    let h = batch.first().map_or(0, TrainingInstance::len);
    for (b, inst) in batch.iter().enumerate() {
        if inst.len() != h {
            return Err(Error::Shape(format!("instance {b} has length {}, batch uses {h}", inst.len())));
        }
        // Padding is identified by the position channel alone; whatever
        // sits in the other channels there is never read.
        if [inst.position_ids.len(), inst.language_ids.len(), inst.mlm_labels.len()].iter().any(|&l| l != h) {
            return Err(Error::Shape(format!("instance {b} has ragged channels")));
        }
        for i in 0..h {
            if !inst.is_content(i) {
                continue;
            }
            if inst.token_ids[i] as usize >= cfg.vocab_size {
                return Err(Error::InvalidTokenId(inst.token_ids[i]));
            }
            if inst.position_ids[i] as usize >= cfg.max_positions {
                return Err(Error::Shape(format!("position {} exceeds max_positions {}", inst.position_ids[i], cfg.max_positions)));
            }
            if cfg.n_languages > 0 && inst.language_ids[i] as usize >= cfg.n_languages {
                return Err(Error::Shape(format!("language id {} out of range", inst.language_ids[i])));
            }
        }
    }
    Ok(h)
}

fn dropout_mask(len: usize, p: f64, rng: &mut dyn rand::RngCore) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
}

/// Forward-pass options. Dropout applies only when `dropout_rng` is set.
pub struct Mode<'r> {
    pub dropout_rng: Option<&'r mut dyn rand::RngCore>,
}

impl Mode<'_> {
    pub fn eval() -> Self {
        Mode { dropout_rng: None }
    }
}

fn maybe_dropout(g: &mut Graph, x: NodeId, p: f64, mode: &mut Mode<'_>) -> NodeId {
    match mode.dropout_rng.as_deref_mut() {
        Some(rng) if p > 0.0 => {
            let mask = dropout_mask(g.value(x).len(), p, rng);
            g.dropout(x, mask)
        }
        _ => x,
    }
}

/// Runs the encoder over the content positions of `batch`. Padding rows are
/// never materialised, so they can neither attend nor be attended to.
pub fn encode(g: &mut Graph, params: &Parameters, bound: &Bound, batch: &[TrainingInstance], mode: &mut Mode<'_>) -> Result<Encoded> {
    let h = check_batch(params, batch)?;
    let cfg = &params.config;
    let lay = &params.layout;
    let p = |slot: usize| bound.nodes[slot];

    let mut rows = Vec::new();
    let mut offsets = vec![0];
    let (mut toks, mut poss, mut langs) = (Vec::new(), Vec::new(), Vec::new());
    for (b, inst) in batch.iter().enumerate() {
        for i in 0..h {
            if inst.position_ids[i] != PAD_INDEX {
                rows.push((b, i));
                toks.push(inst.token_ids[i]);
                poss.push(inst.position_ids[i]);
                langs.push(inst.language_ids[i]);
            }
        }
        offsets.push(rows.len());
    }

    let mut x = g.gather(p(lay.tok), &toks);
    let pe = g.gather(p(lay.pos), &poss);
    x = g.add(x, pe);
    if let Some(ls) = lay.lang {
        let le = g.gather(p(ls), &langs);
        x = g.add(x, le);
    }
    x = maybe_dropout(g, x, cfg.dropout, mode);

    for l in &lay.layers {
        let y = g.layer_norm(x, p(l.ln1_g), p(l.ln1_b));
        let q = g.matmul(y, p(l.wq));
        let q = g.add_bias(q, p(l.bq));
        let k = g.matmul(y, p(l.wk));
        let k = g.add_bias(k, p(l.bk));
        let v = g.matmul(y, p(l.wv));
        let v = g.add_bias(v, p(l.bv));
        let a = g.attention(q, k, v, cfg.n_heads, &offsets);
        let a = g.matmul(a, p(l.wo));
        let a = g.add_bias(a, p(l.bo));
        let a = maybe_dropout(g, a, cfg.dropout, mode);
        x = g.add(x, a);

        let y = g.layer_norm(x, p(l.ln2_g), p(l.ln2_b));
        let y = g.matmul(y, p(l.w1));
        let y = g.add_bias(y, p(l.b1));
        let y = g.gelu(y);
        let y = g.matmul(y, p(l.w2));
        let y = g.add_bias(y, p(l.b2));
        let y = maybe_dropout(g, y, cfg.dropout, mode);
        x = g.add(x, y);
    }
    if let Some((fg, fb)) = lay.final_ln {
        x = g.layer_norm(x, p(fg), p(fb));
    }
    Ok(Encoded { hidden: x, rows, offsets })
}

/// MLM logits (`hidden · Eᵀ + b`) at the chosen hidden rows.
pub fn mlm_logits_at(g: &mut Graph, params: &Parameters, bound: &Bound, enc: &Encoded, hidden_rows: &[usize]) -> NodeId {
    let sel = g.select_rows(enc.hidden, hidden_rows);
    let logits = g.matmul_nt(sel, bound.nodes[params.layout.tok]);
    g.add_bias(logits, bound.nodes[params.layout.mlm_bias])
}

fn head_slots(params: &Parameters, want: HeadKind) -> Result<HeadSlots> {
    match (params.layout.head, want) {
        (Some(s @ HeadSlots::Classify { .. }), HeadKind::Classify) | (Some(s @ HeadSlots::Tag { .. }), HeadKind::Tag) => Ok(s),
        _ => Err(Error::Config(format!("model has no {want:?} head"))),
    }
}

/// `[batch, n_labels]` logits from the tanh-pooled first content position.
pub fn classify_logits(g: &mut Graph, params: &Parameters, bound: &Bound, enc: &Encoded) -> Result<NodeId> {
    let HeadSlots::Classify { wp, bp, wc, bc } = head_slots(params, HeadKind::Classify)? else {
        unreachable!()
    };
    let first: Vec<usize> = enc.offsets.windows(2).map(|w| w[0]).collect();
    if enc.offsets.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Shape("classification instance without content".into()));
    }
    let n = &bound.nodes;
    let cls = g.select_rows(enc.hidden, &first);
    let pooled = g.matmul(cls, n[wp]);
    let pooled = g.add_bias(pooled, n[bp]);
    let pooled = g.tanh(pooled);
    let out = g.matmul(pooled, n[wc]);
    Ok(g.add_bias(out, n[bc]))
}

/// `[n_content, n_labels]` logits, one row per hidden row of `enc`.
pub fn tag_logits(g: &mut Graph, params: &Parameters, bound: &Bound, enc: &Encoded) -> Result<NodeId> {
    let HeadSlots::Tag { wt, bt } = head_slots(params, HeadKind::Tag)? else {
        unreachable!()
    };
    let out = g.matmul(enc.hidden, bound.nodes[wt]);
    Ok(g.add_bias(out, bound.nodes[bt]))
}

/// Dense per-position logits in evaluation mode: one `[H, vocab]` matrix per
/// instance. Padding rows are left at zero.
pub fn forward_mlm(params: &Parameters, batch: &[TrainingInstance]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let enc = encode(&mut g, params, &bound, batch, &mut Mode::eval())?;
    let all: Vec<usize> = (0..enc.rows.len()).collect();
    let logits = mlm_logits_at(&mut g, params, &bound, &enc, &all);
    let h = batch.first().map_or(0, TrainingInstance::len);
    let v = params.config.vocab_size;
    let mut out = vec![Tensor::zeros(h, v); batch.len()];
    let lv = g.value(logits);
    for (r, &(b, i)) in enc.rows.iter().enumerate() {
        out[b].row_mut(i).copy_from_slice(lv.row(r));
    }
    Ok(out)
}

/// `[batch, n_classes]` logits in evaluation mode.
pub fn forward_classify(params: &Parameters, batch: &[TrainingInstance]) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let enc = encode(&mut g, params, &bound, batch, &mut Mode::eval())?;
    let out = classify_logits(&mut g, params, &bound, &enc)?;
    Ok(g.value(out).clone())
}

/// Per-instance `[H, n_labels]` logits in evaluation mode; padding rows zero.
pub fn forward_tag(params: &Parameters, batch: &[TrainingInstance]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let enc = encode(&mut g, params, &bound, batch, &mut Mode::eval())?;
    let out = tag_logits(&mut g, params, &bound, &enc)?;
    let h = batch.first().map_or(0, TrainingInstance::len);
    let n = g.value(out).cols;
    let mut res = vec![Tensor::zeros(h, n); batch.len()];
    for (r, &(b, i)) in enc.rows.iter().enumerate() {
        res[b].row_mut(i).copy_from_slice(g.value(out).row(r));
    }
    Ok(res)
}

/// Final hidden states per instance, `[H, d_model]` with zero padding rows.
pub fn hidden_states(params: &Parameters, batch: &[TrainingInstance]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let enc = encode(&mut g, params, &bound, batch, &mut Mode::eval())?;
    let h = batch.first().map_or(0, TrainingInstance::len);
    let d = params.config.d_model;
    let mut res = vec![Tensor::zeros(h, d); batch.len()];
    for (r, &(b, i)) in enc.rows.iter().enumerate() {
        res[b].row_mut(i).copy_from_slice(g.value(enc.hidden).row(r));
    }
    Ok(res)
}
