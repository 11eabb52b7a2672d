//! A miniature transformer encoder trained by reverse-mode differentiation.

pub mod encoder;
pub mod graph;
pub mod optim;
pub mod tensor;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

pub use encoder::{
    classify_logits, encode, forward_classify, forward_mlm, forward_tag, hidden_states, mlm_logits_at, tag_logits, Bound,
    Encoded, EncoderConfig, HeadKind, HeadSpec, Mode, Parameters,
};
pub use graph::{Gradients, Graph, NodeId};
pub use optim::{AdamState, TrainConfig};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Parameters plus optimizer moments and the step counter.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub params: Parameters,
    pub optimizer: AdamState,
}

impl ModelState {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let params = Parameters::init(config, seed)?;
        let optimizer = AdamState::new(&params.tensors);
        Ok(ModelState { params, optimizer })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.params.config
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Swaps in a fresh task head and resets the optimizer for fine-tuning.
    pub fn attach_head(&mut self, spec: HeadSpec, seed: u64) -> Result<()> {
        self.params.attach_head(spec, seed)?;
        self.optimizer = AdamState::new(&self.params.tensors);
        Ok(())
    }

    pub fn optimizer_step(&mut self, grads: &Gradients, cfg: &TrainConfig) -> Result<f64> {
        self.optimizer.step(&mut self.params.tensors, grads, cfg)
    }
}

/// Gradients of the scalar `loss` built on `g` for every parameter of `params`.
pub fn backward(g: &Graph, loss: NodeId, params: &Parameters) -> Result<Gradients> {
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss is {v}")));
    }
    Ok(g.backward(loss, params.len()))
}

/// Compares reverse-mode gradients of `loss_fn` with central differences at
/// up to `samples` randomly chosen scalar parameters, returning the largest
/// relative error `|a − n| / max(|a|, |n|, 1e-3)`. The loss must be
/// deterministic in the parameters (no dropout).
pub fn grad_check<F>(params: &Parameters, loss_fn: F, epsilon: f64, samples: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, &Parameters, &Bound) -> Result<NodeId>,
{
    let eval = |p: &Parameters| -> Result<f64> {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let l = loss_fn(&mut g, p, &b)?;
        let v = g.scalar(l);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("loss is {v}")))
        }
    };
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let l = loss_fn(&mut g, params, &b)?;
    let grads = backward(&g, l, params)?;

    let total = params.n_scalars();
    let mut where_: Vec<(usize, usize)> = Vec::with_capacity(total);
    for (s, t) in params.tensors.iter().enumerate() {
        where_.extend((0..t.len()).map(|e| (s, e)));
    }
    let mut rng = rng_for(seed, 0);
    let picks = sample(&mut rng, total, samples.min(total));
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for k in picks.iter() {
        let (s, e) = where_[k];
        let orig = probe.tensors[s].data[e];
        probe.tensors[s].data[e] = orig + epsilon;
        let plus = eval(&probe)?;
        probe.tensors[s].data[e] = orig - epsilon;
        let minus = eval(&probe)?;
        probe.tensors[s].data[e] = orig;
        let num = (plus - minus) / (2.0 * epsilon);
        let ana = grads.per_param[s].as_ref().map_or(0.0, |g| g.data[e]);
        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    Ok(worst)
}

const MAGIC: &[u8; 8] = b"ALNLAB01";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    head: Option<HeadSpec>,
    train: Option<TrainConfig>,
    step: u64,
    positional: String,
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
}

/// Writes `MAGIC`, a little-endian u64 header length, the JSON header, then
/// parameters, first moments and second moments as little-endian f64.
pub fn save_checkpoint(path: &Path, state: &ModelState, train: Option<&TrainConfig>) -> Result<()> {
    let p = &state.params;
    let header = Header {
        config: p.config.clone(),
        head: p.head.clone(),
        train: train.cloned(),
        step: state.optimizer.step,
        positional: "learned".into(),
        names: p.names.clone(),
        shapes: p.tensors.iter().map(Tensor::shape).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 24 * p.n_scalars());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for group in [&p.tensors, &state.optimizer.m, &state.optimizer.v] {
        for t in group.iter() {
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`], returning the training
/// configuration stored alongside it, if any.
pub fn load_checkpoint(path: &Path) -> Result<(ModelState, Option<TrainConfig>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 || &buf[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let body = buf.get(16..16 + hlen).ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    let n: usize = header.shapes.iter().map(|(r, c)| r * c).sum();
    let blob = &buf[16 + hlen..];
    if blob.len() != 3 * n * 8 {
        return Err(Error::Checkpoint(format!("expected {} parameter bytes, found {}", 3 * n * 8, blob.len())));
    }
    let mut vals = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = || -> Vec<Tensor> {
        header
            .shapes
            .iter()
            .map(|&(r, c)| Tensor::from_vec(r, c, vals.by_ref().take(r * c).collect()))
            .collect()
    };
    let tensors = take();
    let m = take();
    let v = take();
    let params = Parameters::from_tensors(&header.config, header.head.clone(), header.names.clone(), tensors)?;
    if !params.all_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok((
        ModelState {
            params,
            optimizer: AdamState { step: header.step, m, v },
        },
        header.train,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Language;
    use crate::instances::{pack_mono, TrainingInstance, IGNORE};

    fn small(n_layers: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers,
            n_heads: 2,
            d_model: 8,
            d_ff: 12,
            max_positions: 16,
            vocab_size: 20,
            n_languages: 2,
            dropout: 0.0,
        }
    }

    fn batch() -> Vec<TrainingInstance> {
        let mut p = pack_mono(&[vec![5, 6, 7], vec![8, 9]], 6, Language::Original).instances;
        p.extend(pack_mono(&[vec![10, 11, 12, 13]], 6, Language::Derived).instances);
        p
    }

    #[test]
    fn zero_layers_is_embedding_projection() {
        let params = Parameters::init(&small(0), 3).unwrap();
        let b = batch();
        let logits = forward_mlm(&params, &b).unwrap();
        let e = params.token_embeddings();
        let pos = &params.tensors[params.slot("embeddings.position").unwrap()];
        let lang = &params.tensors[params.slot("embeddings.language").unwrap()];
        let bias = &params.tensors[params.slot("mlm.bias").unwrap()];
        let inst = &b[1];
        for i in 0..inst.content_len() {
            let x: Vec<f64> = (0..8)
                .map(|j| {
                    e.row(inst.token_ids[i] as usize)[j] + pos.row(inst.position_ids[i] as usize)[j] + lang.row(inst.language_ids[i] as usize)[j]
                })
                .collect();
            for w in 0..20 {
                let want = tensor::dot(&x, e.row(w)) + bias.data[w];
                assert!((logits[1].row(i)[w] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_order_is_equivariant_and_rows_normalise() {
        let params = Parameters::init(&small(2), 3).unwrap();
        let b = batch();
        let fwd = forward_mlm(&params, &b).unwrap();
        let rev: Vec<_> = b.iter().rev().cloned().collect();
        let bwd = forward_mlm(&params, &rev).unwrap();
        assert_eq!(fwd[0], bwd[1]);
        assert_eq!(fwd[1], bwd[0]);
        for i in 0..b[0].content_len() {
            let mut row = fwd[0].row(i).to_vec();
            tensor::softmax_in_place(&mut row);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn padding_tokens_do_not_leak() {
        // Padding rows are never gathered, so even an out-of-vocabulary id
        // there cannot change content logits.
        let params = Parameters::init(&small(2), 3).unwrap();
        let b = batch();
        let mut changed = b.clone();
        let h = changed[1].len();
        changed[1].token_ids[h - 1] = 17;
        assert!(!changed[1].is_content(h - 1));
        let (x, y) = (forward_mlm(&params, &b).unwrap(), forward_mlm(&params, &changed).unwrap());
        assert_eq!(x, y);
    }

    #[test]
    fn heads_have_the_promised_shapes() {
        let mut params = Parameters::init(&small(1), 3).unwrap();
        params.attach_head(HeadSpec { kind: HeadKind::Classify, n_labels: 3 }, 1).unwrap();
        assert_eq!(forward_classify(&params, &batch()).unwrap().shape(), (2, 3));
        assert!(forward_tag(&params, &batch()).is_err());

        params.attach_head(HeadSpec { kind: HeadKind::Tag, n_labels: 1 }, 1).unwrap();
        let out = forward_tag(&params, &batch()).unwrap();
        assert_eq!(out[0].shape(), (6, 1));
        assert_eq!(params.names.iter().filter(|n| n.starts_with("head.")).count(), 2);
    }

    #[test]
    fn permuting_tag_head_columns_permutes_logits() {
        let mut params = Parameters::init(&small(1), 3).unwrap();
        params.attach_head(HeadSpec { kind: HeadKind::Tag, n_labels: 3 }, 1).unwrap();
        let before = forward_tag(&params, &batch()).unwrap();
        let (w, b) = (params.slot("head.out.w").unwrap(), params.slot("head.out.b").unwrap());
        let perm = [2usize, 0, 1];
        let mut nw = params.tensors[w].clone();
        for r in 0..nw.rows {
            for (k, &src) in perm.iter().enumerate() {
                nw.row_mut(r)[k] = params.tensors[w].row(r)[src];
            }
        }
        let nb = Tensor::from_vec(1, 3, perm.iter().map(|&s| params.tensors[b].data[s]).collect());
        params.tensors[w] = nw;
        params.tensors[b] = nb;
        let after = forward_tag(&params, &batch()).unwrap();
        for (x, y) in before.iter().zip(&after) {
            for r in 0..x.rows {
                for (k, &src) in perm.iter().enumerate() {
                    assert!((y.row(r)[k] - x.row(r)[src]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn quadratic_loss_gradient_is_theta() {
        let mut g = Graph::new();
        let theta = Tensor::from_vec(1, 3, vec![1.5, -2.0, 0.25]);
        let x = g.param(0, theta.clone());
        let ones = g.constant(Tensor::from_vec(1, 1, vec![1.0]));
        let _ = ones;
        let sq = g.matmul_nt(x, x);
        let loss = g.scale(sq, 0.5);
        let grads = g.backward(loss, 1);
        assert_eq!(grads.per_param[0].as_ref().unwrap().data, theta.data);
    }

    fn mlm_loss(g: &mut Graph, p: &Parameters, b: &Bound) -> Result<NodeId> {
        let mut inst = batch();
        inst[0].mlm_labels[1] = 6;
        inst[1].mlm_labels[0] = 10;
        inst[1].mlm_labels[3] = 13;
        let enc = encode(g, p, b, &inst, &mut Mode::eval())?;
        let idx = enc.index(inst.len(), inst[0].len());
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (bi, x) in inst.iter().enumerate() {
            for (i, &l) in x.mlm_labels.iter().enumerate() {
                if l != IGNORE {
                    rows.push(idx[bi][i].unwrap());
                    targets.push(l);
                }
            }
        }
        let logits = mlm_logits_at(g, p, b, &enc, &rows);
        Ok(g.cross_entropy(logits, &targets))
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let params = Parameters::init(&small(2), 5).unwrap();
        let err = grad_check(&params, mlm_loss, 1e-4, 300, 1).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn align_loss_only_touches_embeddings() {
        let params = Parameters::init(&small(2), 5).unwrap();
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let loss = g.neg_mean_cosine(b.nodes[params.token_embedding_slot()], &[(5, 10), (6, 11)]);
        let grads = backward(&g, loss, &params).unwrap();
        for s in params.layer_slots() {
            assert!(grads.per_param[s].is_none());
        }
        assert!(grads.per_param[params.token_embedding_slot()].is_some());
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let run = || {
            let mut st = ModelState::new(&small(1), 9).unwrap();
            let cfg = TrainConfig {
                learning_rate: 1e-2,
                warmup_steps: 1,
                batch_size: 2,
                total_steps: 3,
                decay_to_zero: false,
                weight_decay: 0.0,
            };
            for _ in 0..3 {
                let mut g = Graph::new();
                let b = st.params.bind(&mut g);
                let l = mlm_loss(&mut g, &st.params, &b).unwrap();
                let grads = backward(&g, l, &st.params).unwrap();
                st.optimizer_step(&grads, &cfg).unwrap();
            }
            st
        };
        let (a, b) = (run(), run());
        assert_eq!(a.params.tensors, b.params.tensors);
        assert_eq!(a.step(), 3);
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut st = ModelState::new(&small(1), 2).unwrap();
        st.attach_head(HeadSpec { kind: HeadKind::Tag, n_labels: 4 }, 3).unwrap();
        st.optimizer.step = 7;
        save_checkpoint(&path, &st, Some(&TrainConfig::full())).unwrap();
        let (back, train) = load_checkpoint(&path).unwrap();
        assert_eq!(back.params.tensors, st.params.tensors);
        assert_eq!(back.params.head, st.params.head);
        assert_eq!(back.step(), 7);
        assert_eq!(train, Some(TrainConfig::full()));

        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small(1);
        c.n_heads = 3;
        assert!(matches!(Parameters::init(&c, 0), Err(Error::Config(_))));
        let mut c = small(1);
        c.n_languages = 1;
        assert!(Parameters::init(&c, 0).is_err());
    }
}
