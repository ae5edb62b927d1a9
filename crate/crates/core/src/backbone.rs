//! Language backbone interface and the bundled tiny causal transformer.
//!
//! The transformer is pre-LN with RMSNorm, learned positions, a SiLU MLP
//! and an unembedding tied to the token table. Adapter prompts follow the
//! zero-init gated attention scheme: each adapted layer projects its prompt
//! through the layer's own (frozen) key and value maps, and the extra
//! attention branch is scaled by `tanh(gate)` per head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AdapterInputs, Graph, NodeId};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::seeding::mix_seed;
use crate::tensor::Matrix;
use crate::tensorfile::{self, TensorFileError};
use crate::tokenizer::Vocab;

pub const BACKBONE_MAGIC: &[u8; 8] = b"TOPABB01";

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("sequence of {len} positions exceeds the backbone limit of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("embedded segment has width {found}, backbone width is {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("token id {0} outside the vocabulary")]
    UnknownToken(usize),
    #[error("empty input sequence")]
    EmptySequence,
    #[error("{0} adapter layers requested, backbone has {1}")]
    TooManyAdapterLayers(usize, usize),
    #[error(transparent)]
    File(#[from] TensorFileError),
    #[error("backbone file: {0}")]
    Format(String),
}

/// One piece of the input sequence.
#[derive(Debug, Clone)]
pub enum Segment {
    Tokens(Vec<usize>),
    /// Rows already in backbone embedding space (`len x width`).
    Embedded(NodeId),
}

/// Adapter prompt (`K x width`) and gate (`1 x heads`) for one layer.
#[derive(Debug, Clone, Copy)]
pub struct AdapterLayer {
    pub prompt: NodeId,
    pub gate: NodeId,
}

pub trait Backbone<T: Scalar>: Sync {
    fn vocab(&self) -> &Vocab;
    fn width(&self) -> usize;
    fn heads(&self) -> usize;
    fn layers(&self) -> usize;
    fn max_positions(&self) -> usize;
    /// Stable name used in checkpoint headers.
    fn descriptor(&self) -> String;
    /// Hash of all base weights.
    fn weights_digest(&self) -> String;
    /// Next-token logits (`len x vocab`) for the concatenated segments.
    /// `adapter` entries apply to the top `adapter.len()` layers.
    fn forward<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        segments: &[Segment],
        adapter: &[AdapterLayer],
    ) -> Result<NodeId, BackboneError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self { width: 64, heads: 4, layers: 2, ffn: 128, max_positions: 128, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer<T> {
    attn_norm: Matrix<T>,
    wq: Matrix<T>,
    wk: Matrix<T>,
    wv: Matrix<T>,
    wo: Matrix<T>,
    ffn_norm: Matrix<T>,
    w1: Matrix<T>,
    w2: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyTransformer<T> {
    config: TinyConfig,
    vocab: Vocab,
    tok: Matrix<T>,
    pos: Matrix<T>,
    layers: Vec<Layer<T>>,
    final_norm: Matrix<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self { epochs: 1, batch: 8, lr: 3e-3, warmup_steps: 20, weight_decay: 0.01, seed: 0 }
    }
}

impl<T: Scalar> TinyTransformer<T> {
    pub fn init(config: TinyConfig, vocab: Vocab) -> Self {
        let TinyConfig { width: w, ffn, layers, max_positions, seed, heads } = config;
        assert!(heads > 0 && w % heads == 0, "width must be divisible by heads");
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xBB));
        let ws = 1.0 / (w as f64).sqrt();
        let out_s = ws / (2.0 * layers as f64).sqrt();
        let tok = Matrix::randn(vocab.len(), w, ws, &mut rng);
        let pos = Matrix::randn(max_positions, w, 0.5 * ws, &mut rng);
        let layers = (0..layers)
            .map(|_| Layer {
                attn_norm: Matrix::filled(1, w, T::one()),
                wq: Matrix::randn(w, w, ws, &mut rng),
                wk: Matrix::randn(w, w, ws, &mut rng),
                wv: Matrix::randn(w, w, ws, &mut rng),
                wo: Matrix::randn(w, w, out_s, &mut rng),
                ffn_norm: Matrix::filled(1, w, T::one()),
                w1: Matrix::randn(w, ffn, ws, &mut rng),
                w2: Matrix::randn(ffn, w, out_s * (w as f64 / ffn as f64).sqrt(), &mut rng),
            })
            .collect();
        Self { config, vocab, tok, pos, layers, final_norm: Matrix::filled(1, w, T::one()) }
    }

    pub fn config(&self) -> &TinyConfig {
        &self.config
    }

    /// Token embedding table (`vocab x width`).
    pub fn token_embeddings(&self) -> &Matrix<T> {
        &self.tok
    }

    fn named(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![("tok".to_string(), &self.tok), ("pos".to_string(), &self.pos)];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, m) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ffn_norm", &l.ffn_norm),
                ("w1", &l.w1),
                ("w2", &l.w2),
            ] {
                out.push((format!("layers.{i}.{n}"), m));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.tok, &mut self.pos];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w1,
                &mut l.w2,
            ]);
        }
        out.push(&mut self.final_norm);
        out
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({ "config": self.config, "vocab": self.vocab })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), BackboneError> {
        Ok(tensorfile::write(path, BACKBONE_MAGIC, &self.meta(), &self.named())?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, BackboneError> {
        let (meta, tensors) = tensorfile::read::<T>(path, BACKBONE_MAGIC)?;
        let config: TinyConfig =
            serde_json::from_value(meta["config"].clone()).map_err(|e| BackboneError::Format(e.to_string()))?;
        let vocab: Vocab =
            serde_json::from_value(meta["vocab"].clone()).map_err(|e| BackboneError::Format(e.to_string()))?;
        let mut model = Self::init(config, vocab);
        let expected: Vec<(String, (usize, usize))> =
            model.named().into_iter().map(|(n, m)| (n, m.shape())).collect();
        if expected.len() != tensors.len() {
            return Err(BackboneError::Format(format!("expected {} tensors, found {}", expected.len(), tensors.len())));
        }
        for (slot, ((ename, shape), (name, m))) in model.params_mut().into_iter().zip(expected.iter().zip(tensors)) {
            if *ename != name || *shape != m.shape() {
                return Err(BackboneError::Format(format!("unexpected tensor {name} {:?}", m.shape())));
            }
            *slot = m;
        }
        Ok(model)
    }

    fn build<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        segments: &[Segment],
        adapter: &[AdapterLayer],
        trainable: bool,
    ) -> Result<(NodeId, Vec<NodeId>), BackboneError> {
        let w = self.config.width;
        if adapter.len() > self.layers.len() {
            return Err(BackboneError::TooManyAdapterLayers(adapter.len(), self.layers.len()));
        }
        let mut ids = Vec::new();
        let mut param = |g: &mut Graph<'a, T>, m: &'a Matrix<T>| {
            let id = g.param(m, trainable);
            ids.push(id);
            id
        };
        let tok = param(g, &self.tok);
        let pos = param(g, &self.pos);
        let mut parts = Vec::with_capacity(segments.len());
        let mut len = 0;
        for s in segments {
            match s {
                Segment::Tokens(t) => {
                    if t.is_empty() {
                        continue;
                    }
                    if let Some(&bad) = t.iter().find(|&&x| x >= self.vocab.len()) {
                        return Err(BackboneError::UnknownToken(bad));
                    }
                    len += t.len();
                    parts.push(g.gather(tok, t));
                }
                Segment::Embedded(id) => {
                    let (r, c) = g.value(*id).shape();
                    if c != w {
                        return Err(BackboneError::WidthMismatch { expected: w, found: c });
                    }
                    if r == 0 {
                        continue;
                    }
                    len += r;
                    parts.push(*id);
                }
            }
        }
        if len == 0 {
            return Err(BackboneError::EmptySequence);
        }
        if len > self.config.max_positions {
            return Err(BackboneError::SequenceTooLong { len, max: self.config.max_positions });
        }
        let x0 = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        let positions: Vec<usize> = (0..len).collect();
        let p = g.gather(pos, &positions);
        let mut x = g.add(x0, p);
        let first_adapted = self.layers.len() - adapter.len();
        for (li, l) in self.layers.iter().enumerate() {
            let an = param(g, &l.attn_norm);
            let wq = param(g, &l.wq);
            let wk = param(g, &l.wk);
            let wv = param(g, &l.wv);
            let wo = param(g, &l.wo);
            let fnorm = param(g, &l.ffn_norm);
            let w1 = param(g, &l.w1);
            let w2 = param(g, &l.w2);
            let h = g.rms_norm(x, an);
            let q = g.matmul(h, wq);
            let k = g.matmul(h, wk);
            let v = g.matmul(h, wv);
            let ad = if li >= first_adapted {
                let a = adapter[li - first_adapted];
                let keys = g.matmul(a.prompt, wk);
                let values = g.matmul(a.prompt, wv);
                Some(AdapterInputs { keys, values, gate: a.gate })
            } else {
                None
            };
            let att = g.attention(q, k, v, self.config.heads, true, ad);
            let o = g.matmul(att, wo);
            x = g.add(x, o);
            let h2 = g.rms_norm(x, fnorm);
            let u = g.matmul(h2, w1);
            let u = g.silu(u);
            let d = g.matmul(u, w2);
            x = g.add(x, d);
        }
        let fnorm = param(g, &self.final_norm);
        let out = g.rms_norm(x, fnorm);
        let logits = g.matmul_t(out, tok);
        Ok((logits, ids))
    }

    /// Trains every base weight on next-token prediction. Each sequence is
    /// `(tokens, loss_from)`: only tokens at index `loss_from` and later are
    /// predicted (0 or 1 means the whole sequence). This stands in for the
    /// backbone's language pretraining and instruction tuning and happens
    /// before any alignment; afterwards the weights are frozen.
    /// Returns the mean loss of each epoch.
    pub fn pretrain(&mut self, sequences: &[(Vec<usize>, usize)], opts: &PretrainOptions) -> Result<Vec<f64>, BackboneError> {
        use rand::seq::SliceRandom;
        let shapes: Vec<usize> = self.named().iter().map(|(_, m)| m.data().len()).collect();
        let decay: Vec<bool> = self.named().iter().map(|(_, m)| m.rows() > 1).collect();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: opts.weight_decay, ..Default::default() }, &shapes);
        let batch = opts.batch.max(1);
        let usable: Vec<&(Vec<usize>, usize)> = sequences.iter().filter(|(s, from)| s.len() >= 2 && *from < s.len()).collect();
        let steps_per_epoch = usable.len().div_ceil(batch);
        let total = steps_per_epoch * opts.epochs;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, 0x9E));
        let mut epoch_losses = Vec::with_capacity(opts.epochs);
        let mut step = 0;
        for _ in 0..opts.epochs {
            let mut order: Vec<usize> = (0..usable.len()).collect();
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for chunk in order.chunks(batch) {
                let mut acc: Option<Vec<Matrix<T>>> = None;
                for &i in chunk {
                    let (seq, from) = usable[i];
                    let from = (*from).max(1);
                    let (loss, grads) = {
                        let mut g = Graph::new();
                        let inputs = Segment::Tokens(seq[..seq.len() - 1].to_vec());
                        let (logits, ids) = self.build(&mut g, &[inputs], &[], true)?;
                        let targets: Vec<(usize, usize)> = (from..seq.len()).map(|j| (j - 1, seq[j])).collect();
                        let loss = g.cross_entropy(logits, &targets);
                        g.backward(loss);
                        let lv = g.value(loss).get(0, 0).as_f64();
                        let grads: Vec<Matrix<T>> = ids
                            .iter()
                            .map(|&id| {
                                let (r, c) = g.value(id).shape();
                                g.take_grad(id).unwrap_or_else(|| Matrix::zeros(r, c))
                            })
                            .collect();
                        (lv, grads)
                    };
                    sum += loss;
                    match &mut acc {
                        None => acc = Some(grads),
                        Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                    }
                }
                let mut grads = acc.expect("non-empty chunk");
                let inv = T::lit(1.0 / chunk.len() as f64);
                grads.iter_mut().for_each(|g| g.scale(inv));
                let lr = lr_at(step, total, opts.warmup_steps, opts.lr);
                opt.step(&mut self.params_mut(), &grads, &decay, lr);
                step += 1;
            }
            epoch_losses.push(sum / usable.len().max(1) as f64);
        }
        Ok(epoch_losses)
    }
}

impl<T: Scalar> Backbone<T> for TinyTransformer<T> {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn width(&self) -> usize {
        self.config.width
    }

    fn heads(&self) -> usize {
        self.config.heads
    }

    fn layers(&self) -> usize {
        self.config.layers
    }

    fn max_positions(&self) -> usize {
        self.config.max_positions
    }

    fn descriptor(&self) -> String {
        let c = &self.config;
        format!("tiny-w{}-h{}-l{}-f{}-v{}", c.width, c.heads, c.layers, c.ffn, self.vocab.len())
    }

    fn weights_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.vocab.digest().as_bytes());
        let mut buf = Vec::new();
        for (name, m) in self.named() {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            buf.clear();
            m.data().iter().for_each(|x| x.write_le(&mut buf));
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    fn forward<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        segments: &[Segment],
        adapter: &[AdapterLayer],
    ) -> Result<NodeId, BackboneError> {
        Ok(self.build(g, segments, adapter, false)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{BOS_ID, EOS_ID};

    fn tiny() -> TinyTransformer<f64> {
        let vocab = Vocab::build(["a b c d e f g h"]);
        TinyTransformer::init(TinyConfig { width: 16, heads: 2, layers: 2, ffn: 32, max_positions: 16, seed: 3 }, vocab)
    }

    #[test]
    fn forward_shapes_and_limits() {
        let m = tiny();
        let mut g = Graph::new();
        let logits = m.forward(&mut g, &[Segment::Tokens(vec![BOS_ID, 5, 6])], &[]).unwrap();
        assert_eq!(g.value(logits).shape(), (3, m.vocab().len()));
        let mut g = Graph::new();
        let too_long = Segment::Tokens(vec![4; 17]);
        assert!(matches!(m.forward(&mut g, &[too_long], &[]), Err(BackboneError::SequenceTooLong { .. })));
        let mut g = Graph::new();
        assert!(matches!(m.forward(&mut g, &[Segment::Tokens(vec![99])], &[]), Err(BackboneError::UnknownToken(99))));
    }

    #[test]
    fn causal_prefix_logits_ignore_the_future() {
        let m = tiny();
        let mut g = Graph::new();
        let a = m.forward(&mut g, &[Segment::Tokens(vec![BOS_ID, 5, 6, 7])], &[]).unwrap();
        let a = g.value(a).row(1).to_vec();
        let mut g = Graph::new();
        let b = m.forward(&mut g, &[Segment::Tokens(vec![BOS_ID, 5, 9, 4])], &[]).unwrap();
        assert_eq!(g.value(b).row(1), &a[..]);
    }

    #[test]
    fn embedded_segment_equals_gathered_tokens() {
        let m = tiny();
        let mut g = Graph::new();
        let a = m.forward(&mut g, &[Segment::Tokens(vec![BOS_ID, 5, 6])], &[]).unwrap();
        let a = g.value(a).clone();
        let mut g = Graph::new();
        let rows = Matrix::from_rows(&[m.tok.row(5).to_vec(), m.tok.row(6).to_vec()]);
        let e = g.constant(rows);
        let b = m.forward(&mut g, &[Segment::Tokens(vec![BOS_ID]), Segment::Embedded(e)], &[]).unwrap();
        assert_eq!(g.value(b), &a);
    }

    #[test]
    fn zero_gate_adapter_is_a_no_op() {
        let m = tiny();
        let mut g = Graph::new();
        let a = m.forward(&mut g, &[Segment::Tokens(vec![BOS_ID, 5])], &[]).unwrap();
        let a = g.value(a).clone();
        let mut g = Graph::new();
        let prompt = g.constant(Matrix::filled(3, 16, 0.7));
        let gate = g.constant(Matrix::zeros(1, 2));
        let ad = [AdapterLayer { prompt, gate }];
        let b = m.forward(&mut g, &[Segment::Tokens(vec![BOS_ID, 5])], &ad).unwrap();
        assert_eq!(g.value(b), &a);
    }

    #[test]
    fn pretraining_learns_a_fixed_sequence_and_round_trips() {
        let mut m = tiny();
        let seq = vec![BOS_ID, 4, 5, 6, 7, 8, EOS_ID];
        let opts = PretrainOptions { epochs: 60, batch: 1, lr: 1e-2, warmup_steps: 5, ..Default::default() };
        let losses = m.pretrain(&[(seq, 0)], &opts).unwrap();
        assert!(losses[59] < 0.1 * losses[0], "{losses:?}");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bb.bin");
        m.save(&p).unwrap();
        let back = TinyTransformer::<f64>::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.weights_digest(), m.weights_digest());
        assert_ne!(tiny().weights_digest(), m.weights_digest());
    }
}
