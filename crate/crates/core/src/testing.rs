//! Backbone stand-ins for unit tests.

use crate::autodiff::{Graph, NodeId};
use crate::backbone::{AdapterLayer, Backbone, BackboneError, Segment};
use crate::tensor::Matrix;
use crate::tokenizer::{Vocab, EOS_ID};

#[derive(Clone, Copy)]
pub enum Mode {
    /// All-zero logits.
    Uniform,
    /// Logits are the input rows; token rows are zero.
    Echo,
    /// Puts a large logit on the next input token (EOS at the end).
    Peek,
}

/// Backbone stand-in whose width equals the vocabulary size.
pub struct Mock {
    pub vocab: Vocab,
    pub mode: Mode,
}

impl Mock {
    pub fn new(mode: Mode) -> Self {
        Self { vocab: Vocab::build(["a b c d"]), mode }
    }
}

impl Backbone<f64> for Mock {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }
    fn width(&self) -> usize {
        self.vocab.len()
    }
    fn heads(&self) -> usize {
        1
    }
    fn layers(&self) -> usize {
        0
    }
    fn max_positions(&self) -> usize {
        64
    }
    fn descriptor(&self) -> String {
        "mock".into()
    }
    fn weights_digest(&self) -> String {
        "0".into()
    }

    fn forward<'a>(
        &'a self,
        g: &mut Graph<'a, f64>,
        segments: &[Segment],
        _adapter: &[AdapterLayer],
    ) -> Result<NodeId, BackboneError> {
        let v = self.vocab.len();
        let mut parts = Vec::new();
        let mut tokens = Vec::new();
        for s in segments {
            match s {
                Segment::Tokens(t) if !t.is_empty() => {
                    parts.push(g.constant(Matrix::zeros(t.len(), v)));
                    tokens.extend(t.iter().map(|&x| Some(x)));
                }
                Segment::Tokens(_) => {}
                Segment::Embedded(id) => {
                    let rows = g.value(*id).rows();
                    parts.push(*id);
                    tokens.extend(std::iter::repeat(None).take(rows));
                }
            }
        }
        let x = g.concat_rows(&parts);
        Ok(match self.mode {
            Mode::Echo => x,
            Mode::Uniform => g.constant(Matrix::zeros(tokens.len(), v)),
            Mode::Peek => {
                let mut m = Matrix::zeros(tokens.len(), v);
                for i in 0..tokens.len() {
                    let next = tokens.get(i + 1).copied().flatten().unwrap_or(EOS_ID);
                    m.set(i, next, 1000.0);
                }
                g.constant(m)
            }
        })
    }
}
