//! Text-only alignment: a linear projection from encoder space into the
//! backbone's embedding space plus gated adapter prompts, trained with the
//! autoregressive LM loss while the backbone stays frozen.

mod checkpoint;
mod templates;

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC};
pub use templates::{
    multi_choice_target, render_choices, sentence_target, strip_period, PromptTemplateSet, RenderedPrompt, Task,
    OPTION_LETTERS, VIDEO_SLOT,
};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{log_softmax_row, Graph, NodeId};
use crate::backbone::{AdapterLayer, Backbone, BackboneError, Segment};
use crate::dual_encoder::{encode_tideo, EncoderError, EncoderPair, Modality, SequenceRepresentation};
use crate::fingerprint::fingerprint;
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::seeding::rng_for;
use crate::tensor::Matrix;
use crate::tensorfile::TensorFileError;
use crate::tideo_data::{CorpusShard, Tideo, TideoAnnotation};
use crate::tokenizer::{Vocab, BOS_ID, EOS_ID};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("tideo {tideo}: missing {field}")]
    MissingAnnotationField { tideo: String, field: String },
    #[error("non-finite loss at target position {position}")]
    NonFiniteLoss { position: usize },
    #[error("training diverged at epoch {epoch}, step {step}; last good checkpoint kept")]
    DivergenceDetected { epoch: usize, step: u64, last_good: Vec<u8> },
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("features have modality {found:?}, expected {expected:?}")]
    WrongModality { expected: Modality, found: Modality },
    #[error("features have dimension {found}, projection expects {expected}")]
    FeatureDimMismatch { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    File(#[from] TensorFileError),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

/// Trainable tensors: projection `d x width` with bias, and per adapted
/// layer a `K x width` prompt and a `1 x heads` gate (zero at init).
#[derive(Debug, Clone, PartialEq)]
pub struct AlignParams<T> {
    pub projection: Matrix<T>,
    pub bias: Matrix<T>,
    pub prompts: Vec<Matrix<T>>,
    pub gates: Vec<Matrix<T>>,
}

impl<T: Scalar> AlignParams<T> {
    /// Projection uses the usual `U(-1/sqrt(d), 1/sqrt(d))` linear init.
    pub fn init(
        feature_dim: usize,
        width: usize,
        heads: usize,
        adapter_layers: usize,
        adapter_len: usize,
        seed: u64,
    ) -> Self {
        let mut rng = rng_for(seed, 0xA1);
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound);
        let mut uniform = |r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| T::lit(u.sample(&mut rng))).collect())
        };
        let projection = uniform(feature_dim, width);
        let bias = uniform(1, width);
        let layers = if adapter_len == 0 { 0 } else { adapter_layers };
        let prompts =
            (0..layers).map(|_| Matrix::randn(adapter_len, width, 1.0 / (width as f64).sqrt(), &mut rng)).collect();
        let gates = (0..layers).map(|_| Matrix::zeros(1, heads)).collect();
        Self { projection, bias, prompts, gates }
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn width(&self) -> usize {
        self.projection.cols()
    }

    pub fn adapter_layers(&self) -> usize {
        self.prompts.len()
    }

    pub fn adapter_len(&self) -> usize {
        self.prompts.first().map_or(0, Matrix::rows)
    }

    pub fn named(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![("projection.weight".to_string(), &self.projection), ("projection.bias".to_string(), &self.bias)];
        for (i, (p, g)) in self.prompts.iter().zip(&self.gates).enumerate() {
            out.push((format!("adapter.{i}.prompt"), p));
            out.push((format!("adapter.{i}.gate"), g));
        }
        out
    }

    pub fn from_named(tensors: Vec<(String, Matrix<T>)>) -> Result<Self, AlignError> {
        let bad = |m: String| AlignError::BadCheckpoint(m);
        let mut it = tensors.into_iter();
        let mut take = |name: &str| match it.next() {
            Some((n, m)) if n == name => Ok(Some(m)),
            Some((n, _)) => Err(bad(format!("expected tensor {name}, found {n}"))),
            None => Ok(None),
        };
        let projection = take("projection.weight")?.ok_or_else(|| bad("missing projection.weight".into()))?;
        let bias = take("projection.bias")?.ok_or_else(|| bad("missing projection.bias".into()))?;
        let (mut prompts, mut gates) = (Vec::new(), Vec::new());
        for i in 0.. {
            let Some(p) = take(&format!("adapter.{i}.prompt"))? else { break };
            let g = take(&format!("adapter.{i}.gate"))?.ok_or_else(|| bad(format!("missing adapter.{i}.gate")))?;
            prompts.push(p);
            gates.push(g);
        }
        if bias.shape() != (1, projection.cols()) {
            return Err(bad("projection bias shape".into()));
        }
        Ok(Self { projection, bias, prompts, gates })
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.projection, &mut self.bias];
        for (p, g) in self.prompts.iter_mut().zip(self.gates.iter_mut()) {
            out.push(p);
            out.push(g);
        }
        out
    }

    /// Weight decay applies to matrices, not to the bias or gates.
    fn decay_mask(&self) -> Vec<bool> {
        let mut out = vec![true, false];
        for _ in &self.prompts {
            out.extend([true, false]);
        }
        out
    }

    fn sizes(&self) -> Vec<usize> {
        self.named().iter().map(|(_, m)| m.data().len()).collect()
    }
}

/// A frozen backbone together with trainable alignment parameters.
pub struct AlignedModel<'m, T, B: ?Sized> {
    pub backbone: &'m B,
    pub params: &'m AlignParams<T>,
}

impl<T, B: ?Sized> Clone for AlignedModel<'_, T, B> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T, B: ?Sized> Copy for AlignedModel<'_, T, B> {}

impl<'m, T: Scalar, B: Backbone<T> + ?Sized> AlignedModel<'m, T, B> {
    pub fn new(backbone: &'m B, params: &'m AlignParams<T>) -> Self {
        Self { backbone, params }
    }

    /// Builds `[BOS] prefix [P(features)] suffix` and returns the logits node
    /// together with the trainable leaves in [`AlignParams::named`] order.
    fn build<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        prefix: &[usize],
        features: Option<&Matrix<T>>,
        suffix: &[usize],
        trainable: bool,
    ) -> Result<(NodeId, Vec<NodeId>), AlignError> {
        let p = self.params;
        let w = g.param(&p.projection, trainable);
        let b = g.param(&p.bias, trainable);
        let mut leaves = vec![w, b];
        let mut adapter = Vec::with_capacity(p.prompts.len());
        for (pr, ga) in p.prompts.iter().zip(&p.gates) {
            let prompt = g.param(pr, trainable);
            let gate = g.param(ga, trainable);
            leaves.extend([prompt, gate]);
            adapter.push(AdapterLayer { prompt, gate });
        }
        let mut head = Vec::with_capacity(prefix.len() + 1);
        head.push(BOS_ID);
        head.extend_from_slice(prefix);
        let mut segments = vec![Segment::Tokens(head)];
        if let Some(f) = features.filter(|f| f.rows() > 0) {
            if f.cols() != p.feature_dim() {
                return Err(AlignError::FeatureDimMismatch { expected: p.feature_dim(), found: f.cols() });
            }
            let fx = g.constant(f.clone());
            let e = g.matmul(fx, w);
            let e = g.add_row(e, b);
            segments.push(Segment::Embedded(e));
        }
        segments.push(Segment::Tokens(suffix.to_vec()));
        let logits = self.backbone.forward(g, &segments, &adapter)?;
        Ok((logits, leaves))
    }

    /// Log-probability of each `continuation` token given everything before it.
    pub fn continuation_log_probs(
        &self,
        prefix: &[usize],
        features: Option<&Matrix<T>>,
        context: &[usize],
        continuation: &[usize],
    ) -> Result<Vec<f64>, AlignError> {
        if continuation.is_empty() {
            return Ok(Vec::new());
        }
        let mut suffix = context.to_vec();
        suffix.extend_from_slice(&continuation[..continuation.len() - 1]);
        let mut g = Graph::new();
        let (logits, _) = self.build(&mut g, prefix, features, &suffix, false)?;
        let feat_rows = features.map_or(0, Matrix::rows);
        let start = prefix.len() + feat_rows + context.len();
        let lv = g.value(logits);
        Ok(continuation
            .iter()
            .enumerate()
            .map(|(i, &tok)| log_softmax_row(lv.row(start + i))[tok].as_f64())
            .collect())
    }

    /// Greedy decoding until EOS, `max_new` tokens, or the position limit.
    /// Ties go to the lowest token id. EOS is not included in the output.
    pub fn generate(
        &self,
        prefix: &[usize],
        features: Option<&Matrix<T>>,
        context: &[usize],
        max_new: usize,
    ) -> Result<Vec<usize>, AlignError> {
        let feat_rows = features.map_or(0, Matrix::rows);
        let mut suffix = context.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && 1 + prefix.len() + feat_rows + suffix.len() < self.backbone.max_positions() {
            let mut g = Graph::new();
            let (logits, _) = self.build(&mut g, prefix, features, &suffix, false)?;
            let lv = g.value(logits);
            let last = lv.row(lv.rows() - 1);
            let mut best = 0;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            if best == EOS_ID {
                break;
            }
            out.push(best);
            suffix.push(best);
        }
        Ok(out)
    }
}

/// One rendered training example.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentExample<T> {
    pub task: Task,
    pub features: SequenceRepresentation<T>,
    /// Tokens before the feature block (instruction and `Video:`).
    pub prefix_tokens: Vec<usize>,
    /// Tokens between the feature block and the target (the condition Z).
    pub condition_tokens: Vec<usize>,
    /// Target tokens, terminated by EOS. Only these carry loss.
    pub target_tokens: Vec<usize>,
}

fn missing(ann: &TideoAnnotation, field: impl Into<String>) -> AlignError {
    AlignError::MissingAnnotationField { tideo: ann.tideo_id.clone(), field: field.into() }
}

/// Renders the prompt text for `task`. QA tasks use `qa_items[qa_index]`.
pub fn render_prompt_text(
    annotation: &TideoAnnotation,
    task: Task,
    qa_index: usize,
    templates: &PromptTemplateSet,
) -> Result<RenderedPrompt, AlignError> {
    match task {
        Task::Summarization => {
            if annotation.dense_description.trim().is_empty() {
                return Err(missing(annotation, "dense_description"));
            }
            Ok(templates.render(task, "", &[], &sentence_target(&annotation.dense_description)))
        }
        Task::OpenQa | Task::MultiChoice => {
            let qa = annotation.qa_items.get(qa_index).ok_or_else(|| missing(annotation, format!("qa[{qa_index}]")))?;
            if qa.question.trim().is_empty() {
                return Err(missing(annotation, format!("qa[{qa_index}].question")));
            }
            let answer = qa
                .options
                .get(qa.answer_index)
                .ok_or_else(|| missing(annotation, format!("qa[{qa_index}].answer_index")))?;
            if task == Task::OpenQa {
                Ok(templates.render(task, &qa.question, &[], &sentence_target(answer)))
            } else {
                Ok(templates.render(task, &qa.question, &qa.options, &multi_choice_target(qa.answer_index)))
            }
        }
    }
}

/// Tokenizes a rendered prompt around already computed features.
pub fn render_annotation<T: Scalar>(
    annotation: &TideoAnnotation,
    task: Task,
    qa_index: usize,
    features: SequenceRepresentation<T>,
    templates: &PromptTemplateSet,
    vocab: &Vocab,
) -> Result<AlignmentExample<T>, AlignError> {
    let p = render_prompt_text(annotation, task, qa_index, templates)?;
    let mut target_tokens = vocab.encode(&p.target);
    target_tokens.push(EOS_ID);
    Ok(AlignmentExample {
        task,
        features,
        prefix_tokens: vocab.encode(&p.before),
        condition_tokens: vocab.encode(&p.after),
        target_tokens,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn render_example<T: Scalar, P: EncoderPair<T> + ?Sized>(
    tideo: &Tideo,
    annotation: &TideoAnnotation,
    task: Task,
    qa_index: usize,
    pair: &P,
    target_frames: usize,
    templates: &PromptTemplateSet,
    vocab: &Vocab,
) -> Result<AlignmentExample<T>, AlignError> {
    let features = encode_tideo(tideo, pair, target_frames)?;
    render_annotation(annotation, task, qa_index, features, templates, vocab)
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: f64,
    /// Negative log-likelihood of each target token.
    pub per_token: Vec<f64>,
    /// Gradients in [`AlignParams::named`] order.
    pub grads: Vec<Matrix<T>>,
}

/// Mean negative log-likelihood of the target tokens, with gradients for
/// the trainable parameters only.
pub fn lm_loss<T: Scalar, B: Backbone<T> + ?Sized>(
    example: &AlignmentExample<T>,
    model: AlignedModel<'_, T, B>,
) -> Result<LossOutput<T>, AlignError> {
    let t = &example.target_tokens;
    if t.is_empty() {
        return Err(AlignError::InvalidConfig("example without target tokens".into()));
    }
    let mut suffix = example.condition_tokens.clone();
    suffix.extend_from_slice(&t[..t.len() - 1]);
    let feats = &example.features.features;
    let mut g = Graph::new();
    let (logits, leaves) = model.build(&mut g, &example.prefix_tokens, Some(feats), &suffix, true)?;
    let start = example.prefix_tokens.len() + feats.rows() + example.condition_tokens.len();
    let targets: Vec<(usize, usize)> = t.iter().enumerate().map(|(i, &tok)| (start + i, tok)).collect();
    let ce = g.cross_entropy(logits, &targets);
    let per_token: Vec<f64> = g.cross_entropy_terms(ce).expect("cross entropy node").iter().map(|x| x.as_f64()).collect();
    if let Some(position) = per_token.iter().position(|x| !x.is_finite()) {
        return Err(AlignError::NonFiniteLoss { position });
    }
    let loss = g.value(ce).get(0, 0).as_f64();
    g.backward(ce);
    let grads = leaves
        .iter()
        .map(|&id| {
            let (r, c) = g.value(id).shape();
            g.take_grad(id).unwrap_or_else(|| Matrix::zeros(r, c))
        })
        .collect();
    Ok(LossOutput { loss, per_token, grads })
}

/// Mean loss over examples, no gradients kept.
pub fn mean_loss<T: Scalar, B: Backbone<T> + ?Sized>(
    examples: &[AlignmentExample<T>],
    model: AlignedModel<'_, T, B>,
) -> Result<f64, AlignError> {
    let mut total = 0.0;
    for ex in examples {
        total += lm_loss(ex, model)?.loss;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Relative weights of summarization, open QA and multi-choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRatio {
    pub summarization: f64,
    pub open_qa: f64,
    pub multi_choice: f64,
}

impl Default for TaskRatio {
    fn default() -> Self {
        Self { summarization: 1.0, open_qa: 1.0, multi_choice: 2.0 }
    }
}

impl TaskRatio {
    pub fn validate(&self) -> Result<(), AlignError> {
        let w = [self.summarization, self.open_qa, self.multi_choice];
        if w.iter().any(|x| !x.is_finite() || *x <= 0.0) {
            return Err(AlignError::InvalidConfig(format!("task ratio components must be positive, got {w:?}")));
        }
        Ok(())
    }

    /// Per-example categorical draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Task {
        let total = self.summarization + self.open_qa + self.multi_choice;
        let u: f64 = rng.gen::<f64>() * total;
        if u < self.summarization {
            Task::Summarization
        } else if u < self.summarization + self.open_qa {
            Task::OpenQa
        } else {
            Task::MultiChoice
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub target_frames: usize,
    pub task_ratio: TaskRatio,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub epochs: usize,
    pub rng_seed: u64,
    pub adapter_len: usize,
    /// Number of top layers that get adapter prompts; `None` adapts all.
    pub adapter_layers: Option<usize>,
    pub deterministic: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            target_frames: 10,
            task_ratio: TaskRatio::default(),
            base_lr: 5e-3,
            weight_decay: 0.1,
            warmup_epochs: 1.0,
            batch_size: 72,
            accum_steps: 4,
            epochs: 20,
            rng_seed: 0,
            adapter_len: 50,
            adapter_layers: None,
            deterministic: true,
        }
    }
}

impl TrainerConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accum_steps
    }

    /// `base_lr x effective_batch / 256`.
    pub fn effective_lr(&self) -> f64 {
        self.base_lr * self.effective_batch() as f64 / 256.0
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        self.task_ratio.validate()?;
        if self.batch_size == 0 || self.accum_steps == 0 {
            return Err(AlignError::InvalidConfig("batch size and accumulation steps must be positive".into()));
        }
        if self.target_frames == 0 {
            return Err(AlignError::InvalidConfig("target_frames must be positive".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) || self.warmup_epochs < 0.0 {
            return Err(AlignError::InvalidConfig("learning rate and warmup must be non-negative".into()));
        }
        Ok(())
    }

    pub fn init_params<T: Scalar>(&self, feature_dim: usize, width: usize, heads: usize, layers: usize) -> AlignParams<T> {
        let adapted = self.adapter_layers.unwrap_or(layers).min(layers);
        AlignParams::init(feature_dim, width, heads, adapted, self.adapter_len, self.rng_seed)
    }
}

/// One line of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub epoch: usize,
    pub step: u64,
    pub task: Task,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub records: Vec<ReportRecord>,
    pub epoch_losses: Vec<f64>,
}

/// A training item: features plus the annotation that supplies targets.
pub struct TrainItem<'c, T> {
    pub features: SequenceRepresentation<T>,
    pub annotation: &'c TideoAnnotation,
}

struct FitSetup<'s, T> {
    config: &'s TrainerConfig,
    header: CheckpointHeader,
    init: AlignParams<T>,
    templates: &'s PromptTemplateSet,
    report: Option<&'s Path>,
}

fn fit<T: Scalar, B: Backbone<T> + ?Sized>(
    items: &[TrainItem<'_, T>],
    backbone: &B,
    setup: FitSetup<'_, T>,
) -> Result<TrainOutcome<T>, AlignError> {
    let FitSetup { config, mut header, init, templates, report } = setup;
    let mut params = init;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: config.weight_decay, ..Default::default() }, &params.sizes());
    let decay = params.decay_mask();
    let eff = config.effective_batch();
    let steps_per_epoch = items.len().div_ceil(eff);
    let total = steps_per_epoch * config.epochs;
    let warmup = (config.warmup_epochs * steps_per_epoch as f64).round() as usize;
    let peak = config.effective_lr();
    let mut rng = rng_for(config.rng_seed, 0x7A);
    let mut report_file = match report {
        Some(p) => Some(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(|source| AlignError::Io { path: p.to_path_buf(), source })?,
        )),
        None => None,
    };
    let mut records = Vec::new();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(eff) {
            let lr = lr_at(step, total, warmup, peak);
            let mut acc: Option<Vec<Matrix<T>>> = None;
            for &i in chunk {
                let item = &items[i];
                let mut task = config.task_ratio.sample(&mut rng);
                let n_qa = item.annotation.qa_items.len();
                if task != Task::Summarization && n_qa == 0 {
                    task = Task::Summarization;
                }
                let qa_index = if n_qa > 0 { rng.gen_range(0..n_qa) } else { 0 };
                let ex = render_annotation(
                    item.annotation,
                    task,
                    qa_index,
                    item.features.clone(),
                    templates,
                    backbone.vocab(),
                )?;
                let out = match lm_loss(&ex, AlignedModel::new(backbone, &params)) {
                    Err(AlignError::NonFiniteLoss { .. }) => {
                        return Err(diverged(epoch, &header, &params, step));
                    }
                    other => other?,
                };
                epoch_sum += out.loss;
                let rec = ReportRecord { epoch, step: step as u64, task, loss: out.loss, lr };
                if let Some(f) = report_file.as_mut() {
                    let line = serde_json::to_string(&rec).expect("record serializes");
                    writeln!(f, "{line}").map_err(|source| AlignError::Io {
                        path: report.expect("file implies path").to_path_buf(),
                        source,
                    })?;
                }
                records.push(rec);
                match &mut acc {
                    None => acc = Some(out.grads),
                    Some(a) => a.iter_mut().zip(&out.grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = acc.expect("chunks are non-empty");
            let inv = T::lit(1.0 / chunk.len() as f64);
            grads.iter_mut().for_each(|g| g.scale(inv));
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(diverged(epoch, &header, &params, step));
            }
            let last_good = params.clone();
            opt.step(&mut params.params_mut(), &grads, &decay, lr);
            if params.named().iter().any(|(_, m)| !m.all_finite()) {
                return Err(diverged(epoch, &header, &last_good, step));
            }
            step += 1;
        }
        epoch_losses.push(epoch_sum / items.len().max(1) as f64);
    }
    if let Some(mut f) = report_file {
        f.flush().map_err(|source| AlignError::Io { path: report.expect("path").to_path_buf(), source })?;
    }
    header.step += step as u64;
    Ok(TrainOutcome { checkpoint: Checkpoint { header, params }, records, epoch_losses })
}

fn diverged<T: Scalar>(epoch: usize, header: &CheckpointHeader, params: &AlignParams<T>, step: usize) -> AlignError {
    let mut h = header.clone();
    h.step += step as u64;
    let ck = Checkpoint { header: h, params: params.clone() };
    AlignError::DivergenceDetected { epoch, step: step as u64, last_good: ck.to_bytes() }
}

impl AlignError {
    /// The last good checkpoint carried by a divergence error.
    pub fn last_good<T: Scalar>(&self) -> Option<Checkpoint<T>> {
        match self {
            AlignError::DivergenceDetected { last_good, .. } => Checkpoint::from_bytes(last_good).ok(),
            _ => None,
        }
    }
}

/// Identity of a training run; stored in checkpoint headers.
pub fn run_fingerprint<B, T>(config: &TrainerConfig, backbone: &B, encoder_descriptor: &str, stage: &str) -> String
where
    T: Scalar,
    B: Backbone<T> + ?Sized,
{
    fingerprint(&serde_json::json!({
        "stage": stage,
        "trainer": config,
        "backbone": backbone.descriptor(),
        "backbone_digest": backbone.weights_digest(),
        "encoder": encoder_descriptor,
        "dtype": T::DTYPE,
    }))
}

/// Text-only pre-alignment on a corpus shard. Tideos without an annotation
/// are skipped.
pub fn train<T, B, P>(
    corpus: &CorpusShard,
    config: &TrainerConfig,
    backbone: &B,
    pair: &P,
    templates: &PromptTemplateSet,
    report: Option<&Path>,
) -> Result<TrainOutcome<T>, AlignError>
where
    T: Scalar,
    B: Backbone<T> + ?Sized,
    P: EncoderPair<T> + ?Sized,
{
    config.validate()?;
    let mut items = Vec::new();
    for (tideo, ann) in corpus.pairs() {
        let Some(ann) = ann else { continue };
        items.push(TrainItem { features: encode_tideo(tideo, pair, config.target_frames)?, annotation: ann });
    }
    let init = config.init_params(pair.dimension(), backbone.width(), backbone.heads(), backbone.layers());
    let header = CheckpointHeader {
        fingerprint: run_fingerprint(config, backbone, pair.descriptor(), "train"),
        backbone_descriptor: backbone.descriptor(),
        backbone_digest: backbone.weights_digest(),
        encoder_descriptor: pair.descriptor().to_string(),
        feature_dim: pair.dimension(),
        step: 0,
    };
    fit(&items, backbone, FitSetup { config, header, init, templates, report })
}

/// Seeded subset of `n` indices of size `ceil(ratio * n)`, in ascending order.
pub fn data_subset(n: usize, ratio: f64, seed: u64) -> Result<Vec<usize>, AlignError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(AlignError::InvalidConfig(format!("data ratio must be in (0, 1], got {ratio}")));
    }
    let k = ((ratio * n as f64).ceil() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, 0xD5));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Continues training on visual features, which go through the projection
/// layer directly. Optimizer state starts fresh.
#[allow(clippy::too_many_arguments)]
pub fn finetune<T, B>(
    dataset: &[(SequenceRepresentation<T>, TideoAnnotation)],
    checkpoint: &Checkpoint<T>,
    config: &TrainerConfig,
    data_ratio: f64,
    backbone: &B,
    templates: &PromptTemplateSet,
    report: Option<&Path>,
) -> Result<TrainOutcome<T>, AlignError>
where
    T: Scalar,
    B: Backbone<T> + ?Sized,
{
    config.validate()?;
    if checkpoint.header.backbone_digest != backbone.weights_digest() {
        return Err(AlignError::BadCheckpoint("checkpoint was trained against different backbone weights".into()));
    }
    let mut items = Vec::new();
    for i in data_subset(dataset.len(), data_ratio, config.rng_seed)? {
        let (f, ann) = &dataset[i];
        if f.modality != Modality::Image {
            return Err(AlignError::WrongModality { expected: Modality::Image, found: f.modality });
        }
        if f.dim() != checkpoint.params.feature_dim() {
            return Err(AlignError::FeatureDimMismatch { expected: checkpoint.params.feature_dim(), found: f.dim() });
        }
        items.push(TrainItem { features: f.resample(config.target_frames)?, annotation: ann });
    }
    let mut header = checkpoint.header.clone();
    header.fingerprint = fingerprint(&serde_json::json!({
        "stage": "finetune",
        "parent": checkpoint.header.fingerprint,
        "trainer": config,
        "data_ratio": data_ratio,
    }));
    fit(&items, backbone, FitSetup { config, header, init: checkpoint.params.clone(), templates, report })
}

#[cfg(test)]
mod tests;
