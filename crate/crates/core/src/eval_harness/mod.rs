//! Multiple-choice evaluation (selection, logits and blind modes), the
//! benchmark runner used for frame and projection ablations, and zero-shot
//! captioning.

mod cider;
mod dataset;

pub use cider::{CiderD, CorpusScorer};
pub use dataset::{BenchmarkRecord, DatasetAdapter, JsonlBenchmark};

use std::path::PathBuf;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::aligner::{strip_period, AlignError, AlignedModel, PromptTemplateSet, Task, OPTION_LETTERS};
use crate::backbone::Backbone;
use crate::dual_encoder::{CacheError, EncoderError, SequenceRepresentation};
use crate::memory_projection::{ProjectionError, ProjectionOptions, SupportMemory};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Label recorded with logits-mode results: options are scored by the mean
/// log-probability of their tokens.
pub const LOGITS_SCORING: &str = "mean_token_log_prob";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("projection requested but no support memory was given")]
    MissingMemory,
    #[error("item {item}: option {option} has no tokens")]
    EmptyOption { item: String, option: usize },
    #[error("item {item}: need between 2 and {} options, got {count}", OPTION_LETTERS.len())]
    OptionCount { item: String, count: usize },
    #[error("item {item}: no features and blind mode not requested")]
    MissingFeatures { item: String },
    #[error("{path}:{line}: {reason}")]
    BadRecord { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Selection,
    Logits,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Selection => "selection",
            EvalMode::Logits => "logits",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem<T> {
    pub id: String,
    pub features: Option<SequenceRepresentation<T>>,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub mode: EvalMode,
    pub predicted_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub option_scores: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config: Value,
    pub mode: String,
    pub frames: usize,
    pub projection: bool,
    /// `None` when no labelled item was evaluated.
    pub accuracy: Option<f64>,
    pub n: usize,
    pub fallback_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub summary: EvalSummary,
    pub items: Vec<ItemResult>,
}

impl EvalResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }

    pub fn items_jsonl(&self) -> String {
        self.items.iter().map(|i| serde_json::to_string(i).expect("item serializes") + "\n").collect()
    }
}

/// Option letter at the start of a completion. Accepts `(X)`, `X)`, `X.`
/// or a bare `X`, optionally after "The correct choice is".
pub fn parse_option_letter(completion: &str, options: usize) -> Option<usize> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"^(?i:the\s+correct\s+choice\s+is\s*)?(?:\(([A-E])\)|([A-E])(?:\)|\.|$|[^\w]))").expect("valid regex")
    });
    let c = re.captures(completion.trim())?;
    let letter = c.get(1).or_else(|| c.get(2))?.as_str().chars().next()?;
    let idx = OPTION_LETTERS.iter().position(|&l| l == letter)?;
    (idx < options).then_some(idx)
}

/// Highest score, ties to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn check_options<T>(item: &EvalItem<T>) -> Result<(), EvalError> {
    if item.options.len() < 2 || item.options.len() > OPTION_LETTERS.len() {
        return Err(EvalError::OptionCount { item: item.id.clone(), count: item.options.len() });
    }
    Ok(())
}

/// Feature matrix for prompting, or `None` when blind.
fn feature_block<'i, T>(item: &'i EvalItem<T>, blind: bool) -> Result<Option<&'i Matrix<T>>, EvalError> {
    if blind {
        return Ok(None);
    }
    item.features
        .as_ref()
        .map(|f| Some(&f.features))
        .ok_or_else(|| EvalError::MissingFeatures { item: item.id.clone() })
}

/// Scores each option independently by its mean token log-probability
/// after the open-QA prompt.
pub fn eval_logits<T: Scalar, B: Backbone<T> + ?Sized>(
    item: &EvalItem<T>,
    model: AlignedModel<'_, T, B>,
    templates: &PromptTemplateSet,
    blind: bool,
) -> Result<(usize, Vec<f64>), EvalError> {
    check_options(item)?;
    let features = feature_block(item, blind)?;
    let vocab = model.backbone.vocab();
    let p = templates.render(Task::OpenQa, &item.question, &[], "");
    let prefix = vocab.encode(&p.before);
    let context = vocab.encode(&p.after);
    let mut scores = Vec::with_capacity(item.options.len());
    for (i, o) in item.options.iter().enumerate() {
        let toks = vocab.encode(strip_period(o));
        if toks.is_empty() {
            return Err(EvalError::EmptyOption { item: item.id.clone(), option: i });
        }
        let lp = model.continuation_log_probs(&prefix, features, &context, &toks)?;
        scores.push(lp.iter().sum::<f64>() / lp.len() as f64);
    }
    Ok((argmax_first(&scores), scores))
}

pub struct SelectionOutcome {
    pub predicted_index: usize,
    pub completion: String,
    /// Set when the completion had no usable letter and logits decided.
    pub fallback_scores: Option<Vec<f64>>,
}

/// Greedy completion of the multi-choice prompt, parsed for a letter.
pub fn eval_selection<T: Scalar, B: Backbone<T> + ?Sized>(
    item: &EvalItem<T>,
    model: AlignedModel<'_, T, B>,
    templates: &PromptTemplateSet,
    blind: bool,
    max_new_tokens: usize,
) -> Result<SelectionOutcome, EvalError> {
    check_options(item)?;
    let features = feature_block(item, blind)?;
    let vocab = model.backbone.vocab();
    let p = templates.render(Task::MultiChoice, &item.question, &item.options, "");
    let out = model.generate(&vocab.encode(&p.before), features, &vocab.encode(&p.after), max_new_tokens)?;
    let completion = vocab.decode(&out);
    match parse_option_letter(&completion, item.options.len()) {
        Some(i) => Ok(SelectionOutcome { predicted_index: i, completion, fallback_scores: None }),
        None => {
            let (i, scores) = eval_logits(item, model, templates, blind)?;
            Ok(SelectionOutcome { predicted_index: i, completion, fallback_scores: Some(scores) })
        }
    }
}

pub fn eval_item<T: Scalar, B: Backbone<T> + ?Sized>(
    item: &EvalItem<T>,
    model: AlignedModel<'_, T, B>,
    templates: &PromptTemplateSet,
    mode: EvalMode,
    blind: bool,
    max_new_tokens: usize,
) -> Result<ItemResult, EvalError> {
    let base = ItemResult {
        id: item.id.clone(),
        mode,
        predicted_index: 0,
        answer_index: item.answer_index,
        option_scores: None,
        completion: None,
        fell_back: false,
    };
    Ok(match mode {
        EvalMode::Logits => {
            let (i, scores) = eval_logits(item, model, templates, blind)?;
            ItemResult { predicted_index: i, option_scores: Some(scores), ..base }
        }
        EvalMode::Selection => {
            let s = eval_selection(item, model, templates, blind, max_new_tokens)?;
            ItemResult {
                predicted_index: s.predicted_index,
                fell_back: s.fallback_scores.is_some(),
                option_scores: s.fallback_scores,
                completion: Some(s.completion),
                ..base
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub mode: EvalMode,
    pub projection: bool,
    pub frames: usize,
    pub blind: bool,
    pub max_new_tokens: usize,
    /// Worker threads for item evaluation; results do not depend on it.
    pub threads: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { mode: EvalMode::Selection, projection: true, frames: 10, blind: false, max_new_tokens: 12, threads: 1 }
    }
}

/// Prepares one item's features: resample, then project through the memory
/// when requested.
fn prepare<T: Scalar>(
    mut item: EvalItem<T>,
    cfg: &BenchmarkConfig,
    memory: Option<&SupportMemory<T>>,
) -> Result<EvalItem<T>, EvalError> {
    if cfg.blind {
        item.features = None;
        return Ok(item);
    }
    let f = item.features.take().ok_or_else(|| EvalError::MissingFeatures { item: item.id.clone() })?;
    let f = f.resample(cfg.frames)?;
    let f = if cfg.projection {
        let m = memory.ok_or(EvalError::MissingMemory)?;
        m.project_sequence(&f, ProjectionOptions::default())?
    } else {
        f
    };
    item.features = Some(f);
    Ok(item)
}

/// Evaluates a whole dataset. `extra_config` is merged into the recorded
/// config (typically the checkpoint fingerprint and data provenance).
pub fn run_benchmark<T, B, D>(
    dataset: &D,
    model: AlignedModel<'_, T, B>,
    memory: Option<&SupportMemory<T>>,
    cfg: &BenchmarkConfig,
    templates: &PromptTemplateSet,
    extra_config: Value,
) -> Result<EvalResult, EvalError>
where
    T: Scalar + Send + Sync,
    B: Backbone<T> + ?Sized,
    D: DatasetAdapter<T> + ?Sized,
{
    if cfg.projection && !cfg.blind && memory.is_none() {
        return Err(EvalError::MissingMemory);
    }
    let mut items = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        items.push(prepare(dataset.item(i, !cfg.blind)?, cfg, memory)?);
    }
    let threads = cfg.threads.max(1).min(items.len().max(1));
    let results: Vec<ItemResult> = if threads == 1 {
        items
            .iter()
            .map(|it| eval_item(it, model, templates, cfg.mode, cfg.blind, cfg.max_new_tokens))
            .collect::<Result<_, _>>()?
    } else {
        let chunk = items.len().div_ceil(threads);
        let parts: Vec<Result<Vec<ItemResult>, EvalError>> = std::thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|it| eval_item(it, model, templates, cfg.mode, cfg.blind, cfg.max_new_tokens))
                            .collect::<Result<Vec<_>, _>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(items.len());
        for p in parts {
            out.extend(p?);
        }
        out
    };
    let labelled: Vec<&ItemResult> = results.iter().filter(|r| r.answer_index.is_some()).collect();
    let correct = labelled.iter().filter(|r| Some(r.predicted_index) == r.answer_index).count();
    let accuracy = (!labelled.is_empty()).then(|| correct as f64 / labelled.len() as f64);
    let fallbacks = results.iter().filter(|r| r.fell_back).count();
    let mut config = serde_json::json!({
        "mode": cfg.mode,
        "projection": cfg.projection && !cfg.blind,
        "frames": cfg.frames,
        "blind": cfg.blind,
        "max_new_tokens": cfg.max_new_tokens,
        "logits_scoring": LOGITS_SCORING,
    });
    if let (Value::Object(dst), Value::Object(src)) = (&mut config, extra_config) {
        dst.extend(src);
    }
    let mode = if cfg.blind { format!("blind_{}", cfg.mode.as_str()) } else { cfg.mode.as_str().to_string() };
    Ok(EvalResult {
        summary: EvalSummary {
            config,
            mode,
            frames: cfg.frames,
            projection: cfg.projection && !cfg.blind,
            accuracy,
            n: results.len(),
            fallback_rate: if results.is_empty() { 0.0 } else { fallbacks as f64 / results.len() as f64 },
        },
        items: results,
    })
}

/// Captioning input: features plus reference captions.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionItem<T> {
    pub id: String,
    pub features: SequenceRepresentation<T>,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResult {
    pub metric: String,
    pub score: f64,
    pub captions: Vec<String>,
    pub per_item: Vec<f64>,
}

/// Greedy captions from the description prompt, scored corpus-wide.
pub fn eval_captioning<T: Scalar, B: Backbone<T> + ?Sized>(
    items: &[CaptionItem<T>],
    model: AlignedModel<'_, T, B>,
    templates: &PromptTemplateSet,
    scorer: &dyn CorpusScorer,
    max_new_tokens: usize,
) -> Result<CaptionResult, EvalError> {
    let vocab = model.backbone.vocab();
    let p = templates.render(Task::Summarization, "", &[], "");
    let (prefix, context) = (vocab.encode(&p.before), vocab.encode(&p.after));
    let mut captions = Vec::with_capacity(items.len());
    for it in items {
        let out = model.generate(&prefix, Some(&it.features.features), &context, max_new_tokens)?;
        captions.push(vocab.decode(&out));
    }
    let refs: Vec<Vec<String>> = items.iter().map(|i| i.references.clone()).collect();
    let (score, per_item) = scorer.score(&captions, &refs);
    Ok(CaptionResult { metric: scorer.name().to_string(), score, captions, per_item })
}
