//! LLM-driven tideo generation: condition sampling, prompt rendering,
//! response parsing and the generation loop.

mod client;
mod parse;
mod run;

pub use client::{
    ClientError, FixtureRecord, FixtureReplayClient, HttpClient, LlmClient, LlmClientConfig, LlmRequest, TokenBucket,
};
pub use parse::{dedup_key, parse_generation, ParseError, RESPONSE_FORMAT};
pub use run::{run_generation, REJECTED_FILE, GenerationConfig, GenerationJob, GenerationOutcome, GenerationReport, RejectedRecord};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tideo_data::{ConditionRecord, SourceTag};

pub type SeedSources = BTreeMap<SourceTag, Vec<String>>;
pub type SourceWeights = BTreeMap<SourceTag, f64>;

pub const SEED_PLACEHOLDER: &str = "{seed}";

#[derive(Debug, Error)]
pub enum GenError {
    #[error("source `{0}` has positive weight but no seeds")]
    EmptySource(SourceTag),
    #[error("condition weights must be non-negative and sum to 1 (got {sum})")]
    InvalidWeights { sum: f64 },
    #[error("no prompt template for source `{0}`")]
    MissingTemplate(SourceTag),
    #[error("template for `{tag}` must contain `{SEED_PLACEHOLDER}` exactly once (found {found})")]
    UnfilledPlaceholder { tag: SourceTag, found: usize },
    #[error("LLM client exhausted after {accepted} accepted tideos: {reason}")]
    ClientExhausted { reason: String, accepted: usize, outcome: Box<GenerationOutcome> },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Corpus(#[from] crate::tideo_data::CorpusError),
}

/// Full-scale condition mix (titles, captions, egocentric scenarios, objects).
pub fn default_weights() -> SourceWeights {
    let raw = [
        (SourceTag::VideoTitle, 213.0),
        (SourceTag::VideoCaption, 183.0),
        (SourceTag::EgoScenario, 205.0),
        (SourceTag::ObjectLexicon, 120.0),
    ];
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    raw.into_iter().map(|(t, w)| (t, w / total)).collect()
}

fn check_weights(sources: &SeedSources, weights: &SourceWeights) -> Result<(), GenError> {
    let sum: f64 = weights.values().sum();
    if weights.values().any(|w| !w.is_finite() || *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(GenError::InvalidWeights { sum });
    }
    for (tag, w) in weights {
        if *w > 0.0 && sources.get(tag).map_or(true, Vec::is_empty) {
            return Err(GenError::EmptySource(*tag));
        }
    }
    Ok(())
}

/// Draws a source by weight, then a seed uniformly within it.
pub fn sample_condition(
    sources: &SeedSources,
    weights: &SourceWeights,
    rng_seed: u64,
) -> Result<ConditionRecord, GenError> {
    check_weights(sources, weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let u: f64 = rng.gen();
    let positive: Vec<(SourceTag, f64)> = weights.iter().filter(|(_, w)| **w > 0.0).map(|(t, w)| (*t, *w)).collect();
    let mut acc = 0.0;
    let mut chosen = positive.last().expect("weights sum to one").0;
    for (tag, w) in &positive {
        acc += w;
        if u < acc {
            chosen = *tag;
            break;
        }
    }
    let seeds = &sources[&chosen];
    let seed_text = seeds[rng.gen_range(0..seeds.len())].clone();
    Ok(ConditionRecord::new(chosen, seed_text))
}

/// Task prompt plus one condition template per source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    /// Prepended to the condition prompt, separated by a blank line. May be empty.
    pub task: String,
    pub conditions: BTreeMap<SourceTag, String>,
}

impl TemplateSet {
    pub fn standard() -> Self {
        let conditions = [
            (SourceTag::VideoTitle, "The video is titled \"{seed}\". Imagine the keyframes of this video."),
            (SourceTag::VideoCaption, "The video can be summarized as: \"{seed}\". Imagine the keyframes of this video."),
            (
                SourceTag::EgoScenario,
                "Mimic an ego-centric video recorded by a head-mounted camera while the wearer is doing the following: \"{seed}\". Describe every frame from the wearer's point of view.",
            ),
            (SourceTag::ObjectLexicon, "The main object of the video is: {seed}. Imagine a video in which this object plays a central role."),
            (SourceTag::SyntheticFixture, "Scenario: {seed}"),
        ]
        .into_iter()
        .map(|(t, s)| (t, s.to_string()))
        .collect();
        Self { task: standard_task_prompt(), conditions }
    }
}

fn standard_task_prompt() -> String {
    format!(
        "You are writing a textual video. Describe between 5 and 15 sequential keyframes of a plausible video. \
For each frame give one caption describing the scene and short captions for the main objects in it. \
Then write one dense description summarizing the whole video, and at least three multiple-choice questions \
about its content with 5 options each and exactly one correct answer. Use exactly this format:\n\n{RESPONSE_FORMAT}"
    )
}

pub fn render_prompt(condition: &ConditionRecord, templates: &TemplateSet) -> Result<String, GenError> {
    let tag = condition.source_tag;
    let template = templates.conditions.get(&tag).ok_or(GenError::MissingTemplate(tag))?;
    let found = template.matches(SEED_PLACEHOLDER).count();
    if found != 1 {
        return Err(GenError::UnfilledPlaceholder { tag, found });
    }
    let (head, tail) = template.split_once(SEED_PLACEHOLDER).expect("placeholder present");
    let body = format!("{head}{}{tail}", condition.seed_text);
    if templates.task.is_empty() {
        Ok(body)
    } else {
        Ok(format!("{}\n\n{body}", templates.task))
    }
}

pub fn prompt_sha256(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}
