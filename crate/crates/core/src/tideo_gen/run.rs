use std::collections::{BTreeMap, HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::client::{ClientError, LlmClient, LlmRequest};
use super::parse::{dedup_key, parse_generation};
use super::{prompt_sha256, render_prompt, sample_condition, GenError, SeedSources, SourceWeights, TemplateSet};
use crate::seeding::mix_seed;
use crate::tideo_data::{ConditionRecord, CorpusShard, JsonlAppender, ANNOTATIONS_FILE, TIDEOS_FILE};

pub const REJECTED_FILE: &str = "rejected.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Number of accepted tideos to produce.
    pub count: usize,
    /// Extra attempts per prompt after a rejected or failed response.
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// `None` leaves the provider default in place.
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
    /// Upper bound on distinct prompts; defaults to `4 * count + 8`.
    pub max_jobs: Option<usize>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { count: 0, max_retries: 2, max_in_flight: 4, temperature: None, max_output_tokens: None, max_jobs: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationJob {
    pub job_index: u64,
    pub condition: ConditionRecord,
    pub prompt_text: String,
    pub attempt: u32,
    pub request: LlmRequest,
}

impl GenerationJob {
    /// Deterministic job `job_index` of a run seeded with `rng_seed`.
    pub fn plan(
        sources: &SeedSources,
        weights: &SourceWeights,
        templates: &TemplateSet,
        config: &GenerationConfig,
        rng_seed: u64,
        job_index: u64,
    ) -> Result<Self, GenError> {
        let condition = sample_condition(sources, weights, mix_seed(rng_seed, job_index))?;
        let prompt_text = render_prompt(&condition, templates)?;
        let request = LlmRequest {
            prompt: prompt_text.clone(),
            temperature: config.temperature,
            max_output_tokens: config.max_output_tokens,
            sampling_seed: mix_seed(mix_seed(rng_seed, job_index), 0),
        };
        Ok(Self { job_index, condition, prompt_text, attempt: 0, request })
    }

    fn retry(&self) -> Self {
        let mut next = self.clone();
        next.attempt += 1;
        next.request.sampling_seed = mix_seed(mix_seed(next.request.sampling_seed, 0), u64::from(next.attempt));
        next
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub requested: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub retried: usize,
    pub dedup_hits: usize,
    pub client_errors: usize,
    pub jobs: usize,
    pub budget_exhausted: bool,
    pub rejection_reasons: BTreeMap<String, usize>,
}

/// One line of the rejected-response audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRecord {
    pub job_index: u64,
    pub attempt: u32,
    pub prompt_sha256: String,
    pub kind: String,
    pub error: String,
    pub response_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutcome {
    pub shard: CorpusShard,
    pub report: GenerationReport,
}

/// Generates up to `config.count` tideos into `out_dir`, replacing any shard there.
///
/// Results are applied in job order regardless of which request finishes
/// first, so a replayed run writes byte-identical files.
pub fn run_generation(
    sources: &SeedSources,
    weights: &SourceWeights,
    templates: &TemplateSet,
    config: &GenerationConfig,
    client: &dyn LlmClient,
    rng_seed: u64,
    out_dir: &Path,
) -> Result<GenerationOutcome, GenError> {
    std::fs::create_dir_all(out_dir).map_err(|source| crate::tideo_data::CorpusError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    for f in [TIDEOS_FILE, ANNOTATIONS_FILE, REJECTED_FILE] {
        let _ = std::fs::remove_file(out_dir.join(f));
    }
    let mut tideo_out = JsonlAppender::open(&out_dir.join(TIDEOS_FILE))?;
    let mut ann_out = JsonlAppender::open(&out_dir.join(ANNOTATIONS_FILE))?;
    let mut rejected_out = JsonlAppender::open(&out_dir.join(REJECTED_FILE))?;

    let in_flight = if client.concurrent_safe() { config.max_in_flight.max(1) } else { 1 };
    let max_jobs = config.max_jobs.unwrap_or(4 * config.count + 8);
    let mut report = GenerationReport { requested: config.count, ..Default::default() };
    let mut shard = CorpusShard::default();
    let mut seen = HashSet::new();
    let mut retries: VecDeque<GenerationJob> = VecDeque::new();
    let mut next_job = 0u64;

    while shard.tideos.len() < config.count {
        let want = in_flight.min(config.count - shard.tideos.len());
        let mut wave = Vec::with_capacity(want);
        while wave.len() < want {
            if let Some(job) = retries.pop_front() {
                wave.push(job);
            } else if (next_job as usize) < max_jobs {
                wave.push(GenerationJob::plan(sources, weights, templates, config, rng_seed, next_job)?);
                next_job += 1;
                report.jobs += 1;
            } else {
                break;
            }
        }
        if wave.is_empty() {
            report.budget_exhausted = true;
            break;
        }
        let results: Vec<Result<String, ClientError>> = if wave.len() == 1 {
            vec![client.complete(&wave[0].request)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = wave.iter().map(|job| s.spawn(|| client.complete(&job.request))).collect();
                handles.into_iter().map(|h| h.join().expect("request thread panicked")).collect()
            })
        };

        let mut exhausted = None;
        for (job, result) in wave.iter().zip(results) {
            let can_retry = job.attempt < config.max_retries;
            match result {
                Ok(text) => match parse_generation(&text, &job.condition) {
                    Ok((tideo, annotation)) => {
                        if shard.tideos.len() >= config.count {
                            continue;
                        }
                        if !seen.insert(dedup_key(&tideo)) {
                            report.dedup_hits += 1;
                            continue;
                        }
                        tideo_out.append(&tideo)?;
                        ann_out.append(&annotation)?;
                        shard.tideos.push(tideo);
                        shard.annotations.push(annotation);
                    }
                    Err(e) => {
                        report.rejected += 1;
                        *report.rejection_reasons.entry(e.kind().to_string()).or_default() += 1;
                        log::debug!("job {} attempt {} rejected: {e}", job.job_index, job.attempt);
                        rejected_out.append(&RejectedRecord {
                            job_index: job.job_index,
                            attempt: job.attempt,
                            prompt_sha256: prompt_sha256(&job.prompt_text),
                            kind: e.kind().to_string(),
                            error: e.to_string(),
                            response_text: text,
                        })?;
                        if can_retry {
                            report.retried += 1;
                            retries.push_back(job.retry());
                        }
                    }
                },
                Err(ClientError::Exhausted(reason)) => {
                    exhausted.get_or_insert(reason);
                }
                Err(ClientError::Transient(msg)) => {
                    report.client_errors += 1;
                    log::warn!("job {} attempt {} failed: {msg}", job.job_index, job.attempt);
                    if can_retry {
                        report.retried += 1;
                        retries.push_back(job.retry());
                    }
                }
                Err(other) => return Err(GenError::Client(other)),
            }
        }
        if let Some(reason) = exhausted {
            report.accepted = shard.tideos.len();
            return Err(GenError::ClientExhausted {
                reason,
                accepted: report.accepted,
                outcome: Box::new(GenerationOutcome { shard, report }),
            });
        }
    }
    report.accepted = shard.tideos.len();
    Ok(GenerationOutcome { shard, report })
}
