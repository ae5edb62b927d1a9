//! Run configuration: a TOML file with one table per stage.
//!
//! Relative paths inside the file resolve against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use topa::aligner::TrainerConfig;
use topa::backbone::{PretrainOptions, TinyConfig};
use topa::eval_harness::EvalMode;
use topa::experiment::{desk_trainer, BackboneRecipe};
use topa::memory_projection::DEFAULT_TEMPERATURE;
use topa::synthetic_world::{Probe, WorldConfig};
use topa::tideo_gen::{GenerationConfig, LlmClientConfig, SourceWeights};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub deterministic: bool,
    pub world: WorldConfig,
    pub generation: GenerationSection,
    pub encoder: EncoderSection,
    pub memory: MemorySection,
    pub backbone: BackboneSection,
    /// `rng_seed` is derived from the global seed; any value here is replaced.
    pub trainer: TrainerConfig,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            deterministic: false,
            world: WorldConfig::default(),
            generation: GenerationSection::default(),
            encoder: EncoderSection::default(),
            memory: MemorySection::default(),
            backbone: BackboneSection::default(),
            trainer: desk_trainer(0),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Tideos sampled from the synthetic world; no LLM involved.
    Synthetic,
    /// Recorded responses replayed by prompt hash.
    Fixture,
    /// An OpenAI-compatible chat completions endpoint.
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub source: Source,
    pub count: usize,
    /// JSON object mapping source tags to seed texts (fixture and live).
    pub seeds: Option<PathBuf>,
    /// Condition weights; the full-scale mix when absent.
    pub weights: Option<SourceWeights>,
    /// Fixture JSON Lines file (fixture mode).
    pub fixture: Option<PathBuf>,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub max_jobs: Option<usize>,
    pub client: LlmClientConfig,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let g = GenerationConfig::default();
        Self {
            source: Source::Synthetic,
            count: 600,
            seeds: None,
            weights: None,
            fixture: None,
            max_retries: g.max_retries,
            max_in_flight: g.max_in_flight,
            temperature: g.temperature,
            max_output_tokens: g.max_output_tokens,
            max_jobs: g.max_jobs,
            client: LlmClientConfig::default(),
        }
    }
}

impl GenerationSection {
    pub fn run_config(&self) -> GenerationConfig {
        GenerationConfig {
            count: self.count,
            max_retries: self.max_retries,
            max_in_flight: self.max_in_flight,
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            max_jobs: self.max_jobs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    /// Videos per probe in each evaluation benchmark.
    pub eval_videos: usize,
    /// Labelled videos for visual finetuning.
    pub finetune_videos: usize,
    pub probes: Vec<Probe>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self { eval_videos: 600, finetune_videos: 200, probes: vec![Probe::Presence, Probe::Start, Probe::End] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    /// Frame and object captions of the generated corpus.
    Corpus,
    /// A text file with one caption per line.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    pub captions: CaptionSource,
    pub size: usize,
    pub temperature: f64,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self { captions: CaptionSource::Corpus, size: 10_000, temperature: DEFAULT_TEMPERATURE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    /// Pretrained backbone file; when absent one is pretrained on the
    /// world's language data and cached under the output directory.
    pub path: Option<PathBuf>,
    pub sequences: usize,
    pub target_frames: usize,
    pub model: TinyConfig,
    pub optimizer: PretrainOptions,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let r = BackboneRecipe::default();
        Self { path: None, sequences: r.sequences, target_frames: r.target_frames, model: r.model, optimizer: r.optimizer }
    }
}

impl BackboneSection {
    pub fn recipe(&self) -> BackboneRecipe {
        BackboneRecipe { model: self.model, sequences: self.sequences, target_frames: self.target_frames, optimizer: self.optimizer }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub data_ratio: f64,
    pub epochs: usize,
    /// Falls back to the trainer's base rate.
    pub base_lr: Option<f64>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self { data_ratio: 1.0, epochs: 1, base_lr: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointStage {
    Train,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: CheckpointStage,
    pub probe: Probe,
    pub mode: EvalMode,
    pub projection: bool,
    pub frames: usize,
    pub blind: bool,
    pub max_new_tokens: usize,
    /// Worker threads; 0 uses every core. Forced to 1 in deterministic mode.
    pub threads: usize,
    /// Checkpoint file to use instead of the train/finetune stage output.
    pub checkpoint_path: Option<PathBuf>,
    /// Memory directory to use instead of the build-memory stage output.
    pub memory_path: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: CheckpointStage::Train,
            probe: Probe::Presence,
            mode: EvalMode::Logits,
            projection: true,
            frames: 10,
            blind: false,
            max_new_tokens: 12,
            threads: 0,
            checkpoint_path: None,
            memory_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub probes: Vec<Probe>,
    pub modes: Vec<EvalMode>,
    /// Frame counts tried with projection on.
    pub frames: Vec<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { probes: vec![Probe::Presence, Probe::End], modes: vec![EvalMode::Logits, EvalMode::Selection], frames: vec![1, 10] }
    }
}

impl RunConfig {
    /// Reads `path`, or returns defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        for p in [&mut self.generation.seeds, &mut self.generation.fixture, &mut self.backbone.path, &mut self.eval.checkpoint_path, &mut self.eval.memory_path]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        if let CaptionSource::File(p) = &mut self.memory.captions {
            fix(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_parse() {
        for text in [include_str!("../../../configs/smoke.toml"), include_str!("../../../configs/synthetic.toml")] {
            let cfg: RunConfig = toml::from_str(text).unwrap();
            cfg.trainer.validate().unwrap();
        }
    }

    #[test]
    fn reference_config_matches_defaults() {
        let mut cfg: RunConfig = toml::from_str(include_str!("../../../configs/synthetic.toml")).unwrap();
        cfg.out = RunConfig::default().out;
        cfg.deterministic = false;
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn caption_source_forms() {
        let m: MemorySection = toml::from_str("captions = { file = \"caps.txt\" }").unwrap();
        assert_eq!(m.captions, CaptionSource::File("caps.txt".into()));
        let m: MemorySection = toml::from_str("captions = \"corpus\"").unwrap();
        assert_eq!(m.captions, CaptionSource::Corpus);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "out = \"o\"\n[generation]\nfixture = \"f.jsonl\"\n").unwrap();
        let cfg = RunConfig::load(Some(&p)).unwrap();
        assert_eq!(cfg.out, dir.path().join("o"));
        assert_eq!(cfg.generation.fixture, Some(dir.path().join("f.jsonl")));
    }
}
