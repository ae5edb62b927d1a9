//! Desk-scale end-to-end run over a [`SyntheticWorld`]: backbone
//! pretraining, text-only alignment, support memory and benchmark items.

use serde::{Deserialize, Serialize};

use crate::aligner::{TaskRatio, TrainerConfig};
use crate::backbone::{BackboneError, PretrainOptions, TinyConfig, TinyTransformer};
use crate::dual_encoder::{encode_video_frames, EncoderError, SequenceRepresentation};
use crate::eval_harness::EvalItem;
use crate::memory_projection::DEFAULT_TEMPERATURE;
use crate::scalar::Scalar;
use crate::seeding::mix_seed;
use crate::synthetic_world::{SyntheticVideo, SyntheticWorld};
use crate::tideo_data::{CorpusShard, QAItem, TideoAnnotation};
use crate::tokenizer::{Vocab, BOS_ID, EOS_ID};

/// How the bundled backbone is built before alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneRecipe {
    pub model: TinyConfig,
    pub sequences: usize,
    pub target_frames: usize,
    pub optimizer: PretrainOptions,
}

impl Default for BackboneRecipe {
    fn default() -> Self {
        Self {
            model: TinyConfig { width: 64, heads: 4, layers: 2, ffn: 128, max_positions: 96, seed: 1 },
            sequences: 20_000,
            target_frames: 10,
            optimizer: PretrainOptions { epochs: 2, batch: 16, lr: 3e-3, warmup_steps: 30, weight_decay: 0.01, seed: 3 },
        }
    }
}

/// Tokenized `(sequence, loss_from)` pairs; loss covers the response only.
pub fn pretraining_sequences(world: &SyntheticWorld, vocab: &Vocab, n: usize, target_frames: usize, seed: u64) -> Vec<(Vec<usize>, usize)> {
    world
        .pretraining_texts(n, target_frames, seed)
        .iter()
        .map(|(prompt, response)| {
            let mut toks = vec![BOS_ID];
            toks.extend(vocab.encode(prompt));
            let from = toks.len();
            toks.extend(vocab.encode(response));
            toks.push(EOS_ID);
            (toks, from)
        })
        .collect()
}

/// Builds and pretrains a backbone on the world's language data. `seed`
/// picks the text sample. Returns the model and per-epoch losses.
pub fn pretrain_backbone<T: Scalar>(
    world: &SyntheticWorld,
    recipe: &BackboneRecipe,
    seed: u64,
) -> Result<(TinyTransformer<T>, Vec<f64>), BackboneError> {
    let vocab = world.vocab();
    let seqs = pretraining_sequences(world, &vocab, recipe.sequences, recipe.target_frames, seed);
    let mut model = TinyTransformer::init(recipe.model, vocab);
    let losses = model.pretrain(&seqs, &recipe.optimizer)?;
    Ok((model, losses))
}

/// Every frame caption and object caption of a shard, in order.
pub fn caption_stream(shard: &CorpusShard) -> Vec<String> {
    shard
        .tideos
        .iter()
        .flat_map(|t| t.frames.iter().flat_map(|f| std::iter::once(f.caption.clone()).chain(f.object_captions.iter().cloned())))
        .collect()
}

/// Image features of every frame of `video`.
pub fn video_features<T: Scalar>(world: &SyntheticWorld, video: &SyntheticVideo) -> Result<SequenceRepresentation<T>, EncoderError> {
    encode_video_frames(&video.frames, &world.pair, video.frames.len())
}

pub fn eval_items<T: Scalar>(world: &SyntheticWorld, videos: &[SyntheticVideo]) -> Result<Vec<EvalItem<T>>, EncoderError> {
    videos
        .iter()
        .map(|v| {
            Ok(EvalItem {
                id: v.id.clone(),
                features: Some(video_features(world, v)?),
                question: v.question.clone(),
                options: v.options.clone(),
                answer_index: Some(v.answer_index),
            })
        })
        .collect()
}

/// Annotation for a video: its description plus its single question.
pub fn video_annotation(world: &SyntheticWorld, video: &SyntheticVideo) -> TideoAnnotation {
    TideoAnnotation {
        tideo_id: video.id.clone(),
        dense_description: world.description(&video.storyboard),
        qa_items: vec![QAItem::new(video.question.clone(), video.options.clone(), video.answer_index)],
        extra: Default::default(),
    }
}

/// Supervised visual training pairs for finetuning.
pub fn finetune_set<T: Scalar>(
    world: &SyntheticWorld,
    videos: &[SyntheticVideo],
) -> Result<Vec<(SequenceRepresentation<T>, TideoAnnotation)>, EncoderError> {
    videos.iter().map(|v| Ok((video_features(world, v)?, video_annotation(world, v)))).collect()
}

/// Alignment settings sized for the synthetic world.
pub fn desk_trainer(seed: u64) -> TrainerConfig {
    TrainerConfig {
        target_frames: 10,
        task_ratio: TaskRatio::default(),
        base_lr: 0.1,
        batch_size: 8,
        accum_steps: 1,
        epochs: 10,
        adapter_len: 10,
        rng_seed: seed,
        ..Default::default()
    }
}

/// Everything needed for one synthetic run; all randomness comes from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticRecipe {
    pub seed: u64,
    pub corpus_size: usize,
    pub backbone: BackboneRecipe,
    pub trainer: TrainerConfig,
    pub memory_size: usize,
    pub temperature: f64,
}

impl Default for SyntheticRecipe {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus_size: 600,
            backbone: BackboneRecipe::default(),
            trainer: desk_trainer(0),
            memory_size: 10_000,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

/// Derived seeds for the independent parts of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub world: u64,
    pub corpus: u64,
    pub pretrain_text: u64,
    pub trainer: u64,
    pub memory: u64,
    pub eval: u64,
    pub finetune: u64,
}

impl RunSeeds {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            world: mix_seed(seed, 1),
            corpus: mix_seed(seed, 2),
            pretrain_text: mix_seed(seed, 3),
            trainer: mix_seed(seed, 4),
            memory: mix_seed(seed, 5),
            eval: mix_seed(seed, 6),
            finetune: mix_seed(seed, 7),
        }
    }
}
