//! Seeded synthetic world for desk-scale experiments.
//!
//! Every tideo is a run of scenes; each scene shows one object over two or
//! more consecutive frames. Questions ask which object appears at all, at
//! the start, or at the end, so every answer is fixed by the frame
//! concepts. The matching "real" videos are sequences of noisy synthetic
//! image frames over the same concepts.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aligner::{PromptTemplateSet, Task, OPTION_LETTERS};
use crate::aligner::{multi_choice_target, sentence_target};
use crate::dual_encoder::{uniform_indices, EncoderError, SyntheticEncoderSpec, SyntheticFrame, SyntheticPair};
use crate::seeding::rng_for;
use crate::tideo_data::{
    ConditionRecord, CorpusShard, QAItem, SourceTag, TextualFrame, Tideo, TideoAnnotation,
};
use crate::tokenizer::Vocab;

pub const OBJECT_WORDS: [&str; 64] = [
    "kettle", "cup", "pan", "knife", "spoon", "bowl", "plate", "fork", "bottle", "towel", "broom", "ladder", "hammer",
    "drill", "saw", "brush", "bucket", "sponge", "laptop", "phone", "book", "pen", "scissors", "glue", "rope", "tent",
    "bicycle", "helmet", "guitar", "piano", "lamp", "pillow", "blanket", "chair", "mirror", "basket", "shovel", "rake",
    "hose", "ball", "racket", "kite", "drum", "violin", "candle", "clock", "wallet", "umbrella", "jacket", "boots",
    "kayak", "paddle", "tripod", "wrench", "pliers", "stapler", "kettlebell", "dumbbell", "skateboard", "suitcase",
    "teapot", "blender", "toaster", "whisk",
];

pub const PRESENCE_QUESTION: &str = "Which object appears in the video?";
pub const START_QUESTION: &str = "Which object appears at the start of the video?";
pub const END_QUESTION: &str = "Which object appears at the end of the video?";

const CAPTIONS: [&str; 5] = [
    "the person picks up the {}",
    "a close view of the {}",
    "the {} rests on the counter",
    "someone reaches for the {}",
    "hands move the {} slowly",
];

/// What a question asks about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    Presence,
    Start,
    End,
}

impl Probe {
    pub fn question(self) -> &'static str {
        match self {
            Probe::Presence => PRESENCE_QUESTION,
            Probe::Start => START_QUESTION,
            Probe::End => END_QUESTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub concepts: usize,
    pub dimension: usize,
    /// Norm of the image-side offset; text/image cosine is `1/sqrt(1+g^2)`.
    pub gap_norm: f64,
    pub noise_scale: f64,
    pub options: usize,
    pub min_scenes: usize,
    pub max_scenes: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { concepts: 50, dimension: 64, gap_norm: 3.0, noise_scale: 0.5, options: 4, min_scenes: 2, max_scenes: 3, seed: 0 }
    }
}

/// Scene layout of one video: concepts in order and per-frame concept indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Storyboard {
    pub scenes: Vec<usize>,
    pub frames: Vec<usize>,
}

impl Storyboard {
    pub fn answer_concept(&self, probe: Probe, rng: &mut impl Rng) -> usize {
        match probe {
            Probe::Presence => *self.scenes.choose(rng).expect("at least one scene"),
            Probe::Start => self.scenes[0],
            Probe::End => *self.scenes.last().expect("at least one scene"),
        }
    }
}

/// A synthetic "real" video with one multiple-choice question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub id: String,
    pub probe: Probe,
    pub storyboard: Storyboard,
    pub frames: Vec<SyntheticFrame>,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
}

pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub pair: SyntheticPair,
}

impl SyntheticWorld {
    pub fn new(config: WorldConfig) -> Result<Self, EncoderError> {
        assert!(config.concepts <= OBJECT_WORDS.len(), "at most {} concepts", OBJECT_WORDS.len());
        assert!(config.options >= 2 && config.options <= OPTION_LETTERS.len());
        assert!(config.min_scenes >= 1 && config.min_scenes <= config.max_scenes && config.max_scenes <= 7);
        let vocab: Vec<String> = OBJECT_WORDS[..config.concepts].iter().map(|s| s.to_string()).collect();
        let spec = SyntheticEncoderSpec::with_orthogonal_gap(
            vocab,
            config.dimension,
            config.gap_norm,
            config.noise_scale,
            config.seed,
        );
        Ok(Self { pair: SyntheticPair::new(spec)?, config })
    }

    pub fn concept(&self, i: usize) -> &str {
        OBJECT_WORDS[i]
    }

    /// Random scenes of at least two frames each, 5 to 15 frames in total.
    pub fn storyboard(&self, rng: &mut impl Rng) -> Storyboard {
        let k = rng.gen_range(self.config.min_scenes..=self.config.max_scenes);
        let mut pool: Vec<usize> = (0..self.config.concepts).collect();
        pool.shuffle(rng);
        let scenes: Vec<usize> = pool[..k].to_vec();
        let n = rng.gen_range((2 * k).max(5)..=15);
        let mut lens = vec![2; k];
        for _ in 0..n - 2 * k {
            lens[rng.gen_range(0..k)] += 1;
        }
        let frames = scenes.iter().zip(&lens).flat_map(|(&c, &l)| std::iter::repeat(c).take(l)).collect();
        Storyboard { scenes, frames }
    }

    /// Options with the answer at `answer_index`. For start/end probes the
    /// other end of the video is always among the distractors.
    pub fn options(&self, sb: &Storyboard, probe: Probe, answer: usize, answer_index: usize, rng: &mut impl Rng) -> Vec<String> {
        let mut distractors = Vec::new();
        if probe != Probe::Presence && sb.scenes.len() > 1 {
            distractors.push(if probe == Probe::End { sb.scenes[0] } else { *sb.scenes.last().expect("scenes") });
        }
        let mut absent: Vec<usize> = (0..self.config.concepts).filter(|c| !sb.scenes.contains(c)).collect();
        absent.shuffle(rng);
        for c in absent {
            if distractors.len() + 1 >= self.config.options {
                break;
            }
            distractors.push(c);
        }
        distractors.shuffle(rng);
        let mut opts: Vec<String> = distractors.into_iter().map(|c| self.concept(c).to_string()).collect();
        opts.insert(answer_index, self.concept(answer).to_string());
        opts
    }

    fn qa(&self, sb: &Storyboard, probe: Probe, answer_index: usize, rng: &mut impl Rng) -> QAItem {
        let answer = sb.answer_concept(probe, rng);
        QAItem::new(probe.question(), self.options(sb, probe, answer, answer_index, rng), answer_index)
    }

    pub fn description(&self, sb: &Storyboard) -> String {
        let names: Vec<String> = sb.scenes.iter().map(|&c| format!("the {}", self.concept(c))).collect();
        format!("The person uses {}.", names.join(", then "))
    }

    fn textual_frames(&self, sb: &Storyboard, rng: &mut impl Rng) -> Vec<TextualFrame> {
        sb.frames
            .iter()
            .map(|&c| {
                let caption = CAPTIONS[rng.gen_range(0..CAPTIONS.len())].replace("{}", self.concept(c));
                TextualFrame::new(caption, vec![format!("a {}", self.concept(c))])
            })
            .collect()
    }

    /// Annotated textual corpus with one question per probe for every tideo.
    pub fn corpus(&self, n: usize, seed: u64) -> CorpusShard {
        let mut rng = rng_for(seed, 0xC0);
        let mut shard = CorpusShard::default();
        for i in 0..n {
            let sb = self.storyboard(&mut rng);
            let frames = self.textual_frames(&sb, &mut rng);
            let id = format!("syn-{i:05}");
            let scenario = sb.scenes.iter().map(|&c| self.concept(c)).collect::<Vec<_>>().join(" ");
            let tideo = Tideo {
                id: id.clone(),
                source_tag: SourceTag::SyntheticFixture,
                condition: ConditionRecord::new(SourceTag::SyntheticFixture, scenario),
                frames,
                extra: Default::default(),
            };
            let qa_items = [Probe::Presence, Probe::Start, Probe::End]
                .into_iter()
                .map(|p| {
                    let idx = rng.gen_range(0..self.config.options);
                    self.qa(&sb, p, idx, &mut rng)
                })
                .collect();
            let ann = TideoAnnotation {
                tideo_id: id,
                dense_description: self.description(&sb),
                qa_items,
                extra: Default::default(),
            };
            shard.tideos.push(tideo);
            shard.annotations.push(ann);
        }
        shard
    }

    /// Videos for one probe. Answer positions cycle through the letters so
    /// every letter is correct equally often.
    pub fn videos(&self, n: usize, probe: Probe, seed: u64) -> Vec<SyntheticVideo> {
        let mut rng = rng_for(seed, 0x71);
        (0..n)
            .map(|i| {
                let sb = self.storyboard(&mut rng);
                let answer_index = i % self.config.options;
                let answer = sb.answer_concept(probe, &mut rng);
                let options = self.options(&sb, probe, answer, answer_index, &mut rng);
                let frames = sb.frames.iter().map(|&c| self.pair.frame(c, rng.gen())).collect();
                SyntheticVideo {
                    id: format!("vid-{i:05}"),
                    probe,
                    storyboard: sb,
                    frames,
                    question: probe.question().to_string(),
                    options,
                    answer_index,
                }
            })
            .collect()
    }

    /// Language-only pretraining text for the bundled backbone as
    /// `(prompt, response)` pairs: the task prompts with the video written
    /// out as one object word per frame.
    pub fn pretraining_texts(&self, n: usize, target_frames: usize, seed: u64) -> Vec<(String, String)> {
        let templates = PromptTemplateSet::standard();
        let mut rng = rng_for(seed, 0x9A);
        (0..n)
            .map(|_| {
                let sb = self.storyboard(&mut rng);
                let idx = uniform_indices(sb.frames.len(), target_frames).expect("non-empty storyboard");
                let slot = idx.iter().map(|&i| self.concept(sb.frames[i])).collect::<Vec<_>>().join(" ");
                let task = [Task::Summarization, Task::OpenQa, Task::MultiChoice, Task::MultiChoice, Task::MultiChoice, Task::MultiChoice][rng.gen_range(0..6)];
                let probe = [Probe::Presence, Probe::Start, Probe::End][rng.gen_range(0..3)];
                let answer_index = rng.gen_range(0..self.config.options);
                let qa = self.qa(&sb, probe, answer_index, &mut rng);
                let rendered = match task {
                    Task::Summarization => templates.render(task, "", &[], &sentence_target(&self.description(&sb))),
                    Task::OpenQa => templates.render(task, &qa.question, &[], &sentence_target(qa.answer())),
                    Task::MultiChoice => {
                        templates.render(task, &qa.question, &qa.options, &multi_choice_target(qa.answer_index))
                    }
                };
                (format!("{}{slot}{}", rendered.before, rendered.after), rendered.target)
            })
            .collect()
    }

    /// Every word the world can produce.
    pub fn vocab(&self) -> Vocab {
        let t = PromptTemplateSet::standard();
        let mut texts: Vec<String> = vec![t.summarization, t.open_qa, t.multi_choice];
        texts.extend(OPTION_LETTERS.iter().map(|l| format!("({l})")));
        texts.extend(CAPTIONS.iter().map(|c| c.replace("{}", "")));
        texts.push(multi_choice_target(0));
        texts.push("The person uses the , then".into());
        texts.extend([PRESENCE_QUESTION, START_QUESTION, END_QUESTION].map(String::from));
        texts.extend(OBJECT_WORDS[..self.config.concepts].iter().map(|s| s.to_string()));
        Vocab::build(texts.iter().map(String::as_str))
    }
}
