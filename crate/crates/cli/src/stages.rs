use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use topa::aligner::{finetune, train, AlignError, CheckpointHeader, PromptTemplateSet};
use topa::backbone::Backbone;
use topa::dual_encoder::{encode_textual_frame, EncoderPair, FeatureCache, FeatureCacheReader, Modality, SequenceRepresentation};
use topa::eval_harness::{run_benchmark, BenchmarkConfig, BenchmarkRecord, EvalResult, JsonlBenchmark};
use topa::experiment::{caption_stream, pretrain_backbone, video_annotation, video_features, RunSeeds};
use topa::fingerprint::{digest_bytes, fingerprint};
use topa::memory_projection::build_memory;
use topa::seeding::mix_seed;
use topa::synthetic_world::{Probe, SyntheticWorld};
use topa::tideo_data::{corpus_stats, CorpusShard, TideoAnnotation};
use topa::tideo_gen::{
    default_weights, run_generation, FixtureReplayClient, GenError, GenerationReport, HttpClient, LlmClient, SeedSources,
    TemplateSet,
};
use topa::{Checkpoint32, SupportMemory32, TinyTransformer32};

use crate::config::{CaptionSource, CheckpointStage, RunConfig, Source};
use crate::error::{failed, CliError};
use crate::report::print_summary;
use crate::rundir::{finish, locate, prepare, read_json, write_json, Prepared, StageKey, SUMMARY_FILE};

const SHARD_DIR: &str = "shard";
const BACKBONE_FILE: &str = "backbone.bin";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const MEMORY_DIR: &str = "memory";
const FINETUNE_DIR: &str = "finetune";
const FINETUNE_FILE: &str = "finetune.jsonl";
const BENCH_FILE: &str = "bench.jsonl";

/// One labelled video of the finetuning set.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct FinetuneRecord {
    id: String,
    feature_file: String,
    annotation: TideoAnnotation,
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub resume: bool,
    seeds: RunSeeds,
    run_fp: String,
}

fn digest_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(digest_bytes(&bytes))
}

fn encoder_descriptor(world: &SyntheticWorld) -> String {
    <_ as EncoderPair<f32>>::descriptor(&world.pair).to_string()
}

fn probe_name(p: Probe) -> String {
    serde_json::to_value(p).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

fn bench_dir(encode_dir: &Path, p: Probe) -> PathBuf {
    encode_dir.join(format!("bench-{}", probe_name(p)))
}

fn write_features(path: &Path, descriptor: &str, fp: &str, seq: &SequenceRepresentation<f32>) -> Result<(), CliError> {
    let mut cache = FeatureCache::new(descriptor, seq.dim());
    for r in 0..seq.len() {
        cache.push(seq.features.row(r)).map_err(failed)?;
    }
    cache.header.fingerprint = Some(fp.to_string());
    cache.write(path).map_err(failed)
}

/// Refuses to combine a checkpoint with a backbone or features it was not trained for.
fn check_checkpoint(header: &CheckpointHeader, backbone: &TinyTransformer32, descriptor: &str, what: &str) -> Result<(), CliError> {
    let digest = backbone.weights_digest();
    if header.backbone_digest != digest {
        return Err(CliError::FingerprintMismatch(format!(
            "checkpoint expects backbone weights {}, found {digest}",
            header.backbone_digest
        )));
    }
    if header.encoder_descriptor != descriptor {
        return Err(CliError::FingerprintMismatch(format!(
            "{what} comes from encoder `{descriptor}`, checkpoint expects `{}`",
            header.encoder_descriptor
        )));
    }
    Ok(())
}

fn done(stage: &str, dir: &Path) -> Result<(), CliError> {
    log::info!("{stage}: already complete in {}", dir.display());
    let summary: Value = read_json(&dir.join(SUMMARY_FILE))?;
    print_summary(stage, dir, &summary);
    Ok(())
}

/// Eval inputs shared by `eval` and `ablate`.
struct EvalInputs {
    backbone: TinyTransformer32,
    checkpoint: Checkpoint32,
    checkpoint_id: String,
    memory: Option<(SupportMemory32, String)>,
    encode_dir: PathBuf,
    encode_fp: String,
}

impl Ctx {
    pub fn new(mut cfg: RunConfig, resume: bool) -> Self {
        let seeds = RunSeeds::from_seed(cfg.seed);
        cfg.trainer.rng_seed = seeds.trainer;
        if cfg.deterministic {
            cfg.trainer.deterministic = true;
        }
        let mut identity = cfg.clone();
        identity.out = PathBuf::new();
        let run_fp = fingerprint(&identity);
        Self { cfg, resume, seeds, run_fp }
    }

    fn out(&self) -> &Path {
        &self.cfg.out
    }

    fn world(&self) -> Result<SyntheticWorld, CliError> {
        SyntheticWorld::new(self.cfg.world.clone()).map_err(|e| CliError::Usage(format!("world config: {e}")))
    }

    fn finish(&self, dir: &Path, key: &StageKey, summary: &Value, partial: bool) -> Result<(), CliError> {
        write_json(&dir.join(SUMMARY_FILE), summary)?;
        finish(dir, key, &self.run_fp, partial)?;
        print_summary(key.stage, dir, summary);
        Ok(())
    }

    fn generate_key(&self) -> Result<StageKey, CliError> {
        let g = &self.cfg.generation;
        let mut section = serde_json::to_value(g).map_err(failed)?;
        section["seeds"] = json!(g.seeds.as_deref().map(digest_file).transpose()?);
        section["fixture"] = json!(g.fixture.as_deref().map(digest_file).transpose()?);
        if g.source != Source::Live {
            section["client"] = Value::Null;
        }
        let world = if g.source == Source::Synthetic { json!(self.cfg.world) } else { Value::Null };
        Ok(StageKey::new("generate", json!({ "generation": section, "world": world, "seed": self.seeds.corpus }), &[]))
    }

    fn corpus(&self) -> Result<(CorpusShard, String), CliError> {
        let key = self.generate_key()?;
        let (dir, _) = locate(self.out(), "generate", &key.fingerprint, "generate")?;
        let shard = CorpusShard::load(&dir.join(SHARD_DIR)).map_err(failed)?;
        Ok((shard, key.fingerprint))
    }

    pub fn generate(&self) -> Result<(), CliError> {
        let g = &self.cfg.generation;
        // Build the client first so bad credentials fail before any work.
        let client: Option<Box<dyn LlmClient>> = match g.source {
            Source::Synthetic => None,
            Source::Fixture => {
                let path = g.fixture.as_deref().ok_or_else(|| CliError::Usage("fixture source needs `generation.fixture`".into()))?;
                Some(Box::new(FixtureReplayClient::load(path).map_err(|e| CliError::Usage(e.to_string()))?))
            }
            Source::Live => Some(Box::new(HttpClient::from_config(g.client.clone()).map_err(|e| CliError::Usage(e.to_string()))?)),
        };
        let sources: Option<SeedSources> = match (&client, g.seeds.as_deref()) {
            (None, _) => None,
            (Some(_), None) => return Err(CliError::Usage("fixture and live sources need `generation.seeds`".into())),
            (Some(_), Some(path)) => Some(read_json(path).map_err(|e| CliError::Usage(e.to_string()))?),
        };
        let key = self.generate_key()?;
        let dir = match prepare(self.out(), &key, self.resume)? {
            Prepared::Done(dir) => return done("generate", &dir),
            Prepared::Fresh(dir) => dir,
        };
        let shard_dir = dir.join(SHARD_DIR);
        let (report, partial) = match (client, sources) {
            (None, _) | (_, None) => {
                let world = self.world()?;
                world.corpus(g.count, self.seeds.corpus).write(&shard_dir).map_err(failed)?;
                (GenerationReport { requested: g.count, accepted: g.count, ..Default::default() }, None)
            }
            (Some(client), Some(sources)) => {
                let weights = g.weights.clone().unwrap_or_else(default_weights);
                let templates = TemplateSet::standard();
                match run_generation(&sources, &weights, &templates, &g.run_config(), client.as_ref(), self.seeds.corpus, &shard_dir) {
                    Ok(o) => (o.report, None),
                    Err(GenError::ClientExhausted { reason, outcome, .. }) => (outcome.report, Some(reason)),
                    Err(e @ (GenError::EmptySource(_) | GenError::InvalidWeights { .. })) => return Err(CliError::Usage(e.to_string())),
                    Err(e) => return Err(failed(e)),
                }
            }
        };
        write_json(&dir.join("report.json"), &report)?;
        let summary = json!({
            "fingerprint": key.fingerprint,
            "source": g.source,
            "requested": report.requested,
            "accepted": report.accepted,
            "rejected": report.rejected,
            "retried": report.retried,
            "dedup_hits": report.dedup_hits,
            "client_errors": report.client_errors,
            "partial": partial.is_some(),
        });
        self.finish(&dir, &key, &summary, partial.is_some())?;
        match partial {
            Some(reason) => Err(CliError::Partial(format!("client exhausted after {} tideos: {reason}", report.accepted))),
            None => Ok(()),
        }
    }

    pub fn stats(&self) -> Result<(), CliError> {
        let (shard, gen_fp) = self.corpus()?;
        let key = StageKey::new("stats", Value::Null, &[("generate", &gen_fp)]);
        let dir = match prepare(self.out(), &key, self.resume)? {
            Prepared::Done(dir) => return done("stats", &dir),
            Prepared::Fresh(dir) => dir,
        };
        let stats = corpus_stats(shard.pairs());
        let mut summary = serde_json::to_value(&stats).map_err(failed)?;
        summary["fingerprint"] = json!(key.fingerprint);
        self.finish(&dir, &key, &summary, false)
    }

    fn encode_key(&self) -> Result<StageKey, CliError> {
        let gen = self.generate_key()?;
        let config = json!({ "world": self.cfg.world, "encoder": self.cfg.encoder, "seed": self.cfg.seed });
        Ok(StageKey::new("encode", config, &[("generate", &gen.fingerprint)]))
    }

    pub fn encode(&self) -> Result<(), CliError> {
        let (shard, _) = self.corpus()?;
        let key = self.encode_key()?;
        let dir = match prepare(self.out(), &key, self.resume)? {
            Prepared::Done(dir) => return done("encode", &dir),
            Prepared::Fresh(dir) => dir,
        };
        let world = self.world()?;
        let descriptor = encoder_descriptor(&world);
        let dim = world.config.dimension;

        let mut text = FeatureCache::new(descriptor.clone(), dim);
        for t in &shard.tideos {
            for (i, frame) in t.frames.iter().enumerate() {
                let f = encode_textual_frame::<f32, _>(frame, &world.pair).map_err(failed)?;
                text.insert(&format!("{}/{i}", t.id), &f.vector).map_err(failed)?;
            }
        }
        text.header.fingerprint = Some(key.fingerprint.clone());
        text.write(&dir.join("text_features.bin")).map_err(failed)?;
        let text_rows = text.header.count;

        let mut benches = serde_json::Map::new();
        for (k, &probe) in self.cfg.encoder.probes.iter().enumerate() {
            let bdir = bench_dir(&dir, probe);
            std::fs::create_dir_all(bdir.join("feats")).map_err(failed)?;
            let videos = world.videos(self.cfg.encoder.eval_videos, probe, mix_seed(self.seeds.eval, k as u64));
            let mut lines = String::new();
            for v in &videos {
                let file = format!("feats/{}.bin", v.id);
                write_features(&bdir.join(&file), &descriptor, &key.fingerprint, &video_features(&world, v).map_err(failed)?)?;
                let rec = BenchmarkRecord {
                    id: v.id.clone(),
                    feature_file: file,
                    question: v.question.clone(),
                    options: v.options.clone(),
                    answer_index: Some(v.answer_index),
                };
                lines += &serde_json::to_string(&rec).map_err(failed)?;
                lines.push('\n');
            }
            std::fs::write(bdir.join(BENCH_FILE), lines).map_err(failed)?;
            benches.insert(probe_name(probe), json!(videos.len()));
        }

        // Finetuning videos cycle through the probes.
        let fdir = dir.join(FINETUNE_DIR);
        std::fs::create_dir_all(fdir.join("feats")).map_err(failed)?;
        let probes = if self.cfg.encoder.probes.is_empty() { vec![Probe::Presence] } else { self.cfg.encoder.probes.clone() };
        let n = self.cfg.encoder.finetune_videos;
        let mut lines = String::new();
        for (k, &probe) in probes.iter().enumerate() {
            let share = n / probes.len() + usize::from(k < n % probes.len());
            for v in world.videos(share, probe, mix_seed(self.seeds.finetune, k as u64)) {
                let id = format!("{}-{}", probe_name(probe), v.id);
                let file = format!("feats/{id}.bin");
                write_features(&fdir.join(&file), &descriptor, &key.fingerprint, &video_features(&world, &v).map_err(failed)?)?;
                let rec = FinetuneRecord { id, feature_file: file, annotation: video_annotation(&world, &v) };
                lines += &serde_json::to_string(&rec).map_err(failed)?;
                lines.push('\n');
            }
        }
        std::fs::write(fdir.join(FINETUNE_FILE), lines).map_err(failed)?;

        let summary = json!({
            "fingerprint": key.fingerprint,
            "descriptor": descriptor,
            "dimension": dim,
            "tideos": shard.tideos.len(),
            "text_feature_rows": text_rows,
            "benchmarks": benches,
            "finetune_videos": n,
        });
        self.finish(&dir, &key, &summary, false)
    }

    fn memory_key(&self) -> Result<StageKey, CliError> {
        let m = &self.cfg.memory;
        let (captions, inputs) = match &m.captions {
            CaptionSource::Corpus => (json!("corpus"), vec![("generate", self.generate_key()?.fingerprint)]),
            CaptionSource::File(p) => (json!({ "file": digest_file(p)? }), vec![]),
        };
        let config = json!({
            "world": self.cfg.world,
            "captions": captions,
            "size": m.size,
            "temperature": m.temperature,
            "seed": self.seeds.memory,
        });
        let inputs: Vec<(&str, &str)> = inputs.iter().map(|(k, v)| (*k, v.as_str())).collect();
        Ok(StageKey::new("build-memory", config, &inputs))
    }

    pub fn build_memory(&self) -> Result<(), CliError> {
        let key = self.memory_key()?;
        let captions = match &self.cfg.memory.captions {
            CaptionSource::Corpus => caption_stream(&self.corpus()?.0),
            CaptionSource::File(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
                .lines()
                .map(str::to_string)
                .collect(),
        };
        let dir = match prepare(self.out(), &key, self.resume)? {
            Prepared::Done(dir) => return done("build-memory", &dir),
            Prepared::Fresh(dir) => dir,
        };
        let world = self.world()?;
        let m = &self.cfg.memory;
        let memory: SupportMemory32 = build_memory(&captions, &world.pair, m.size, m.temperature, self.seeds.memory).map_err(failed)?;
        let mdir = dir.join(MEMORY_DIR);
        std::fs::create_dir_all(&mdir).map_err(failed)?;
        memory.save(&mdir, Some(&key.fingerprint)).map_err(failed)?;
        let summary = json!({
            "fingerprint": key.fingerprint,
            "descriptor": memory.descriptor(),
            "dimension": memory.dim(),
            "captions_seen": captions.len(),
            "anchors": memory.len(),
            "capacity": m.size,
            "temperature": memory.temperature(),
        });
        self.finish(&dir, &key, &summary, false)
    }

    fn backbone_key(&self) -> StageKey {
        let config = json!({ "world": self.cfg.world, "recipe": self.cfg.backbone.recipe(), "seed": self.seeds.pretrain_text });
        StageKey::new("backbone", config, &[])
    }

    /// Loads the configured backbone, pretraining and caching it when
    /// `create` is set. Returns the model and its identity.
    fn backbone(&self, create: bool) -> Result<(TinyTransformer32, String), CliError> {
        if let Some(path) = &self.cfg.backbone.path {
            let b = TinyTransformer32::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let id = format!("weights:{}", b.weights_digest());
            return Ok((b, id));
        }
        let key = self.backbone_key();
        match locate(self.out(), "backbone", &key.fingerprint, "train") {
            Ok((dir, _)) => {
                let b = TinyTransformer32::load(&dir.join(BACKBONE_FILE)).map_err(failed)?;
                return Ok((b, key.fingerprint));
            }
            Err(CliError::Usage(msg)) if !create => return Err(CliError::Usage(msg)),
            Err(CliError::Usage(_)) => {}
            Err(e) => return Err(e),
        }
        let dir = match prepare(self.out(), &key, true)? {
            Prepared::Done(dir) => dir,
            Prepared::Fresh(dir) => {
                let world = self.world()?;
                log::info!("pretraining backbone on {} sequences", self.cfg.backbone.sequences);
                let (b, losses) = pretrain_backbone::<f32>(&world, &self.cfg.backbone.recipe(), self.seeds.pretrain_text).map_err(failed)?;
                b.save(&dir.join(BACKBONE_FILE)).map_err(failed)?;
                let summary = json!({
                    "fingerprint": key.fingerprint,
                    "descriptor": b.descriptor(),
                    "weights_digest": b.weights_digest(),
                    "epoch_losses": losses,
                });
                self.finish(&dir, &key, &summary, false)?;
                dir
            }
        };
        let b = TinyTransformer32::load(&dir.join(BACKBONE_FILE)).map_err(failed)?;
        Ok((b, key.fingerprint))
    }

    fn train_key(&self, backbone_id: &str) -> Result<StageKey, CliError> {
        let gen = self.generate_key()?;
        let config = json!({ "world": self.cfg.world, "trainer": self.cfg.trainer });
        Ok(StageKey::new("train", config, &[("generate", &gen.fingerprint), ("backbone", backbone_id)]))
    }

    pub fn train(&self) -> Result<(), CliError> {
        let (shard, _) = self.corpus()?;
        let (backbone, backbone_id) = self.backbone(true)?;
        let key = self.train_key(&backbone_id)?;
        let dir = match prepare(self.out(), &key, self.resume)? {
            Prepared::Done(dir) => return done("train", &dir),
            Prepared::Fresh(dir) => dir,
        };
        let world = self.world()?;
        let t = &self.cfg.trainer;
        log::info!("aligning on {} tideos for {} epochs", shard.tideos.len(), t.epochs);
        let templates = PromptTemplateSet::standard();
        let out = train::<f32, _, _>(&shard, t, &backbone, &world.pair, &templates, Some(&dir.join("report.jsonl")));
        let out = out.map_err(|e| keep_last_good(e, &dir))?;
        out.checkpoint.save(&dir.join(CHECKPOINT_FILE)).map_err(failed)?;
        let summary = json!({
            "fingerprint": key.fingerprint,
            "checkpoint_fingerprint": out.checkpoint.header.fingerprint,
            "examples": shard.annotations.len(),
            "steps": out.checkpoint.header.step,
            "effective_batch": t.effective_batch(),
            "effective_lr": t.effective_lr(),
            "epoch_losses": out.epoch_losses,
        });
        self.finish(&dir, &key, &summary, false)
    }

    fn finetune_key(&self, train_fp: &str, encode_fp: &str) -> StageKey {
        let config = json!({ "finetune": self.cfg.finetune, "trainer": self.cfg.trainer });
        StageKey::new("finetune", config, &[("train", train_fp), ("encode", encode_fp)])
    }

    pub fn finetune(&self) -> Result<(), CliError> {
        let (backbone, backbone_id) = self.backbone(false)?;
        let train_key = self.train_key(&backbone_id)?;
        let (train_dir, _) = locate(self.out(), "train", &train_key.fingerprint, "train")?;
        let encode_key = self.encode_key()?;
        let (encode_dir, _) = locate(self.out(), "encode", &encode_key.fingerprint, "encode")?;
        let key = self.finetune_key(&train_key.fingerprint, &encode_key.fingerprint);
        let dir = match prepare(self.out(), &key, self.resume)? {
            Prepared::Done(dir) => return done("finetune", &dir),
            Prepared::Fresh(dir) => dir,
        };
        let checkpoint = Checkpoint32::load(&train_dir.join(CHECKPOINT_FILE)).map_err(failed)?;
        let descriptor = encoded_descriptor(&encode_dir)?;
        check_checkpoint(&checkpoint.header, &backbone, &descriptor, "finetuning data")?;
        let dataset = load_finetune_set(&encode_dir.join(FINETUNE_DIR))?;

        let f = &self.cfg.finetune;
        let mut t = self.cfg.trainer.clone();
        t.epochs = f.epochs;
        t.rng_seed = self.seeds.finetune;
        if let Some(lr) = f.base_lr {
            t.base_lr = lr;
        }
        let templates = PromptTemplateSet::standard();
        log::info!("finetuning on {} videos", dataset.len());
        let out = finetune(&dataset, &checkpoint, &t, f.data_ratio, &backbone, &templates, Some(&dir.join("report.jsonl")))
            .map_err(|e| keep_last_good(e, &dir))?;
        out.checkpoint.save(&dir.join(CHECKPOINT_FILE)).map_err(failed)?;
        let summary = json!({
            "fingerprint": key.fingerprint,
            "checkpoint_fingerprint": out.checkpoint.header.fingerprint,
            "videos": dataset.len(),
            "data_ratio": f.data_ratio,
            "steps": out.checkpoint.header.step,
            "epoch_losses": out.epoch_losses,
        });
        self.finish(&dir, &key, &summary, false)
    }

    fn eval_inputs(&self, need_memory: bool) -> Result<EvalInputs, CliError> {
        let e = &self.cfg.eval;
        let (backbone, backbone_id) = self.backbone(false)?;
        let encode_key = self.encode_key()?;
        let (encode_dir, _) = locate(self.out(), "encode", &encode_key.fingerprint, "encode")?;

        let (checkpoint, checkpoint_id) = match &e.checkpoint_path {
            Some(p) => (Checkpoint32::load(p).map_err(|err| CliError::Usage(format!("{}: {err}", p.display())))?, format!("file:{}", digest_file(p)?)),
            None => {
                let train_key = self.train_key(&backbone_id)?;
                let (stage, fp) = match e.checkpoint {
                    CheckpointStage::Train => ("train", train_key.fingerprint),
                    CheckpointStage::Finetune => ("finetune", self.finetune_key(&train_key.fingerprint, &encode_key.fingerprint).fingerprint),
                };
                let (dir, _) = locate(self.out(), stage, &fp, stage)?;
                (Checkpoint32::load(&dir.join(CHECKPOINT_FILE)).map_err(failed)?, fp)
            }
        };
        check_checkpoint(&checkpoint.header, &backbone, &encoded_descriptor(&encode_dir)?, "benchmark features")?;

        let memory = if need_memory {
            let (m, id) = match &e.memory_path {
                Some(p) => {
                    let (m, _) = SupportMemory32::load(p).map_err(|err| CliError::Usage(format!("{}: {err}", p.display())))?;
                    let id = format!("file:{}", digest_file(&p.join(topa::memory_projection::MEMORY_FILE))?);
                    (m, id)
                }
                None => {
                    let key = self.memory_key()?;
                    let (dir, _) = locate(self.out(), "build-memory", &key.fingerprint, "build-memory")?;
                    let (m, stored) = SupportMemory32::load(&dir.join(MEMORY_DIR)).map_err(failed)?;
                    if stored.as_deref() != Some(key.fingerprint.as_str()) {
                        return Err(CliError::FingerprintMismatch(format!(
                            "memory in {} carries fingerprint {stored:?}, expected {}",
                            dir.display(),
                            key.fingerprint
                        )));
                    }
                    (m, key.fingerprint)
                }
            };
            if m.descriptor() != checkpoint.header.encoder_descriptor || m.dim() != checkpoint.header.feature_dim {
                return Err(CliError::FingerprintMismatch(format!(
                    "memory built with encoder `{}` (d={}), checkpoint expects `{}` (d={})",
                    m.descriptor(),
                    m.dim(),
                    checkpoint.header.encoder_descriptor,
                    checkpoint.header.feature_dim
                )));
            }
            Some((m, id))
        } else {
            None
        };
        Ok(EvalInputs { backbone, checkpoint, checkpoint_id, memory, encode_dir, encode_fp: encode_key.fingerprint })
    }

    fn threads(&self) -> usize {
        if self.cfg.deterministic {
            1
        } else if self.cfg.eval.threads == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.cfg.eval.threads
        }
    }

    fn bench(&self, inputs: &EvalInputs, probe: Probe) -> Result<JsonlBenchmark, CliError> {
        let path = bench_dir(&inputs.encode_dir, probe).join(BENCH_FILE);
        if !path.exists() {
            return Err(CliError::Usage(format!("probe `{}` was not encoded; add it to `encoder.probes`", probe_name(probe))));
        }
        JsonlBenchmark::open(&path).map_err(failed)
    }

    fn run(&self, inputs: &EvalInputs, bench: &JsonlBenchmark, bc: &BenchmarkConfig, probe: Probe) -> Result<EvalResult, CliError> {
        let model = topa::aligner::AlignedModel::new(&inputs.backbone, &inputs.checkpoint.params);
        let memory = inputs.memory.as_ref().map(|(m, _)| m).filter(|_| bc.projection && !bc.blind);
        let extra = json!({
            "probe": probe,
            "checkpoint": inputs.checkpoint_id,
            "memory": memory.and(inputs.memory.as_ref().map(|(_, id)| id.clone())),
        });
        log::info!("evaluating {} items, mode {:?}, frames {}", bench.records().len(), bc.mode, bc.frames);
        run_benchmark::<f32, _, _>(bench, model, memory, bc, &PromptTemplateSet::standard(), extra).map_err(failed)
    }

    pub fn eval(&self) -> Result<(), CliError> {
        let e = &self.cfg.eval;
        let uses_memory = e.projection && !e.blind;
        let inputs = self.eval_inputs(uses_memory)?;
        let mut section = serde_json::to_value(e).map_err(failed)?;
        section["threads"] = Value::Null;
        section["checkpoint_path"] = Value::Null;
        section["memory_path"] = Value::Null;
        let mut ins = vec![("checkpoint", inputs.checkpoint_id.as_str()), ("encode", inputs.encode_fp.as_str())];
        if let Some((_, id)) = &inputs.memory {
            ins.push(("memory", id.as_str()));
        }
        let key = StageKey::new("eval", section, &ins);
        let dir = match prepare(self.out(), &key, self.resume)? {
            Prepared::Done(dir) => return done("eval", &dir),
            Prepared::Fresh(dir) => dir,
        };
        let bench = self.bench(&inputs, e.probe)?;
        let bc = BenchmarkConfig {
            mode: e.mode,
            projection: e.projection,
            frames: e.frames,
            blind: e.blind,
            max_new_tokens: e.max_new_tokens,
            threads: self.threads(),
        };
        let r = self.run(&inputs, &bench, &bc, e.probe)?;
        std::fs::write(dir.join("result.json"), r.to_json() + "\n").map_err(failed)?;
        std::fs::write(dir.join("items.jsonl"), r.items_jsonl()).map_err(failed)?;
        let s = &r.summary;
        let summary = json!({
            "fingerprint": key.fingerprint,
            "checkpoint": inputs.checkpoint_id,
            "probe": e.probe,
            "mode": s.mode,
            "projection": s.projection,
            "frames": s.frames,
            "n": s.n,
            "accuracy": s.accuracy,
            "fallback_rate": s.fallback_rate,
        });
        self.finish(&dir, &key, &summary, false)
    }

    pub fn ablate(&self) -> Result<(), CliError> {
        let a = &self.cfg.ablate;
        let inputs = self.eval_inputs(true)?;
        let mut ins = vec![("checkpoint", inputs.checkpoint_id.as_str()), ("encode", inputs.encode_fp.as_str())];
        if let Some((_, id)) = &inputs.memory {
            ins.push(("memory", id.as_str()));
        }
        let config = json!({ "ablate": a, "max_new_tokens": self.cfg.eval.max_new_tokens });
        let key = StageKey::new("ablate", config, &ins);
        let dir = match prepare(self.out(), &key, self.resume)? {
            Prepared::Done(dir) => return done("ablate", &dir),
            Prepared::Fresh(dir) => dir,
        };
        let max_frames = a.frames.iter().copied().max().unwrap_or(self.cfg.eval.frames);
        let mut rows = Vec::new();
        for &probe in &a.probes {
            let bench = self.bench(&inputs, probe)?;
            for &mode in &a.modes {
                let mut variants: Vec<(bool, usize, bool)> = a.frames.iter().map(|&f| (true, f, false)).collect();
                variants.push((false, max_frames, false));
                variants.push((false, max_frames, true));
                for (projection, frames, blind) in variants {
                    let bc = BenchmarkConfig {
                        mode,
                        projection,
                        frames,
                        blind,
                        max_new_tokens: self.cfg.eval.max_new_tokens,
                        threads: self.threads(),
                    };
                    let r = self.run(&inputs, &bench, &bc, probe)?;
                    rows.push(json!({
                        "probe": probe,
                        "mode": r.summary.mode,
                        "projection": r.summary.projection,
                        "frames": frames,
                        "n": r.summary.n,
                        "accuracy": r.summary.accuracy,
                        "fallback_rate": r.summary.fallback_rate,
                    }));
                }
            }
        }
        let summary = json!({ "fingerprint": key.fingerprint, "checkpoint": inputs.checkpoint_id, "rows": rows });
        self.finish(&dir, &key, &summary, false)
    }
}

/// Saves the checkpoint carried by a divergence error before reporting it.
fn keep_last_good(e: AlignError, dir: &Path) -> CliError {
    if let Some(ck) = e.last_good::<f32>() {
        let path = dir.join("last_good.bin");
        if ck.save(&path).is_ok() {
            return failed(format!("{e}; saved {}", path.display()));
        }
    }
    failed(e)
}

fn encoded_descriptor(encode_dir: &Path) -> Result<String, CliError> {
    let summary: Value = read_json(&encode_dir.join(SUMMARY_FILE))?;
    summary["descriptor"].as_str().map(str::to_string).ok_or_else(|| failed(format!("{}: no encoder descriptor", encode_dir.display())))
}

fn load_finetune_set(dir: &Path) -> Result<Vec<(SequenceRepresentation<f32>, TideoAnnotation)>, CliError> {
    let path = dir.join(FINETUNE_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| failed(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: FinetuneRecord = serde_json::from_str(line).map_err(|e| failed(format!("{}: {e}", path.display())))?;
        let m = FeatureCacheReader::open(&dir.join(&r.feature_file)).and_then(|rd| rd.read_matrix::<f32>()).map_err(failed)?;
        out.push((SequenceRepresentation::new(m, Modality::Image), r.annotation));
    }
    Ok(out)
}
