//! On-disk round trips of the artifacts the pipeline hands between stages.

use topa::aligner::{train, AlignedModel, Checkpoint, PromptTemplateSet, TrainerConfig};
use topa::backbone::{Backbone, TinyConfig, TinyTransformer};
use topa::dual_encoder::FeatureCache;
use topa::eval_harness::{run_benchmark, BenchmarkConfig, BenchmarkRecord, EvalMode, JsonlBenchmark};
use topa::experiment::{caption_stream, eval_items, video_features};
use topa::memory_projection::{build_memory, SupportMemory};
use topa::synthetic_world::{Probe, SyntheticWorld, WorldConfig};
use topa::tideo_data::{corpus_stats, CorpusShard};

fn world() -> SyntheticWorld {
    SyntheticWorld::new(WorldConfig { concepts: 12, dimension: 32, ..Default::default() }).unwrap()
}

fn backbone(w: &SyntheticWorld) -> TinyTransformer<f32> {
    TinyTransformer::init(TinyConfig { width: 16, heads: 2, layers: 1, ffn: 32, max_positions: 96, seed: 4 }, w.vocab())
}

#[test]
fn shard_survives_disk_and_keeps_its_stats() {
    let w = world();
    let shard = w.corpus(15, 2);
    let dir = tempfile::tempdir().unwrap();
    shard.write(dir.path()).unwrap();
    let back = CorpusShard::load(dir.path()).unwrap();
    assert_eq!(back, shard);
    assert_eq!(corpus_stats(back.pairs()), corpus_stats(shard.pairs()));
}

#[test]
fn backbone_and_checkpoint_reload_bit_exact() {
    let w = world();
    let b = backbone(&w);
    let dir = tempfile::tempdir().unwrap();
    b.save(&dir.path().join("b.bin")).unwrap();
    let b2 = TinyTransformer::<f32>::load(&dir.path().join("b.bin")).unwrap();
    assert_eq!(b2.weights_digest(), b.weights_digest());

    let cfg = TrainerConfig { epochs: 1, batch_size: 4, accum_steps: 1, adapter_len: 2, base_lr: 0.1, ..Default::default() };
    let out = train::<f32, _, _>(&w.corpus(8, 1), &cfg, &b, &w.pair, &PromptTemplateSet::standard(), None).unwrap();
    let p = dir.path().join("c.bin");
    out.checkpoint.save(&p).unwrap();
    let back = Checkpoint::<f32>::load(&p).unwrap();
    assert_eq!(back, out.checkpoint);
}

#[test]
fn memory_reload_projects_identically() {
    let w = world();
    let shard = w.corpus(10, 3);
    let m = build_memory::<f32, _, _, _>(caption_stream(&shard), &w.pair, 100, 0.05, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path(), Some("abc")).unwrap();
    let (back, fp) = SupportMemory::<f32>::load(dir.path()).unwrap();
    assert_eq!(fp.as_deref(), Some("abc"));
    assert_eq!(back.descriptor(), m.descriptor());
    let v = &w.videos(1, Probe::Presence, 0)[0];
    let f = video_features::<f32>(&w, v).unwrap();
    let q = f.features.row(0);
    assert_eq!(back.project(q).unwrap().vector, m.project(q).unwrap().vector);
}

#[test]
fn benchmark_files_match_in_memory_items() {
    let w = world();
    let b = backbone(&w);
    let videos = w.videos(6, Probe::Presence, 5);
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("f")).unwrap();
    let mut lines = String::new();
    for v in &videos {
        let seq = video_features::<f32>(&w, v).unwrap();
        let mut cache = FeatureCache::new("synthetic", seq.dim());
        for r in 0..seq.len() {
            cache.push(seq.features.row(r)).unwrap();
        }
        let file = format!("f/{}.bin", v.id);
        cache.write(&dir.path().join(&file)).unwrap();
        let rec = BenchmarkRecord {
            id: v.id.clone(),
            feature_file: file,
            question: v.question.clone(),
            options: v.options.clone(),
            answer_index: Some(v.answer_index),
        };
        lines += &serde_json::to_string(&rec).unwrap();
        lines.push('\n');
    }
    std::fs::write(dir.path().join("bench.jsonl"), lines).unwrap();
    let bench = JsonlBenchmark::open(&dir.path().join("bench.jsonl")).unwrap();

    let cfg = TrainerConfig::default();
    let params = cfg.init_params::<f32>(w.config.dimension, b.width(), b.heads(), b.layers());
    let model = AlignedModel::new(&b, &params);
    let bc = BenchmarkConfig { mode: EvalMode::Logits, projection: false, ..Default::default() };
    let t = PromptTemplateSet::standard();
    let from_disk = run_benchmark::<f32, _, _>(&bench, model, None, &bc, &t, serde_json::json!({})).unwrap();
    let items = eval_items::<f32>(&w, &videos).unwrap();
    let in_memory = run_benchmark(&items, model, None, &bc, &t, serde_json::json!({})).unwrap();
    // Loading re-normalizes rows, so scores agree to rounding only.
    for (a, b) in from_disk.items.iter().zip(&in_memory.items) {
        assert_eq!(a.predicted_index, b.predicted_index);
        for (x, y) in a.option_scores.iter().flatten().zip(b.option_scores.iter().flatten()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }
    assert_eq!(from_disk.summary.accuracy, in_memory.summary.accuracy);
}
