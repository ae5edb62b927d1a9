use super::*;
use crate::backbone::{TinyConfig, TinyTransformer};
use crate::dual_encoder::Modality;
use crate::synthetic_world::{SyntheticWorld, WorldConfig};
use crate::testing::{Mock, Mode};
use crate::tideo_data::QAItem;

fn example(vocab: &Vocab, features: Matrix<f64>, target: &[&str]) -> AlignmentExample<f64> {
    AlignmentExample {
        task: Task::OpenQa,
        features: SequenceRepresentation::new(features, Modality::Text),
        prefix_tokens: vocab.encode("a b"),
        condition_tokens: vocab.encode("c"),
        target_tokens: target.iter().map(|t| vocab.id(t).unwrap()).collect(),
    }
}

fn annotation(description: &str, qa: Vec<QAItem>) -> TideoAnnotation {
    TideoAnnotation {
        tideo_id: "t0".into(),
        dense_description: description.into(),
        qa_items: qa,
        extra: Default::default(),
    }
}

#[test]
fn uniform_logits_cost_log_vocab_per_token() {
    let b = Mock::new(Mode::Uniform);
    let params = AlignParams::<f64>::init(3, b.width(), 1, 0, 0, 1);
    let ex = example(&b.vocab, Matrix::filled(2, 3, 0.5), &["a", "d", "<eos>"]);
    let out = lm_loss(&ex, AlignedModel::new(&b, &params)).unwrap();
    assert_eq!(out.per_token.len(), 3);
    let ln_v = (b.vocab.len() as f64).ln();
    assert!((out.loss - ln_v).abs() < 1e-12);
    assert!(out.per_token.iter().all(|x| (x - ln_v).abs() < 1e-12));
}

#[test]
fn loss_covers_target_tokens_only() {
    let b = Mock::new(Mode::Peek);
    let params = AlignParams::<f64>::init(3, b.width(), 1, 0, 0, 1);
    let ex = example(&b.vocab, Matrix::filled(2, 3, 0.5), &["b", "c", "<eos>"]);
    let out = lm_loss(&ex, AlignedModel::new(&b, &params)).unwrap();
    assert_eq!(out.per_token.len(), 3);
    assert!(out.loss < 1e-12, "{}", out.loss);
}

#[test]
fn toy_projection_loss_matches_hand_computation() {
    let b = Mock::new(Mode::Echo);
    let v = b.vocab.len();
    let (ia, ib) = (b.vocab.id("a").unwrap(), b.vocab.id("b").unwrap());
    let mut params = AlignParams::<f64>::init(2, v, 1, 0, 0, 1);
    params.projection = Matrix::zeros(2, v);
    params.projection.set(0, ia, 2.0);
    params.projection.set(1, ib, 2.0);
    params.bias = Matrix::zeros(1, v);
    // no prefix or condition: the last feature row predicts the first target
    let ex = AlignmentExample {
        task: Task::OpenQa,
        features: SequenceRepresentation::new(Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]), Modality::Text),
        prefix_tokens: vec![],
        condition_tokens: vec![],
        target_tokens: vec![ia],
    };
    let out = lm_loss(&ex, AlignedModel::new(&b, &params)).unwrap();
    let others = (v - 1) as f64;
    let oracle = (2f64.exp() + others).ln() - 2.0;
    assert!((out.loss - oracle).abs() < 1e-12, "{} vs {oracle}", out.loss);
}

#[test]
fn projection_gradient_matches_finite_differences() {
    let b = Mock::new(Mode::Echo);
    let v = b.vocab.len();
    let params = AlignParams::<f64>::init(3, v, 1, 0, 0, 4);
    let feats = Matrix::from_rows(&[vec![0.3, -0.2, 0.9], vec![-0.5, 0.1, 0.4]]);
    let ex = AlignmentExample {
        task: Task::OpenQa,
        features: SequenceRepresentation::new(feats, Modality::Text),
        prefix_tokens: vec![],
        condition_tokens: vec![],
        target_tokens: vec![b.vocab.id("c").unwrap(), EOS_ID],
    };
    let out = lm_loss(&ex, AlignedModel::new(&b, &params)).unwrap();
    let h = 1e-5;
    for r in 0..3 {
        for c in 0..v {
            let mut p = params.clone();
            p.projection.set(r, c, params.projection.get(r, c) + h);
            let up = lm_loss(&ex, AlignedModel::new(&b, &p)).unwrap().loss;
            p.projection.set(r, c, params.projection.get(r, c) - h);
            let down = lm_loss(&ex, AlignedModel::new(&b, &p)).unwrap().loss;
            let fd = (up - down) / (2.0 * h);
            let an = out.grads[0].get(r, c);
            assert!((fd - an).abs() < 1e-7, "({r},{c}) fd {fd} analytic {an}");
        }
    }
}

#[test]
fn multi_choice_target_text() {
    let ann = annotation("x.", vec![QAItem::new("Which?", vec!["cup".into(), "pan".into()], 1)]);
    let p = render_prompt_text(&ann, Task::MultiChoice, 0, &PromptTemplateSet::standard()).unwrap();
    assert_eq!(p.target, "The correct choice is (B).");
    let p = render_prompt_text(&ann, Task::OpenQa, 0, &PromptTemplateSet::standard()).unwrap();
    assert_eq!(p.target, "pan.");
}

#[test]
fn missing_fields_are_reported() {
    let t = PromptTemplateSet::standard();
    let ann = annotation("  ", vec![]);
    match render_prompt_text(&ann, Task::Summarization, 0, &t) {
        Err(AlignError::MissingAnnotationField { tideo, field }) => {
            assert_eq!(tideo, "t0");
            assert_eq!(field, "dense_description");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(
        render_prompt_text(&ann, Task::MultiChoice, 0, &t),
        Err(AlignError::MissingAnnotationField { .. })
    ));
    let bad = annotation("x", vec![QAItem::new("q", vec!["a".into()], 3)]);
    assert!(matches!(render_prompt_text(&bad, Task::OpenQa, 0, &t), Err(AlignError::MissingAnnotationField { .. })));
}

#[test]
fn task_ratio_proportions() {
    let ratio = TaskRatio::default();
    let mut rng = rng_for(17, 0);
    let mut counts = [0usize; 3];
    let n = 10_000;
    for _ in 0..n {
        counts[match ratio.sample(&mut rng) {
            Task::Summarization => 0,
            Task::OpenQa => 1,
            Task::MultiChoice => 2,
        }] += 1;
    }
    for (c, want) in counts.iter().zip([0.25, 0.25, 0.5]) {
        assert!((*c as f64 / n as f64 - want).abs() <= 0.02, "{counts:?}");
    }
    assert!(TaskRatio { summarization: 0.0, ..ratio }.validate().is_err());
}

#[test]
fn effective_lr_scales_with_batch() {
    let c = TrainerConfig::default();
    assert_eq!(c.effective_batch(), 288);
    assert!((c.effective_lr() - 5e-3 * 288.0 / 256.0).abs() < 1e-15);
}

#[test]
fn data_subset_is_seeded_sorted_and_sized() {
    let a = data_subset(10, 0.25, 3).unwrap();
    assert_eq!(a.len(), 3);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(a, data_subset(10, 0.25, 3).unwrap());
    assert_eq!(data_subset(10, 1.0, 0).unwrap(), (0..10).collect::<Vec<_>>());
    assert!(data_subset(10, 0.0, 0).is_err());
    assert!(data_subset(10, 1.5, 0).is_err());
}

struct Fixture {
    world: SyntheticWorld,
    backbone: TinyTransformer<f64>,
}

fn fixture() -> Fixture {
    let world = SyntheticWorld::new(WorldConfig { concepts: 12, dimension: 32, ..Default::default() }).unwrap();
    let cfg = TinyConfig { width: 16, heads: 2, layers: 2, ffn: 32, max_positions: 96, seed: 2 };
    let backbone = TinyTransformer::init(cfg, world.vocab());
    Fixture { world, backbone }
}

fn small_config() -> TrainerConfig {
    TrainerConfig { batch_size: 4, accum_steps: 1, epochs: 1, adapter_len: 2, base_lr: 0.05, rng_seed: 9, ..Default::default() }
}

#[test]
fn zero_epochs_return_the_initial_parameters() {
    let f = fixture();
    let shard = f.world.corpus(6, 1);
    let cfg = TrainerConfig { epochs: 0, ..small_config() };
    let out = train::<f64, _, _>(&shard, &cfg, &f.backbone, &f.world.pair, &PromptTemplateSet::standard(), None).unwrap();
    let init = cfg.init_params::<f64>(32, 16, 2, 2);
    assert_eq!(out.checkpoint.params, init);
    assert_eq!(out.checkpoint.header.step, 0);
    assert!(out.records.is_empty());
}

#[test]
fn training_is_deterministic_and_leaves_backbone_untouched() {
    let f = fixture();
    let digest = f.backbone.weights_digest();
    let shard = f.world.corpus(8, 1);
    let cfg = small_config();
    let t = PromptTemplateSet::standard();
    let a = train::<f64, _, _>(&shard, &cfg, &f.backbone, &f.world.pair, &t, None).unwrap();
    let b = train::<f64, _, _>(&shard, &cfg, &f.backbone, &f.world.pair, &t, None).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.records, b.records);
    assert_eq!(a.records.len(), 8);
    assert_eq!(a.checkpoint.header.step, 2);
    assert_ne!(a.checkpoint.params, cfg.init_params::<f64>(32, 16, 2, 2));
    assert_eq!(f.backbone.weights_digest(), digest);
    assert_eq!(a.checkpoint.header.backbone_digest, digest);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let f = fixture();
    let shard = f.world.corpus(4, 2);
    let out = train::<f64, _, _>(&shard, &small_config(), &f.backbone, &f.world.pair, &PromptTemplateSet::standard(), None)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    out.checkpoint.save(&p1).unwrap();
    let back = Checkpoint::<f64>::load(&p1).unwrap();
    back.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(back.params, out.checkpoint.params);
}

#[test]
fn report_lines_match_records() {
    let f = fixture();
    let shard = f.world.corpus(4, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.jsonl");
    let out = train::<f64, _, _>(
        &shard,
        &small_config(),
        &f.backbone,
        &f.world.pair,
        &PromptTemplateSet::standard(),
        Some(&path),
    )
    .unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let parsed: Vec<ReportRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, out.records);
}

#[test]
fn finetune_rejects_text_features_and_foreign_backbones() {
    let f = fixture();
    let shard = f.world.corpus(4, 1);
    let t = PromptTemplateSet::standard();
    let cfg = small_config();
    let ck = train::<f64, _, _>(&shard, &TrainerConfig { epochs: 0, ..cfg.clone() }, &f.backbone, &f.world.pair, &t, None)
        .unwrap()
        .checkpoint;
    let ann = shard.annotations[0].clone();
    let text = SequenceRepresentation::new(Matrix::filled(5, 32, 0.1), Modality::Text);
    assert!(matches!(
        finetune(&[(text, ann.clone())], &ck, &cfg, 1.0, &f.backbone, &t, None),
        Err(AlignError::WrongModality { .. })
    ));
    let other = TinyTransformer::<f64>::init(TinyConfig { seed: 99, ..*f.backbone.config() }, f.world.vocab());
    let img = SequenceRepresentation::new(Matrix::filled(5, 32, 0.1), Modality::Image);
    assert!(matches!(
        finetune(&[(img.clone(), ann.clone())], &ck, &cfg, 1.0, &other, &t, None),
        Err(AlignError::BadCheckpoint(_))
    ));
    let out = finetune(&[(img, ann)], &ck, &cfg, 1.0, &f.backbone, &t, None).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_ne!(out.checkpoint.header.fingerprint, ck.header.fingerprint);
}

#[test]
fn divergence_carries_the_last_good_checkpoint() {
    let f = fixture();
    let shard = f.world.corpus(4, 1);
    let cfg = TrainerConfig { base_lr: f64::MAX, warmup_epochs: 0.0, ..small_config() };
    match train::<f64, _, _>(&shard, &cfg, &f.backbone, &f.world.pair, &PromptTemplateSet::standard(), None) {
        Err(e @ AlignError::DivergenceDetected { .. }) => {
            let ck = e.last_good::<f64>().expect("checkpoint bytes");
            assert!(ck.params.named().iter().all(|(_, m)| m.all_finite()));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.epoch_losses)),
    }
}
