use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{QuestionType, SourceTag, Tideo, TideoAnnotation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub tideo_count: usize,
    pub frame_count_total: usize,
    /// Zero when the corpus is empty; see `mean_defined`.
    pub mean_frames_per_tideo: f64,
    pub mean_defined: bool,
    pub qa_count: usize,
    pub question_type_histogram: BTreeMap<QuestionType, usize>,
    pub condition_histogram: BTreeMap<SourceTag, usize>,
}

/// Single-pass, mergeable counter behind [`corpus_stats`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StatsAccumulator {
    tideos: usize,
    frames: usize,
    qa: usize,
    question_types: BTreeMap<QuestionType, usize>,
    conditions: BTreeMap<SourceTag, usize>,
}

impl StatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tideo: &Tideo, annotation: Option<&TideoAnnotation>) {
        self.tideos += 1;
        self.frames += tideo.frames.len();
        *self.conditions.entry(tideo.source_tag).or_default() += 1;
        if let Some(a) = annotation {
            self.qa += a.qa_items.len();
            for q in &a.qa_items {
                *self.question_types.entry(q.question_type).or_default() += 1;
            }
        }
    }

    /// Combines per-shard partial counts.
    pub fn merge(&mut self, other: &StatsAccumulator) {
        self.tideos += other.tideos;
        self.frames += other.frames;
        self.qa += other.qa;
        for (k, v) in &other.question_types {
            *self.question_types.entry(*k).or_default() += v;
        }
        for (k, v) in &other.conditions {
            *self.conditions.entry(*k).or_default() += v;
        }
    }

    pub fn finish(&self) -> CorpusStats {
        let mean_defined = self.tideos > 0;
        CorpusStats {
            tideo_count: self.tideos,
            frame_count_total: self.frames,
            mean_frames_per_tideo: if mean_defined { self.frames as f64 / self.tideos as f64 } else { 0.0 },
            mean_defined,
            qa_count: self.qa,
            question_type_histogram: self.question_types.clone(),
            condition_histogram: self.conditions.clone(),
        }
    }
}

pub fn corpus_stats<'c, I>(corpus: I) -> CorpusStats
where
    I: IntoIterator<Item = (&'c Tideo, Option<&'c TideoAnnotation>)>,
{
    let mut acc = StatsAccumulator::new();
    for (t, a) in corpus {
        acc.push(t, a);
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tideo_data::{ConditionRecord, QAItem, TextualFrame};
    use proptest::prelude::*;

    fn tideo(id: &str, n: usize, tag: SourceTag) -> Tideo {
        Tideo {
            id: id.into(),
            source_tag: tag,
            condition: ConditionRecord::new(tag, "seed"),
            frames: (0..n).map(|i| TextualFrame::new(format!("c{i}"), vec![])).collect(),
            extra: Default::default(),
        }
    }

    fn annotation(id: &str, questions: &[&str]) -> TideoAnnotation {
        TideoAnnotation {
            tideo_id: id.into(),
            dense_description: "d".into(),
            qa_items: questions.iter().map(|q| QAItem::new(*q, vec!["a".into(), "b".into()], 0)).collect(),
            extra: Default::default(),
        }
    }

    #[test]
    fn mean_of_five_and_nine_frames() {
        let a = tideo("a", 5, SourceTag::VideoTitle);
        let b = tideo("b", 9, SourceTag::EgoScenario);
        let s = corpus_stats([(&a, None), (&b, None)]);
        assert_eq!(s.mean_frames_per_tideo, 7.0);
        assert!(s.mean_defined);
        assert_eq!(s.condition_histogram[&SourceTag::EgoScenario], 1);
    }

    #[test]
    fn empty_corpus_flags_undefined_mean() {
        let s = corpus_stats(std::iter::empty());
        assert_eq!(s.tideo_count, 0);
        assert_eq!(s.mean_frames_per_tideo, 0.0);
        assert!(!s.mean_defined);
    }

    #[test]
    fn shard_merge_equals_single_pass() {
        let ts: Vec<_> = (0..6).map(|i| tideo(&i.to_string(), 5 + i, SourceTag::ObjectLexicon)).collect();
        let anns: Vec<_> = ts.iter().map(|t| annotation(&t.id, &["why x", "what y"])).collect();
        let mut left = StatsAccumulator::new();
        let mut right = StatsAccumulator::new();
        for (i, (t, a)) in ts.iter().zip(&anns).enumerate() {
            if i % 2 == 0 { left.push(t, Some(a)) } else { right.push(t, Some(a)) }
        }
        left.merge(&right);
        assert_eq!(left.finish(), corpus_stats(ts.iter().zip(anns.iter().map(Some))));
        assert_eq!(left.finish().question_type_histogram[&QuestionType::Why], 6);
    }

    proptest! {
        #[test]
        fn stats_ignore_corpus_order(sizes in prop::collection::vec(5usize..=15, 0..20), rot in 0usize..20) {
            let ts: Vec<_> = sizes.iter().enumerate()
                .map(|(i, &n)| tideo(&i.to_string(), n, SourceTag::ALL[i % 5]))
                .collect();
            let anns: Vec<_> = ts.iter().map(|t| annotation(&t.id, &["how", "what"])).collect();
            let forward = corpus_stats(ts.iter().zip(anns.iter().map(Some)));
            let mut pairs: Vec<_> = ts.iter().zip(anns.iter().map(Some)).collect();
            pairs.reverse();
            if !pairs.is_empty() { let k = rot % pairs.len(); pairs.rotate_left(k); }
            let permuted = corpus_stats(pairs);
            prop_assert_eq!(&forward, &permuted);
            if forward.mean_defined {
                prop_assert!((forward.mean_frames_per_tideo
                    - forward.frame_count_total as f64 / forward.tideo_count as f64).abs() < 1e-9);
            }
        }
    }
}
