//! Textual-video corpus schema: records, validation and corpus statistics.
//!
//! A corpus shard is two JSON Lines files joined on the tideo id:
//! `tideos.jsonl` holds the frame sequences and `annotations.jsonl` the
//! dense descriptions and multi-choice QA items. Fields this crate does not
//! know about are kept in `extra` maps and written back unchanged.

mod io;
mod stats;

pub use io::{read_jsonl_values, CorpusError, CorpusShard, JsonlAppender, ANNOTATIONS_FILE, TIDEOS_FILE};
pub use stats::{corpus_stats, CorpusStats, StatsAccumulator};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const MIN_FRAMES: usize = 5;
pub const MAX_FRAMES: usize = 15;
pub const MIN_OPTIONS: usize = 2;
pub const MAX_OPTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchemaError {
    #[error("tideo has {count} frames, expected between {MIN_FRAMES} and {MAX_FRAMES}")]
    FrameCountOutOfRange { count: usize },
    #[error("frame {frame} has an empty caption")]
    EmptyCaption { frame: usize },
    #[error("frame {frame} object caption {object} is empty")]
    EmptyObjectCaption { frame: usize, object: usize },
    #[error("malformed record at `{path}`: {reason}")]
    MalformedRecord { path: String, reason: String },
    #[error("condition seed text is empty")]
    EmptySeedText,
    #[error("dense description is empty")]
    EmptyDescription,
    #[error("qa item {item} has an empty question")]
    EmptyQuestion { item: usize },
    #[error("qa item {item} has {count} options, expected between {MIN_OPTIONS} and {MAX_OPTIONS}")]
    OptionCountOutOfRange { item: usize, count: usize },
    #[error("qa item {item} answer index {index} is outside its {options} options")]
    AnswerOutOfRange { item: usize, index: i64, options: usize },
    #[error("qa item {item} repeats option `{option}`")]
    DuplicateOptions { item: usize, option: String },
    #[error("annotation refers to tideo `{found}` but was validated against `{expected}`")]
    IdMismatch { expected: String, found: String },
}

/// Where the generation condition came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    VideoTitle,
    VideoCaption,
    EgoScenario,
    ObjectLexicon,
    SyntheticFixture,
}

impl SourceTag {
    pub const ALL: [SourceTag; 5] = [
        SourceTag::VideoTitle,
        SourceTag::VideoCaption,
        SourceTag::EgoScenario,
        SourceTag::ObjectLexicon,
        SourceTag::SyntheticFixture,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::VideoTitle => "video_title",
            SourceTag::VideoCaption => "video_caption",
            SourceTag::EgoScenario => "ego_scenario",
            SourceTag::ObjectLexicon => "object_lexicon",
            SourceTag::SyntheticFixture => "synthetic_fixture",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl std::fmt::Display for SourceTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    What,
    Why,
    How,
    Other,
}

impl QuestionType {
    /// Classifies a question by its leading interrogative word.
    pub fn infer(question: &str) -> Self {
        let first = question
            .split(|c: char| !c.is_alphanumeric())
            .find(|w| !w.is_empty())
            .unwrap_or("")
            .to_lowercase();
        match first.as_str() {
            "what" => QuestionType::What,
            "why" => QuestionType::Why,
            "how" => QuestionType::How,
            _ => QuestionType::Other,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "what" => Some(QuestionType::What),
            "why" => Some(QuestionType::Why),
            "how" => Some(QuestionType::How),
            "other" => Some(QuestionType::Other),
            _ => None,
        }
    }
}

/// The prompt condition a tideo was generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub source_tag: SourceTag,
    pub seed_text: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ConditionRecord {
    pub fn new(source_tag: SourceTag, seed_text: impl Into<String>) -> Self {
        Self { source_tag, seed_text: seed_text.into(), extra: Map::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextualFrame {
    pub caption: String,
    pub object_captions: Vec<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl TextualFrame {
    pub fn new(caption: impl Into<String>, object_captions: Vec<String>) -> Self {
        Self { caption: caption.into(), object_captions, extra: Map::new() }
    }
}

/// A textual video: an ordered run of 5 to 15 textual frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tideo {
    pub id: String,
    pub source_tag: SourceTag,
    pub condition: ConditionRecord,
    pub frames: Vec<TextualFrame>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Tideo {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("tideo serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    pub question_type: QuestionType,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl QAItem {
    pub fn new(question: impl Into<String>, options: Vec<String>, answer_index: usize) -> Self {
        let question = question.into();
        let question_type = QuestionType::infer(&question);
        Self { question, options, answer_index, question_type, extra: Map::new() }
    }

    pub fn answer(&self) -> &str {
        &self.options[self.answer_index]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TideoAnnotation {
    pub tideo_id: String,
    pub dense_description: String,
    #[serde(rename = "qa")]
    pub qa_items: Vec<QAItem>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl TideoAnnotation {
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("annotation serializes")
    }
}

/// Option text as compared for distinctness.
pub fn normalize_option(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Validates a deserialized `tideos.jsonl` record.
pub fn validate_tideo(raw: &Value) -> Result<Tideo, SchemaError> {
    let obj = as_object(raw, "")?;
    let id = string_field(obj, "id", "")?;
    if id.trim().is_empty() {
        return Err(malformed("id", "empty id"));
    }
    let source_tag = tag_field(obj, "source_tag", "")?;
    let cond_obj = as_object(field(obj, "condition", "")?, "condition")?;
    let condition = ConditionRecord {
        source_tag: tag_field(cond_obj, "source_tag", "condition")?,
        seed_text: string_field(cond_obj, "seed_text", "condition")?,
        extra: rest(cond_obj, &["source_tag", "seed_text"]),
    };
    if condition.seed_text.trim().is_empty() {
        return Err(SchemaError::EmptySeedText);
    }
    let frames_raw = field(obj, "frames", "")?
        .as_array()
        .ok_or_else(|| malformed("frames", "expected an array"))?;
    let count = frames_raw.len();
    if !(MIN_FRAMES..=MAX_FRAMES).contains(&count) {
        return Err(SchemaError::FrameCountOutOfRange { count });
    }
    let mut frames = Vec::with_capacity(count);
    for (i, fr) in frames_raw.iter().enumerate() {
        let path = format!("frames[{i}]");
        let fo = as_object(fr, &path)?;
        let caption = string_field(fo, "caption", &path)?;
        if caption.trim().is_empty() {
            return Err(SchemaError::EmptyCaption { frame: i });
        }
        let object_captions = match fo.get("object_captions") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(items)) => items
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    let s = v.as_str().ok_or_else(|| {
                        malformed(&format!("{path}.object_captions[{j}]"), "expected a string")
                    })?;
                    if s.trim().is_empty() {
                        return Err(SchemaError::EmptyObjectCaption { frame: i, object: j });
                    }
                    Ok(s.to_string())
                })
                .collect::<Result<_, _>>()?,
            Some(_) => return Err(malformed(&format!("{path}.object_captions"), "expected an array")),
        };
        frames.push(TextualFrame { caption, object_captions, extra: rest(fo, &["caption", "object_captions"]) });
    }
    Ok(Tideo {
        id,
        source_tag,
        condition,
        frames,
        extra: rest(obj, &["id", "source_tag", "condition", "frames"]),
    })
}

/// Validates a deserialized `annotations.jsonl` record against its tideo.
pub fn validate_annotation(raw: &Value, tideo: &Tideo) -> Result<TideoAnnotation, SchemaError> {
    let obj = as_object(raw, "")?;
    let tideo_id = string_field(obj, "tideo_id", "")?;
    if tideo_id != tideo.id {
        return Err(SchemaError::IdMismatch { expected: tideo.id.clone(), found: tideo_id });
    }
    let dense_description = string_field(obj, "dense_description", "")?;
    if dense_description.trim().is_empty() {
        return Err(SchemaError::EmptyDescription);
    }
    let qa_raw = match obj.get("qa") {
        None | Some(Value::Null) => &[][..],
        Some(Value::Array(a)) => a.as_slice(),
        Some(_) => return Err(malformed("qa", "expected an array")),
    };
    let mut qa_items = Vec::with_capacity(qa_raw.len());
    for (k, item) in qa_raw.iter().enumerate() {
        let path = format!("qa[{k}]");
        let io = as_object(item, &path)?;
        let question = string_field(io, "question", &path)?;
        if question.trim().is_empty() {
            return Err(SchemaError::EmptyQuestion { item: k });
        }
        let options: Vec<String> = field(io, "options", &path)?
            .as_array()
            .ok_or_else(|| malformed(&format!("{path}.options"), "expected an array"))?
            .iter()
            .enumerate()
            .map(|(j, v)| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| malformed(&format!("{path}.options[{j}]"), "expected a string"))
            })
            .collect::<Result<_, _>>()?;
        if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&options.len()) {
            return Err(SchemaError::OptionCountOutOfRange { item: k, count: options.len() });
        }
        let mut seen = std::collections::HashSet::new();
        for o in &options {
            if !seen.insert(normalize_option(o)) {
                return Err(SchemaError::DuplicateOptions { item: k, option: o.clone() });
            }
        }
        let index = field(io, "answer_index", &path)?
            .as_i64()
            .ok_or_else(|| malformed(&format!("{path}.answer_index"), "expected an integer"))?;
        if index < 0 || index as usize >= options.len() {
            return Err(SchemaError::AnswerOutOfRange { item: k, index, options: options.len() });
        }
        let question_type = match io.get("question_type") {
            None | Some(Value::Null) => QuestionType::infer(&question),
            Some(Value::String(s)) => QuestionType::parse(s).ok_or_else(|| {
                malformed(&format!("{path}.question_type"), "expected what, why, how or other")
            })?,
            Some(_) => return Err(malformed(&format!("{path}.question_type"), "expected a string")),
        };
        qa_items.push(QAItem {
            question,
            options,
            answer_index: index as usize,
            question_type,
            extra: rest(io, &["question", "options", "answer_index", "question_type"]),
        });
    }
    Ok(TideoAnnotation {
        tideo_id,
        dense_description,
        qa_items,
        extra: rest(obj, &["tideo_id", "dense_description", "qa"]),
    })
}

fn malformed(path: &str, reason: &str) -> SchemaError {
    SchemaError::MalformedRecord { path: path.to_string(), reason: reason.to_string() }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn as_object<'v>(v: &'v Value, path: &str) -> Result<&'v Map<String, Value>, SchemaError> {
    v.as_object().ok_or_else(|| malformed(if path.is_empty() { "$" } else { path }, "expected an object"))
}

fn field<'v>(obj: &'v Map<String, Value>, key: &str, prefix: &str) -> Result<&'v Value, SchemaError> {
    obj.get(key).ok_or_else(|| malformed(&join(prefix, key), "missing field"))
}

fn string_field(obj: &Map<String, Value>, key: &str, prefix: &str) -> Result<String, SchemaError> {
    field(obj, key, prefix)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| malformed(&join(prefix, key), "expected a string"))
}

fn tag_field(obj: &Map<String, Value>, key: &str, prefix: &str) -> Result<SourceTag, SchemaError> {
    let s = string_field(obj, key, prefix)?;
    SourceTag::parse(&s).ok_or_else(|| malformed(&join(prefix, key), &format!("unknown source tag `{s}`")))
}

fn rest(obj: &Map<String, Value>, known: &[&str]) -> Map<String, Value> {
    obj.iter()
        .filter(|(k, _)| !known.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn raw_tideo(n: usize) -> Value {
        let frames: Vec<Value> = (0..n)
            .map(|i| json!({"caption": format!("frame {i} shows a kettle"), "object_captions": ["a kettle"]}))
            .collect();
        json!({
            "id": "t-1",
            "source_tag": "video_title",
            "condition": {"source_tag": "video_title", "seed_text": "how to boil water"},
            "frames": frames,
        })
    }

    fn raw_annotation(options: Vec<&str>, answer_index: i64) -> Value {
        json!({
            "tideo_id": "t-1",
            "dense_description": "Someone boils water.",
            "qa": [{"question": "What is boiled?", "options": options, "answer_index": answer_index}],
        })
    }

    #[test]
    fn four_frames_are_rejected() {
        assert_eq!(validate_tideo(&raw_tideo(4)), Err(SchemaError::FrameCountOutOfRange { count: 4 }));
        assert_eq!(validate_tideo(&raw_tideo(16)), Err(SchemaError::FrameCountOutOfRange { count: 16 }));
    }

    #[test]
    fn five_frames_are_the_lower_bound() {
        let t = validate_tideo(&raw_tideo(5)).unwrap();
        assert_eq!(t.frame_count(), 5);
        assert_eq!(t.frames[0].object_captions, vec!["a kettle".to_string()]);
    }

    #[test]
    fn empty_caption_reports_its_frame() {
        let mut raw = raw_tideo(15);
        raw["frames"][7]["caption"] = json!("   ");
        assert_eq!(validate_tideo(&raw), Err(SchemaError::EmptyCaption { frame: 7 }));
    }

    #[test]
    fn missing_field_reports_a_path() {
        let mut raw = raw_tideo(6);
        raw["frames"][2].as_object_mut().unwrap().remove("caption");
        match validate_tideo(&raw) {
            Err(SchemaError::MalformedRecord { path, .. }) => assert_eq!(path, "frames[2].caption"),
            other => panic!("unexpected {other:?}"),
        }
        let mut raw = raw_tideo(6);
        raw["condition"].as_object_mut().unwrap().remove("seed_text");
        match validate_tideo(&raw) {
            Err(SchemaError::MalformedRecord { path, .. }) => assert_eq!(path, "condition.seed_text"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn answer_index_bounds() {
        let t = validate_tideo(&raw_tideo(5)).unwrap();
        let ok = validate_annotation(&raw_annotation(vec!["A", "B", "C", "D", "E"], 4), &t).unwrap();
        assert_eq!(ok.qa_items[0].answer_index, 4);
        assert_eq!(ok.qa_items[0].question_type, QuestionType::What);
        assert_eq!(
            validate_annotation(&raw_annotation(vec!["A", "B", "C", "D", "E"], 5), &t),
            Err(SchemaError::AnswerOutOfRange { item: 0, index: 5, options: 5 })
        );
    }

    #[test]
    fn options_are_compared_after_normalization() {
        let t = validate_tideo(&raw_tideo(5)).unwrap();
        let err = validate_annotation(&raw_annotation(vec!["open door", "Open Door "], 0), &t).unwrap_err();
        assert!(matches!(err, SchemaError::DuplicateOptions { item: 0, .. }));
    }

    #[test]
    fn annotation_must_match_its_tideo() {
        let t = validate_tideo(&raw_tideo(5)).unwrap();
        let mut raw = raw_annotation(vec!["a", "b"], 0);
        raw["tideo_id"] = json!("t-2");
        assert!(matches!(validate_annotation(&raw, &t), Err(SchemaError::IdMismatch { .. })));
    }

    #[test]
    fn question_type_inference() {
        assert_eq!(QuestionType::infer("Why did she leave?"), QuestionType::Why);
        assert_eq!(QuestionType::infer("  how many cups"), QuestionType::How);
        assert_eq!(QuestionType::infer("Which tool?"), QuestionType::Other);
        assert_eq!(QuestionType::infer(""), QuestionType::Other);
    }

    #[test]
    fn unknown_fields_survive_a_round_trip() {
        let mut raw = raw_tideo(5);
        raw["license"] = json!("cc-by");
        raw["frames"][1]["timestamp"] = json!(1.5);
        raw["condition"]["origin"] = json!({"dataset": "howto"});
        let t = validate_tideo(&raw).unwrap();
        assert_eq!(t.to_value(), raw);
    }

    fn arb_text() -> impl Strategy<Value = String> {
        "[a-z]{1,8}( [a-z]{1,8}){0,3}"
    }

    proptest! {
        #[test]
        fn serialize_then_revalidate_is_identity(
            captions in prop::collection::vec((arb_text(), prop::collection::vec(arb_text(), 0..3)), 5..=15),
            seed in arb_text(),
            opts in prop::collection::btree_set("[a-z]{1,6}", 2..=5),
            ans in 0usize..5,
        ) {
            let frames: Vec<Value> = captions
                .iter()
                .map(|(c, objs)| json!({"caption": c, "object_captions": objs}))
                .collect();
            let raw = json!({
                "id": "p", "source_tag": "ego_scenario",
                "condition": {"source_tag": "ego_scenario", "seed_text": seed},
                "frames": frames,
            });
            let t = validate_tideo(&raw).unwrap();
            let again = validate_tideo(&t.to_value()).unwrap();
            prop_assert_eq!(&t, &again);

            let options: Vec<String> = opts.into_iter().collect();
            let answer_index = ans % options.len();
            let ann = json!({"tideo_id": "p", "dense_description": "d",
                "qa": [{"question": "what happens", "options": options, "answer_index": answer_index}]});
            let a = validate_annotation(&ann, &t).unwrap();
            let a2 = validate_annotation(&a.to_value(), &t).unwrap();
            prop_assert_eq!(&a, &a2);
            let norm = normalize_option(a.qa_items[0].answer());
            prop_assert_eq!(a.qa_items[0].options.iter().filter(|o| normalize_option(o) == norm).count(), 1);
        }
    }
}
