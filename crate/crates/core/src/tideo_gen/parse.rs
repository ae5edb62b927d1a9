use std::sync::OnceLock;

use regex::Regex;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tideo_data::{
    validate_annotation, validate_tideo, ConditionRecord, SchemaError, Tideo, TideoAnnotation,
};

/// The response layout requested from the generator and accepted by [`parse_generation`].
pub const RESPONSE_FORMAT: &str = "\
[Frame 1]
Caption: <what the scene shows>
Object: <short caption of a main object>
Object: <short caption of another main object>
[Frame 2]
...
[Description]
<dense description of the whole video>
[Question 1]
Question: <question about the video>
(A) <option>
(B) <option>
(C) <option>
(D) <option>
(E) <option>
Answer: (<letter of the correct option>)
[Question 2]
...";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("unparseable response at byte {offset}: {reason}")]
    UnparseableStructure { offset: usize, reason: String },
    #[error("parsed response violates the schema: {source}")]
    SchemaViolation { source: SchemaError, raw_response: String },
}

impl ParseError {
    pub fn kind(&self) -> &'static str {
        match self {
            ParseError::UnparseableStructure { .. } => "unparseable_structure",
            ParseError::SchemaViolation { .. } => "schema_violation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Start,
    Frame,
    Description,
    Question,
}

struct FrameDraft {
    offset: usize,
    caption: Option<String>,
    objects: Vec<String>,
}

struct QuestionDraft {
    offset: usize,
    question: Option<String>,
    question_type: Option<String>,
    options: Vec<String>,
    answer: Option<usize>,
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\[\s*(frame|description|question)\s*(\d+)?\s*\]$").unwrap())
}

fn option_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\(([A-E])\):?\s*(.*)$").unwrap())
}

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\(?([A-E])\)?\.?$").unwrap())
}

fn unparseable(offset: usize, reason: impl Into<String>) -> ParseError {
    ParseError::UnparseableStructure { offset, reason: reason.into() }
}

fn labeled<'l>(line: &'l str, label: &str) -> Option<&'l str> {
    let (head, rest) = line.split_once(':')?;
    head.trim().eq_ignore_ascii_case(label).then(|| rest.trim())
}

/// Dedup key: sha256 over the normalized frame captions, one per line.
pub fn dedup_key(tideo: &Tideo) -> String {
    let mut h = Sha256::new();
    for f in &tideo.frames {
        let norm = f.caption.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        h.update(norm.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Parses a generator response into a validated tideo and annotation.
///
/// The parser never repairs input: any line that does not fit the layout in
/// [`RESPONSE_FORMAT`] is reported with its byte offset.
pub fn parse_generation(
    response_text: &str,
    condition: &ConditionRecord,
) -> Result<(Tideo, TideoAnnotation), ParseError> {
    let mut section = Section::Start;
    let mut frames: Vec<FrameDraft> = Vec::new();
    let mut description: Option<Vec<String>> = None;
    let mut questions: Vec<QuestionDraft> = Vec::new();

    let mut offset = 0usize;
    for raw_line in response_text.split_inclusive('\n') {
        let line_offset = offset;
        offset += raw_line.len();
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(caps) = header_re().captures(line) {
            let kind = caps[1].to_lowercase();
            let number: Option<usize> = caps.get(2).and_then(|m| m.as_str().parse().ok());
            match kind.as_str() {
                "frame" => {
                    if !matches!(section, Section::Start | Section::Frame) {
                        return Err(unparseable(line_offset, "frame after the description"));
                    }
                    if number != Some(frames.len() + 1) {
                        return Err(unparseable(line_offset, format!("expected [Frame {}]", frames.len() + 1)));
                    }
                    frames.push(FrameDraft { offset: line_offset, caption: None, objects: Vec::new() });
                    section = Section::Frame;
                }
                "description" => {
                    if section != Section::Frame || number.is_some() {
                        return Err(unparseable(line_offset, "description must follow the frames exactly once"));
                    }
                    description = Some(Vec::new());
                    section = Section::Description;
                }
                _ => {
                    if !matches!(section, Section::Description | Section::Question) {
                        return Err(unparseable(line_offset, "question before the description"));
                    }
                    if number != Some(questions.len() + 1) {
                        return Err(unparseable(line_offset, format!("expected [Question {}]", questions.len() + 1)));
                    }
                    questions.push(QuestionDraft {
                        offset: line_offset,
                        question: None,
                        question_type: None,
                        options: Vec::new(),
                        answer: None,
                    });
                    section = Section::Question;
                }
            }
            continue;
        }
        match section {
            Section::Start => return Err(unparseable(line_offset, "text before the first frame")),
            Section::Frame => {
                let f = frames.last_mut().expect("frame open");
                if let Some(c) = labeled(line, "caption") {
                    if f.caption.is_some() {
                        return Err(unparseable(line_offset, "second caption in frame"));
                    }
                    f.caption = Some(c.to_string());
                } else if let Some(o) = labeled(line, "object") {
                    f.objects.push(o.to_string());
                } else {
                    return Err(unparseable(line_offset, "expected `Caption:` or `Object:`"));
                }
            }
            Section::Description => description.as_mut().expect("description open").push(line.to_string()),
            Section::Question => {
                let q = questions.last_mut().expect("question open");
                if let Some(text) = labeled(line, "question") {
                    if q.question.is_some() || !q.options.is_empty() {
                        return Err(unparseable(line_offset, "question text must come first, once"));
                    }
                    q.question = Some(text.to_string());
                } else if let Some(t) = labeled(line, "type") {
                    q.question_type = Some(t.to_lowercase());
                } else if let Some(caps) = option_re().captures(line) {
                    let letter = caps[1].as_bytes()[0];
                    if q.question.is_none() || q.answer.is_some() {
                        return Err(unparseable(line_offset, "option outside the question block"));
                    }
                    if usize::from(letter - b'A') != q.options.len() {
                        return Err(unparseable(line_offset, "options must be lettered A, B, C, ... in order"));
                    }
                    q.options.push(caps[2].trim().to_string());
                } else if let Some(a) = labeled(line, "answer") {
                    if q.answer.is_some() {
                        return Err(unparseable(line_offset, "second answer line"));
                    }
                    let caps = answer_re()
                        .captures(a)
                        .ok_or_else(|| unparseable(line_offset, "answer must be an option letter"))?;
                    q.answer = Some(usize::from(caps[1].as_bytes()[0] - b'A'));
                } else {
                    return Err(unparseable(line_offset, "unexpected line in question block"));
                }
            }
        }
    }

    let end = response_text.len();
    if frames.is_empty() {
        return Err(unparseable(end, "no frames"));
    }
    let Some(description) = description else {
        return Err(unparseable(end, "missing description section"));
    };
    if questions.is_empty() {
        return Err(unparseable(end, "no questions"));
    }
    let mut frame_values = Vec::with_capacity(frames.len());
    for f in frames {
        let caption = f.caption.ok_or_else(|| unparseable(f.offset, "frame without caption"))?;
        frame_values.push(json!({"caption": caption, "object_captions": f.objects}));
    }
    let mut qa_values = Vec::with_capacity(questions.len());
    for q in questions {
        let question = q.question.ok_or_else(|| unparseable(q.offset, "question block without question"))?;
        let answer = q.answer.ok_or_else(|| unparseable(q.offset, "question block without answer"))?;
        let mut v = json!({"question": question, "options": q.options, "answer_index": answer});
        if let Some(t) = q.question_type {
            v["question_type"] = Value::String(t);
        }
        qa_values.push(v);
    }

    let schema = |source: SchemaError| ParseError::SchemaViolation { source, raw_response: response_text.to_string() };
    // The id is derived from the validated captions, so it is stamped afterwards.
    let tideo_raw = json!({
        "id": "pending",
        "source_tag": condition.source_tag,
        "condition": condition,
        "frames": frame_values,
    });
    let mut tideo = validate_tideo(&tideo_raw).map_err(schema)?;
    tideo.id = format!("tv-{}", &dedup_key(&tideo)[..16]);
    let ann_raw = json!({
        "tideo_id": tideo.id,
        "dense_description": description.join(" "),
        "qa": qa_values,
    });
    let annotation = validate_annotation(&ann_raw, &tideo).map_err(schema)?;
    Ok((tideo, annotation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tideo_data::{QuestionType, SourceTag};

    fn response(frames: usize, with_description: bool) -> String {
        let mut s = String::new();
        for i in 1..=frames {
            s += &format!("[Frame {i}]\nCaption: A cook stirs the pot, step {i}.\nObject: a wooden spoon\n");
        }
        if with_description {
            s += "[Description]\nA cook prepares soup\nin a small kitchen.\n";
        }
        s += "[Question 1]\nQuestion: What does the cook stir?\n(A) a pot\n(B) a bowl\n(C) a cup\n(D) a pan\n(E) a jar\nAnswer: (A)\n";
        s += "[Question 2]\nQuestion: Why is the spoon wooden?\nType: why\n(A) heat\n(B) style\nAnswer: B\n";
        s += "[Question 3]\nQuestion: How many frames show the pot?\n(A) all\n(B) none\n(C) one\nAnswer: (A).\n";
        s
    }

    fn cond() -> ConditionRecord {
        ConditionRecord::new(SourceTag::VideoTitle, "making soup")
    }

    #[test]
    fn well_formed_response_parses() {
        let (t, a) = parse_generation(&response(6, true), &cond()).unwrap();
        assert_eq!(t.frame_count(), 6);
        assert_eq!(t.frames[2].object_captions, vec!["a wooden spoon".to_string()]);
        assert_eq!(a.dense_description, "A cook prepares soup in a small kitchen.");
        assert_eq!(a.qa_items.len(), 3);
        assert_eq!(a.qa_items[1].answer_index, 1);
        assert_eq!(a.qa_items[1].question_type, QuestionType::Why);
        assert_eq!(a.qa_items[2].question_type, QuestionType::How);
        assert_eq!(a.tideo_id, t.id);
        assert!(t.id.starts_with("tv-"));
    }

    #[test]
    fn missing_description_is_structural() {
        let err = parse_generation(&response(6, false), &cond()).unwrap_err();
        assert!(matches!(err, ParseError::UnparseableStructure { .. }), "{err:?}");
    }

    #[test]
    fn sixteen_frames_is_a_schema_violation() {
        let err = parse_generation(&response(16, true), &cond()).unwrap_err();
        match err {
            ParseError::SchemaViolation { source, raw_response } => {
                assert_eq!(source, SchemaError::FrameCountOutOfRange { count: 16 });
                assert!(raw_response.contains("[Frame 16]"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn offsets_point_at_the_bad_line() {
        let text = "[Frame 1]\nCaption: x\nbanana\n";
        assert_eq!(
            parse_generation(text, &cond()).unwrap_err(),
            unparseable(21, "expected `Caption:` or `Object:`")
        );
        assert!(matches!(
            parse_generation("Sure! Here you go.\n", &cond()),
            Err(ParseError::UnparseableStructure { offset: 0, .. })
        ));
    }

    #[test]
    fn same_captions_same_id() {
        let (a, _) = parse_generation(&response(6, true), &cond()).unwrap();
        let shouty = response(6, true).replace("A cook stirs", "A  COOK stirs");
        let (b, _) = parse_generation(&shouty, &cond()).unwrap();
        assert_eq!(a.id, b.id);
    }

    proptest::proptest! {
        #[test]
        fn parser_is_total(text in "(\\[Frame [0-9]\\]|Caption: [a-z ]{0,6}|\\(A\\) x|Answer: [A-F]|\\[Description\\]|\\[Question 1\\]|Question: q|[a-z]{0,4}|\n){0,40}") {
            match parse_generation(&text, &cond()) {
                Ok((t, a)) => {
                    proptest::prop_assert!(validate_tideo(&t.to_value()).is_ok());
                    proptest::prop_assert!(validate_annotation(&a.to_value(), &t).is_ok());
                }
                Err(ParseError::UnparseableStructure { offset, .. }) => proptest::prop_assert!(offset <= text.len()),
                Err(ParseError::SchemaViolation { .. }) => {}
            }
        }
    }
}
