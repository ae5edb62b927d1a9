//! Prompt templates for the three alignment tasks.
//!
//! Each template is split around the feature slot: `before` ends with
//! `"Video: "`, the feature block follows, then `after` (which carries the
//! task condition) and finally the target text.

use serde::{Deserialize, Serialize};

pub const OPTION_LETTERS: [char; 5] = ['A', 'B', 'C', 'D', 'E'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Summarization,
    OpenQa,
    MultiChoice,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Summarization, Task::OpenQa, Task::MultiChoice];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Summarization => "summarization",
            Task::OpenQa => "open_qa",
            Task::MultiChoice => "multi_choice",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Text on either side of the feature slot plus the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub before: String,
    pub after: String,
    pub target: String,
}

impl RenderedPrompt {
    /// Full text with `slot` standing in for the feature block.
    pub fn with_slot(&self, slot: &str) -> String {
        format!("{}{slot}{}{}", self.before, self.after, self.target)
    }
}

/// Per-task template strings. `{video}` marks the feature slot; `{question}`
/// and `{choices}` are the condition; the target follows the last character.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplateSet {
    pub summarization: String,
    pub open_qa: String,
    pub multi_choice: String,
}

pub const VIDEO_SLOT: &str = "{video}";

impl Default for PromptTemplateSet {
    fn default() -> Self {
        Self::standard()
    }
}

impl PromptTemplateSet {
    pub fn standard() -> Self {
        Self {
            summarization: "Instruction: Generate a dense description for the video.\nVideo: {video}.\nDescription: ".into(),
            open_qa: "Instruction: Predict the answer based on the video and question.\nVideo: {video}.\nQuestion: {question}.\nAnswer: "
                .into(),
            multi_choice: "Instruction: Choose the correct answer based on the video and question.\nVideo: {video}.\n Question: {question}.\nChoices:\n{choices}\nAnswer: ".into(),
        }
    }

    pub fn template(&self, task: Task) -> &str {
        match task {
            Task::Summarization => &self.summarization,
            Task::OpenQa => &self.open_qa,
            Task::MultiChoice => &self.multi_choice,
        }
    }

    /// Renders the prompt. `question`/`options` are ignored by tasks that
    /// do not use them; `target` is the already formatted target text.
    pub fn render(&self, task: Task, question: &str, options: &[String], target: &str) -> RenderedPrompt {
        let t = self.template(task);
        let (before, after) = t.split_once(VIDEO_SLOT).expect("templates contain the video slot");
        let after = after
            .replace("{question}", strip_period(question))
            .replace("{choices}", &render_choices(options));
        RenderedPrompt { before: before.to_string(), after, target: target.to_string() }
    }
}

/// One trailing period is dropped because the templates add their own.
pub fn strip_period(s: &str) -> &str {
    let s = s.trim();
    s.strip_suffix('.').unwrap_or(s)
}

pub fn render_choices(options: &[String]) -> String {
    options
        .iter()
        .zip(OPTION_LETTERS)
        .map(|(o, l)| format!("({l}): {}.", strip_period(o)))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn multi_choice_target(answer_index: usize) -> String {
    format!("The correct choice is ({}).", OPTION_LETTERS[answer_index])
}

pub fn sentence_target(text: &str) -> String {
    format!("{}.", strip_period(text))
}
