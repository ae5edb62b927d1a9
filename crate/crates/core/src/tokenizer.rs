//! Word-level tokenizer for the bundled backbone.
//!
//! Option letters such as `(B)` are single tokens so a selection answer is
//! one generation step away from being parsed.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;

fn token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\([A-E]\)|\w+|[^\w\s]").expect("valid regex"))
}

/// Splits text into word, option-letter and punctuation pieces.
pub fn pieces(text: &str) -> Vec<&str> {
    token_re().find_iter(text).map(|m| m.as_str()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Specials first, then every piece seen in `texts` in sorted order.
    pub fn build<'t>(texts: impl IntoIterator<Item = &'t str>) -> Self {
        let mut seen = BTreeSet::new();
        for t in texts {
            seen.extend(pieces(t).into_iter().map(str::to_string));
        }
        let specials = [PAD, UNK, BOS, EOS];
        let mut tokens: Vec<String> = specials.iter().map(|s| s.to_string()).collect();
        tokens.extend(seen.into_iter().filter(|t| !specials.contains(&t.as_str())));
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        pieces(text).into_iter().map(|p| self.id(p).unwrap_or(UNK_ID)).collect()
    }

    /// Joins tokens back into text, dropping specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut glue_next = false;
        for &id in ids {
            if id <= EOS_ID {
                continue;
            }
            let t = self.token(id);
            let attach = matches!(t, "." | "," | "?" | "!" | ":" | ";" | ")" | "'");
            if !out.is_empty() && !attach && !glue_next {
                out.push(' ');
            }
            out.push_str(t);
            glue_next = matches!(t, "(" | "'");
        }
        out
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn option_letters_are_single_pieces() {
        assert_eq!(pieces("The correct choice is (B)."), vec!["The", "correct", "choice", "is", "(B)", "."]);
        assert_eq!(pieces("(A): cup. (F)"), vec!["(A)", ":", "cup", ".", "(", "F", ")"]);
    }

    #[test]
    fn build_encode_decode() {
        let v = Vocab::build(["Answer: the cup.", "the pan"]);
        assert_eq!(&v.tokens()[..4], &[PAD, UNK, BOS, EOS]);
        let ids = v.encode("the cup. kettle");
        assert_eq!(ids[3], UNK_ID);
        assert_eq!(v.decode(&v.encode("Answer: the pan.")), "Answer: the pan.");
        assert_eq!(v.decode(&[BOS_ID, v.id("the").unwrap(), EOS_ID]), "the");
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocab::build(["a b c"]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("b"), v.id("b"));
    }
}
