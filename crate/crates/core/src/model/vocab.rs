use std::collections::HashMap;

use crate::data::InstructionClass;
use crate::error::{Error, Result};

pub const EOS: &str = "<eos>";
pub const CAPTION: &str = "<cap>";
pub const QUESTION: &str = "<q>";
pub const ANSWER: &str = "<a>";

/// Special tokens, always the first ids of a vocabulary in this order.
pub const SPECIALS: [&str; 7] = [
    EOS,
    CAPTION,
    QUESTION,
    ANSWER,
    "<conversation>",
    "<detailed_description>",
    "<complex_reasoning>",
];

/// Closed word-level vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials followed by `words`.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.iter().map(|w| w.as_ref().to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuild from a full token list; the specials must lead it.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() + 1 || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Config("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn words(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    pub fn eos(&self) -> usize {
        0
    }

    pub fn caption_marker(&self) -> usize {
        1
    }

    pub fn question_marker(&self) -> usize {
        2
    }

    pub fn answer_marker(&self) -> usize {
        3
    }

    pub fn class_tag(&self, class: InstructionClass) -> usize {
        match class {
            InstructionClass::Conversation => 4,
            InstructionClass::DetailedDescription => 5,
            InstructionClass::ComplexReasoning => 6,
        }
    }

    /// Markers and tags never appear inside decoded text.
    pub fn is_marker(&self, id: usize) -> bool {
        id != self.eos() && id < SPECIALS.len()
    }
}
