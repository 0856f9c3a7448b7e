//! Word-level tokenizer for word embedding models.
//!
//! Words are maximal runs of alphanumeric characters (and `_`); every other
//! non-whitespace character is a token of its own. Whitespace between tokens is
//! kept in a separator map so that [`detokenize`] restores the layout.

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingModel, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerOptions {
    pub lowercase: bool,
}

impl Default for TokenizerOptions {
    fn default() -> Self {
        Self { lowercase: true }
    }
}

/// Tokens plus the `tokens.len() + 1` separators around them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenized {
    pub tokens: Vec<String>,
    pub separators: Vec<String>,
}

impl Tokenized {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Vocabulary ids; unknown words map to [`TokenId::OOV`].
    pub fn ids(&self, model: &EmbeddingModel) -> Vec<TokenId> {
        self.tokens
            .iter()
            .map(|t| model.lookup(t).unwrap_or(TokenId::OOV))
            .collect()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

pub fn tokenize_words(text: &str, opts: TokenizerOptions) -> Tokenized {
    let mut tokens = Vec::new();
    let mut separators = Vec::new();
    let mut sep = String::new();
    let mut word = String::new();

    let flush_word = |word: &mut String, sep: &mut String, tokens: &mut Vec<String>, seps: &mut Vec<String>| {
        if !word.is_empty() {
            seps.push(std::mem::take(sep));
            let w = std::mem::take(word);
            tokens.push(if opts.lowercase { w.to_lowercase() } else { w });
        }
    };

    for c in text.chars() {
        if is_word_char(c) {
            word.push(c);
        } else {
            flush_word(&mut word, &mut sep, &mut tokens, &mut separators);
            if c.is_whitespace() {
                sep.push(c);
            } else {
                separators.push(std::mem::take(&mut sep));
                tokens.push(c.to_string());
            }
        }
    }
    flush_word(&mut word, &mut sep, &mut tokens, &mut separators);
    separators.push(sep);
    Tokenized { tokens, separators }
}

/// Interleaves `tokens` with the separator map of the original text.
pub fn detokenize<S: AsRef<str>>(tokens: &[S], separators: &[String]) -> String {
    let mut out = String::new();
    for (i, tok) in tokens.iter().enumerate() {
        if let Some(s) = separators.get(i) {
            out.push_str(s);
        } else if i > 0 {
            out.push(' ');
        }
        out.push_str(tok.as_ref());
    }
    if let Some(tail) = separators.get(tokens.len()) {
        out.push_str(tail);
    }
    out
}
