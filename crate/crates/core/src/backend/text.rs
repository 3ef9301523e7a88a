//! Whitespace/punctuation tokenizer and hashed word embeddings for the toy
//! text encoder.

use ndarray::Array1;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptPiece {
    Word(String),
    /// `[name]`
    Concept(String),
}

/// Splits a prompt into lowercase words, single punctuation marks and
/// `[name]` concept placeholders. Any `{...}` left in the prompt is an
/// unresolved template placeholder and is rejected.
pub fn tokenize(prompt: &str) -> Result<Vec<PromptPiece>> {
    let mut out = Vec::new();
    let mut chars = prompt.chars().peekable();
    while let Some(&ch) = chars.peek() {
        if ch.is_whitespace() {
            chars.next();
        } else if ch == '[' || ch == '{' {
            let close = if ch == '[' { ']' } else { '}' };
            chars.next();
            let mut name = String::new();
            loop {
                match chars.next() {
                    Some(c) if c == close => break,
                    Some(c) => name.push(c),
                    None => return Err(Error::UnknownPlaceholder(format!("{ch}{name}"))),
                }
            }
            if ch == '{' || name.is_empty() {
                return Err(Error::UnknownPlaceholder(format!("{ch}{name}{close}")));
            }
            out.push(PromptPiece::Concept(name));
        } else if ch.is_alphanumeric() || ch == '\'' || ch == '-' {
            let mut word = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_alphanumeric() || c == '\'' || c == '-' {
                    word.extend(c.to_lowercase());
                    chars.next();
                } else {
                    break;
                }
            }
            out.push(PromptPiece::Word(word));
        } else {
            chars.next();
            out.push(PromptPiece::Word(ch.to_string()));
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("prompt has no tokens".into()));
    }
    Ok(out)
}

/// Deterministic Gaussian embedding of `word`, keyed by the encoder seed.
pub fn word_embedding(word: &str, seed: u64, dim: usize) -> Array1<f64> {
    let mut h = Sha256::new();
    h.update(b"word-embedding\0");
    h.update(seed.to_le_bytes());
    h.update(word.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    let mut rng = rand_chacha::ChaCha8Rng::from_seed(key);
    Array1::from_shape_simple_fn(dim, || super::standard_normal(&mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_words_and_placeholders() {
        let p = tokenize("A chair with [v*] style, zoomed-out").unwrap();
        assert_eq!(
            p,
            vec![
                PromptPiece::Word("a".into()),
                PromptPiece::Word("chair".into()),
                PromptPiece::Word("with".into()),
                PromptPiece::Concept("v*".into()),
                PromptPiece::Word("style".into()),
                PromptPiece::Word(",".into()),
                PromptPiece::Word("zoomed-out".into()),
            ]
        );
    }

    #[test]
    fn rejects_template_leftovers() {
        assert!(matches!(tokenize("A {OBJECT}"), Err(Error::UnknownPlaceholder(_))));
        assert!(tokenize("A [v*").is_err());
        assert!(tokenize("   ").is_err());
    }

    #[test]
    fn embeddings_are_deterministic() {
        assert_eq!(word_embedding("style", 3, 8), word_embedding("style", 3, 8));
        assert_ne!(word_embedding("style", 3, 8), word_embedding("style", 4, 8));
        assert_ne!(word_embedding("style", 3, 8), word_embedding("chair", 3, 8));
    }
}
