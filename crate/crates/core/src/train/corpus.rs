use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SrmError};
use crate::tokenizer;

/// Byte-tokenized text sampled as random windows.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCorpus {
    pub tokens: Vec<u32>,
}

impl TextCorpus {
    pub fn from_text(text: &str) -> Self {
        TextCorpus {
            tokens: tokenizer::encode(text),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(TextCorpus {
            tokens: bytes.into_iter().map(u32::from).collect(),
        })
    }

    /// `batch` windows of `seq_len` tokens, each starting with BOS. Every
    /// position but the last predicts its successor.
    pub fn sample(&self, seq_len: usize, batch: usize, seed: u64) -> Result<(Vec<Vec<u32>>, Vec<Vec<bool>>)> {
        if seq_len < 2 {
            return Err(SrmError::config("seq_len", "windows need at least two tokens"));
        }
        let body = seq_len - 1;
        if self.tokens.len() < body {
            return Err(SrmError::config(
                "data",
                format!("corpus has {} tokens, windows need {body}", self.tokens.len()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens = Vec::with_capacity(batch);
        let mut mask = Vec::with_capacity(batch);
        for _ in 0..batch {
            let start = rng.gen_range(0..=self.tokens.len() - body);
            let mut row = Vec::with_capacity(seq_len);
            row.push(tokenizer::BOS);
            row.extend_from_slice(&self.tokens[start..start + body]);
            let mut m = vec![true; seq_len];
            m[seq_len - 1] = false;
            tokens.push(row);
            mask.push(m);
        }
        Ok((tokens, mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_come_from_the_text() {
        let c = TextCorpus::from_text("abcdefgh");
        let (t, m) = c.sample(4, 5, 1).unwrap();
        for (row, mask) in t.iter().zip(&m) {
            assert_eq!(row[0], tokenizer::BOS);
            let s = tokenizer::decode(&row[1..]);
            assert!("abcdefgh".contains(&s));
            assert_eq!(mask, &vec![true, true, true, false]);
        }
        assert!(c.sample(10, 1, 0).is_err());
    }
}
