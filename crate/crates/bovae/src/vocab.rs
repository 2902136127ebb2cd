//! Tokenization, vocabulary, and the denoising corruption applied to
//! autoencoder inputs.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Content token ids; reserved ids never appear inside one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let toks: Vec<String> = text.split_whitespace().map(|t| t.to_lowercase()).collect();
    if toks.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(toks)
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from a corpus, keeping tokens that occur at least `min_freq`
    /// times. Content ids are assigned by descending frequency, ties broken
    /// lexicographically, after the four reserved ids.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            any = true;
            for tok in tokenize(line)? {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(Error::EmptyCorpus);
        }
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_content_tokens(kept.into_iter().map(|(t, _)| t)))
    }

    pub fn from_content_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens: all, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Unknown tokens map to the unk id.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let ids = tokenize(text)?
            .iter()
            .map(|t| self.id_of(t).unwrap_or(UNK))
            .collect();
        Ok(TokenSequence { ids })
    }

    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.ids
            .iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One content token per line; line index is the id after the reserved
    /// block.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.tokens[RESERVED.len()..].join("\n");
        std::fs::write(path, body + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        Ok(Self::from_content_tokens(
            body.lines().filter(|l| !l.is_empty()).map(|l| l.to_string()),
        ))
    }
}

/// Denoising corruption: drops each token independently with probability
/// `p`. A sequence never corrupts to empty; if every token is dropped, one
/// survivor is chosen uniformly.
pub fn corrupt(seq: &TokenSequence, p: f64, rng: &mut Rng) -> TokenSequence {
    assert!((0.0..1.0).contains(&p), "corruption probability {p} outside [0,1)");
    let kept: Vec<usize> = seq
        .ids
        .iter()
        .filter(|_| rng.uniform() >= p)
        .copied()
        .collect();
    if kept.is_empty() && !seq.ids.is_empty() {
        let i = rng.below(seq.ids.len());
        return TokenSequence { ids: vec![seq.ids[i]] };
    }
    TokenSequence { ids: kept }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_splits() {
        assert_eq!(tokenize("The  Cat\tSAT").unwrap(), vec!["the", "cat", "sat"]);
        assert!(matches!(tokenize("   "), Err(Error::EmptyText)));
    }

    #[test]
    fn reserved_ids_are_stable() {
        let v = Vocabulary::from_content_tokens(["a".to_string()]);
        assert_eq!(v.id_of("<pad>"), Some(PAD));
        assert_eq!(v.id_of("<unk>"), Some(UNK));
        assert_eq!(v.id_of("<s>"), Some(BOS));
        assert_eq!(v.id_of("</s>"), Some(EOS));
        assert_eq!(v.id_of("a"), Some(4));
    }

    #[test]
    fn min_frequency_filters_rare_tokens() {
        let lines = ["a a b", "a c b"];
        let v = Vocabulary::build(lines, 2).unwrap();
        assert!(v.id_of("a").is_some());
        assert!(v.id_of("b").is_some());
        assert!(v.id_of("c").is_none());
        let seq = v.encode("a c b").unwrap();
        assert_eq!(seq.ids[1], UNK);
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocabulary::build(["the cat sat the cat sat"], 2).unwrap();
        let seq = v.encode("the cat sat").unwrap();
        assert_eq!(v.decode(&seq), "the cat sat");
    }

    #[test]
    fn save_load_preserves_ids() {
        let v = Vocabulary::build(["x y z x y z x"], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let w = Vocabulary::load(&path).unwrap();
        assert_eq!(v.size(), w.size());
        for id in 0..v.size() {
            assert_eq!(v.token(id), w.token(id));
        }
    }

    #[test]
    fn corrupt_never_empties() {
        let mut rng = Rng::new(9);
        let seq = TokenSequence { ids: vec![5, 6, 7] };
        for _ in 0..200 {
            let c = corrupt(&seq, 0.95, &mut rng);
            assert!(!c.is_empty());
            for id in &c.ids {
                assert!(seq.ids.contains(id));
            }
        }
    }

    #[test]
    fn corrupt_with_zero_probability_is_identity() {
        let mut rng = Rng::new(1);
        let seq = TokenSequence { ids: vec![4, 5, 6, 7] };
        assert_eq!(corrupt(&seq, 0.0, &mut rng), seq);
    }

    #[test]
    fn corrupt_preserves_relative_order() {
        let mut rng = Rng::new(2);
        let seq = TokenSequence { ids: (4..20).collect() };
        for _ in 0..50 {
            let c = corrupt(&seq, 0.5, &mut rng);
            let mut last = 0;
            for &id in &c.ids {
                assert!(id > last);
                last = id;
            }
        }
    }
}
