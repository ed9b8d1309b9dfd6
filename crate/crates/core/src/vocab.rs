//! The single vocabulary shared by both conversion directions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Graph;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const HEAD: u32 = 4;
pub const REL: u32 = 5;
pub const TAIL: u32 = 6;
pub const END: u32 = 7;
pub const GRAPH_PREFIX: u32 = 8;
pub const TEXT_PREFIX: u32 = 9;
pub const NUM_RESERVED: u32 = 10;

/// Spellings of the reserved ids, in id order.
pub const RESERVED: [&str; NUM_RESERVED as usize] = [
    "<pad>", "<s>", "</s>", "<unk>", "[H]", "[R]", "[T]", "[E]", "graph:", "text:",
];

pub const STRUCTURAL: [u32; 4] = [HEAD, REL, TAIL, END];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("cannot build a vocabulary from empty corpora")]
    EmptyCorpora,
    #[error("min_freq must be at least 1")]
    MinFreq,
    #[error("id {id} out of range for vocabulary of size {size}")]
    OutOfRange { id: u32, size: usize },
    #[error("EOS at position {0} does not terminate the sequence")]
    InteriorEos(usize),
    #[error("malformed vocabulary: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prefix {
    Graph,
    Text,
    None,
}

impl Prefix {
    pub fn id(self) -> Option<u32> {
        match self {
            Prefix::Graph => Some(GRAPH_PREFIX),
            Prefix::Text => Some(TEXT_PREFIX),
            Prefix::None => None,
        }
    }
}

/// Word spelling as stored in the vocabulary. Words that collide with a
/// reserved spelling (case-insensitively) or already start with `\` get one
/// more leading backslash, keeping the mapping bijective.
fn escape(word: &str) -> String {
    let lower = word.to_lowercase();
    if word.starts_with('\\') || RESERVED.iter().any(|r| r.to_lowercase() == lower) {
        format!("\\{word}")
    } else {
        word.to_string()
    }
}

fn unescape(stored: &str) -> &str {
    stored.strip_prefix('\\').unwrap_or(stored)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        if tokens.len() < NUM_RESERVED as usize {
            return Err(VocabError::Malformed("missing reserved tokens".into()));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens[i] != *r {
                return Err(VocabError::Malformed(format!(
                    "id {i} must be {r:?}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\n') {
                return Err(VocabError::Malformed(format!("bad token at id {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(VocabError::Malformed(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of a token string. Exact reserved spellings (`[H]`, ...) map to their
    /// reserved ids; everything else is a word.
    pub fn id(&self, token: &str) -> Option<u32> {
        if let Some(i) = RESERVED.iter().position(|r| *r == token) {
            return Some(i as u32);
        }
        self.index.get(&escape(token)).copied()
    }

    /// Id of a corpus token inside a sequence: the structural markers keep
    /// their reserved ids, any other spelling is looked up as a word.
    pub fn sequence_id(&self, token: &str) -> Option<u32> {
        match STRUCTURAL.iter().find(|&&id| RESERVED[id as usize] == token) {
            Some(&id) => Some(id),
            None => self.index.get(&escape(token)).copied(),
        }
    }

    /// Surface form of an id (reserved spellings are returned verbatim).
    pub fn token(&self, id: u32) -> Option<&str> {
        let stored = self.tokens.get(id as usize)?;
        Some(if id < NUM_RESERVED {
            stored.as_str()
        } else {
            unescape(stored)
        })
    }

    /// Ids that stand for corpus words, i.e. everything above the reserved block.
    pub fn word_ids(&self) -> std::ops::Range<u32> {
        NUM_RESERVED..self.tokens.len() as u32
    }

    /// One stored token per line; the line number is the id.
    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_lines(s: &str) -> Result<Self, VocabError> {
        Self::from_tokens(s.lines().map(String::from).collect())
    }
}

pub fn build_vocab(
    graphs: &[Graph],
    texts: &[Vec<String>],
    min_freq: usize,
) -> Result<Vocabulary, VocabError> {
    if min_freq == 0 {
        return Err(VocabError::MinFreq);
    }
    if graphs.is_empty() && texts.is_empty() {
        return Err(VocabError::EmptyCorpora);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let graph_tokens = graphs.iter().flat_map(|g| {
        g.triples
            .iter()
            .flat_map(|t| t.head.iter().chain(&t.relation).chain(&t.tail))
    });
    for tok in graph_tokens.chain(texts.iter().flatten()) {
        *counts.entry(tok.as_str()).or_default() += 1;
    }
    let mut words: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(words.into_iter().map(|(w, _)| escape(w)));
    Vocabulary::from_tokens(tokens)
}

/// A sequence of vocabulary ids. At most one EOS, and only as the last id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self, VocabError> {
        for (pos, &id) in ids.iter().enumerate() {
            if id as usize >= vocab_size {
                return Err(VocabError::OutOfRange {
                    id,
                    size: vocab_size,
                });
            }
            if id == EOS && pos + 1 != ids.len() {
                return Err(VocabError::InteriorEos(pos));
            }
        }
        Ok(Self { ids })
    }

    /// Caller guarantees the invariants (used on freshly decoded output).
    pub(crate) fn from_ids_unchecked(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ends_with_eos(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }
}

/// Optional prefix id, then token ids (unknown words become UNK), then EOS.
pub fn encode(tokens: &[String], vocab: &Vocabulary, prefix: Prefix) -> TokenSequence {
    let mut ids = Vec::with_capacity(tokens.len() + 2);
    ids.extend(prefix.id());
    ids.extend(tokens.iter().map(|t| vocab.sequence_id(t).unwrap_or(UNK)));
    ids.push(EOS);
    TokenSequence { ids }
}

/// Tokens up to the first EOS, skipping PAD, BOS and the task prefixes.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> Result<Vec<String>, VocabError> {
    decode_ids(seq.ids(), vocab)
}

pub fn decode_ids(ids: &[u32], vocab: &Vocabulary) -> Result<Vec<String>, VocabError> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let tok = vocab.token(id).ok_or(VocabError::OutOfRange {
            id,
            size: vocab.len(),
        })?;
        match id {
            EOS => break,
            PAD | BOS | GRAPH_PREFIX | TEXT_PREFIX => continue,
            _ => out.push(tok.to_string()),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Triple;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn single_token_corpus() {
        let v = build_vocab(&[], &[toks("a a a")], 1).unwrap();
        assert_eq!(v.len(), 11);
        assert_eq!(v.id("a"), Some(10));
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = build_vocab(&[], &[toks("zeta beta zeta alpha")], 1).unwrap();
        assert_eq!(v.id("zeta"), Some(10));
        assert_eq!(v.id("alpha"), Some(11));
        assert_eq!(v.id("beta"), Some(12));
        let again = build_vocab(&[], &[toks("zeta beta zeta alpha")], 1).unwrap();
        assert_eq!(v, again);
    }

    #[test]
    fn graph_tokens_are_counted() {
        let g = Graph::new(vec![Triple::new(toks("x"), toks("r"), toks("y")).unwrap()]).unwrap();
        let v = build_vocab(&[g], &[], 1).unwrap();
        assert_eq!(v.len(), 13);
    }

    #[test]
    fn min_freq_and_errors() {
        let v = build_vocab(&[], &[toks("a a b")], 2).unwrap();
        assert_eq!(v.len(), 11);
        assert_eq!(encode(&toks("b"), &v, Prefix::None).ids(), &[UNK, EOS]);
        assert_eq!(build_vocab(&[], &[], 1), Err(VocabError::EmptyCorpora));
        assert_eq!(build_vocab(&[], &[toks("a")], 0), Err(VocabError::MinFreq));
    }

    #[test]
    fn encode_contract() {
        let v = build_vocab(&[], &[toks("hello a")], 1).unwrap();
        let hello = v.id("hello").unwrap();
        assert_eq!(encode(&toks("hello"), &v, Prefix::None).ids(), &[hello, EOS]);
        assert_eq!(encode(&toks("unseen"), &v, Prefix::None).ids(), &[UNK, EOS]);
        let g = encode(&toks("[H] a [R] a [T] a [E]"), &v, Prefix::Graph);
        assert_eq!(g.ids()[0], GRAPH_PREFIX);
        assert_eq!(g.ids()[1], HEAD);
        assert_eq!(g.ids()[7], END);
    }

    #[test]
    fn decode_contract() {
        let v = build_vocab(&[], &[toks("a")], 1).unwrap();
        let a = v.id("a").unwrap();
        let only_eos = TokenSequence::new(vec![EOS], v.len()).unwrap();
        assert!(decode(&only_eos, &v).unwrap().is_empty());
        let seq = TokenSequence::new(vec![GRAPH_PREFIX, a, EOS], v.len()).unwrap();
        assert_eq!(decode(&seq, &v).unwrap(), toks("a"));
        assert!(matches!(
            decode_ids(&[99], &v),
            Err(VocabError::OutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn sequence_invariants() {
        assert!(TokenSequence::new(vec![4, EOS], 11).is_ok());
        assert_eq!(
            TokenSequence::new(vec![EOS, 4], 11),
            Err(VocabError::InteriorEos(0))
        );
        assert!(TokenSequence::new(vec![11], 11).is_err());
    }

    #[test]
    fn reserved_spellings_are_escaped() {
        let v = build_vocab(&[], &[toks("[h] \\x graph: plain")], 1).unwrap();
        assert!(v.to_lines().lines().any(|l| l == "\\[h]"));
        assert!(v.to_lines().lines().any(|l| l == "\\graph:"));
        assert!(v.to_lines().lines().any(|l| l == "\\\\x"));
        let word = v.id("[h]").unwrap();
        assert!(word >= NUM_RESERVED);
        assert_eq!(v.id("[H]"), Some(HEAD));
        let seq = encode(&toks("[h] \\x graph: plain"), &v, Prefix::Text);
        assert_eq!(decode(&seq, &v).unwrap(), toks("[h] \\x graph: plain"));
    }

    #[test]
    fn line_serialization_round_trips() {
        let v = build_vocab(&[], &[toks("b a c a [t]")], 1).unwrap();
        let back = Vocabulary::from_lines(&v.to_lines()).unwrap();
        assert_eq!(v, back);
        assert!(Vocabulary::from_lines("a\nb\n").is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(words in proptest::collection::vec("[a-z\\[\\]\\\\:]{1,6}", 0..20)) {
            let v = build_vocab(&[], &[words.clone(), toks("filler")], 1).unwrap();
            let in_vocab: Vec<String> = words
                .into_iter()
                .filter(|w| !RESERVED.contains(&w.as_str()))
                .collect();
            for prefix in [Prefix::None, Prefix::Graph, Prefix::Text] {
                let seq = encode(&in_vocab, &v, prefix);
                prop_assert_eq!(decode(&seq, &v).unwrap(), in_vocab.clone());
            }
        }
    }
}
