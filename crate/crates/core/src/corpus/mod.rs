//! Corpus ingestion: JSONL loaders, tokenization, splitting, statistics and
//! the synthetic figurative-language grammar.

mod synth;
mod vocab;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use synth::{class_lookup, OracleChecker, SyntheticGrammar, SyntheticGrammarConfig};
pub use vocab::{
    TokenId, TokenMode, TokenSequence, Vocab, BOS, DELIM, DELIM_GLYPH, EOS, PAD, RESERVED, UNK,
};

/// One corpus sentence. `label` is 1 for a metaphor, 0 for literal text and
/// absent for unlabelled data. `target` is the optional metaphor subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawExample {
    pub text: String,
    pub label: Option<u8>,
    pub target: Option<String>,
}

impl RawExample {
    pub fn labelled(text: impl Into<String>, label: u8) -> Self {
        Self {
            text: text.into(),
            label: Some(label),
            target: None,
        }
    }

    pub fn unlabelled(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            label: None,
            target: None,
        }
    }

    pub fn with_target(mut self, target: impl Into<String>) -> Self {
        self.target = Some(target.into());
        self
    }

    pub fn is_metaphor(&self) -> Option<bool> {
        self.label.map(|l| l == 1)
    }

    /// One JSONL line: `{"label":..,"target":..,"text":..}` with absent fields omitted.
    pub fn to_json_line(&self) -> String {
        let mut obj = serde_json::Map::new();
        if let Some(l) = self.label {
            obj.insert("label".into(), Value::from(l));
        }
        if let Some(t) = &self.target {
            obj.insert("target".into(), Value::from(t.as_str()));
        }
        obj.insert("text".into(), Value::from(self.text.as_str()));
        Value::Object(obj).to_string()
    }
}

/// Reads a labelled JSONL file: one `{"text": .., "label": 0|1}` per line.
pub fn load_labelled(path: &Path) -> Result<Vec<RawExample>> {
    load_jsonl(path, true)
}

/// Reads an unlabelled JSONL file; any `label` field is discarded.
pub fn load_unlabelled(path: &Path) -> Result<Vec<RawExample>> {
    load_jsonl(path, false)
}

fn load_jsonl(path: &Path, labelled: bool) -> Result<Vec<RawExample>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&bytes, labelled)
}

pub(crate) fn parse_jsonl(bytes: &[u8], labelled: bool) -> Result<Vec<RawExample>> {
    let mut out = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = i + 1;
        let text = std::str::from_utf8(raw).map_err(|_| Error::Utf8 { line })?;
        if text.trim().is_empty() {
            continue;
        }
        out.push(parse_line(text, line, labelled)?);
    }
    Ok(out)
}

fn parse_line(line_text: &str, line: usize, labelled: bool) -> Result<RawExample> {
    let value: Value = serde_json::from_str(line_text).map_err(|e| Error::Json {
        line,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Json {
        line,
        message: "expected a JSON object".into(),
    })?;
    let invalid = |message: &str| Error::InvalidExample {
        line,
        message: message.into(),
    };
    let text = obj
        .get("text")
        .and_then(Value::as_str)
        .ok_or_else(|| invalid("missing string field \"text\""))?;
    if text.trim().is_empty() {
        return Err(invalid("text is empty"));
    }
    let target = match obj.get("target") {
        None | Some(Value::Null) => None,
        Some(Value::String(t)) if !t.trim().is_empty() => Some(t.clone()),
        Some(_) => return Err(invalid("target must be a non-empty string")),
    };
    let label = if labelled {
        match obj.get("label") {
            None | Some(Value::Null) => return Err(Error::MissingLabel { line }),
            Some(v) => match v.as_u64() {
                Some(l @ (0 | 1)) => Some(l as u8),
                _ => return Err(invalid("label must be 0 or 1")),
            },
        }
    } else {
        None
    };
    Ok(RawExample {
        text: text.to_string(),
        label,
        target,
    })
}

pub fn write_jsonl(path: &Path, examples: &[RawExample]) -> Result<()> {
    let mut s = String::new();
    for e in examples {
        s.push_str(&e.to_json_line());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Seeded shuffle, then the first `⌊n·ratio⌋` items go to the first half.
pub fn split<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::Empty("cannot split an empty list".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0,1), got {ratio}")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_first = (items.len() as f64 * ratio).floor() as usize;
    let first = order[..n_first].iter().map(|&i| items[i].clone()).collect();
    let second = order[n_first..].iter().map(|&i| items[i].clone()).collect();
    Ok((first, second))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_sentences: usize,
    pub n_metaphors: usize,
    pub n_literal: usize,
    pub n_tokens: usize,
    pub tokens_per_sentence: f64,
}

pub fn stats(examples: &[RawExample], mode: TokenMode) -> CorpusStats {
    let n_tokens: usize = examples.iter().map(|e| mode.tokenize(&e.text).len()).sum();
    CorpusStats {
        n_sentences: examples.len(),
        n_metaphors: examples.iter().filter(|e| e.label == Some(1)).count(),
        n_literal: examples.iter().filter(|e| e.label == Some(0)).count(),
        n_tokens,
        tokens_per_sentence: if examples.is_empty() {
            0.0
        } else {
            n_tokens as f64 / examples.len() as f64
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn labelled_line_maps_fields() {
        let ex = parse_jsonl(br#"{"text":"ab c","label":1}"#, true).unwrap();
        assert_eq!(ex, vec![RawExample::labelled("ab c", 1)]);
        assert!(parse_jsonl(b"", true).unwrap().is_empty());
    }

    #[test]
    fn missing_label_names_the_line() {
        let err = parse_jsonl(br#"{"text":"x"}"#, true).unwrap_err();
        assert_eq!(err.to_string(), "missing label at line 1");
        let err = parse_jsonl(b"{\"text\":\"a\",\"label\":0}\n{oops", true).unwrap_err();
        assert!(matches!(err, Error::Json { line: 2, .. }), "{err}");
        assert!(parse_jsonl(br#"{"text":"a","label":2}"#, true).is_err());
        assert!(parse_jsonl(br#"{"text":"  ","label":1}"#, true).is_err());
    }

    #[test]
    fn unlabelled_loader_discards_labels() {
        let ex = parse_jsonl(b"{\"text\":\"hello\"}\n{\"text\":\"x\",\"label\":1}\n", false).unwrap();
        assert_eq!(ex, vec![RawExample::unlabelled("hello"), RawExample::unlabelled("x")]);
        let err = parse_jsonl(b"{\"text\":\"\xff\"}", false).unwrap_err();
        assert!(matches!(err, Error::Utf8 { line: 1 }));
    }

    #[test]
    fn optional_target_is_read() {
        let ex = parse_jsonl(br#"{"text":"s1 like o2","label":1,"target":"s1"}"#, true).unwrap();
        assert_eq!(ex[0].target.as_deref(), Some("s1"));
        let line = ex[0].to_json_line();
        assert_eq!(parse_jsonl(line.as_bytes(), true).unwrap(), ex);
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let items: Vec<u32> = (0..10).collect();
        let (a, b) = split(&items, 0.8, 7).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(split(&items, 0.8, 7).unwrap(), (a, b));
        let (a, b) = split(&items[..5], 0.5, 1).unwrap();
        assert_eq!((a.len(), b.len()), (2, 3));
        assert!(split::<u32>(&[], 0.5, 1).is_err());
        assert!(split(&items, 1.0, 1).is_err());
    }

    #[test]
    fn stats_counts() {
        assert_eq!(stats(&[], TokenMode::Char), CorpusStats::default());
        let ex = [
            RawExample::labelled("ab", 1),
            RawExample::labelled("abcd", 0),
            RawExample::unlabelled("abcdef"),
        ];
        let s = stats(&ex, TokenMode::Char);
        assert_eq!((s.n_sentences, s.n_metaphors, s.n_literal, s.n_tokens), (3, 1, 1, 12));
        assert_eq!(s.tokens_per_sentence, 4.0);
    }

    proptest! {
        #[test]
        fn split_partitions_input(n in 1usize..60, ratio in 0.05f64..0.95, seed in any::<u64>()) {
            let items: Vec<usize> = (0..n).collect();
            let (a, b) = split(&items, ratio, seed).unwrap();
            let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, items);
        }
    }
}
