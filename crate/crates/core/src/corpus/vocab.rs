use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::RawExample;
use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const DELIM: TokenId = 3;
pub const UNK: TokenId = 4;
pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<delim>", "<unk>"];

/// Glyph that `decode` renders in place of the delimiter token.
pub const DELIM_GLYPH: &str = "‖";

/// How text is split into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    /// One token per Unicode scalar value.
    #[default]
    Char,
    /// Whitespace-separated words.
    Word,
}

impl TokenMode {
    pub fn tokenize(self, text: &str) -> Vec<&str> {
        match self {
            TokenMode::Char => text
                .char_indices()
                .map(|(i, c)| &text[i..i + c.len_utf8()])
                .collect(),
            TokenMode::Word => text.split_whitespace().collect(),
        }
    }

    fn join(self, tokens: &[&str]) -> String {
        match self {
            TokenMode::Char => tokens.concat(),
            TokenMode::Word => tokens.join(" "),
        }
    }
}

/// An encoded sentence `w_0..w_n` with an optional metaphor label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub label: Option<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_metaphor(&self) -> Option<bool> {
        self.label.map(|l| l == 1)
    }
}

/// Token ↔ id bijection with the reserved tokens at ids 0–4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    mode: TokenMode,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    #[serde(default)]
    mode: TokenMode,
}

impl Vocab {
    /// Reserved tokens followed by the sorted unique tokens of `examples`.
    pub fn build(examples: &[RawExample], mode: TokenMode) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty("cannot build a vocabulary from zero examples".into()));
        }
        let uniq: BTreeSet<&str> = examples
            .iter()
            .flat_map(|e| mode.tokenize(&e.text))
            .chain(examples.iter().filter_map(|e| e.target.as_deref()).flat_map(|t| mode.tokenize(t)))
            .filter(|t| !RESERVED.contains(t))
            .collect();
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(uniq.into_iter().map(str::to_string))
            .collect();
        Self::from_tokens(tokens, mode)
    }

    pub fn from_tokens(tokens: Vec<String>, mode: TokenMode) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Config("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> TokenId {
        match self.index.get(token) {
            Some(&id) if id >= RESERVED.len() => id,
            _ => UNK,
        }
    }

    pub fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        self.mode.tokenize(text)
    }

    /// Ids of `text` without any framing tokens.
    pub fn ids(&self, text: &str) -> Vec<TokenId> {
        self.tokenize(text).into_iter().map(|t| self.id(t)).collect()
    }

    /// `text` tokens followed by EOS; unknown tokens map to UNK.
    pub fn encode(&self, example: &RawExample) -> TokenSequence {
        let mut ids = self.ids(&example.text);
        ids.push(EOS);
        TokenSequence {
            ids,
            label: example.label,
        }
    }

    /// `[BOS, target…, DELIM, text…, EOS]`, the layout shared by training,
    /// detection and generation prompts.
    pub fn encode_prompted(&self, target: Option<&str>, example: &RawExample) -> TokenSequence {
        let mut ids = vec![BOS];
        if let Some(t) = target {
            ids.extend(self.ids(t));
        }
        ids.push(DELIM);
        ids.extend(self.ids(&example.text));
        ids.push(EOS);
        TokenSequence {
            ids,
            label: example.label,
        }
    }

    /// `[BOS, text…, EOS]`, the layout of the perplexity scorer.
    pub fn encode_sentence(&self, text: &str) -> Vec<TokenId> {
        let mut ids = vec![BOS];
        ids.extend(self.ids(text));
        ids.push(EOS);
        ids
    }

    /// Renders ids as text, dropping reserved tokens except DELIM.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(Error::OutOfRange {
                what: "token id",
                index: id,
                limit: self.len(),
            })?;
            match id {
                DELIM => parts.push(DELIM_GLYPH),
                _ if id < RESERVED.len() => {}
                _ => parts.push(tok),
            }
        }
        Ok(self.mode.join(&parts))
    }

    /// Stable content hash of the token list and mode.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.mode).expect("mode serializes"));
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&VocabFile {
            tokens: self.tokens.clone(),
            mode: self.mode,
        })
        .expect("vocab serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile =
            serde_json::from_str(s).map_err(|e| Error::Json { line: 1, message: e.to_string() })?;
        Self::from_tokens(f.tokens, f.mode)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(text: &str) -> RawExample {
        RawExample::unlabelled(text)
    }

    #[test]
    fn two_unique_chars() {
        let v = Vocab::build(&[ex("ba"), ex("ab")], TokenMode::Char).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(&v.tokens()[5..], ["a", "b"]);
        let v = Vocab::build(&[ex("a"), ex("a")], TokenMode::Char).unwrap();
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(Vocab::build(&[], TokenMode::Char).is_err());
    }

    #[test]
    fn encode_appends_eos_and_maps_unknowns() {
        let v = Vocab::build(&[ex("ba")], TokenMode::Char).unwrap();
        assert_eq!(v.encode(&ex("ab")).ids, vec![v.id("a"), v.id("b"), EOS]);
        assert_eq!(v.encode(&ex("az")).ids, vec![v.id("a"), UNK, EOS]);
    }

    #[test]
    fn decode_renders_delimiter_and_rejects_bad_ids() {
        let v = Vocab::build(&[ex("s1 like o7")], TokenMode::Word).unwrap();
        let seq = v.encode_prompted(Some("s1"), &ex("s1 like o7"));
        assert_eq!(v.decode(&seq.ids).unwrap(), format!("s1 {DELIM_GLYPH} s1 like o7"));
        assert!(v.decode(&[v.len()]).is_err());
    }

    #[test]
    fn reserved_names_in_text_are_unknown() {
        let v = Vocab::build(&[ex("a <eos> b")], TokenMode::Word).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.encode(&ex("<eos>")).ids, vec![UNK, EOS]);
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let v = Vocab::build(&[ex("hello world")], TokenMode::Word).unwrap();
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert!(Vocab::from_json(r#"{"tokens":["a","b"]}"#).is_err());
        let dup = r#"{"tokens":["<pad>","<bos>","<eos>","<delim>","<unk>","a","a"]}"#;
        assert!(Vocab::from_json(dup).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn vocab_ignores_example_order(mut texts in prop::collection::vec("[a-f ]{1,8}", 1..10), seed in any::<u64>()) {
            let a = Vocab::build(&texts.iter().map(|t| ex(t)).collect::<Vec<_>>(), TokenMode::Char).unwrap();
            let n = texts.len();
            texts.rotate_left((seed as usize) % n);
            texts.reverse();
            let b = Vocab::build(&texts.iter().map(|t| ex(t)).collect::<Vec<_>>(), TokenMode::Char).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn char_roundtrip(text in "[a-z你好 ,.]{1,20}") {
            let v = Vocab::build(&[ex("abcdefghijklmnopqrstuvwxyz你好 ,.")], TokenMode::Char).unwrap();
            let seq = v.encode(&ex(&text));
            prop_assert_eq!(v.decode(&seq.ids).unwrap(), text);
        }

        #[test]
        fn word_roundtrip(words in prop::collection::vec("(s[0-9]|o[0-9]|like|f[0-4])", 1..12)) {
            let v = Vocab::build(&[ex("s0 s1 s2 s3 s4 s5 s6 s7 s8 s9 o0 o1 o2 o3 o4 o5 o6 o7 o8 o9 like f0 f1 f2 f3 f4")], TokenMode::Word).unwrap();
            let text = words.join(" ");
            prop_assert_eq!(v.decode(&v.encode(&ex(&text)).ids).unwrap(), text);
        }
    }
}
