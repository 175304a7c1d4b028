//! Shared fixtures for the benchmarks.

use figlm_core::corpus::{RawExample, SyntheticGrammar, SyntheticGrammarConfig, TokenMode, TokenSequence, Vocab};
use figlm_core::training::encode_examples;
use figlm_core::{LMParams, ModelConfig};

/// A default synthetic corpus, its vocabulary and prompted encodings.
pub struct Fixture {
    pub vocab: Vocab,
    pub seqs: Vec<TokenSequence>,
}

pub fn fixture(n: usize) -> Fixture {
    let g = SyntheticGrammar::new(SyntheticGrammarConfig::default()).expect("default grammar");
    let (labelled, unlabelled) = g.generate(n, 1).expect("corpus");
    let all: Vec<RawExample> = labelled.iter().chain(&unlabelled).cloned().collect();
    let vocab = Vocab::build(&all, TokenMode::Word).expect("vocab");
    let seqs = encode_examples(&vocab, &labelled, |e| g.extract_target(&e.text));
    Fixture { vocab, seqs }
}

/// Desk-sized model for `vocab`.
pub fn desk_model(vocab: &Vocab) -> LMParams<f32> {
    LMParams::init(ModelConfig::desk(vocab.len())).expect("desk config")
}
