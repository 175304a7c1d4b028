//! Shared synthetic-corpus fixture for the integration tests.
#![allow(dead_code)]

use figlm_core::corpus::{split, OracleChecker, SyntheticGrammar, SyntheticGrammarConfig, TokenMode};
use figlm_core::training::{encode_examples, Corpora};
use figlm_core::{RawExample, Vocab};

pub struct Fixture {
    pub grammar: SyntheticGrammar,
    pub oracle: OracleChecker,
    pub vocab: Vocab,
    pub labelled: Vec<RawExample>,
    pub unlabelled: Vec<RawExample>,
    pub corpora: Corpora,
}

impl Fixture {
    pub fn new(seed: u64, n_labelled: usize, n_unlabelled: usize) -> Self {
        let config = SyntheticGrammarConfig {
            seed,
            ..SyntheticGrammarConfig::default()
        };
        let oracle = OracleChecker::new(&config).unwrap();
        let grammar = SyntheticGrammar::new(config).unwrap();
        let (labelled, unlabelled) = grammar.generate(n_labelled, n_unlabelled).unwrap();
        let all: Vec<RawExample> = labelled.iter().chain(&unlabelled).cloned().collect();
        let vocab = Vocab::build(&all, TokenMode::Word).unwrap();
        let corpora = {
            let target_of = |e: &RawExample| grammar.extract_target(&e.text);
            let seqs = encode_examples(&vocab, &labelled, target_of);
            let (train, heldout) = split(&seqs, 0.9, seed).unwrap();
            Corpora {
                train,
                heldout,
                unlabelled: encode_examples(&vocab, &unlabelled, target_of),
            }
        };
        Self {
            grammar,
            oracle,
            vocab,
            labelled,
            unlabelled,
            corpora,
        }
    }

    /// Prompted encoding of a raw sentence, target taken from the grammar.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let target = self.grammar.extract_target(text);
        self.vocab
            .encode_prompted(target.as_deref(), &RawExample::unlabelled(text))
            .ids
    }
}
