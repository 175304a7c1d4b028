//! Automatic metrics for generated sentences.
//!
//! Perplexity is token-pooled under a separately trained scorer LM (its values
//! are only comparable between runs of this crate). Distinct-n pools n-grams
//! over the whole generated set. The metaphor ratio uses an independently
//! trained classifier that must clear an accuracy gate first.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{split, RawExample, TokenId, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::generation::{self, GenerationRequest};
use crate::model::{LMParams, ModelConfig};
use crate::numeric::{kernels, Float};
use crate::training::{identification_accuracy, TrainConfig, Trainer};

/// Minimum held-out accuracy before a classifier may be used as a metric.
pub const CLASSIFIER_GATE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub meta: f64,
    pub n_evaluated: usize,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
}

/// `exp(total NLL / predicted tokens)` over `[BOS, text…, EOS]` sequences,
/// with EOS counted as a predicted token.
pub fn perplexity<T: Float>(scorer: &LMParams<T>, seqs: &[Vec<TokenId>]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Empty("perplexity needs at least one text".into()));
    }
    let v = scorer.config.vocab_size;
    let mut nll = 0.0;
    let mut count = 0usize;
    for ids in seqs {
        if ids.len() < 2 {
            return Err(Error::Empty("a scored sequence needs at least two tokens".into()));
        }
        let out = scorer.forward(&ids[..ids.len() - 1])?;
        let logits = out.token_logits.data();
        for (row, &t) in ids[1..].iter().enumerate() {
            let lp = kernels::log_softmax(&logits[row * v..(row + 1) * v]);
            nll -= lp[t].to_f64_lossless();
            count += 1;
        }
    }
    Ok((nll / count as f64).exp())
}

pub fn perplexity_of_texts<T: Float>(scorer: &LMParams<T>, vocab: &Vocab, texts: &[String]) -> Result<f64> {
    let seqs: Vec<Vec<TokenId>> = texts.iter().map(|t| vocab.encode_sentence(t)).collect();
    perplexity(scorer, &seqs)
}

/// Unique n-grams over total n-grams, n-grams taken within each text.
pub fn distinct_n<S: AsRef<str>>(texts: &[Vec<S>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("distinct-n needs n ≥ 1".into()));
    }
    let mut seen: HashSet<Vec<&str>> = HashSet::new();
    let mut total = 0usize;
    for toks in texts {
        for w in toks.windows(n) {
            seen.insert(w.iter().map(AsRef::as_ref).collect());
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty(format!("no text has at least {n} tokens")));
    }
    Ok(seen.len() as f64 / total as f64)
}

/// A dual-head model used only through its identification head.
#[derive(Debug, Clone)]
pub struct MetaClassifier<T> {
    pub params: LMParams<T>,
    pub accuracy: f64,
}

/// Classifier inputs use the plain `[BOS, text…, EOS]` layout: it judges
/// generated text on its own, without the prompt.
pub fn classifier_sequences(vocab: &Vocab, examples: &[RawExample]) -> Vec<TokenSequence> {
    examples
        .iter()
        .map(|e| TokenSequence {
            ids: vocab.encode_sentence(&e.text),
            label: e.label,
        })
        .collect()
}

/// Trains the identification head (text head frozen at init) on an 80/20
/// split and refuses a classifier below [`CLASSIFIER_GATE`].
pub fn train_meta_classifier<T: Float>(
    vocab: &Vocab,
    labelled: &[RawExample],
    model: ModelConfig,
    train: &TrainConfig,
    split_seed: u64,
) -> Result<MetaClassifier<T>> {
    let seqs = classifier_sequences(vocab, labelled);
    let (train_set, test_set) = split(&seqs, 0.8, split_seed)?;
    if test_set.is_empty() {
        return Err(Error::Empty("classifier test split".into()));
    }
    let mut params = LMParams::<T>::init(model)?;
    let head = params.lm_head();
    params.set_trainable(&head, false);
    let mut trainer = Trainer::new(params, train.clone())?;
    trainer.train_identifier(&train_set, &[])?;
    let (params, _) = trainer.into_parts();
    let accuracy = identification_accuracy(&params, &test_set)?;
    if accuracy < CLASSIFIER_GATE {
        return Err(Error::ClassifierGate {
            accuracy,
            threshold: CLASSIFIER_GATE,
        });
    }
    Ok(MetaClassifier { params, accuracy })
}

/// Fraction of texts with metaphor probability strictly above 0.5.
pub fn meta_ratio<T: Float>(classifier: &LMParams<T>, vocab: &Vocab, texts: &[String]) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::Empty("meta ratio needs at least one text".into()));
    }
    let mut hits = 0usize;
    for t in texts {
        let p = classifier.sentence_meta_prob(&vocab.encode_sentence(t))?;
        if p.to_f64_lossless() > 0.5 {
            hits += 1;
        }
    }
    Ok(hits as f64 / texts.len() as f64)
}

/// Generated sentences for every target (duplicates included), in target order.
pub fn generate_for_targets<T: Float>(
    generator: &LMParams<T>,
    vocab: &Vocab,
    targets: &[String],
    request: &GenerationRequest,
) -> Result<Vec<generation::GeneratedLine>> {
    let mut cache: BTreeMap<&str, Vec<generation::GeneratedLine>> = BTreeMap::new();
    let mut out = Vec::new();
    for target in targets {
        if !cache.contains_key(target.as_str()) {
            let req = GenerationRequest {
                target: target.clone(),
                ..request.clone()
            };
            let cands = generation::generate(generator, vocab, &req)?;
            cache.insert(target, generation::render(vocab, &req, &cands)?);
        }
        out.extend(cache[target.as_str()].iter().cloned());
    }
    Ok(out)
}

/// Generates for every target, pools the outputs and computes all metrics.
pub fn evaluate_all<T: Float>(
    generator: &LMParams<T>,
    scorer: &LMParams<T>,
    classifier: &LMParams<T>,
    vocab: &Vocab,
    targets: &[String],
    request: &GenerationRequest,
) -> Result<EvalReport> {
    if targets.is_empty() {
        return Err(Error::Empty("evaluation targets".into()));
    }
    let lines = generate_for_targets(generator, vocab, targets, request)?;
    let texts: Vec<String> = lines.into_iter().map(|l| l.text).collect();
    let tokens: Vec<Vec<&str>> = texts.iter().map(|t| vocab.tokenize(t)).collect();
    Ok(EvalReport {
        ppl: perplexity_of_texts(scorer, vocab, &texts)?,
        dist1: distinct_n(&tokens, 1)?,
        dist2: distinct_n(&tokens, 2)?,
        meta: meta_ratio(classifier, vocab, &texts)?,
        n_evaluated: texts.len(),
        config: serde_json::Value::Null,
    })
}
