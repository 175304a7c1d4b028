//! Losses, optimisation phases and self-training.
//!
//! The identification loss is the mean gold-class NLL of the sentence
//! probability head at the final position. The generation loss weights each
//! sentence by its metaphor probability (the gold label for labelled data,
//! `p_n` for unlabelled data) and each predicted token by its normalised
//! importance. Both weights come from a separate evaluation-mode pass and
//! enter the graph as constants, so the generation loss never reaches the
//! identification head.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{RawExample, TokenId, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::model::{Bound, LMParams, Mode, METAPHOR};
use crate::numeric::{cast, AdamConfig, AdamState, Float, Tape, Var};
use crate::seed;
use crate::weighting::{self, PrefixProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelfTrainMode {
    #[default]
    Off,
    /// Hard pseudo-labels: unlabelled sentences with `p_n ≥ tau` join as metaphors.
    Classic,
    /// Every unlabelled sentence joins with sentence weight `p_n`.
    Soft,
}

/// How the two losses are combined after identifier pre-training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointMode {
    /// One identification batch, then one generation batch.
    #[default]
    Alternate,
    /// One step on the unweighted sum of both losses.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub ident_epochs: usize,
    /// Generator epochs before any self-training iteration.
    pub gen_epochs: usize,
    /// Generator epochs inside each self-training iteration.
    pub st_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub self_train_mode: SelfTrainMode,
    pub tau: f64,
    pub max_st_iters: usize,
    pub seed: u64,
    /// When false every predicted token gets weight `1/n`.
    pub token_weighting: bool,
    pub joint: JointMode,
    pub pretrain_identifier: bool,
    /// Clip the joint gradient norm of every step to this value.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ident_epochs: 3,
            gen_epochs: 24,
            st_epochs: 1,
            batch_size: 16,
            lr: 1e-3,
            self_train_mode: SelfTrainMode::Off,
            tau: 0.7,
            max_st_iters: 3,
            seed: 0,
            token_weighting: true,
            joint: JointMode::Alternate,
            pretrain_identifier: true,
            max_grad_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ident_epochs == 0 || self.gen_epochs == 0 || self.st_epochs == 0 {
            return Err(Error::Config("epoch counts must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        // tau = 1 is allowed: it accepts nothing and reduces to supervised training.
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must be in (0,1], got {}", self.tau)));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Config(format!("max_grad_norm must be positive, got {n}")));
            }
        }
        if self.self_train_mode != SelfTrainMode::Off && !self.pretrain_identifier {
            return Err(Error::Config(
                "self-training needs a pre-trained identifier; enable pretrain_identifier".into(),
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            max_grad_norm: self.max_grad_norm,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Labelled,
    Pseudo,
}

/// A sequence with its detached sentence weight and token weights `I'_1..I'_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedExample {
    pub ids: Vec<TokenId>,
    pub sentence_weight: f64,
    pub token_weights: Vec<f64>,
    pub source: Source,
}

impl WeightedExample {
    /// Sentence weight 1 and uniform token weights: a plain LM example.
    pub fn plain(ids: Vec<TokenId>) -> Result<Self> {
        if ids.len() < 2 {
            return Err(Error::Empty("a training sequence needs at least two tokens".into()));
        }
        let n = ids.len() - 1;
        Ok(Self {
            ids,
            sentence_weight: 1.0,
            token_weights: PrefixProfile::uniform_weights(n),
            source: Source::Labelled,
        })
    }
}

/// One line of the training report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum ReportLine {
    Identify {
        epoch: usize,
        loss: f64,
        heldout_accuracy: Option<f64>,
    },
    Generate {
        epoch: usize,
        loss: f64,
        heldout_accuracy: Option<f64>,
    },
    SelfTrain {
        iteration: usize,
        accepted: usize,
        pool_size: usize,
        mean_pseudo_prob: f64,
        heldout_accuracy: Option<f64>,
        generation_loss: f64,
    },
}

/// Encodes examples in the shared `[BOS, target…, DELIM, text…, EOS]` layout.
/// `target_of` supplies a target for examples without an explicit one.
pub fn encode_examples(
    vocab: &Vocab,
    examples: &[RawExample],
    target_of: impl Fn(&RawExample) -> Option<String>,
) -> Vec<TokenSequence> {
    examples
        .iter()
        .map(|e| {
            let target = e.target.clone().or_else(|| target_of(e));
            vocab.encode_prompted(target.as_deref(), e)
        })
        .collect()
}

/// Gold-class NLL at the final position, averaged over the batch.
pub fn identification_loss_graph<T: Float>(
    tape: &mut Tape<T>,
    bound: &Bound<'_, T>,
    batch: &[TokenSequence],
    mode: &mut Mode,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Empty("identification batch".into()));
    }
    let mut total: Option<Var> = None;
    for seq in batch {
        let label = seq.label.ok_or_else(|| {
            Error::Config("identification loss needs labelled examples".into())
        })?;
        let hidden = bound.hidden(tape, &seq.ids, mode)?;
        let logits = bound.ident_logits(tape, hidden, &[seq.ids.len() - 1], mode)?;
        let nll = tape.cross_entropy(logits, &[label as usize], &[T::one()])?;
        total = Some(match total {
            Some(t) => tape.add(t, nll)?,
            None => nll,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(tape.scale(total, cast(1.0 / batch.len() as f64)))
}

/// `sentence_weight · Σ_{i=1..n} I'_i · NLL(w_i | w_0..w_{i−1})`, averaged over the batch.
pub fn generation_loss_graph<T: Float>(
    tape: &mut Tape<T>,
    bound: &Bound<'_, T>,
    batch: &[WeightedExample],
    mode: &mut Mode,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Empty("generation batch".into()));
    }
    let mut total: Option<Var> = None;
    for ex in batch {
        let n = ex.ids.len().saturating_sub(1);
        if ex.token_weights.len() != n || n == 0 {
            return Err(Error::Shape {
                op: "generation_loss",
                left: vec![ex.ids.len()],
                right: vec![ex.token_weights.len()],
            });
        }
        if ex.sentence_weight == 0.0 {
            continue;
        }
        let hidden = bound.hidden(tape, &ex.ids, mode)?;
        let rows: Vec<usize> = (0..n).collect();
        let inputs = tape.select_rows(hidden, &rows)?;
        let logits = bound.token_logits(tape, inputs)?;
        let weights: Vec<T> = ex
            .token_weights
            .iter()
            .map(|&w| cast(ex.sentence_weight * w))
            .collect();
        let nll = tape.cross_entropy(logits, &ex.ids[1..], &weights)?;
        total = Some(match total {
            Some(t) => tape.add(t, nll)?,
            None => nll,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(1, 1, vec![T::zero()])?,
    };
    Ok(tape.scale(total, cast(1.0 / batch.len() as f64)))
}

/// Evaluation-mode value of the identification loss.
pub fn identification_loss<T: Float>(params: &LMParams<T>, batch: &[TokenSequence]) -> Result<f64> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let loss = identification_loss_graph(&mut tape, &b, batch, &mut Mode::Eval)?;
    Ok(tape.scalar(loss).to_f64_lossless())
}

/// Evaluation-mode value of the generation loss.
pub fn generation_loss<T: Float>(params: &LMParams<T>, batch: &[WeightedExample]) -> Result<f64> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let loss = generation_loss_graph(&mut tape, &b, batch, &mut Mode::Eval)?;
    Ok(tape.scalar(loss).to_f64_lossless())
}

/// Attaches detached weights to a sequence.
///
/// Labelled sequences take their gold label as sentence weight; unlabelled
/// ones take `p_n`. With `token_weighting` off the token weights are uniform.
pub fn make_weighted<T: Float>(
    params: &LMParams<T>,
    seq: &TokenSequence,
    token_weighting: bool,
) -> Result<WeightedExample> {
    if seq.ids.len() < 2 {
        return Err(Error::Empty("a training sequence needs at least two tokens".into()));
    }
    let n = seq.ids.len() - 1;
    let needs_profile = token_weighting || seq.label.is_none();
    let profile = if needs_profile {
        Some(weighting::profile(params, &seq.ids)?)
    } else {
        None
    };
    let token_weights = match (&profile, token_weighting) {
        (Some(p), true) => p.weights.clone(),
        _ => PrefixProfile::uniform_weights(n),
    };
    let (sentence_weight, source) = match seq.label {
        Some(l) => (f64::from(l), Source::Labelled),
        None => (profile.as_ref().expect("computed").sentence_prob, Source::Pseudo),
    };
    Ok(WeightedExample {
        ids: seq.ids.clone(),
        sentence_weight,
        token_weights,
        source,
    })
}

/// Fraction of labelled sequences whose `p_n > 0.5` matches the label.
pub fn identification_accuracy<T: Float>(params: &LMParams<T>, seqs: &[TokenSequence]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Empty("accuracy needs at least one example".into()));
    }
    let mut correct = 0usize;
    for s in seqs {
        let label = s
            .label
            .ok_or_else(|| Error::Config("accuracy needs labelled examples".into()))?;
        let p = params.sentence_meta_prob(&s.ids)?.to_f64_lossless();
        if (p > 0.5) == (label as usize == METAPHOR) {
            correct += 1;
        }
    }
    Ok(correct as f64 / seqs.len() as f64)
}

/// Labelled train/held-out split plus the unlabelled pool, all encoded.
#[derive(Debug, Clone, Default)]
pub struct Corpora {
    pub train: Vec<TokenSequence>,
    pub heldout: Vec<TokenSequence>,
    pub unlabelled: Vec<TokenSequence>,
}

/// Pseudo-labelled data entering a generator epoch.
enum Pseudo<'a> {
    None,
    Hard(Vec<&'a TokenSequence>),
    Soft(&'a [TokenSequence]),
}

/// Owns the parameters, optimizer state and dropout stream of one run.
pub struct Trainer<T> {
    pub params: LMParams<T>,
    pub config: TrainConfig,
    adam: AdamState<T>,
    rng: ChaCha8Rng,
    reports: Vec<ReportLine>,
    accepted_sets: Vec<Vec<usize>>,
}

impl<T: Float> Trainer<T> {
    pub fn new(params: LMParams<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&params.store, config.adam());
        let rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, "training"));
        Ok(Self {
            params,
            config,
            adam,
            rng,
            reports: Vec::new(),
            accepted_sets: Vec::new(),
        })
    }

    pub fn reports(&self) -> &[ReportLine] {
        &self.reports
    }

    /// Indices of the unlabelled pool accepted in each classic iteration.
    pub fn accepted_sets(&self) -> &[Vec<usize>] {
        &self.accepted_sets
    }

    pub fn into_parts(self) -> (LMParams<T>, Vec<ReportLine>) {
        (self.params, self.reports)
    }

    fn step<F>(&mut self, build: F) -> Result<f64>
    where
        F: FnOnce(&mut Tape<T>, &Bound<'_, T>, &mut Mode) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let loss = {
            let bound = self.params.bind(&mut tape);
            build(&mut tape, &bound, &mut Mode::Train(&mut self.rng))?
        };
        let value = tape.scalar(loss).to_f64_lossless();
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        self.params.store.zero_grad();
        tape.backward(loss, &mut self.params.store)?;
        self.adam.step(&mut self.params.store);
        Ok(value)
    }

    pub fn identification_step(&mut self, batch: &[TokenSequence]) -> Result<f64> {
        self.step(|tape, b, mode| identification_loss_graph(tape, b, batch, mode))
    }

    pub fn generation_step(&mut self, batch: &[WeightedExample]) -> Result<f64> {
        self.step(|tape, b, mode| generation_loss_graph(tape, b, batch, mode))
    }

    /// One step on identification loss + generation loss; returns the generation part.
    pub fn joint_step(&mut self, ident: &[TokenSequence], gen: &[WeightedExample]) -> Result<f64> {
        let mut gen_value = 0.0;
        self.step(|tape, b, mode| {
            let li = identification_loss_graph(tape, b, ident, mode)?;
            let lg = generation_loss_graph(tape, b, gen, mode)?;
            gen_value = tape.scalar(lg).to_f64_lossless();
            tape.add(li, lg)
        })?;
        Ok(gen_value)
    }

    fn shuffled<'a, S>(&mut self, items: &'a [S]) -> Vec<&'a S> {
        let mut v: Vec<&S> = items.iter().collect();
        v.shuffle(&mut self.rng);
        v
    }

    fn heldout_accuracy(&self, heldout: &[TokenSequence]) -> Result<Option<f64>> {
        if heldout.is_empty() {
            Ok(None)
        } else {
            identification_accuracy(&self.params, heldout).map(Some)
        }
    }

    /// Minimises the identification loss for `ident_epochs` epochs.
    pub fn train_identifier(
        &mut self,
        train: &[TokenSequence],
        heldout: &[TokenSequence],
    ) -> Result<Vec<f64>> {
        if train.is_empty() {
            return Err(Error::Empty("identifier training corpus".into()));
        }
        let mut curve = Vec::new();
        for epoch in 1..=self.config.ident_epochs {
            let order: Vec<TokenSequence> = self.shuffled(train).into_iter().cloned().collect();
            let mut total = 0.0;
            let mut batches = 0usize;
            for batch in order.chunks(self.config.batch_size) {
                total += self.identification_step(batch)?;
                batches += 1;
            }
            let loss = total / batches as f64;
            let heldout_accuracy = self.heldout_accuracy(heldout)?;
            self.reports.push(ReportLine::Identify {
                epoch,
                loss,
                heldout_accuracy,
            });
            curve.push(heldout_accuracy.unwrap_or(f64::NAN));
        }
        Ok(curve)
    }

    /// Plain language-model training with uniform weights, no identification.
    pub fn train_lm(&mut self, seqs: &[Vec<TokenId>], epochs: usize) -> Result<Vec<f64>> {
        let pool = seqs
            .iter()
            .map(|ids| WeightedExample::plain(ids.clone()))
            .collect::<Result<Vec<_>>>()?;
        if pool.is_empty() {
            return Err(Error::Empty("language-model corpus".into()));
        }
        let mut curve = Vec::new();
        for epoch in 1..=epochs {
            let order: Vec<WeightedExample> = self.shuffled(&pool).into_iter().cloned().collect();
            let mut total = 0.0;
            let mut batches = 0usize;
            for batch in order.chunks(self.config.batch_size) {
                total += self.generation_step(batch)?;
                batches += 1;
            }
            let loss = total / batches as f64;
            self.reports.push(ReportLine::Generate {
                epoch,
                loss,
                heldout_accuracy: None,
            });
            curve.push(loss);
        }
        Ok(curve)
    }

    /// Detached weights for every example that carries non-zero sentence weight.
    fn weighted_pool(&self, labelled: &[TokenSequence], pseudo: &Pseudo) -> Result<Vec<WeightedExample>> {
        let tw = self.config.token_weighting;
        let mut pool = Vec::new();
        for s in labelled.iter().filter(|s| s.label == Some(1)) {
            pool.push(make_weighted(&self.params, s, tw)?);
        }
        match pseudo {
            Pseudo::None => {}
            Pseudo::Hard(accepted) => {
                for s in accepted {
                    let mut w = make_weighted(&self.params, s, tw)?;
                    w.sentence_weight = 1.0;
                    pool.push(w);
                }
            }
            Pseudo::Soft(all) => {
                for s in all.iter() {
                    let w = make_weighted(&self.params, s, tw)?;
                    if w.sentence_weight > 0.0 {
                        pool.push(w);
                    }
                }
            }
        }
        Ok(pool)
    }

    /// One joint epoch over the weighted pool; returns the mean generation loss.
    fn generator_epoch(&mut self, labelled: &[TokenSequence], pseudo: &Pseudo) -> Result<f64> {
        let pool = self.weighted_pool(labelled, pseudo)?;
        if pool.is_empty() {
            return Err(Error::Empty("no metaphor examples for the generator".into()));
        }
        let order: Vec<WeightedExample> = self.shuffled(&pool).into_iter().cloned().collect();
        let ident_order: Vec<TokenSequence> = self.shuffled(labelled).into_iter().cloned().collect();
        let mut ident_batches = ident_order.chunks(self.config.batch_size).cycle();
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(self.config.batch_size) {
            let ib = ident_batches.next().expect("labelled data is non-empty");
            total += match self.config.joint {
                JointMode::Alternate => {
                    self.identification_step(ib)?;
                    self.generation_step(batch)?
                }
                JointMode::Sum => self.joint_step(ib, batch)?,
            };
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    /// Joint training on the labelled metaphors for `gen_epochs` epochs.
    pub fn train_generator(&mut self, train: &[TokenSequence], heldout: &[TokenSequence]) -> Result<f64> {
        let mut loss = f64::NAN;
        for epoch in 1..=self.config.gen_epochs {
            loss = self.generator_epoch(train, &Pseudo::None)?;
            let heldout_accuracy = self.heldout_accuracy(heldout)?;
            self.reports.push(ReportLine::Generate {
                epoch,
                loss,
                heldout_accuracy,
            });
        }
        Ok(loss)
    }

    fn score_pool(&self, pool: &[TokenSequence]) -> Result<Vec<f64>> {
        pool.iter()
            .map(|s| Ok(self.params.sentence_meta_prob(&s.ids)?.to_f64_lossless()))
            .collect()
    }

    /// Hard pseudo-labelling rounds after the base generator has been trained.
    pub fn self_train_classic(&mut self, corpora: &Corpora) -> Result<()> {
        if corpora.unlabelled.is_empty() {
            return Err(Error::Empty("unlabelled pool".into()));
        }
        let pool = &corpora.unlabelled;
        let mut previous: Option<BTreeSet<usize>> = None;
        for iteration in 1..=self.config.max_st_iters {
            let scores = self.score_pool(pool)?;
            let accepted: BTreeSet<usize> = (0..pool.len())
                .filter(|&i| scores[i] >= self.config.tau)
                .collect();
            if let Some(prev) = &previous {
                let changed = prev.symmetric_difference(&accepted).count();
                if (changed as f64) < 0.01 * pool.len() as f64 {
                    break;
                }
            }
            let mean_pseudo_prob = if accepted.is_empty() {
                0.0
            } else {
                accepted.iter().map(|&i| scores[i]).sum::<f64>() / accepted.len() as f64
            };
            let chosen: Vec<&TokenSequence> = accepted.iter().map(|&i| &pool[i]).collect();
            let mut loss = f64::NAN;
            for _ in 0..self.config.st_epochs {
                loss = self.generator_epoch(&corpora.train, &Pseudo::Hard(chosen.clone()))?;
            }
            self.reports.push(ReportLine::SelfTrain {
                iteration,
                accepted: accepted.len(),
                pool_size: pool.len(),
                mean_pseudo_prob,
                heldout_accuracy: self.heldout_accuracy(&corpora.heldout)?,
                generation_loss: loss,
            });
            self.accepted_sets.push(accepted.iter().copied().collect());
            previous = Some(accepted);
        }
        Ok(())
    }

    /// Soft rounds: every unlabelled sentence weighted by its current `p_n`,
    /// re-scored at the start of every epoch.
    pub fn self_train_soft(&mut self, corpora: &Corpora) -> Result<()> {
        if corpora.unlabelled.is_empty() {
            return Err(Error::Empty("unlabelled pool".into()));
        }
        let pool = &corpora.unlabelled;
        for iteration in 1..=self.config.max_st_iters {
            let scores = self.score_pool(pool)?;
            let mean_pseudo_prob = scores.iter().sum::<f64>() / scores.len() as f64;
            let mut loss = f64::NAN;
            for _ in 0..self.config.st_epochs {
                loss = self.generator_epoch(&corpora.train, &Pseudo::Soft(pool))?;
            }
            self.reports.push(ReportLine::SelfTrain {
                iteration,
                accepted: pool.len(),
                pool_size: pool.len(),
                mean_pseudo_prob,
                heldout_accuracy: self.heldout_accuracy(&corpora.heldout)?,
                generation_loss: loss,
            });
        }
        Ok(())
    }

    /// Identifier pre-training, joint generator training, then self-training.
    pub fn run_schedule(&mut self, corpora: &Corpora) -> Result<()> {
        self.run_schedule_with(corpora, |_| Ok(()))
    }

    /// [`run_schedule`](Self::run_schedule), handing the parameters to
    /// `after_identifier` once pre-training is done.
    pub fn run_schedule_with<F>(&mut self, corpora: &Corpora, mut after_identifier: F) -> Result<()>
    where
        F: FnMut(&LMParams<T>) -> Result<()>,
    {
        if corpora.train.is_empty() {
            return Err(Error::Empty("labelled training corpus".into()));
        }
        if self.config.pretrain_identifier {
            self.train_identifier(&corpora.train, &corpora.heldout)?;
        }
        after_identifier(&self.params)?;
        self.train_generator(&corpora.train, &corpora.heldout)?;
        match self.config.self_train_mode {
            SelfTrainMode::Off => Ok(()),
            SelfTrainMode::Classic => self.self_train_classic(corpora),
            SelfTrainMode::Soft => self.self_train_soft(corpora),
        }
    }
}

/// Convenience wrapper: trains fresh parameters through the whole schedule.
pub fn run_schedule<T: Float>(
    params: LMParams<T>,
    corpora: &Corpora,
    config: &TrainConfig,
) -> Result<(LMParams<T>, Vec<ReportLine>)> {
    let mut trainer = Trainer::new(params, config.clone())?;
    trainer.run_schedule(corpora)?;
    Ok(trainer.into_parts())
}
