//! Loss algebra and the training schedule on the synthetic corpus.

mod common;

use common::Fixture;
use figlm_core::model::{LMParams, ModelConfig};
use figlm_core::training::{
    generation_loss, make_weighted, run_schedule, JointMode, ReportLine, SelfTrainMode, Source, TrainConfig, Trainer,
    WeightedExample,
};
use figlm_core::TokenSequence;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(vocab_size: usize) -> LMParams<f64> {
    LMParams::init(ModelConfig {
        vocab_size,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 16,
        dropout: 0.1,
        seed: 4,
    })
    .unwrap()
}

fn zero_head(mut p: LMParams<f64>) -> LMParams<f64> {
    for i in p.ident_head() {
        p.store.get_mut(i).data_mut().fill(0.0);
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn loss_is_linear_in_the_sentence_weight(c in 0.0f64..3.0, seed in any::<u64>()) {
        let p = small(12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..10);
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..12)).collect();
        let raw: Vec<f64> = (1..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let ex = WeightedExample {
            ids,
            sentence_weight: 1.0,
            token_weights: raw.iter().map(|w| w / z).collect(),
            source: Source::Pseudo,
        };
        let base = generation_loss(&p, std::slice::from_ref(&ex)).unwrap();
        let scaled = generation_loss(&p, &[WeightedExample { sentence_weight: c, ..ex }]).unwrap();
        prop_assert!((scaled - c * base).abs() < 1e-10 * (1.0 + base));
    }
}

#[test]
fn undecided_identifier_halves_the_soft_loss() {
    let p = zero_head(small(12));
    let ids = vec![1, 5, 3, 7, 8, 9, 2];
    let soft = make_weighted(&p, &TokenSequence { ids: ids.clone(), label: None }, true).unwrap();
    assert_eq!(soft.sentence_weight, 0.5);
    assert_eq!(soft.source, Source::Pseudo);
    let plain = WeightedExample::plain(ids).unwrap();
    assert_eq!(soft.token_weights, plain.token_weights);
    let (s, c) = (generation_loss(&p, &[soft]).unwrap(), generation_loss(&p, &[plain]).unwrap());
    assert!((s - 0.5 * c).abs() < 1e-12);
}

#[test]
fn literal_examples_contribute_nothing() {
    let p = small(12);
    let metaphor = make_weighted(&p, &TokenSequence { ids: vec![1, 5, 3, 7, 2], label: Some(1) }, true).unwrap();
    let literal = make_weighted(&p, &TokenSequence { ids: vec![1, 6, 3, 9, 10, 2], label: Some(0) }, true).unwrap();
    assert_eq!(literal.sentence_weight, 0.0);
    let alone = generation_loss(&p, std::slice::from_ref(&metaphor)).unwrap();
    let mixed = generation_loss(&p, &[metaphor, literal]).unwrap();
    assert!((mixed - alone / 2.0).abs() < 1e-12);
}

#[test]
fn classic_acceptance_shrinks_as_tau_rises() {
    let fx = Fixture::new(5, 400, 300);
    let params = LMParams::<f32>::init(ModelConfig::desk(fx.vocab.len())).unwrap();
    let mut base = Trainer::new(params, TrainConfig { gen_epochs: 1, ..TrainConfig::default() }).unwrap();
    base.train_identifier(&fx.corpora.train, &[]).unwrap();
    let accepted = |tau: f64| {
        let config = TrainConfig {
            tau,
            max_st_iters: 1,
            self_train_mode: SelfTrainMode::Classic,
            ..base.config.clone()
        };
        let mut t = Trainer::new(base.params.clone(), config).unwrap();
        t.self_train_classic(&fx.corpora).unwrap();
        t.accepted_sets()[0].clone()
    };
    let sets: Vec<Vec<usize>> = [0.3, 0.5, 0.7, 0.9, 1.0].into_iter().map(accepted).collect();
    for w in sets.windows(2) {
        assert!(w[1].iter().all(|i| w[0].contains(i)), "{} ⊄ {}", w[1].len(), w[0].len());
    }
    assert!(sets[0].len() > sets[3].len());
    assert!(sets[4].is_empty() || sets[4].len() < sets[0].len());
}

#[test]
fn schedule_is_deterministic_and_reports_every_round() {
    let fx = Fixture::new(6, 300, 150);
    let config = TrainConfig {
        ident_epochs: 2,
        gen_epochs: 3,
        max_st_iters: 2,
        self_train_mode: SelfTrainMode::Soft,
        seed: 6,
        ..TrainConfig::default()
    };
    let init = || LMParams::<f32>::init(ModelConfig::desk(fx.vocab.len())).unwrap();
    let (a, ra) = run_schedule(init(), &fx.corpora, &config).unwrap();
    let (b, rb) = run_schedule(init(), &fx.corpora, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.len(), 2 + 3 + 2);
    let phases: Vec<&str> = ra
        .iter()
        .map(|r| match r {
            ReportLine::Identify { .. } => "identify",
            ReportLine::Generate { .. } => "generate",
            ReportLine::SelfTrain { .. } => "self_train",
        })
        .collect();
    assert_eq!(phases, ["identify", "identify", "generate", "generate", "generate", "self_train", "self_train"]);
    let line = serde_json::to_value(&ra[0]).unwrap();
    assert_eq!(line["phase"], "identify");

    let (c, _) = run_schedule(init(), &fx.corpora, &TrainConfig { seed: 7, ..config }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn generator_loss_halves_from_initialisation() {
    let fx = Fixture::new(7, 1000, 10);
    let params = LMParams::<f32>::init(ModelConfig::desk(fx.vocab.len())).unwrap();
    let metaphors: Vec<WeightedExample> = fx
        .corpora
        .train
        .iter()
        .filter(|s| s.label == Some(1))
        .map(|s| WeightedExample::plain(s.ids.clone()).unwrap())
        .collect();
    let initial = generation_loss(&params, &metaphors).unwrap();
    let mut t = Trainer::new(params, TrainConfig { seed: 7, ..TrainConfig::default() }).unwrap();
    t.run_schedule(&fx.corpora).unwrap();
    let trained = generation_loss(&t.params, &metaphors).unwrap();
    assert!(trained <= 0.5 * initial, "generation loss {initial} → {trained}");
}

#[test]
fn trained_identifier_separates_the_classes() {
    let fx = Fixture::new(8, 2000, 10);
    let params = LMParams::<f32>::init(ModelConfig::desk(fx.vocab.len())).unwrap();
    let mut t = Trainer::new(params, TrainConfig { seed: 8, ..TrainConfig::default() }).unwrap();
    t.train_identifier(&fx.corpora.train, &fx.corpora.heldout).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let mean = |metaphor: bool, rng: &mut ChaCha8Rng| {
        let mut total = 0.0;
        for _ in 0..200 {
            let text = fx.grammar.sentence(rng, metaphor);
            assert_eq!(fx.oracle.label(&text), metaphor as u8);
            total += f64::from(t.params.sentence_meta_prob(&fx.encode(&text)).unwrap());
        }
        total / 200.0
    };
    let (m, l) = (mean(true, &mut rng), mean(false, &mut rng));
    assert!(m > 0.9 && l < 0.1, "mean p_n: metaphors {m}, literals {l}");
}

#[test]
fn summed_joint_step_trains_both_heads() {
    let fx = Fixture::new(9, 200, 10);
    let params = LMParams::<f32>::init(ModelConfig::desk(fx.vocab.len())).unwrap();
    let config = TrainConfig {
        joint: JointMode::Sum,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(params, config).unwrap();
    let before = t.params.clone();
    let ident: Vec<TokenSequence> = fx.corpora.train[..8].to_vec();
    let gen: Vec<WeightedExample> = ident
        .iter()
        .map(|s| WeightedExample::plain(s.ids.clone()).unwrap())
        .collect();
    let expected = generation_loss(&before, &gen).unwrap();
    let got = t.joint_step(&ident, &gen).unwrap();
    // Dropout makes the training-mode value differ slightly from eval mode.
    assert!((got - expected).abs() < 0.1 * expected, "{got} vs {expected}");
    for i in t.params.ident_head().into_iter().chain(t.params.lm_head()) {
        assert_ne!(t.params.store.get(i).data(), before.store.get(i).data());
    }
}
