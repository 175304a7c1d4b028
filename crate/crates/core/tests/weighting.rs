//! Token weights computed from real model passes.

use figlm_core::corpus::{SyntheticGrammar, SyntheticGrammarConfig, TokenMode};
use figlm_core::model::{LMParams, ModelConfig};
use figlm_core::training::{encode_examples, TrainConfig, Trainer};
use figlm_core::weighting::{profile, render_html, render_json, Attribution, PrefixProfile};
use figlm_core::{RawExample, Vocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn profile_is_deterministic_and_consistent() {
    let p = LMParams::<f64>::init(ModelConfig::desk(20)).unwrap();
    let ids = [1, 9, 3, 12, 5, 17, 2];
    let a = profile(&p, &ids).unwrap();
    assert_eq!(a, profile(&p, &ids).unwrap());
    assert_eq!(a.p.len(), ids.len());
    assert_eq!(a.weights.len(), ids.len() - 1);
    assert_eq!(a.sentence_prob, p.sentence_meta_prob(&ids).unwrap());
    let telescoped: f64 = a.importance.iter().sum();
    assert!((telescoped - (a.p[ids.len() - 1] - a.p[0])).abs() < 1e-12);
}

#[test]
fn zero_identification_head_gives_uniform_weights() {
    let mut p = LMParams::<f64>::init(ModelConfig::desk(20)).unwrap();
    for i in p.ident_head() {
        p.store.get_mut(i).data_mut().fill(0.0);
    }
    let prof = profile(&p, &[1, 5, 6, 3, 7, 8, 2]).unwrap();
    assert!(prof.p.iter().all(|&v| v == 0.5));
    assert_eq!(prof.weights, PrefixProfile::uniform_weights(6));
}

#[test]
fn exports_agree_with_the_profile() {
    let prof = PrefixProfile::from_probs(vec![0.5, 0.4, 0.9, 0.95]).unwrap();
    let tokens: Vec<String> = ["s1", "like", "<o&>"].iter().map(|s| s.to_string()).collect();
    let a: Attribution = serde_json::from_str(&render_json(&prof, &tokens).unwrap()).unwrap();
    assert_eq!(a.tokens, tokens);
    for (x, y) in a.weights.iter().zip(&prof.weights) {
        assert!((x - y).abs() < 1e-15);
    }
    assert_eq!(a.meta_score, 0.95);
    let html = render_html(&prof, &tokens).unwrap();
    assert_eq!(html.matches("class=\"tok\"").count(), 3);
    assert!(html.contains("&lt;o&amp;&gt;"));
    assert!(html.contains("Meta Score: <span class=\"meta-score\">0.9500</span>"));
    assert!(render_json(&prof, &tokens[..2]).is_err());
}

/// Position of the largest importance relative to the subject word, for
/// `per_seed` fresh metaphors under identifiers trained from five seeds.
fn peak_offsets(per_seed: usize) -> Vec<i64> {
    let mut offsets = Vec::new();
    for seed in 0..5u64 {
        let grammar = SyntheticGrammar::new(SyntheticGrammarConfig {
            seed: 100 + seed,
            ..SyntheticGrammarConfig::default()
        })
        .unwrap();
        let (labelled, unlabelled) = grammar.generate(2000, 10).unwrap();
        let all: Vec<RawExample> = labelled.iter().chain(&unlabelled).cloned().collect();
        let vocab = Vocab::build(&all, TokenMode::Word).unwrap();
        let target_of = |e: &RawExample| grammar.extract_target(&e.text);
        let train = encode_examples(&vocab, &labelled, target_of);

        let params = LMParams::<f32>::init(ModelConfig::desk(vocab.len())).unwrap();
        let mut trainer = Trainer::new(params, TrainConfig { seed, ..TrainConfig::default() }).unwrap();
        trainer.train_identifier(&train, &[]).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..per_seed {
            let text = grammar.sentence(&mut rng, true);
            let target = grammar.extract_target(&text).unwrap();
            let subject = text.split_whitespace().position(|w| w == target).unwrap();
            let seq = vocab.encode_prompted(Some(&target), &RawExample::unlabelled(text));
            let prof = profile(&trainer.params, &seq.ids).unwrap();
            let top = prof
                .importance
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            // importance[k] belongs to ids[k + 1]; text word w sits at ids[3 + w].
            offsets.push(top as i64 + 1 - (3 + subject as i64));
        }
    }
    offsets
}

fn share(offsets: &[i64], keep: impl Fn(i64) -> bool) -> f64 {
    offsets.iter().filter(|&&o| keep(o)).count() as f64 / offsets.len() as f64
}

/// The identifier is supervised at EOS only, so it may commit on the
/// comparator, the object or later, but not before the comparison starts.
#[test]
fn trained_identifier_peaks_on_the_comparison() {
    let offsets = peak_offsets(100);
    let rate = share(&offsets, |o| o >= 1);
    println!(
        "peak on comparator {:.3}, object {:.3}, later {:.3}",
        share(&offsets, |o| o == 1),
        share(&offsets, |o| o == 2),
        share(&offsets, |o| o > 2)
    );
    assert!(rate >= 0.8, "peak at or after the comparator in {rate:.3} of metaphors");
}

/// The stronger claim that the comparator itself carries the peak. It holds
/// for about one metaphor in seven, and less the longer the identifier
/// trains, because the final-position loss rewards committing late.
#[test]
#[ignore = "comparator-specific peak is not reproduced; run to measure"]
fn trained_identifier_peaks_on_the_comparator() {
    let offsets = peak_offsets(100);
    let rate = share(&offsets, |o| o == 1);
    assert!(rate >= 0.8, "comparator peak in {rate:.3} of metaphors");
}
