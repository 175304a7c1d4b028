//! Synthetic nominal-metaphor grammar with a decidable label.
//!
//! Sentences are space-separated words. A metaphor has the shape
//! `FILLER* SUBJ COMP OBJ FILLER*` with subject and object drawn from different
//! semantic classes. Literal sentences either compare two members of the same
//! class or put filler words between subject and object instead of a comparator.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::RawExample;
use crate::error::{Error, Result};

const COMPARATOR_WORDS: [&str; 6] = ["like", "as", "is", "becomes", "resembles", "mirrors"];
const MAX_EDGE_FILLERS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGrammarConfig {
    pub seed: u64,
    pub n_subjects: usize,
    pub n_objects: usize,
    pub n_comparators: usize,
    pub n_filler: usize,
    /// Semantic class of every subject and object word.
    pub class_map: BTreeMap<String, u32>,
    pub metaphor_rate: f64,
}

impl Default for SyntheticGrammarConfig {
    fn default() -> Self {
        Self::tenor_vehicle(0, 12, 12, 3, 10, 3, 0.5)
    }
}

impl SyntheticGrammarConfig {
    /// Every subject in class 0 and `o{j}` in class `j % n_classes`.
    ///
    /// Whether a comparison is cross-class then depends on the object alone,
    /// so the label is a first-order function of (comparator, object class).
    /// In [`round_robin`](Self::round_robin) it depends on the subject/object
    /// class pair jointly, which a small transformer needs many more epochs
    /// to pick up.
    pub fn tenor_vehicle(
        seed: u64,
        n_subjects: usize,
        n_objects: usize,
        n_comparators: usize,
        n_filler: usize,
        n_classes: u32,
        metaphor_rate: f64,
    ) -> Self {
        let mut config = Self::round_robin(
            seed,
            n_subjects,
            n_objects,
            n_comparators,
            n_filler,
            n_classes,
            metaphor_rate,
        );
        for i in 0..n_subjects {
            config.class_map.insert(subject_word(i), 0);
        }
        config
    }

    /// Assigns `s{i}` to class `i % n_classes` and `o{j}` to `j % n_classes`.
    pub fn round_robin(
        seed: u64,
        n_subjects: usize,
        n_objects: usize,
        n_comparators: usize,
        n_filler: usize,
        n_classes: u32,
        metaphor_rate: f64,
    ) -> Self {
        let n_classes = n_classes.max(1) as usize;
        let class_map = (0..n_subjects)
            .map(|i| (subject_word(i), (i % n_classes) as u32))
            .chain((0..n_objects).map(|j| (object_word(j), (j % n_classes) as u32)))
            .collect();
        Self {
            seed,
            n_subjects,
            n_objects,
            n_comparators,
            n_filler,
            class_map,
            metaphor_rate,
        }
    }
}

fn subject_word(i: usize) -> String {
    format!("s{i}")
}

fn object_word(j: usize) -> String {
    format!("o{j}")
}

fn comparator_word(i: usize) -> String {
    COMPARATOR_WORDS
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("c{i}"))
}

fn filler_word(i: usize) -> String {
    format!("f{i}")
}

#[derive(Debug, Clone)]
pub struct SyntheticGrammar {
    config: SyntheticGrammarConfig,
    subjects: Vec<String>,
    objects: Vec<String>,
    comparators: Vec<String>,
    fillers: Vec<String>,
    subject_class: Vec<u32>,
    object_class: Vec<u32>,
}

impl SyntheticGrammar {
    pub fn new(config: SyntheticGrammarConfig) -> Result<Self> {
        let c = &config;
        if c.n_subjects == 0 || c.n_objects == 0 || c.n_comparators == 0 || c.n_filler == 0 {
            return Err(Error::Config("grammar word-class sizes must be positive".into()));
        }
        if !(c.metaphor_rate > 0.0 && c.metaphor_rate < 1.0) {
            return Err(Error::Config(format!(
                "metaphor_rate must be strictly between 0 and 1, got {}",
                c.metaphor_rate
            )));
        }
        let subjects: Vec<String> = (0..c.n_subjects).map(subject_word).collect();
        let objects: Vec<String> = (0..c.n_objects).map(object_word).collect();
        let class_of = |w: &String| {
            c.class_map
                .get(w)
                .copied()
                .ok_or_else(|| Error::Config(format!("class_map has no class for {w}")))
        };
        let subject_class = subjects.iter().map(class_of).collect::<Result<Vec<_>>>()?;
        let object_class = objects.iter().map(class_of).collect::<Result<Vec<_>>>()?;
        if c.class_map.len() != c.n_subjects + c.n_objects {
            return Err(Error::Config(
                "class_map must cover exactly the subject and object words".into(),
            ));
        }
        let mut classes: Vec<u32> = c.class_map.values().copied().collect();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Config(
                "class_map needs at least two semantic classes (no cross-class pairs possible)"
                    .into(),
            ));
        }
        for (s, &sc) in subjects.iter().zip(&subject_class) {
            if !object_class.iter().any(|&oc| oc != sc) {
                return Err(Error::Config(format!("no object outside the class of {s}")));
            }
        }
        Ok(Self {
            subjects,
            objects,
            comparators: (0..c.n_comparators).map(comparator_word).collect(),
            fillers: (0..c.n_filler).map(filler_word).collect(),
            subject_class,
            object_class,
            config,
        })
    }

    pub fn config(&self) -> &SyntheticGrammarConfig {
        &self.config
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    /// First subject word of `text`, the metaphor target.
    pub fn extract_target(&self, text: &str) -> Option<String> {
        text.split_whitespace()
            .find(|w| self.subjects.iter().any(|s| s == w))
            .map(str::to_string)
    }

    /// Labelled and unlabelled corpora drawn from one seeded stream.
    pub fn generate(
        &self,
        n_labelled: usize,
        n_unlabelled: usize,
    ) -> Result<(Vec<RawExample>, Vec<RawExample>)> {
        if n_labelled == 0 || n_unlabelled == 0 {
            return Err(Error::Config("corpus sizes must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let labelled = (0..n_labelled)
            .map(|_| {
                let metaphor = rng.random::<f64>() < self.config.metaphor_rate;
                RawExample::labelled(self.sentence(&mut rng, metaphor), metaphor as u8)
            })
            .collect();
        let unlabelled = (0..n_unlabelled)
            .map(|_| {
                let metaphor = rng.random::<f64>() < self.config.metaphor_rate;
                RawExample::unlabelled(self.sentence(&mut rng, metaphor))
            })
            .collect();
        Ok((labelled, unlabelled))
    }

    /// One sentence whose oracle label equals `metaphor`.
    pub fn sentence<R: Rng>(&self, rng: &mut R, metaphor: bool) -> String {
        let si = rng.random_range(0..self.subjects.len());
        let sc = self.subject_class[si];
        let pick_object = |rng: &mut R, same: bool| -> Option<usize> {
            let pool: Vec<usize> = (0..self.objects.len())
                .filter(|&j| (self.object_class[j] == sc) == same)
                .collect();
            (!pool.is_empty()).then(|| pool[rng.random_range(0..pool.len())])
        };
        let mut words: Vec<&str> = Vec::new();
        self.push_fillers(rng, &mut words, 0);
        words.push(&self.subjects[si]);
        let same_class_literal = !metaphor && rng.random::<bool>();
        let comparison = if metaphor {
            pick_object(rng, false)
        } else if same_class_literal {
            pick_object(rng, true)
        } else {
            None
        };
        match comparison {
            Some(oj) => {
                words.push(&self.comparators[rng.random_range(0..self.comparators.len())]);
                words.push(&self.objects[oj]);
            }
            None => {
                self.push_fillers(rng, &mut words, 1);
                words.push(&self.objects[rng.random_range(0..self.objects.len())]);
            }
        }
        self.push_fillers(rng, &mut words, 0);
        words.join(" ")
    }

    fn push_fillers<'a, R: Rng>(&'a self, rng: &mut R, words: &mut Vec<&'a str>, min: usize) {
        let n = rng.random_range(min..=MAX_EDGE_FILLERS);
        for _ in 0..n {
            words.push(&self.fillers[rng.random_range(0..self.fillers.len())]);
        }
    }
}

/// Rule-based labeller built only from the grammar config: a sentence is a
/// metaphor iff a subject, a comparator and an object of a different class
/// appear as three consecutive words.
#[derive(Debug, Clone)]
pub struct OracleChecker {
    pattern: Regex,
}

impl OracleChecker {
    pub fn new(config: &SyntheticGrammarConfig) -> Result<Self> {
        let mut by_class: BTreeMap<u32, (Vec<String>, Vec<String>)> = BTreeMap::new();
        for (word, &class) in &config.class_map {
            let entry = by_class.entry(class).or_default();
            let quoted = regex::escape(word);
            if word.starts_with('s') {
                entry.0.push(quoted);
            } else {
                entry.1.push(quoted);
            }
        }
        let comps: Vec<String> = (0..config.n_comparators)
            .map(|i| regex::escape(&comparator_word(i)))
            .collect();
        let comps = comps.join("|");
        let mut alternatives = Vec::new();
        for (class, (subjects, _)) in &by_class {
            let others: Vec<&String> = by_class
                .iter()
                .filter(|(c, _)| *c != class)
                .flat_map(|(_, (_, objs))| objs)
                .collect();
            if subjects.is_empty() || others.is_empty() {
                continue;
            }
            let others: Vec<&str> = others.iter().map(|s| s.as_str()).collect();
            alternatives.push(format!(
                "(?:{}) (?:{}) (?:{})",
                subjects.join("|"),
                comps,
                others.join("|")
            ));
        }
        if alternatives.is_empty() {
            return Err(Error::Config("no cross-class comparison is possible".into()));
        }
        let pattern = format!("(?:^| )(?:{})(?: |$)", alternatives.join("|"));
        let pattern = Regex::new(&pattern).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { pattern })
    }

    pub fn label(&self, text: &str) -> u8 {
        self.pattern.is_match(text) as u8
    }
}

/// Word → class lookup used by tests and diagnostics.
pub fn class_lookup(config: &SyntheticGrammarConfig) -> HashMap<&str, u32> {
    config
        .class_map
        .iter()
        .map(|(w, &c)| (w.as_str(), c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grammar_puts_subjects_in_one_class() {
        let cfg = SyntheticGrammarConfig::default();
        let oracle = OracleChecker::new(&cfg).unwrap();
        assert_eq!(oracle.label("s5 like o3"), 0);
        assert_eq!(oracle.label("s5 like o4"), 1);
        assert!(SyntheticGrammar::new(cfg).is_ok());
    }

    #[test]
    fn same_class_comparison_is_literal() {
        let cfg = SyntheticGrammarConfig::round_robin(0, 12, 12, 3, 10, 3, 0.5);
        let classes = class_lookup(&cfg);
        assert_eq!(classes["s1"], classes["o7"]);
        let oracle = OracleChecker::new(&cfg).unwrap();
        assert_eq!(oracle.label("s1 like o7"), 0);
        assert_eq!(oracle.label("s1 like o8"), 1);
        assert_eq!(oracle.label("f0 s1 f2 o8 f1"), 0);
        assert_eq!(oracle.label("s1 like o80"), 0);
    }

    #[test]
    fn single_class_is_rejected() {
        let cfg = SyntheticGrammarConfig::round_robin(0, 4, 4, 2, 3, 1, 0.5);
        assert!(SyntheticGrammar::new(cfg.clone()).is_err());
        assert!(OracleChecker::new(&cfg).is_err());
        let cfg = SyntheticGrammarConfig {
            metaphor_rate: 1.0,
            ..SyntheticGrammarConfig::default()
        };
        assert!(SyntheticGrammar::new(cfg).is_err());
    }

    #[test]
    fn metaphor_rate_is_respected() {
        let cfg = SyntheticGrammarConfig::round_robin(3, 12, 12, 3, 10, 2, 0.5);
        let g = SyntheticGrammar::new(cfg).unwrap();
        let (lab, unl) = g.generate(1000, 10).unwrap();
        let n_meta = lab.iter().filter(|e| e.label == Some(1)).count();
        assert!((450..=550).contains(&n_meta), "{n_meta}");
        assert_eq!(unl.len(), 10);
        assert!(unl.iter().all(|e| e.label.is_none()));
    }

    #[test]
    fn oracle_reproduces_every_label() {
        for seed in 0..5 {
            let cfg = SyntheticGrammarConfig {
                seed,
                ..Default::default()
            };
            let g = SyntheticGrammar::new(cfg.clone()).unwrap();
            let oracle = OracleChecker::new(&cfg).unwrap();
            let (lab, _) = g.generate(2000, 1).unwrap();
            let disagreements = lab
                .iter()
                .filter(|e| Some(oracle.label(&e.text)) != e.label)
                .count();
            assert_eq!(disagreements, 0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let g = SyntheticGrammar::new(SyntheticGrammarConfig::default()).unwrap();
        assert_eq!(g.generate(50, 50).unwrap(), g.generate(50, 50).unwrap());
        assert!(g.generate(0, 5).is_err());
    }

    #[test]
    fn target_is_the_subject() {
        let g = SyntheticGrammar::new(SyntheticGrammarConfig::default()).unwrap();
        assert_eq!(g.extract_target("f1 s3 like o4 f2").as_deref(), Some("s3"));
        assert_eq!(g.extract_target("f1 f2"), None);
    }
}
