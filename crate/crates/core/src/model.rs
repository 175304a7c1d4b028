//! Dual-head causal transformer.
//!
//! A pre-LayerNorm decoder stack produces hidden states `h_0..h_n`. The text
//! head maps `h_i` to next-token logits; the identification head maps `h_i`
//! to a 2-way (literal, metaphor) distribution whose metaphor component is the
//! prefix probability `p_i`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::numeric::{cast, checkpoint, kernels, Float, ParamStore, Tape, Tensor, Var};

/// Class index of the literal component of the identification head.
pub const LITERAL: usize = 0;
/// Class index of the metaphor component of the identification head.
pub const METAPHOR: usize = 1;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, 4 heads, `d_model` 64, `d_ff` 256.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 64,
            dropout: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIx>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
    ident_w: usize,
    ident_b: usize,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Parameter names, shapes and initialisers in store order.
fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
    let mut specs = vec![
        ("tok_emb".to_string(), vec![v, d], Init::Normal),
        ("pos_emb".to_string(), vec![c.max_len, d], Init::Normal),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("h{l}.{s}");
        specs.extend([
            (p("ln1.g"), vec![d], Init::Ones),
            (p("ln1.b"), vec![d], Init::Zeros),
            (p("attn.wq"), vec![d, d], Init::Normal),
            (p("attn.bq"), vec![d], Init::Zeros),
            (p("attn.wk"), vec![d, d], Init::Normal),
            (p("attn.bk"), vec![d], Init::Zeros),
            (p("attn.wv"), vec![d, d], Init::Normal),
            (p("attn.bv"), vec![d], Init::Zeros),
            (p("attn.wo"), vec![d, d], Init::Normal),
            (p("attn.bo"), vec![d], Init::Zeros),
            (p("ln2.g"), vec![d], Init::Ones),
            (p("ln2.b"), vec![d], Init::Zeros),
            (p("mlp.w1"), vec![d, f], Init::Normal),
            (p("mlp.b1"), vec![f], Init::Zeros),
            (p("mlp.w2"), vec![f, d], Init::Normal),
            (p("mlp.b2"), vec![d], Init::Zeros),
        ]);
    }
    specs.extend([
        ("ln_f.g".to_string(), vec![d], Init::Ones),
        ("ln_f.b".to_string(), vec![d], Init::Zeros),
        ("head.w".to_string(), vec![d, v], Init::Normal),
        ("head.b".to_string(), vec![v], Init::Zeros),
        ("ident.w".to_string(), vec![d, 2], Init::Normal),
        ("ident.b".to_string(), vec![2], Init::Zeros),
    ]);
    specs
}

impl Layout {
    fn new(n_layers: usize) -> Self {
        let per_layer = 16;
        let layers = (0..n_layers)
            .map(|l| {
                let o = 2 + l * per_layer;
                LayerIx {
                    ln1_g: o,
                    ln1_b: o + 1,
                    wq: o + 2,
                    bq: o + 3,
                    wk: o + 4,
                    bk: o + 5,
                    wv: o + 6,
                    bv: o + 7,
                    wo: o + 8,
                    bo: o + 9,
                    ln2_g: o + 10,
                    ln2_b: o + 11,
                    w1: o + 12,
                    b1: o + 13,
                    w2: o + 14,
                    b2: o + 15,
                }
            })
            .collect();
        let o = 2 + n_layers * per_layer;
        Self {
            tok_emb: 0,
            pos_emb: 1,
            layers,
            lnf_g: o,
            lnf_b: o + 1,
            head_w: o + 2,
            head_b: o + 3,
            ident_w: o + 4,
            ident_b: o + 5,
        }
    }
}

/// All trainable parameters of the dual-head model.
#[derive(Debug, Clone, PartialEq)]
pub struct LMParams<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    layout: Layout,
}

/// Dropout switch for a forward pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn dropout<T: Float>(&mut self, tape: &mut Tape<T>, x: Var, p: f64) -> Var {
        match self {
            Mode::Eval => x,
            Mode::Train(rng) => tape.dropout(x, p, *rng),
        }
    }
}

/// Evaluation-mode outputs for one sequence.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub hidden: Tensor<T>,
    pub token_logits: Tensor<T>,
    /// Metaphor-class probability `p_i` of every prefix `w_0..w_i`.
    pub meta_probs: Vec<T>,
}

impl<T: Float> LMParams<T> {
    /// Normal(0, 0.02²) weights, zero biases, unit LayerNorm gains.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut store = ParamStore::new();
        for (name, shape, init) in param_specs(&config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Normal => (0..n).map(|_| cast(normal.sample(&mut rng))).collect(),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            store.push(name, Tensor::new(shape, data)?.with_grad());
        }
        let layout = Layout::new(config.n_layers);
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    /// Wraps an existing store after checking names and shapes against `config`.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                specs.len(),
                store.len()
            )));
        }
        for ((name, shape, _), (sname, t)) in specs.iter().zip(store.iter()) {
            if name != sname || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {sname} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            layout: Layout::new(config.n_layers),
            config,
            store,
        })
    }

    pub fn cast<U: Float>(&self) -> LMParams<U> {
        LMParams {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Store indices of the identification head `(W_m, b_m)`.
    pub fn ident_head(&self) -> [usize; 2] {
        [self.layout.ident_w, self.layout.ident_b]
    }

    /// Store indices of the text prediction head `(W, b)`.
    pub fn lm_head(&self) -> [usize; 2] {
        [self.layout.head_w, self.layout.head_b]
    }

    pub fn set_trainable(&mut self, indices: &[usize], trainable: bool) {
        for &i in indices {
            self.store.get_mut(i).requires_grad = trainable;
        }
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<T>) -> Bound<'p, T> {
        Bound {
            params: self,
            vars: tape.bind(&self.store),
        }
    }

    /// Builds the graph against handles already bound from a store with this
    /// model's layout; the values in `self.store` are not read.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound<'_, T> {
        assert_eq!(vars.len(), self.store.len(), "one handle per parameter");
        Bound { params: self, vars }
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::OutOfRange {
                what: "sequence length",
                index: ids.len(),
                limit: self.config.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::OutOfRange {
                what: "token id",
                index: bad,
                limit: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Evaluation-mode forward pass over one sequence.
    pub fn forward(&self, ids: &[TokenId]) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let hidden = b.hidden(&mut tape, ids, &mut Mode::Eval)?;
        let logits = b.token_logits(&mut tape, hidden)?;
        let all: Vec<usize> = (0..ids.len()).collect();
        let ident = b.ident_logits(&mut tape, hidden, &all, &mut Mode::Eval)?;
        let (n, d) = (ids.len(), self.config.d_model);
        Ok(ForwardOutput {
            hidden: Tensor::new(vec![n, d], tape.value(hidden).to_vec())?,
            token_logits: Tensor::new(vec![n, self.config.vocab_size], tape.value(logits).to_vec())?,
            meta_probs: tape.value(ident).chunks_exact(2).map(metaphor_prob).collect(),
        })
    }

    /// Prefix metaphor probabilities `p_0..p_n` without the text head.
    pub fn meta_probs(&self, ids: &[TokenId]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let hidden = b.hidden(&mut tape, ids, &mut Mode::Eval)?;
        let all: Vec<usize> = (0..ids.len()).collect();
        let ident = b.ident_logits(&mut tape, hidden, &all, &mut Mode::Eval)?;
        Ok(tape.value(ident).chunks_exact(2).map(metaphor_prob).collect())
    }

    /// `softmax(W h_i + b)` at the last position of `prefix`.
    pub fn next_token_dist(&self, prefix: &[TokenId]) -> Result<Vec<T>> {
        Ok(kernels::softmax(&self.last_logits(prefix)?))
    }

    /// Text-head logits at the last position of `prefix`.
    pub fn last_logits(&self, prefix: &[TokenId]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let hidden = b.hidden(&mut tape, prefix, &mut Mode::Eval)?;
        let last = tape.select_rows(hidden, &[prefix.len() - 1])?;
        let logits = b.token_logits(&mut tape, last)?;
        Ok(tape.value(logits).to_vec())
    }

    /// `p_i`: metaphor probability of the sub-sentence `w_0..w_i`.
    pub fn prefix_meta_prob(&self, ids: &[TokenId], i: usize) -> Result<T> {
        if i >= ids.len() {
            return Err(Error::OutOfRange {
                what: "prefix index",
                index: i,
                limit: ids.len(),
            });
        }
        // Causality makes the suffix irrelevant, so only the prefix is run.
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let hidden = b.hidden(&mut tape, &ids[..=i], &mut Mode::Eval)?;
        let ident = b.ident_logits(&mut tape, hidden, &[i], &mut Mode::Eval)?;
        Ok(metaphor_prob(tape.value(ident)))
    }

    /// `p_n`: the prefix probability at the final token.
    pub fn sentence_meta_prob(&self, ids: &[TokenId]) -> Result<T> {
        if ids.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        self.prefix_meta_prob(ids, ids.len() - 1)
    }

    /// Text-head logits for an externally supplied hidden state.
    pub fn token_logits_from_hidden(&self, hidden: &[T]) -> Vec<T> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let mut out = kernels::matmul(hidden, self.store.get(self.layout.head_w).data(), 1, d, v);
        out.iter_mut()
            .zip(self.store.get(self.layout.head_b).data())
            .for_each(|(o, &b)| *o += b);
        out
    }

    /// Identification-head metaphor probability for a supplied hidden state.
    pub fn meta_prob_from_hidden(&self, hidden: &[T]) -> T {
        let d = self.config.d_model;
        let mut out = kernels::matmul(hidden, self.store.get(self.layout.ident_w).data(), 1, d, 2);
        out.iter_mut()
            .zip(self.store.get(self.layout.ident_b).data())
            .for_each(|(o, &b)| *o += b);
        metaphor_prob(&out)
    }

    fn checkpoint_meta(&self, vocab: Option<&Vocab>) -> serde_json::Value {
        serde_json::json!({
            "model_config": self.config,
            "vocab_hash": vocab.map(Vocab::hash),
        })
    }

    pub fn to_bytes(&self, vocab: Option<&Vocab>) -> Vec<u8> {
        checkpoint::encode(&self.store, &self.checkpoint_meta(vocab))
    }

    pub fn save(&self, path: &Path, vocab: Option<&Vocab>) -> Result<()> {
        checkpoint::save(path, &self.store, &self.checkpoint_meta(vocab))
    }

    /// Loads a checkpoint and returns it with the vocabulary hash it was saved with.
    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        let (store, meta) = checkpoint::load::<T>(path)?;
        Self::from_parts(store, meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<String>)> {
        let (store, meta) = checkpoint::decode::<T>(bytes)?;
        Self::from_parts(store, meta)
    }

    fn from_parts(store: ParamStore<T>, meta: serde_json::Value) -> Result<(Self, Option<String>)> {
        let config: ModelConfig = serde_json::from_value(meta["model_config"].clone())
            .map_err(|e| Error::Checkpoint(format!("model_config: {e}")))?;
        let hash = meta["vocab_hash"].as_str().map(str::to_string);
        Ok((Self::from_store(config, store)?, hash))
    }

    /// Loads a checkpoint and verifies that it was trained with `vocab`.
    pub fn load_for(path: &Path, vocab: &Vocab) -> Result<Self> {
        let (params, hash) = Self::load(path)?;
        if params.config.vocab_size != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint vocab_size {} does not match vocabulary of {}",
                params.config.vocab_size,
                vocab.len()
            )));
        }
        if let Some(h) = hash {
            if h != vocab.hash() {
                return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
            }
        }
        Ok(params)
    }
}

fn metaphor_prob<T: Float>(logits: &[T]) -> T {
    kernels::softmax(logits)[METAPHOR]
}

/// Parameters bound to a tape; builds the forward graph.
pub struct Bound<'p, T> {
    params: &'p LMParams<T>,
    vars: Vec<Var>,
}

impl<T: Float> Bound<'_, T> {
    pub fn var(&self, store_index: usize) -> Var {
        self.vars[store_index]
    }

    /// Final hidden states `h_0..h_{n−1}` (after the last LayerNorm).
    pub fn hidden(&self, tape: &mut Tape<T>, ids: &[TokenId], mode: &mut Mode) -> Result<Var> {
        let p = self.params;
        p.check_ids(ids)?;
        let c = &p.config;
        let lay = &p.layout;
        let v = |i: usize| self.vars[i];
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.gather(v(lay.tok_emb), ids)?;
        let pos = tape.gather(v(lay.pos_emb), &positions)?;
        let mut x = tape.add(tok, pos)?;
        x = mode.dropout(tape, x, c.dropout);
        for l in &lay.layers {
            let h = tape.layer_norm(x, v(l.ln1_g), v(l.ln1_b))?;
            let q = linear(tape, h, v(l.wq), v(l.bq))?;
            let k = linear(tape, h, v(l.wk), v(l.bk))?;
            let val = linear(tape, h, v(l.wv), v(l.bv))?;
            let a = tape.causal_attention(q, k, val, c.n_heads)?;
            let a = linear(tape, a, v(l.wo), v(l.bo))?;
            let a = mode.dropout(tape, a, c.dropout);
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, v(l.ln2_g), v(l.ln2_b))?;
            let f = linear(tape, h, v(l.w1), v(l.b1))?;
            let f = tape.gelu(f);
            let f = linear(tape, f, v(l.w2), v(l.b2))?;
            let f = mode.dropout(tape, f, c.dropout);
            x = tape.add(x, f)?;
        }
        tape.layer_norm(x, v(lay.lnf_g), v(lay.lnf_b))
    }

    /// `W h_i + b` for every row of `hidden`.
    pub fn token_logits(&self, tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
        let lay = &self.params.layout;
        linear(tape, hidden, self.vars[lay.head_w], self.vars[lay.head_b])
    }

    /// `W_m h_i + b_m` for the selected rows of `hidden` (`literal, metaphor` columns).
    pub fn ident_logits(
        &self,
        tape: &mut Tape<T>,
        hidden: Var,
        rows: &[usize],
        mode: &mut Mode,
    ) -> Result<Var> {
        let lay = &self.params.layout;
        let h = tape.select_rows(hidden, rows)?;
        let h = mode.dropout(tape, h, self.params.config.dropout);
        linear(tape, h, self.vars[lay.ident_w], self.vars[lay.ident_b])
    }
}

fn linear<T: Float>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 32,
            max_len: 12,
            dropout: 0.1,
            seed: 3,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(10);
        c.d_model = 65;
        assert!(LMParams::<f32>::init(c).is_err());
        let mut c = tiny(10);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::desk(40).validate().is_ok());
    }

    #[test]
    fn init_is_seeded() {
        let a = LMParams::<f32>::init(tiny(10)).unwrap();
        let b = LMParams::<f32>::init(tiny(10)).unwrap();
        assert_eq!(a, b);
        let mut c = tiny(10);
        c.seed = 4;
        assert_ne!(a.store, LMParams::<f32>::init(c).unwrap().store);
        assert!(a.store.get(a.ident_head()[1]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_shapes() {
        let p = LMParams::<f64>::init(tiny(10)).unwrap();
        let out = p.forward(&[crate::corpus::BOS]).unwrap();
        assert_eq!(out.hidden.shape(), &[1, 16]);
        assert_eq!(out.token_logits.shape(), &[1, 10]);
        assert_eq!(out.meta_probs.len(), 1);
    }

    #[test]
    fn rejects_bad_sequences() {
        let p = LMParams::<f32>::init(tiny(10)).unwrap();
        assert!(p.forward(&[]).is_err());
        assert!(p.forward(&[1; 13]).is_err());
        assert!(p.forward(&[1, 10]).is_err());
        assert!(p.prefix_meta_prob(&[1, 5], 2).is_err());
    }

    #[test]
    fn zero_identification_head_gives_one_half() {
        let mut p = LMParams::<f64>::init(tiny(10)).unwrap();
        for i in p.ident_head() {
            p.store.get_mut(i).data_mut().fill(0.0);
        }
        let ids = [1, 5, 3, 6, 2];
        for i in 0..ids.len() {
            assert_eq!(p.prefix_meta_prob(&ids, i).unwrap(), 0.5);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let p = LMParams::<f32>::init(tiny(10)).unwrap();
        let bytes = p.to_bytes(None);
        assert_eq!(bytes, p.to_bytes(None));
        let (q, hash) = LMParams::<f32>::from_bytes(&bytes).unwrap();
        assert!(hash.is_none());
        let ids = [1, 5, 3, 6, 2];
        let (a, b) = (p.forward(&ids).unwrap(), q.forward(&ids).unwrap());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.token_logits), bits(&b.token_logits));
        assert_eq!(bits(&a.hidden), bits(&b.hidden));
        assert!(LMParams::<f64>::from_bytes(&bytes).is_err());
    }
}
