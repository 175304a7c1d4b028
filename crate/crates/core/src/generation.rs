//! Decoding from a target-word prompt `[BOS, target…, DELIM]`.
//!
//! Decoders never choose PAD, BOS, DELIM or UNK; log-probabilities are always
//! taken from the model's unmasked distribution, so a candidate's `log_prob`
//! equals the teacher-forced score of its tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocab, BOS, DELIM, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::model::LMParams;
use crate::numeric::Float;

const BLOCKED: [TokenId; 4] = [PAD, BOS, DELIM, UNK];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    #[default]
    Beam,
    Topk,
}

impl DecodeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Beam => "beam",
            DecodeMode::Topk => "topk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationRequest {
    pub target: String,
    pub beam_size: usize,
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
    pub k: usize,
    pub seed: u64,
}

impl Default for GenerationRequest {
    fn default() -> Self {
        Self {
            target: String::new(),
            beam_size: 12,
            max_new_tokens: 24,
            mode: DecodeMode::Beam,
            k: 5,
            seed: 0,
        }
    }
}

impl GenerationRequest {
    pub fn for_target(target: impl Into<String>) -> Self {
        Self {
            target: target.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.k == 0 || self.max_new_tokens == 0 {
            return Err(Error::Config(
                "beam_size, k and max_new_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A generated continuation (prompt excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub ids: Vec<TokenId>,
    pub log_prob: f64,
    /// True when the continuation ends with EOS.
    pub finished: bool,
}

impl Candidate {
    /// Length-normalised log-probability.
    pub fn score(&self) -> f64 {
        if self.ids.is_empty() {
            0.0
        } else {
            self.log_prob / self.ids.len() as f64
        }
    }

    /// Content tokens, without the closing EOS.
    pub fn body(&self) -> &[TokenId] {
        match self.ids.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.ids,
        }
    }
}

/// `[BOS, target…, DELIM]`; unknown words map to UNK.
pub fn build_prompt(vocab: &Vocab, target: &str) -> Result<Vec<TokenId>> {
    let ids = vocab.ids(target);
    if ids.is_empty() {
        return Err(Error::Empty("generation target".into()));
    }
    let mut prompt = Vec::with_capacity(ids.len() + 2);
    prompt.push(BOS);
    prompt.extend(ids);
    prompt.push(DELIM);
    Ok(prompt)
}

fn step_budget<T: Float>(params: &LMParams<T>, prompt: &[TokenId], request: &GenerationRequest) -> Result<usize> {
    request.validate()?;
    let room = params.config.max_len.saturating_sub(prompt.len());
    if room == 0 {
        return Err(Error::OutOfRange {
            what: "prompt length",
            index: prompt.len(),
            limit: params.config.max_len,
        });
    }
    Ok(room.min(request.max_new_tokens))
}

fn log_dist<T: Float>(params: &LMParams<T>, prompt: &[TokenId], generated: &[TokenId]) -> Result<Vec<f64>> {
    let mut seq = Vec::with_capacity(prompt.len() + generated.len());
    seq.extend_from_slice(prompt);
    seq.extend_from_slice(generated);
    Ok(params
        .next_token_dist(&seq)?
        .into_iter()
        .map(|p| p.to_f64_lossless().ln())
        .collect())
}

/// Whether `token` may follow `generated` tokens. EOS needs at least one
/// content token before it: an empty body is not a sentence.
fn allowed(token: TokenId, generated: usize) -> bool {
    !BLOCKED.contains(&token) && (generated > 0 || token != EOS)
}

/// Highest-probability allowed token; ties go to the lowest id.
fn argmax_allowed(logp: &[f64], generated: usize) -> TokenId {
    let mut best = None;
    for (t, &lp) in logp.iter().enumerate() {
        if !allowed(t, generated) {
            continue;
        }
        match best {
            Some((_, b)) if lp <= b => {}
            _ => best = Some((t, lp)),
        }
    }
    best.expect("vocabulary has a non-reserved token").0
}

pub fn generate_greedy<T: Float>(params: &LMParams<T>, prompt: &[TokenId], request: &GenerationRequest) -> Result<Candidate> {
    let steps = step_budget(params, prompt, request)?;
    let mut c = Candidate {
        ids: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    for _ in 0..steps {
        let logp = log_dist(params, prompt, &c.ids)?;
        let t = argmax_allowed(&logp, c.ids.len());
        c.log_prob += logp[t];
        c.ids.push(t);
        if t == EOS {
            c.finished = true;
            break;
        }
    }
    Ok(c)
}

fn topk_with_rng<T: Float>(
    params: &LMParams<T>,
    prompt: &[TokenId],
    request: &GenerationRequest,
    rng: &mut ChaCha8Rng,
) -> Result<Candidate> {
    let steps = step_budget(params, prompt, request)?;
    if request.k > params.config.vocab_size {
        return Err(Error::Config(format!(
            "k = {} exceeds the vocabulary size {}",
            request.k, params.config.vocab_size
        )));
    }
    let mut c = Candidate {
        ids: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    for _ in 0..steps {
        let logp = log_dist(params, prompt, &c.ids)?;
        let mut order: Vec<TokenId> = (0..logp.len()).filter(|&t| allowed(t, c.ids.len())).collect();
        order.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
        order.truncate(request.k);
        let probs: Vec<f64> = order.iter().map(|&t| logp[t].exp()).collect();
        let z: f64 = probs.iter().sum();
        let mut u = rng.random::<f64>() * z;
        let mut t = *order.last().expect("k ≥ 1");
        for (&cand, &p) in order.iter().zip(&probs) {
            if u < p {
                t = cand;
                break;
            }
            u -= p;
        }
        c.log_prob += logp[t];
        c.ids.push(t);
        if t == EOS {
            c.finished = true;
            break;
        }
    }
    Ok(c)
}

/// One sample from the renormalised top-`k` distribution at every step.
pub fn generate_topk<T: Float>(params: &LMParams<T>, prompt: &[TokenId], request: &GenerationRequest) -> Result<Candidate> {
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    topk_with_rng(params, prompt, request, &mut rng)
}

/// Beam search returning `beam_size` candidates sorted by score.
///
/// Expansions are ranked by total log-probability (ties: beam index, then
/// token id). An EOS expansion within the top `beam_size` ranks retires to the
/// finished pool; the search stops once the pool holds `beam_size` hypotheses
/// or the step budget runs out. Unfinished beams pad a short pool, and the
/// returned list is ordered by score.
pub fn generate_beam<T: Float>(params: &LMParams<T>, prompt: &[TokenId], request: &GenerationRequest) -> Result<Vec<Candidate>> {
    let steps = step_budget(params, prompt, request)?;
    let width = request.beam_size;
    let mut beams = vec![Candidate {
        ids: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut pool: Vec<Candidate> = Vec::new();
    for _ in 0..steps {
        let mut expansions: Vec<(f64, usize, TokenId)> = Vec::new();
        for (b, beam) in beams.iter().enumerate() {
            let logp = log_dist(params, prompt, &beam.ids)?;
            expansions.extend(
                (0..logp.len())
                    .filter(|&t| allowed(t, beam.ids.len()))
                    .map(|t| (beam.log_prob + logp[t], b, t)),
            );
        }
        expansions.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut next = Vec::with_capacity(width);
        for (rank, &(lp, b, t)) in expansions.iter().enumerate() {
            let mut ids = beams[b].ids.clone();
            ids.push(t);
            if t == EOS {
                if rank < width {
                    pool.push(Candidate {
                        ids,
                        log_prob: lp,
                        finished: true,
                    });
                }
            } else {
                next.push(Candidate {
                    ids,
                    log_prob: lp,
                    finished: false,
                });
            }
            if next.len() == width {
                break;
            }
        }
        beams = next;
        if pool.len() >= width || beams.is_empty() {
            break;
        }
    }
    sort_by_score(&mut pool);
    pool.truncate(width);
    if pool.len() < width {
        sort_by_score(&mut beams);
        pool.extend(beams.into_iter().take(width - pool.len()));
        sort_by_score(&mut pool);
    }
    Ok(pool)
}

fn sort_by_score(cands: &mut [Candidate]) {
    cands.sort_by(|a, b| b.score().total_cmp(&a.score()).then_with(|| a.ids.cmp(&b.ids)));
}

/// Dispatches on `request.mode`: greedy yields one candidate, beam and top-k
/// yield `beam_size` (top-k draws them from one seeded stream).
pub fn generate<T: Float>(params: &LMParams<T>, vocab: &Vocab, request: &GenerationRequest) -> Result<Vec<Candidate>> {
    let prompt = build_prompt(vocab, &request.target)?;
    match request.mode {
        DecodeMode::Greedy => Ok(vec![generate_greedy(params, &prompt, request)?]),
        DecodeMode::Beam => generate_beam(params, &prompt, request),
        DecodeMode::Topk => {
            let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
            (0..request.beam_size)
                .map(|_| topk_with_rng(params, &prompt, request, &mut rng))
                .collect()
        }
    }
}

/// One line of the generation output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedLine {
    pub target: String,
    pub text: String,
    pub score: f64,
    pub mode: DecodeMode,
}

pub fn render(vocab: &Vocab, request: &GenerationRequest, cands: &[Candidate]) -> Result<Vec<GeneratedLine>> {
    cands
        .iter()
        .map(|c| {
            Ok(GeneratedLine {
                target: request.target.clone(),
                text: vocab.decode(c.body())?,
                score: c.score(),
                mode: request.mode,
            })
        })
        .collect()
}

/// Teacher-forced `Σ log P(w_i | prefix)` of `generated` after `prompt`.
pub fn sequence_log_prob<T: Float>(params: &LMParams<T>, prompt: &[TokenId], generated: &[TokenId]) -> Result<f64> {
    if generated.is_empty() {
        return Ok(0.0);
    }
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(&generated[..generated.len() - 1]);
    let out = params.forward(&seq)?;
    let v = params.config.vocab_size;
    let logits = out.token_logits.data();
    let mut total = 0.0;
    for (i, &t) in generated.iter().enumerate() {
        let row = prompt.len() - 1 + i;
        let lp = crate::numeric::kernels::log_softmax(&logits[row * v..(row + 1) * v]);
        total += lp[t].to_f64_lossless();
    }
    Ok(total)
}
