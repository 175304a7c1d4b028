//! Per-token metaphor weighting.
//!
//! The importance of token `w_i` is how much it moves the prefix metaphor
//! probability, `I_i = p_i − p_{i−1}` for `i = 1..n`. Training weights are a
//! softmax over the clamped importances, `I'_i ∝ exp(max(0, I_i))`, so tokens
//! that make the sentence more metaphorical get more of the loss.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::LMParams;
use crate::numeric::Float;

/// Prefix probabilities of one sentence and the weights derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixProfile {
    /// `p_0..p_n`.
    pub p: Vec<f64>,
    /// `I_1..I_n`.
    pub importance: Vec<f64>,
    /// `I'_1..I'_n`, aligned with the prediction of `w_1..w_n`.
    pub weights: Vec<f64>,
    pub sentence_prob: f64,
}

impl PrefixProfile {
    /// Builds the profile from prefix probabilities.
    pub fn from_probs(p: Vec<f64>) -> Result<Self> {
        let importance = importance(&p)?;
        let weights = normalize(&importance)?;
        let sentence_prob = *p.last().expect("length checked");
        Ok(Self {
            p,
            importance,
            weights,
            sentence_prob,
        })
    }

    /// Uniform weights `1/n`, the "no weighting" ablation.
    pub fn uniform_weights(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }
}

/// `I_i = p_i − p_{i−1}` for `i = 1..n`.
pub fn importance(p: &[f64]) -> Result<Vec<f64>> {
    if p.len() < 2 {
        return Err(Error::Empty(format!(
            "importance needs at least two prefix probabilities, got {}",
            p.len()
        )));
    }
    Ok(p.windows(2).map(|w| w[1] - w[0]).collect())
}

/// `exp(max(0, I_i)) / Σ_j exp(max(0, I_j))`.
pub fn normalize(importance: &[f64]) -> Result<Vec<f64>> {
    if importance.is_empty() {
        return Err(Error::Empty("normalize needs at least one importance".into()));
    }
    if importance.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("importance"));
    }
    // Clamped values are ≥ 0, so shifting by the max keeps every exponent ≤ 0.
    let clamped: Vec<f64> = importance.iter().map(|&v| v.max(0.0)).collect();
    let max = clamped.iter().copied().fold(0.0, f64::max);
    let e: Vec<f64> = clamped.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// One evaluation-mode forward pass yielding every `p_i` and the weights.
pub fn profile<T: Float>(params: &LMParams<T>, ids: &[TokenId]) -> Result<PrefixProfile> {
    let p = params
        .meta_probs(ids)?
        .into_iter()
        .map(Float::to_f64_lossless)
        .collect();
    PrefixProfile::from_probs(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionFormat {
    Json,
    Html,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Attribution {
    pub tokens: Vec<String>,
    pub p: Vec<f64>,
    pub importance: Vec<f64>,
    pub weights: Vec<f64>,
    pub meta_score: f64,
}

/// Shading intensity per token: `max(0, I_i) / max_j max(0, I_j)`, all zero
/// when no importance is positive.
pub fn intensities(profile: &PrefixProfile) -> Vec<f64> {
    let pos: Vec<f64> = profile.importance.iter().map(|&v| v.max(0.0)).collect();
    let max = pos.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        pos.into_iter().map(|v| v / max).collect()
    } else {
        vec![0.0; pos.len()]
    }
}

/// Pairs the profile with the rendered tokens `w_1..w_n`.
///
/// `tokens` must have one entry per importance value.
pub fn attribution(profile: &PrefixProfile, tokens: &[String]) -> Result<Attribution> {
    if tokens.len() != profile.importance.len() {
        return Err(Error::Shape {
            op: "attribution",
            left: vec![tokens.len()],
            right: vec![profile.importance.len()],
        });
    }
    Ok(Attribution {
        tokens: tokens.to_vec(),
        p: profile.p.clone(),
        importance: profile.importance.clone(),
        weights: profile.weights.clone(),
        meta_score: profile.sentence_prob,
    })
}

pub fn render_json(profile: &PrefixProfile, tokens: &[String]) -> Result<String> {
    let a = attribution(profile, tokens)?;
    Ok(serde_json::to_string_pretty(&a).expect("attribution serializes") + "\n")
}

pub fn render_html(profile: &PrefixProfile, tokens: &[String]) -> Result<String> {
    attribution(profile, tokens)?;
    let mut s = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Token attribution</title></head>\n\
         <body style=\"font-family: monospace; font-size: 18px;\">\n<div>\n",
    );
    for (tok, (a, w)) in tokens
        .iter()
        .zip(intensities(profile).iter().zip(&profile.weights))
    {
        let _ = writeln!(
            s,
            "<span class=\"tok\" title=\"weight {w:.4}\" style=\"background-color: rgba(220, 40, 40, {a:.4}); padding: 2px; margin: 1px;\">{}</span>",
            escape_html(tok)
        );
    }
    let _ = write!(
        s,
        "</div>\n<p>Meta Score: <span class=\"meta-score\">{:.4}</span></p>\n</body></html>\n",
        profile.sentence_prob
    );
    Ok(s)
}

pub fn export_attribution(
    profile: &PrefixProfile,
    tokens: &[String],
    path: &Path,
    format: AttributionFormat,
) -> Result<()> {
    let body = match format {
        AttributionFormat::Json => render_json(profile, tokens)?,
        AttributionFormat::Html => render_html(profile, tokens)?,
    };
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_examples() {
        assert_eq!(importance(&[0.5, 0.5, 0.5]).unwrap(), vec![0.0, 0.0]);
        let i = importance(&[0.1, 0.9, 0.4]).unwrap();
        assert!((i[0] - 0.8).abs() < 1e-12 && (i[1] + 0.5).abs() < 1e-12);
        assert!(importance(&[0.3]).is_err());
        let w = normalize(&[0.0, 0.0, 0.0]).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let w = normalize(&[0.8, -0.5]).unwrap();
        let z = 0.8f64.exp() + 1.0;
        assert!((w[0] - 0.8f64.exp() / z).abs() < 1e-12);
        assert!((w[0] - 0.6900).abs() < 1e-4 && (w[1] - 0.3100).abs() < 1e-4);
        assert!(normalize(&[]).is_err());
        assert!(normalize(&[f64::NAN]).is_err());
    }

    #[test]
    fn uniform_profile_has_no_shading() {
        let prof = PrefixProfile::from_probs(vec![0.5; 4]).unwrap();
        assert_eq!(intensities(&prof), vec![0.0; 3]);
        assert_eq!(prof.weights, PrefixProfile::uniform_weights(3));
        let toks: Vec<String> = ["a", "<b>", "c"].iter().map(|s| s.to_string()).collect();
        let html = render_html(&prof, &toks).unwrap();
        assert_eq!(html.matches("class=\"tok\"").count(), 3);
        assert!(html.contains("&lt;b&gt;") && html.contains("Meta Score"));
        assert!(render_json(&prof, &toks[..2]).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let prof = PrefixProfile::from_probs(vec![0.2, 0.7, 0.4, 0.9]).unwrap();
        let toks: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let back: Attribution = serde_json::from_str(&render_json(&prof, &toks).unwrap()).unwrap();
        assert_eq!(back.p, prof.p);
        assert_eq!(back.weights, prof.weights);
        assert_eq!(back.meta_score, prof.sentence_prob);
        let shade = intensities(&prof);
        assert!((shade[0] - 1.0).abs() < 1e-12 && shade[1] == 0.0 && shade[2] == 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn telescoping_and_normalisation(p in prop::collection::vec(0.0f64..=1.0, 2..40)) {
            let prof = PrefixProfile::from_probs(p.clone()).unwrap();
            let total: f64 = prof.importance.iter().sum();
            prop_assert!((total - (p[p.len() - 1] - p[0])).abs() < 1e-12);
            let s: f64 = prof.weights.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(prof.weights.iter().all(|&w| w > 0.0));
        }

        #[test]
        fn non_positive_importances_tie(i in prop::collection::vec(-1.0f64..1.0, 1..30)) {
            let w = normalize(&i).unwrap();
            let tied: Vec<f64> = i.iter().zip(&w).filter(|(v, _)| **v <= 0.0).map(|(_, w)| *w).collect();
            for pair in tied.windows(2) {
                prop_assert_eq!(pair[0], pair[1]);
            }
        }

        #[test]
        fn raising_positive_importance_raises_its_weight(
            i in prop::collection::vec(-1.0f64..1.0, 2..20),
            k in any::<prop::sample::Index>(),
            bump in 0.01f64..1.0,
        ) {
            let k = k.index(i.len());
            prop_assume!(i[k] > 0.0);
            let mut j = i.clone();
            j[k] += bump;
            prop_assert!(normalize(&j).unwrap()[k] > normalize(&i).unwrap()[k]);
        }
    }
}
