use serde::{Deserialize, Serialize};

use super::forward::{forward_logits, forward_packed, KvCache, Segment};
use super::Params;
use crate::error::{Error, Result};
use crate::linalg::{entropy_from_log_probs, log_softmax, log_sum_exp};
use crate::vocab::{TokenId, Vocab};

/// Early-exit probe: the postfix that forces an answer and the answer ids whose
/// next-token probabilities form the answer distribution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerProbe {
    pub postfix: Vec<TokenId>,
    pub answers: Vec<TokenId>,
}

impl AnswerProbe {
    pub fn standard(vocab: &Vocab) -> Self {
        Self {
            postfix: vocab.postfix().to_vec(),
            answers: vocab.answer_alphabet(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    /// Ancestral sampling from `softmax(z / T)`.
    Temperature(f64),
    /// Argmax decoding, the zero-temperature limit.
    Greedy,
}

/// One completion with per-token statistics of the policy that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledCompletion {
    pub tokens: Vec<TokenId>,
    /// `log π(o_t | q, o_<t)` at temperature 1.
    pub logprobs_old: Vec<f64>,
    /// Entropy of the full next-token distribution at each emitted position.
    pub next_token_entropies: Vec<f64>,
}

impl SampledCompletion {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn pick(logits: &[f64], decoding: Decoding, rng: &mut impl rand::Rng) -> usize {
    match decoding {
        Decoding::Greedy => logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &z)| if z > best.1 { (i, z) } else { best })
            .0,
        Decoding::Temperature(t) => {
            let scaled: Vec<f64> = logits.iter().map(|z| z / t).collect();
            let lse = log_sum_exp(&scaled);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, z) in scaled.iter().enumerate() {
                acc += (z - lse).exp();
                if u < acc {
                    return i;
                }
            }
            scaled.len() - 1
        }
    }
}

/// Autoregressive decoding until `eos` or `budget` tokens.
pub fn sample_completion(
    params: &Params,
    query: &[TokenId],
    budget: usize,
    decoding: Decoding,
    eos: TokenId,
    rng: &mut impl rand::Rng,
) -> Result<SampledCompletion> {
    if budget == 0 {
        return Err(Error::Domain("completion budget must be at least 1".into()));
    }
    if let Decoding::Temperature(t) = decoding {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Domain(format!("temperature must be positive, got {t}")));
        }
    }
    if query.is_empty() {
        return Err(Error::Domain("empty query".into()));
    }
    let max = params.config.max_seq_len;
    if query.len() + budget > max {
        return Err(Error::Length {
            requested: query.len() + budget,
            max,
        });
    }
    let (logits, mut cache) = forward_logits(params, query, None)?;
    let mut row = logits.last_row().to_vec();
    let mut out = SampledCompletion {
        tokens: Vec::with_capacity(budget),
        logprobs_old: Vec::with_capacity(budget),
        next_token_entropies: Vec::with_capacity(budget),
    };
    loop {
        let logp = log_softmax(&row);
        let tok = pick(&row, decoding, rng);
        out.tokens.push(TokenId(tok as u32));
        out.logprobs_old.push(logp[tok]);
        out.next_token_entropies.push(entropy_from_log_probs(&logp));
        if tok == eos.idx() || out.tokens.len() == budget {
            break;
        }
        let (next, c) = forward_logits(params, &[TokenId(tok as u32)], Some(cache))?;
        cache = c;
        row = next.last_row().to_vec();
    }
    Ok(out)
}

/// Deterministic argmax completion.
pub fn greedy_completion(params: &Params, query: &[TokenId], budget: usize, eos: TokenId) -> Result<SampledCompletion> {
    let mut unused = crate::rng::stream(0, &[]);
    sample_completion(params, query, budget, Decoding::Greedy, eos, &mut unused)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenScores {
    pub logprobs: Vec<f64>,
    pub entropies: Vec<f64>,
}

/// Teacher-forced log-probabilities and next-token entropies of `completion`
/// given `query`, from a single pass over `query ++ completion[..n-1]`.
pub fn token_scores(params: &Params, query: &[TokenId], completion: &[TokenId]) -> Result<TokenScores> {
    if query.is_empty() || completion.is_empty() {
        return Err(Error::Domain("token_scores needs a query and a completion".into()));
    }
    let mut seq = query.to_vec();
    seq.extend_from_slice(&completion[..completion.len() - 1]);
    let logits = forward_packed(params, &[&seq])?;
    let mut scores = TokenScores {
        logprobs: Vec::with_capacity(completion.len()),
        entropies: Vec::with_capacity(completion.len()),
    };
    for (t, &tok) in completion.iter().enumerate() {
        let logp = log_softmax(logits.row(query.len() - 1 + t));
        scores.logprobs.push(logp[tok.idx()]);
        scores.entropies.push(entropy_from_log_probs(&logp));
    }
    Ok(scores)
}

/// Restricts a logit row to the answer ids and renormalizes.
pub fn answer_distribution_from_logits(row: &[f64], probe: &AnswerProbe) -> Vec<f64> {
    let sub: Vec<f64> = probe.answers.iter().map(|a| row[a.idx()]).collect();
    log_softmax(&sub).into_iter().map(f64::exp).collect()
}

/// Answer distribution after appending the probe postfix to the prefix held in
/// `cache`. The cache itself is left untouched.
pub fn answer_distribution(params: &Params, cache: &KvCache, probe: &AnswerProbe) -> Result<Vec<f64>> {
    let seg = Segment {
        prefix_len: cache.len(),
        tokens: &probe.postfix,
    };
    let logits = super::forward::forward_segments(params, cache, &[seg])?;
    Ok(answer_distribution_from_logits(logits.last_row(), probe))
}
