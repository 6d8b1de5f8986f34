//! Early-exit conditional mutual-information profiles of a completion.
//!
//! For each token the score is `s_t = H(y | q, o_<t) − H(y | q, o_≤t)`, where
//! the answer distribution at a prefix is read off by appending the probe
//! postfix and restricting the next-token distribution to the answer ids.
//! Three estimators compute the same numbers at different cost.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    answer_distribution_from_logits, forward_logits, forward_segments, AnswerProbe, ForwardCounter, Params, Segment,
};
use crate::vocab::{TokenId, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiEstimator {
    /// Two fresh full forwards per token.
    Naive,
    /// One master pass, then one postfix continuation per prefix length.
    Preload,
    /// One master pass, then postfix continuations batched in contiguous chunks.
    Chunked,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiConfig {
    pub estimator: MiEstimator,
    /// Prefix positions per chunk for the chunked estimator; the chunk count
    /// is `ceil(|o| / chunk_size)`.
    pub chunk_size: usize,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self {
            estimator: MiEstimator::Chunked,
            chunk_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiProfile {
    /// `H(y | q, o_<t)` for each token; entry 0 conditions on the query alone.
    pub pre_entropies: Vec<f64>,
    /// `H(y | q, o_≤t)`.
    pub post_entropies: Vec<f64>,
    pub scores: Vec<f64>,
    pub estimator: MiEstimator,
    /// Chunk count, for the chunked estimator.
    pub chunks: Option<usize>,
    /// Forward invocations spent on this profile.
    pub forwards: ForwardCounter,
}

impl MiProfile {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn from_prefix_entropies(h: Vec<f64>, estimator: MiEstimator, chunks: Option<usize>, start: ForwardCounter) -> Self {
        let pre = h[..h.len() - 1].to_vec();
        let post = h[1..].to_vec();
        let scores = pre.iter().zip(&post).map(|(a, b)| a - b).collect();
        Self {
            pre_entropies: pre,
            post_entropies: post,
            scores,
            estimator,
            chunks,
            forwards: ForwardCounter::since(start),
        }
    }

    /// Per-token CSV: `position,token,pre_entropy,post_entropy,score`.
    pub fn write_csv(&self, path: impl AsRef<Path>, completion: &[TokenId]) -> Result<()> {
        let path = path.as_ref();
        let vocab = Vocab::new();
        let mut out = String::from("position,token,pre_entropy,post_entropy,score\n");
        for (t, tok) in completion.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                t,
                vocab.token(*tok),
                self.pre_entropies[t],
                self.post_entropies[t],
                self.scores[t]
            ));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy_of_distribution(p: &[f64]) -> Result<f64> {
    if p.is_empty() || p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Domain("probabilities must be finite and non-negative".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("probabilities sum to {total}, not 1")));
    }
    Ok(-p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>())
}

fn check_inputs(params: &Params, query: &[TokenId], completion: &[TokenId], probe: &AnswerProbe) -> Result<()> {
    if query.is_empty() || completion.is_empty() {
        return Err(Error::Domain("profiling needs a query and a non-empty completion".into()));
    }
    let need = query.len() + completion.len() + probe.postfix.len();
    if need > params.config.max_seq_len {
        return Err(Error::Length {
            requested: need,
            max: params.config.max_seq_len,
        });
    }
    Ok(())
}

/// Re-forwards `(q, o_<t, postfix)` and `(q, o_≤t, postfix)` from scratch for every `t`.
pub fn mi_profile_naive(
    params: &Params,
    query: &[TokenId],
    completion: &[TokenId],
    probe: &AnswerProbe,
) -> Result<MiProfile> {
    check_inputs(params, query, completion, probe)?;
    let start = ForwardCounter::current();
    let entropy_at = |j: usize| -> Result<f64> {
        let mut seq = query.to_vec();
        seq.extend_from_slice(&completion[..j]);
        seq.extend_from_slice(&probe.postfix);
        let (logits, _) = forward_logits(params, &seq, None)?;
        entropy_of_distribution(&answer_distribution_from_logits(logits.last_row(), probe))
    };
    let mut pre = Vec::with_capacity(completion.len());
    let mut post = Vec::with_capacity(completion.len());
    for t in 0..completion.len() {
        pre.push(entropy_at(t)?);
        post.push(entropy_at(t + 1)?);
    }
    let scores = pre.iter().zip(&post).map(|(a, b)| a - b).collect();
    Ok(MiProfile {
        pre_entropies: pre,
        post_entropies: post,
        scores,
        estimator: MiEstimator::Naive,
        chunks: None,
        forwards: ForwardCounter::since(start),
    })
}

/// One master pass over `(q, o)`, then `|o| + 1` postfix continuations against
/// length-truncated views of the master cache.
pub fn mi_profile_preload(
    params: &Params,
    query: &[TokenId],
    completion: &[TokenId],
    probe: &AnswerProbe,
) -> Result<MiProfile> {
    check_inputs(params, query, completion, probe)?;
    let start = ForwardCounter::current();
    let cache = master_cache(params, query, completion)?;
    let h = (0..=completion.len())
        .map(|j| {
            let seg = Segment {
                prefix_len: query.len() + j,
                tokens: &probe.postfix,
            };
            let logits = forward_segments(params, &cache, &[seg])?;
            entropy_of_distribution(&answer_distribution_from_logits(logits.last_row(), probe))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MiProfile::from_prefix_entropies(h, MiEstimator::Preload, None, start))
}

/// Like preload, but the `|o| + 1` continuations are split into `chunks`
/// contiguous groups, each evaluated in one batched forward.
pub fn mi_profile_chunked(
    params: &Params,
    query: &[TokenId],
    completion: &[TokenId],
    probe: &AnswerProbe,
    chunks: usize,
) -> Result<MiProfile> {
    check_inputs(params, query, completion, probe)?;
    if chunks == 0 || chunks > completion.len() {
        return Err(Error::Config(format!(
            "chunk count {chunks} outside 1..={}",
            completion.len()
        )));
    }
    let start = ForwardCounter::current();
    let cache = master_cache(params, query, completion)?;
    let positions = completion.len() + 1;
    let k = probe.postfix.len();
    let mut h = Vec::with_capacity(positions);
    for c in 0..chunks {
        let (lo, hi) = (c * positions / chunks, (c + 1) * positions / chunks);
        let segs: Vec<Segment<'_>> = (lo..hi)
            .map(|j| Segment {
                prefix_len: query.len() + j,
                tokens: &probe.postfix,
            })
            .collect();
        let logits = forward_segments(params, &cache, &segs)?;
        for s in 0..segs.len() {
            let row = logits.row(s * k + k - 1);
            h.push(entropy_of_distribution(&answer_distribution_from_logits(row, probe))?);
        }
    }
    Ok(MiProfile::from_prefix_entropies(h, MiEstimator::Chunked, Some(chunks), start))
}

fn master_cache(params: &Params, query: &[TokenId], completion: &[TokenId]) -> Result<crate::model::KvCache> {
    let mut seq = query.to_vec();
    seq.extend_from_slice(completion);
    Ok(forward_logits(params, &seq, None)?.1)
}

/// Dispatches on the configured estimator.
pub fn mi_profile(
    params: &Params,
    query: &[TokenId],
    completion: &[TokenId],
    probe: &AnswerProbe,
    config: &MiConfig,
) -> Result<MiProfile> {
    match config.estimator {
        MiEstimator::Naive => mi_profile_naive(params, query, completion, probe),
        MiEstimator::Preload => mi_profile_preload(params, query, completion, probe),
        MiEstimator::Chunked => {
            if config.chunk_size == 0 {
                return Err(Error::Config("chunk_size must be positive".into()));
            }
            let c = completion.len().div_ceil(config.chunk_size);
            mi_profile_chunked(params, query, completion, probe, c.clamp(1, completion.len().max(1)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn probe() -> AnswerProbe {
        AnswerProbe::standard(&Vocab::new())
    }

    fn random_tokens(seed: u64, n: usize) -> Vec<TokenId> {
        let mut r = rng::stream(seed, &[77]);
        (0..n).map(|_| TokenId(r.random_range(0..17))).collect()
    }

    #[test]
    fn entropy_examples() {
        let u = vec![0.1; 10];
        assert!((entropy_of_distribution(&u).unwrap() - 10f64.ln()).abs() < 1e-12);
        let mut pm = vec![0.0; 10];
        pm[3] = 1.0;
        assert_eq!(entropy_of_distribution(&pm).unwrap(), 0.0);
        let mut half = vec![0.0; 10];
        half[0] = 0.5;
        half[1] = 0.5;
        assert!((entropy_of_distribution(&half).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(entropy_of_distribution(&[0.5, 0.6]).is_err());
        assert!(entropy_of_distribution(&[-0.1, 1.1]).is_err());
        assert!(entropy_of_distribution(&[]).is_err());
    }

    #[test]
    fn uniform_params_give_zero_scores() {
        let p = Params::uniform_logits(ModelConfig::default(), 3).unwrap();
        let q = random_tokens(1, 6);
        let o = random_tokens(2, 9);
        for prof in [
            mi_profile_naive(&p, &q, &o, &probe()).unwrap(),
            mi_profile_preload(&p, &q, &o, &probe()).unwrap(),
            mi_profile_chunked(&p, &q, &o, &probe(), 3).unwrap(),
        ] {
            assert!(prof.scores.iter().all(|&s| s == 0.0));
            assert!(prof.pre_entropies.iter().all(|&h| (h - 10f64.ln()).abs() < 1e-12));
        }
    }

    #[test]
    fn forward_accounting() {
        let p = Params::init(ModelConfig::default(), 1).unwrap();
        let q = random_tokens(1, 5);
        let o = random_tokens(2, 12);
        let n = mi_profile_naive(&p, &q, &o[..1], &probe()).unwrap();
        assert_eq!((n.forwards.full_passes, n.forwards.cached_passes), (2, 0));
        let n = mi_profile_naive(&p, &q, &o, &probe()).unwrap();
        assert_eq!(n.forwards.full_passes, 24);
        let pr = mi_profile_preload(&p, &q, &o, &probe()).unwrap();
        assert_eq!((pr.forwards.full_passes, pr.forwards.cached_passes), (1, 13));
        let ch = mi_profile_chunked(&p, &q, &o, &probe(), 4).unwrap();
        assert_eq!((ch.forwards.full_passes, ch.forwards.cached_passes), (1, 4));
    }

    #[test]
    fn estimators_agree_on_random_params() {
        let p = Params::init_with_std(ModelConfig::default(), 9, 0.2).unwrap();
        let q = random_tokens(3, 8);
        let o = random_tokens(4, 32);
        let naive = mi_profile_naive(&p, &q, &o, &probe()).unwrap();
        let pre = mi_profile_preload(&p, &q, &o, &probe()).unwrap();
        let one = mi_profile_chunked(&p, &q, &o, &probe(), 1).unwrap();
        let all = mi_profile_chunked(&p, &q, &o, &probe(), o.len()).unwrap();
        for t in 0..o.len() {
            assert!((naive.scores[t] - pre.scores[t]).abs() <= 1e-6);
            assert!((naive.scores[t] - one.scores[t]).abs() <= 1e-6);
            assert!((all.scores[t] - pre.scores[t]).abs() <= 1e-9);
        }
        assert!(matches!(
            mi_profile_chunked(&p, &q, &o, &probe(), 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            mi_profile_chunked(&p, &q, &o, &probe(), 33),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overflow_is_a_length_error() {
        let cfg = ModelConfig {
            max_seq_len: 20,
            ..ModelConfig::default()
        };
        let p = Params::init(cfg, 1).unwrap();
        let q = random_tokens(1, 8);
        let o = random_tokens(2, 11);
        assert!(matches!(
            mi_profile_preload(&p, &q, &o, &probe()),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn default_config_chunks_by_eight() {
        let p = Params::init(ModelConfig::default(), 1).unwrap();
        let q = random_tokens(1, 4);
        let o = random_tokens(2, 17);
        let prof = mi_profile(&p, &q, &o, &probe(), &MiConfig::default()).unwrap();
        assert_eq!(prof.chunks, Some(3));
        assert_eq!(prof.forwards.cached_passes, 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn profile_invariants(seed in 0u64..1000, qlen in 1usize..8, olen in 1usize..24, c_frac in 0.0f64..1.0) {
            let p = Params::init_with_std(ModelConfig { d_model: 16, n_heads: 2, d_ff: 32, max_seq_len: 40, ..ModelConfig::default() }, seed, 0.3).unwrap();
            let q = random_tokens(seed, qlen);
            let o = random_tokens(seed + 1, olen);
            let c = 1 + ((olen - 1) as f64 * c_frac) as usize;
            let prof = mi_profile_chunked(&p, &q, &o, &probe(), c).unwrap();
            let naive = mi_profile_naive(&p, &q, &o, &probe()).unwrap();
            prop_assert_eq!(prof.len(), olen);
            for t in 0..olen {
                prop_assert!((prof.scores[t] - naive.scores[t]).abs() <= 1e-6);
                if t + 1 < olen {
                    prop_assert_eq!(prof.pre_entropies[t + 1], prof.post_entropies[t]);
                }
                for h in [prof.pre_entropies[t], prof.post_entropies[t]] {
                    prop_assert!(h >= 0.0 && h <= 10f64.ln() + 1e-12);
                }
            }
            let total: f64 = prof.scores.iter().sum();
            let telescoped = prof.pre_entropies[0] - prof.post_entropies[olen - 1];
            prop_assert!((total - telescoped).abs() <= 1e-9);
        }
    }
}
