//! Exact checks of the first-order length law and the entropy-change law.
//!
//! The length law runs on a reduced policy whose trajectory distribution can
//! be enumerated: `E_{θ+ηΔθ}[L] − E_θ[L] ≈ η·Cov(L, S)` with
//! `S(o) = ∇log p_θ(o)·Δθ`. The entropy law works on a single softmax state:
//! after `z ← z + η·A`, `ΔH ≈ −η·Cov(log π, A)`.

use serde::{Deserialize, Serialize};

use crate::advantage::normalize;
use crate::error::{Error, Result};
use crate::grad::{backward, Gradients};
use crate::linalg::{dot, entropy_from_log_probs, log_softmax, softmax};
use crate::mi::mi_profile_preload;
use crate::model::{
    forward_logits, forward_trace, sample_completion, AnswerProbe, Decoding, KvCache, ModelConfig, Params,
};
use crate::rng;
use crate::vocab::TokenId;

/// Token ids of the reduced vocabulary: two answer digits, a filler, the two
/// probe tokens and EOS.
pub mod reduced {
    use crate::vocab::TokenId;

    pub const ZERO: TokenId = TokenId(0);
    pub const ONE: TokenId = TokenId(1);
    pub const FILLER: TokenId = TokenId(2);
    pub const THINK_END: TokenId = TokenId(3);
    pub const ANS: TokenId = TokenId(4);
    pub const EOS: TokenId = TokenId(5);
    pub const VOCAB: usize = 6;
}

pub fn reduced_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 16,
        vocab_size: reduced::VOCAB,
    }
}

pub fn reduced_probe() -> AnswerProbe {
    AnswerProbe {
        postfix: vec![reduced::THINK_END, reduced::ANS],
        answers: vec![reduced::ZERO, reduced::ONE],
    }
}

pub fn reduced_query() -> Vec<TokenId> {
    vec![reduced::ONE, reduced::FILLER, reduced::ZERO]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<TokenId>,
    pub prob: f64,
    /// Whether the final EOS was forced by the depth cap.
    pub forced_eos: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct EnumeratedEnsemble {
    pub trajectories: Vec<Trajectory>,
    pub max_len: usize,
    /// Per-token `g_t = ∇log π(o_t)·Δθ` and `S = Σ g_t`, once a direction is attached.
    pub token_scores: Option<Vec<Vec<f64>>>,
}

impl EnumeratedEnsemble {
    pub fn total_prob(&self) -> f64 {
        self.trajectories.iter().map(|t| t.prob).sum()
    }

    pub fn expected_length(&self) -> f64 {
        self.trajectories.iter().map(|t| t.prob * t.len() as f64).sum()
    }

    pub fn s_values(&self) -> Option<Vec<f64>> {
        self.token_scores.as_ref().map(|g| g.iter().map(|x| x.iter().sum()).collect())
    }

    /// `Cov(L, S)` under the ensemble's own probabilities.
    pub fn length_score_covariance(&self) -> Result<f64> {
        let s = self
            .s_values()
            .ok_or_else(|| Error::Domain("no direction attached to the ensemble".into()))?;
        let el = self.expected_length();
        let es: f64 = self.trajectories.iter().zip(&s).map(|(t, s)| t.prob * s).sum();
        Ok(self
            .trajectories
            .iter()
            .zip(&s)
            .map(|(t, s)| t.prob * (t.len() as f64 - el) * (s - es))
            .sum())
    }
}

/// Exhaustive walk over completions of `query`; EOS is forced at depth `max_len`.
pub fn enumerate_trajectory_distribution(
    params: &Params,
    query: &[TokenId],
    max_len: usize,
    eos: TokenId,
    cap: usize,
) -> Result<EnumeratedEnsemble> {
    let v = params.config.vocab_size;
    if max_len == 0 || eos.idx() >= v {
        return Err(Error::Domain("max_len must be positive and eos inside the vocabulary".into()));
    }
    // leaves: one per EOS position plus the (v−1)^(M−1) forced ones
    let mut size: u128 = 0;
    for d in 0..max_len {
        size += ((v - 1) as u128).pow(d as u32);
    }
    if size > cap as u128 {
        return Err(Error::Resource(format!("{size} trajectories exceed the cap of {cap}")));
    }
    if query.len() + max_len > params.config.max_seq_len {
        return Err(Error::Length {
            requested: query.len() + max_len,
            max: params.config.max_seq_len,
        });
    }
    let (logits, cache) = forward_logits(params, query, None)?;
    let mut out = Vec::with_capacity(size as usize);
    let mut prefix = Vec::with_capacity(max_len);
    walk(params, &cache, logits.last_row(), 1.0, &mut prefix, max_len, eos, &mut out)?;
    Ok(EnumeratedEnsemble {
        trajectories: out,
        max_len,
        token_scores: None,
    })
}

#[allow(clippy::too_many_arguments)]
fn walk(
    params: &Params,
    cache: &KvCache,
    row: &[f64],
    prob: f64,
    prefix: &mut Vec<TokenId>,
    max_len: usize,
    eos: TokenId,
    out: &mut Vec<Trajectory>,
) -> Result<()> {
    let mut finish = |prefix: &Vec<TokenId>, p: f64, forced| {
        let mut tokens = prefix.clone();
        tokens.push(eos);
        out.push(Trajectory {
            tokens,
            prob: p,
            forced_eos: forced,
        });
    };
    if prefix.len() + 1 == max_len {
        finish(prefix, prob, true);
        return Ok(());
    }
    let probs = softmax(row);
    finish(prefix, prob * probs[eos.idx()], false);
    for (a, &pa) in probs.iter().enumerate() {
        if a == eos.idx() {
            continue;
        }
        let tok = TokenId(a as u32);
        let (next, child) = forward_logits(params, &[tok], Some(cache.clone()))?;
        prefix.push(tok);
        walk(params, &child, next.last_row(), prob * pa, prefix, max_len, eos, out)?;
        prefix.pop();
    }
    Ok(())
}

/// Gradient of `log π(o_t | q, o_<t)` for every non-forced token of `tokens`.
fn token_gradients(params: &Params, query: &[TokenId], tokens: &[TokenId], forced_last: bool) -> Result<Vec<Option<Gradients>>> {
    let mut seq = query.to_vec();
    seq.extend_from_slice(&tokens[..tokens.len() - 1]);
    let (logits, trace) = forward_trace(params, &[&seq])?;
    let v = params.config.vocab_size;
    let free = if forced_last { tokens.len() - 1 } else { tokens.len() };
    (0..tokens.len())
        .map(|t| {
            if t >= free {
                return Ok(None);
            }
            let r = query.len() - 1 + t;
            let p = softmax(logits.row(r));
            let mut dl = vec![0.0; logits.data.len()];
            for j in 0..v {
                dl[r * v + j] = if j == tokens[t].idx() { 1.0 } else { 0.0 } - p[j];
            }
            let mut g = Gradients::zeros_like(params);
            backward(params, &trace, &dl, &mut g)?;
            Ok(Some(g))
        })
        .collect()
}

/// Fills `g_t = ∇log π(o_t)·direction` for every trajectory. Forced tokens
/// have probability 1 and contribute 0.
pub fn attach_direction(params: &Params, query: &[TokenId], ensemble: &mut EnumeratedEnsemble, direction: &Gradients) -> Result<()> {
    let scores = ensemble
        .trajectories
        .iter()
        .map(|tr| {
            Ok(token_gradients(params, query, &tr.tokens, tr.forced_eos)?
                .iter()
                .map(|g| g.as_ref().map_or(0.0, |g| g.dot(direction)))
                .collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    ensemble.token_scores = Some(scores);
    Ok(())
}

/// A completion with its per-token weights for [`weighted_direction`].
#[derive(Clone, Debug)]
pub struct WeightedCompletion {
    pub tokens: Vec<TokenId>,
    pub forced_eos: bool,
    pub weights: Vec<f64>,
}

/// `Δθ = (1/G) Σ_i (1/|o_i|) Σ_t β_it ∇log π(o_it | q, o_i,<t)`.
pub fn weighted_direction(params: &Params, query: &[TokenId], group: &[WeightedCompletion]) -> Result<Gradients> {
    if group.is_empty() {
        return Err(Error::Domain("empty group".into()));
    }
    let mut total = Gradients::zeros_like(params);
    for c in group {
        if c.weights.len() != c.tokens.len() {
            return Err(Error::Shape("one weight per token required".into()));
        }
        let scale = 1.0 / (group.len() as f64 * c.tokens.len() as f64);
        for (g, &b) in token_gradients(params, query, &c.tokens, c.forced_eos)?.iter().zip(&c.weights) {
            if let Some(g) = g {
                for (acc, x) in total.data.iter_mut().zip(&g.data) {
                    *acc += scale * b * x;
                }
            }
        }
    }
    Ok(total)
}

/// Samples one completion from the reduced policy with EOS forced at `max_len`.
pub fn sample_reduced(params: &Params, query: &[TokenId], max_len: usize, eos: TokenId, rng: &mut rng::Rng) -> Result<(Vec<TokenId>, bool)> {
    if max_len < 2 {
        return Err(Error::Domain("max_len must be at least 2".into()));
    }
    let c = sample_completion(params, query, max_len - 1, Decoding::Temperature(1.0), eos, rng)?;
    let mut tokens = c.tokens;
    if tokens.last() == Some(&eos) {
        Ok((tokens, false))
    } else {
        tokens.push(eos);
        Ok((tokens, true))
    }
}

/// The IAPO informativeness direction: a group of `g` sampled completions
/// weighted by `β_it = norm(s_it, s_i)` from their early-exit MI scores.
pub fn iapo_direction(params: &Params, query: &[TokenId], max_len: usize, g: usize, seed: u64) -> Result<Gradients> {
    let probe = reduced_probe();
    let group = (0..g as u64)
        .map(|i| {
            let (tokens, forced_eos) = sample_reduced(params, query, max_len, reduced::EOS, &mut rng::stream(seed, &[0x7E0, i]))?;
            let prof = mi_profile_preload(params, query, &tokens, &probe)?;
            let weights = prof
                .scores
                .iter()
                .map(|&s| normalize(s, &prof.scores, 1e-6))
                .collect::<Result<Vec<_>>>()?;
            Ok(WeightedCompletion {
                tokens,
                forced_eos,
                weights,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    weighted_direction(params, query, &group)
}

/// Synthetic group for the negative-covariance construction: every
/// completion gets high informativeness on its final EOS and none on the
/// filler tokens before it, so shorter completions carry more information
/// per token.
pub fn eos_informative_direction(params: &Params, query: &[TokenId], max_len: usize) -> Result<Gradients> {
    let group: Vec<WeightedCompletion> = (2..=max_len.min(5))
        .map(|len| {
            let mut tokens = vec![reduced::FILLER; len - 1];
            tokens.push(reduced::EOS);
            let mut s = vec![0.0; len];
            s[len - 1] = 1.0;
            let weights = s.iter().map(|&x| normalize(x, &s, 1e-6)).collect::<Result<Vec<_>>>()?;
            Ok(WeightedCompletion {
                tokens,
                forced_eos: false,
                weights,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    weighted_direction(params, query, &group)
}

/// Shift of every output bias by the same amount; logits move uniformly so no
/// token probability changes and `S ≡ 0`.
pub fn uniform_bias_direction(params: &Params) -> Gradients {
    let mut d = Gradients::zeros_like(params);
    let (off, v) = (params.layout.b_out, params.config.vocab_size);
    d.data[off..off + v].fill(1.0);
    d
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaRow {
    pub eta: f64,
    pub predicted: f64,
    pub realized: f64,
    /// realized / predicted; absent when the prediction is 0.
    pub ratio: Option<f64>,
    /// |realized − predicted| / η.
    pub error_per_eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub covariance: f64,
    pub base_length: f64,
    pub rows: Vec<EtaRow>,
}

pub const DEFAULT_ETAS: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];
pub const DEFAULT_MAX_LEN: usize = 6;
pub const ENSEMBLE_CAP: usize = 50_000;

fn check_grid(etas: &[f64]) -> Result<()> {
    if etas.is_empty() || etas.windows(2).any(|w| !(w[1] < w[0])) || etas.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(Error::Domain("η grid must be positive and strictly decreasing".into()));
    }
    Ok(())
}

/// Predicted `η·Cov(L, S)` against the exact change of expected length after
/// moving to `θ + η·direction`, for every η in the grid.
pub fn predict_length_change(
    params: &Params,
    direction: &Gradients,
    etas: &[f64],
    query: &[TokenId],
    max_len: usize,
) -> Result<CovarianceReport> {
    check_grid(etas)?;
    if !direction.all_finite() || direction.data.len() != params.len() {
        return Err(Error::Domain("direction must be finite and match the parameters".into()));
    }
    let mut base = enumerate_trajectory_distribution(params, query, max_len, reduced::EOS, ENSEMBLE_CAP)?;
    attach_direction(params, query, &mut base, direction)?;
    let cov = base.length_score_covariance()?;
    let base_length = base.expected_length();
    let rows = etas
        .iter()
        .map(|&eta| {
            let mut moved = params.clone();
            for (p, d) in moved.data.iter_mut().zip(&direction.data) {
                *p += eta * d;
            }
            let after = enumerate_trajectory_distribution(&moved, query, max_len, reduced::EOS, ENSEMBLE_CAP)?;
            let realized = after.expected_length() - base_length;
            let predicted = eta * cov;
            Ok(EtaRow {
                eta,
                predicted,
                realized,
                ratio: (predicted != 0.0).then(|| realized / predicted),
                error_per_eta: (realized - predicted).abs() / eta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CovarianceReport {
        covariance: cov,
        base_length,
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// `A(a) = +π₀(a)` (correct completion).
    PlusProb,
    /// `A(a) = −π₀(a)` (incorrect completion).
    MinusProb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub eta: f64,
    pub entropy_before: f64,
    pub entropy_after: f64,
    pub realized: f64,
    pub predicted: f64,
    pub error_per_eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub mode: AdvantageMode,
    /// `Cov_{a∼π₀}(log π₀(a), A(a))`.
    pub covariance: f64,
    /// π₀ is uniform: covariance 0 and no sign claim.
    pub uniform: bool,
    pub rows: Vec<EntropyRow>,
}

/// `Cov_{a∼p}(x(a), y(a))`.
pub fn covariance_under(p: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let ex = dot(p, x);
    let ey = dot(p, y);
    p.iter().zip(x).zip(y).map(|((p, x), y)| p * (x - ex) * (y - ey)).sum()
}

/// One logit-space policy-gradient step `z ← z + η·A` from the softmax state
/// `logits`, for every η in the grid.
pub fn entropy_change_check(logits: &[f64], mode: AdvantageMode, etas: &[f64]) -> Result<EntropyReport> {
    check_grid(etas)?;
    if logits.len() < 2 || logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Domain("need at least two finite logits".into()));
    }
    let logp = log_softmax(logits);
    let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let sign = match mode {
        AdvantageMode::PlusProb => 1.0,
        AdvantageMode::MinusProb => -1.0,
    };
    let adv: Vec<f64> = p.iter().map(|x| sign * x).collect();
    let covariance = covariance_under(&p, &logp, &adv);
    let uniform = logits.iter().all(|&z| z == logits[0]);
    let h0 = entropy_from_log_probs(&logp);
    let rows = etas
        .iter()
        .map(|&eta| {
            let moved: Vec<f64> = logits.iter().zip(&adv).map(|(z, a)| z + eta * a).collect();
            let h1 = entropy_from_log_probs(&log_softmax(&moved));
            let predicted = -eta * covariance;
            EntropyRow {
                eta,
                entropy_before: h0,
                entropy_after: h1,
                realized: h1 - h0,
                predicted,
                error_per_eta: ((h1 - h0) - predicted).abs() / eta,
            }
        })
        .collect();
    Ok(EntropyReport {
        mode,
        covariance,
        uniform,
        rows,
    })
}

/// Logits of the next-token distribution at `state` (a token prefix).
pub fn state_logits(params: &Params, state: &[TokenId]) -> Result<Vec<f64>> {
    let (logits, _) = forward_logits(params, state, None)?;
    Ok(logits.last_row().to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub etas: Vec<f64>,
    /// Depth at which EOS is forced.
    pub max_len: usize,
    /// Completions in the group that builds the IAPO direction.
    pub group_size: usize,
    /// Random non-uniform distributions for the entropy law.
    pub entropy_cases: usize,
    pub entropy_support: usize,
    /// Init scale of the reduced policy; large enough that it is far from uniform.
    pub init_std: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            etas: DEFAULT_ETAS.to_vec(),
            max_len: DEFAULT_MAX_LEN,
            group_size: 8,
            entropy_cases: 100,
            entropy_support: 6,
            init_std: 0.5,
        }
    }
}

/// First-order agreement must improve this much when η drops from 1e-2 to 1e-3.
pub const FIRST_ORDER_SHRINK: f64 = 5.0;
/// Relative error allowed for the entropy prediction at η = 1e-4.
pub const ENTROPY_REL_TOL: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthLawReport {
    pub iapo: CovarianceReport,
    pub zero: CovarianceReport,
    pub constant_s: CovarianceReport,
    pub negative: CovarianceReport,
    /// error/η at 1e-2 divided by error/η at 1e-3 for the IAPO direction.
    pub shrink: Option<f64>,
    pub first_order_pass: bool,
    pub zero_pass: bool,
    pub constant_s_pass: bool,
    pub negative_pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyLawReport {
    pub cases: usize,
    pub sign_failures: usize,
    /// Largest relative prediction error at η = 1e-4 over both modes.
    pub max_rel_error: f64,
    /// Smallest `Cov(log π, π)` seen.
    pub min_prob_covariance: f64,
    /// The law at the reduced policy's own next-token state.
    pub at_policy_state: [EntropyReport; 2],
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub length: LengthLawReport,
    pub entropy: EntropyLawReport,
}

impl TheoryReport {
    pub fn pass(&self) -> bool {
        let l = &self.length;
        l.first_order_pass && l.zero_pass && l.constant_s_pass && l.negative_pass && self.entropy.pass
    }
}

fn row_at(r: &CovarianceReport, eta: f64) -> Option<&EtaRow> {
    r.rows.iter().find(|row| (row.eta - eta).abs() <= 1e-12 * eta)
}

pub fn length_law_checks(cfg: &TheoryConfig, seed: u64) -> Result<LengthLawReport> {
    let params = Params::init_with_std(reduced_config(), seed, cfg.init_std)?;
    let q = reduced_query();
    let m = cfg.max_len;
    let dir = iapo_direction(&params, &q, m, cfg.group_size, seed)?;
    let iapo = predict_length_change(&params, &dir, &cfg.etas, &q, m)?;
    let zero = predict_length_change(&params, &Gradients::zeros_like(&params), &cfg.etas, &q, m)?;
    let constant_s = predict_length_change(&params, &uniform_bias_direction(&params), &cfg.etas, &q, m)?;
    let negative = predict_length_change(&params, &eos_informative_direction(&params, &q, m)?, &cfg.etas, &q, m)?;

    let shrink = match (row_at(&iapo, 1e-2), row_at(&iapo, 1e-3)) {
        (Some(a), Some(b)) => Some(a.error_per_eta / b.error_per_eta),
        _ => None,
    };
    Ok(LengthLawReport {
        first_order_pass: shrink.is_some_and(|s| s >= FIRST_ORDER_SHRINK),
        shrink,
        zero_pass: zero.covariance == 0.0 && zero.rows.iter().all(|r| r.predicted == 0.0 && r.realized == 0.0),
        constant_s_pass: constant_s.covariance.abs() <= 1e-12
            && constant_s.rows.iter().all(|r| r.realized.abs() <= r.eta * r.eta),
        negative_pass: negative.covariance < 0.0 && negative.rows.iter().all(|r| r.realized < 0.0),
        iapo,
        zero,
        constant_s,
        negative,
    })
}

pub fn entropy_law_checks(cfg: &TheoryConfig, seed: u64) -> Result<EntropyLawReport> {
    use rand_distr::{Distribution, StandardNormal};

    if cfg.entropy_support < 2 {
        return Err(Error::Config("entropy_support must be at least 2".into()));
    }
    let grid = [1e-3, 1e-4];
    let mut sign_failures = 0;
    let mut max_rel_error: f64 = 0.0;
    let mut min_prob_covariance = f64::INFINITY;
    for case in 0..cfg.entropy_cases as u64 {
        let mut r = rng::stream(seed, &[0xE27, case]);
        let z: Vec<f64> = (0..cfg.entropy_support).map(|_| StandardNormal.sample(&mut r)).collect();
        let plus = entropy_change_check(&z, AdvantageMode::PlusProb, &grid)?;
        let minus = entropy_change_check(&z, AdvantageMode::MinusProb, &grid)?;
        if !(plus.rows[0].realized < 0.0 && minus.rows[0].realized > 0.0) {
            sign_failures += 1;
        }
        for rep in [&plus, &minus] {
            let row = &rep.rows[1];
            max_rel_error = max_rel_error.max((row.realized - row.predicted).abs() / row.predicted.abs());
        }
        min_prob_covariance = min_prob_covariance.min(plus.covariance);
    }
    let params = Params::init_with_std(reduced_config(), seed, cfg.init_std)?;
    let z = state_logits(&params, &reduced_query())?;
    let at_policy_state = [
        entropy_change_check(&z, AdvantageMode::PlusProb, &cfg.etas)?,
        entropy_change_check(&z, AdvantageMode::MinusProb, &cfg.etas)?,
    ];
    Ok(EntropyLawReport {
        cases: cfg.entropy_cases,
        sign_failures,
        pass: sign_failures == 0 && max_rel_error <= ENTROPY_REL_TOL && min_prob_covariance >= 0.0,
        max_rel_error,
        min_prob_covariance,
        at_policy_state,
    })
}

pub fn run_theory_checks(cfg: &TheoryConfig, seed: u64) -> Result<TheoryReport> {
    Ok(TheoryReport {
        length: length_law_checks(cfg, seed)?,
        entropy: entropy_law_checks(cfg, seed)?,
    })
}
