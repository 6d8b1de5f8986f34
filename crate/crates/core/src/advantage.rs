//! Sequence, informativeness and exploration advantage terms and their
//! composition `Ã = norm(r) + α·norm(s) + β_explo·norm(c)`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mi::MiProfile;
use crate::rollout::RolloutGroup;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Iapo,
    /// No informativeness term.
    IapoNi,
    /// Informativeness replaced by the drop in next-token entropy.
    IapoNe,
    Grpo,
}

impl Variant {
    pub fn needs_mi(self) -> bool {
        self == Variant::Iapo
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationSignal {
    /// `±π_old(o_t)`.
    Probability,
    /// `±H(π_old(· | q, o_<t))`.
    Entropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapingConfig {
    pub alpha: f64,
    pub beta_explo: f64,
    pub exploration_signal: ExplorationSignal,
    pub variant: Variant,
    pub norm_epsilon: f64,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta_explo: 1e-4,
            exploration_signal: ExplorationSignal::Entropy,
            variant: Variant::Iapo,
            norm_epsilon: 1e-6,
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite() && self.beta_explo >= 0.0 && self.beta_explo.is_finite()) {
            return Err(Error::Config("alpha and beta_explo must be finite and non-negative".into()));
        }
        if !(self.norm_epsilon > 0.0) {
            return Err(Error::Config("norm_epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Coefficients actually applied; the grpo variant zeroes both.
    pub fn effective_coefficients(&self) -> (f64, f64) {
        match self.variant {
            Variant::Grpo => (0.0, 0.0),
            _ => (self.alpha, self.beta_explo),
        }
    }
}

/// `(x − mean(v)) / (std(v) + eps)` with the population standard deviation;
/// exactly 0 when `v` is constant.
pub fn normalize(x: f64, v: &[f64], eps: f64) -> Result<f64> {
    let (mean, std) = mean_std(v)?;
    if std == 0.0 {
        return Ok(0.0);
    }
    Ok((x - mean) / (std + eps))
}

fn mean_std(v: &[f64]) -> Result<(f64, f64)> {
    if v.is_empty() {
        return Err(Error::Domain("normalizing against an empty array".into()));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.iter().all(|&x| x == v[0]) {
        return Ok((mean, 0.0));
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

fn normalize_all(v: &[f64], eps: f64) -> Result<Vec<f64>> {
    let (mean, std) = mean_std(v)?;
    Ok(v.iter()
        .map(|&x| if std == 0.0 { 0.0 } else { (x - mean) / (std + eps) })
        .collect())
}

/// Group-normalized rewards.
pub fn grpo_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Domain(format!("group of {} completions; need at least 2", rewards.len())));
    }
    normalize_all(rewards, eps)
}

/// Signed per-token exploration signal; positive on correct completions.
pub fn exploration_scores(group: &RolloutGroup, signal: ExplorationSignal) -> Vec<Vec<f64>> {
    group
        .completions
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let sign = if group.is_correct(i) { 1.0 } else { -1.0 };
            match signal {
                ExplorationSignal::Probability => c.logprobs_old.iter().map(|l| sign * l.exp()).collect(),
                ExplorationSignal::Entropy => c.next_token_entropies.iter().map(|h| sign * h).collect(),
            }
        })
        .collect()
}

/// `H_t − H_{t+1}` of consecutive next-token entropies, 0 at the last token.
pub fn next_token_entropy_drops(entropies: &[f64]) -> Vec<f64> {
    (0..entropies.len())
        .map(|t| entropies.get(t + 1).map_or(0.0, |next| entropies[t] - next))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBreakdown {
    /// One value per completion, broadcast over its tokens.
    pub seq: Vec<f64>,
    pub info: Vec<Vec<f64>>,
    pub explo: Vec<Vec<f64>>,
    pub total: Vec<Vec<f64>>,
    pub alpha: f64,
    pub beta_explo: f64,
}

impl AdvantageBreakdown {
    /// Root-mean-square of each term over all tokens: (seq, info, explo).
    pub fn term_rms(&self) -> (f64, f64, f64) {
        let mut acc = (0.0, 0.0, 0.0);
        let mut n = 0usize;
        for (i, info) in self.info.iter().enumerate() {
            for (t, x) in info.iter().enumerate() {
                acc.0 += self.seq[i] * self.seq[i];
                acc.1 += x * x;
                acc.2 += self.explo[i][t] * self.explo[i][t];
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        ((acc.0 / n).sqrt(), (acc.1 / n).sqrt(), (acc.2 / n).sqrt())
    }

    /// CSV rows `completion,position,seq,info,explo,total`, appended after
    /// writing the header if the file is new.
    pub fn append_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let fresh = !path.exists();
        let mut out = String::new();
        if fresh {
            out.push_str("completion,position,seq,info,explo,total\n");
        }
        for (i, total) in self.total.iter().enumerate() {
            for (t, a) in total.iter().enumerate() {
                out.push_str(&format!(
                    "{i},{t},{},{},{},{a}\n",
                    self.seq[i], self.info[i][t], self.explo[i][t]
                ));
            }
        }
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Composes per-token advantages for one group. `profiles` is required (one
/// per completion) for the iapo variant and ignored otherwise.
pub fn compose_advantages(
    group: &RolloutGroup,
    profiles: Option<&[MiProfile]>,
    config: &ShapingConfig,
) -> Result<AdvantageBreakdown> {
    config.validate()?;
    let eps = config.norm_epsilon;
    let seq = grpo_advantages(&group.rewards, eps)?;
    let lens: Vec<usize> = group.completions.iter().map(|c| c.len()).collect();

    let raw_info: Vec<Vec<f64>> = match config.variant {
        Variant::Iapo => {
            let profiles = profiles.ok_or_else(|| Error::Domain("iapo variant needs MI profiles".into()))?;
            if profiles.len() != lens.len() || profiles.iter().zip(&lens).any(|(p, &l)| p.len() != l) {
                return Err(Error::Shape("MI profiles do not align with completions".into()));
            }
            profiles.iter().map(|p| p.scores.clone()).collect()
        }
        Variant::IapoNe => group
            .completions
            .iter()
            .map(|c| next_token_entropy_drops(&c.next_token_entropies))
            .collect(),
        Variant::IapoNi | Variant::Grpo => lens.iter().map(|&l| vec![0.0; l]).collect(),
    };
    let info = raw_info
        .iter()
        .map(|s| normalize_all(s, eps))
        .collect::<Result<Vec<_>>>()?;
    let explo = exploration_scores(group, config.exploration_signal)
        .iter()
        .map(|c| normalize_all(c, eps))
        .collect::<Result<Vec<_>>>()?;

    let (alpha, beta) = config.effective_coefficients();
    let total = (0..lens.len())
        .map(|i| {
            (0..lens[i])
                .map(|t| seq[i] + alpha * info[i][t] + beta * explo[i][t])
                .collect()
        })
        .collect();
    Ok(AdvantageBreakdown {
        seq,
        info,
        explo,
        total,
        alpha,
        beta_explo: beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SampledCompletion;
    use crate::vocab::{generate_task, TokenId};
    use proptest::prelude::*;

    fn completion(len: usize, lp: f64, h: f64) -> SampledCompletion {
        SampledCompletion {
            tokens: vec![TokenId(1); len],
            logprobs_old: vec![lp; len],
            next_token_entropies: vec![h; len],
        }
    }

    fn group_of(completions: Vec<SampledCompletion>, rewards: Vec<f64>) -> RolloutGroup {
        RolloutGroup {
            task: generate_task(0, 2).unwrap(),
            completions,
            rewards,
            snapshot_id: 0,
        }
    }

    fn profile(scores: Vec<f64>) -> MiProfile {
        let n = scores.len();
        MiProfile {
            pre_entropies: vec![0.0; n],
            post_entropies: vec![0.0; n],
            scores,
            estimator: crate::mi::MiEstimator::Preload,
            chunks: None,
            forwards: Default::default(),
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(2.0, &[1.0, 2.0, 3.0], 1e-6).unwrap(), 0.0);
        let want = 1.0 / ((2.0f64 / 3.0).sqrt() + 1e-6);
        assert!((normalize(3.0, &[1.0, 2.0, 3.0], 1e-6).unwrap() - want).abs() < 1e-12);
        // the commonly quoted 1.224742 is a truncation of 1.2247434
        assert!((want - 1.224742).abs() < 2e-6);
        assert_eq!(normalize(5.0, &[5.0, 5.0, 5.0], 1e-6).unwrap(), 0.0);
        assert!(normalize(1.0, &[], 1e-6).is_err());
    }

    #[test]
    fn grpo_examples() {
        let a = grpo_advantages(&[1.0, -1.0], 1e-6).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-5 && (a[1] + 1.0).abs() < 1e-5);
        assert!(grpo_advantages(&[1.0; 8], 1e-6).unwrap().iter().all(|&x| x == 0.0));
        let balanced = [1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let a = grpo_advantages(&balanced, 1e-6).unwrap();
        for (x, r) in a.iter().zip(balanced) {
            assert!((x - r).abs() < 1e-5);
        }
        assert!(grpo_advantages(&[1.0], 1e-6).is_err());
    }

    #[test]
    fn exploration_sign_and_magnitude() {
        let g = group_of(vec![completion(2, 0.9f64.ln(), 1.5), completion(2, 0.9f64.ln(), 1.5)], vec![1.0, -1.0]);
        let c = exploration_scores(&g, ExplorationSignal::Probability);
        assert!((c[0][0] - 0.9).abs() < 1e-12 && (c[1][0] + 0.9).abs() < 1e-12);
        let uniform = 18f64.ln();
        let g = group_of(vec![completion(3, -uniform, uniform), completion(2, -uniform, uniform)], vec![1.0, -1.0]);
        let c = exploration_scores(&g, ExplorationSignal::Entropy);
        assert!(c[0].iter().all(|&x| x == uniform));
        assert!(c[1].iter().all(|&x| x == -uniform));
    }

    #[test]
    fn degenerate_groups() {
        let cs = vec![completion(1, -0.5, 0.7), completion(4, -0.2, 0.3)];
        let g = group_of(cs.clone(), vec![1.0, 1.0]);
        let cfg = ShapingConfig {
            alpha: 0.5,
            beta_explo: 0.5,
            variant: Variant::Iapo,
            ..ShapingConfig::default()
        };
        let adv = compose_advantages(&g, Some(&[profile(vec![0.4]), profile(vec![0.1, 0.2, -0.3, 0.0])]), &cfg).unwrap();
        assert!(adv.seq.iter().all(|&x| x == 0.0));
        assert_eq!(adv.info[0], vec![0.0]);
        assert_eq!(adv.explo[0], vec![0.0]);
        assert!(adv.total[1].iter().any(|&x| x != 0.0));

        let misaligned = [profile(vec![0.4]), profile(vec![0.1])];
        assert!(matches!(compose_advantages(&g, Some(&misaligned), &cfg), Err(Error::Shape(_))));
        assert!(compose_advantages(&g, None, &cfg).is_err());
    }

    #[test]
    fn zero_coefficients_reduce_to_grpo() {
        let cs = vec![completion(3, -0.5, 0.7), completion(5, -0.2, 0.3), completion(2, -1.0, 1.0)];
        let g = group_of(cs, vec![1.0, -1.0, -1.0]);
        let profiles = [profile(vec![0.3, -0.1, 0.2]), profile(vec![0.0, 0.1, 0.5, 0.2, 0.3]), profile(vec![1.0, 2.0])];
        let iapo = compose_advantages(
            &g,
            Some(&profiles),
            &ShapingConfig { alpha: 0.0, beta_explo: 0.0, ..Default::default() },
        )
        .unwrap();
        let grpo = compose_advantages(
            &g,
            None,
            &ShapingConfig { alpha: 0.3, beta_explo: 0.3, variant: Variant::Grpo, ..Default::default() },
        )
        .unwrap();
        assert_eq!(iapo.total, grpo.total);
        let base = grpo_advantages(&g.rewards, 1e-6).unwrap();
        for (i, row) in grpo.total.iter().enumerate() {
            assert!(row.iter().all(|&a| a == base[i]));
        }
    }

    #[test]
    fn ne_drops_end_with_zero() {
        assert_eq!(next_token_entropy_drops(&[3.0, 1.0, 1.5]), vec![2.0, -0.5, 0.0]);
        assert_eq!(next_token_entropy_drops(&[0.4]), vec![0.0]);
    }

    fn arb_group() -> impl Strategy<Value = (Vec<Vec<(f64, f64, f64)>>, Vec<bool>)> {
        (2usize..6).prop_flat_map(|g| {
            (
                prop::collection::vec(prop::collection::vec((-3.0f64..0.0, 0.0f64..2.9, -1.0f64..1.0), 1..9), g),
                prop::collection::vec(any::<bool>(), g),
            )
        })
    }

    fn build(raw: &[Vec<(f64, f64, f64)>], correct: &[bool]) -> (RolloutGroup, Vec<MiProfile>) {
        let cs = raw
            .iter()
            .map(|toks| SampledCompletion {
                tokens: vec![TokenId(2); toks.len()],
                logprobs_old: toks.iter().map(|t| t.0).collect(),
                next_token_entropies: toks.iter().map(|t| t.1).collect(),
            })
            .collect();
        let ps = raw.iter().map(|toks| profile(toks.iter().map(|t| t.2).collect())).collect();
        (group_of(cs, correct.iter().map(|&c| if c { 1.0 } else { -1.0 }).collect()), ps)
    }

    proptest! {
        #[test]
        fn breakdown_invariants((raw, correct) in arb_group(), alpha in 0.0f64..1.0, beta in 0.0f64..1.0) {
            let (g, ps) = build(&raw, &correct);
            let cfg = ShapingConfig { alpha, beta_explo: beta, ..Default::default() };
            let adv = compose_advantages(&g, Some(&ps), &cfg).unwrap();
            let seq_mean = adv.seq.iter().sum::<f64>() / adv.seq.len() as f64;
            prop_assert!(seq_mean.abs() <= 1e-9);
            for i in 0..raw.len() {
                prop_assert_eq!(adv.total[i].len(), raw[i].len());
                for t in 0..raw[i].len() {
                    let re = adv.seq[i] + alpha * adv.info[i][t] + beta * adv.explo[i][t];
                    prop_assert!((re - adv.total[i][t]).abs() <= 1e-12);
                }
                for term in [&adv.info[i], &adv.explo[i]] {
                    let m = term.iter().sum::<f64>() / term.len() as f64;
                    prop_assert!(m.abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn permutation_equivariance((raw, correct) in arb_group(), shift in 0usize..5) {
            let (g, ps) = build(&raw, &correct);
            let n = raw.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let raw_p: Vec<_> = perm.iter().map(|&i| raw[i].clone()).collect();
            let cor_p: Vec<_> = perm.iter().map(|&i| correct[i]).collect();
            let (gp, pp) = build(&raw_p, &cor_p);
            let cfg = ShapingConfig { alpha: 0.3, beta_explo: 0.2, ..Default::default() };
            let a = compose_advantages(&g, Some(&ps), &cfg).unwrap();
            let b = compose_advantages(&gp, Some(&pp), &cfg).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                for (x, y) in a.total[i].iter().zip(&b.total[k]) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn flipping_correctness_flips_raw_exploration((raw, correct) in arb_group()) {
            let (g, _) = build(&raw, &correct);
            let flipped: Vec<bool> = correct.iter().map(|c| !c).collect();
            let (gf, _) = build(&raw, &flipped);
            for signal in [ExplorationSignal::Probability, ExplorationSignal::Entropy] {
                let a = exploration_scores(&g, signal);
                let b = exploration_scores(&gf, signal);
                for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
                    prop_assert_eq!(*x, -*y);
                }
            }
        }
    }

    #[test]
    fn csv_dump() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adv.csv");
        let g = group_of(vec![completion(2, -0.5, 0.7), completion(3, -0.2, 0.3)], vec![1.0, -1.0]);
        let adv = compose_advantages(&g, None, &ShapingConfig { variant: Variant::IapoNi, ..Default::default() }).unwrap();
        adv.append_csv(&path).unwrap();
        adv.append_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 5);
        assert!(text.starts_with("completion,position,seq,info,explo,total\n"));
    }
}
