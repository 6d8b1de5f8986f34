//! Group sampling from the frozen snapshot policy and importance ratios.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{sample_completion, token_scores, Decoding, Params, SampledCompletion};
use crate::rng::Rng;
use crate::vocab::{check_answer, Task, Vocab};

/// `G` completions of one query drawn from π_old, with ±1 correctness rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub task: Task,
    pub completions: Vec<SampledCompletion>,
    pub rewards: Vec<f64>,
    pub snapshot_id: u64,
}

impl RolloutGroup {
    pub fn len(&self) -> usize {
        self.completions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completions.is_empty()
    }

    pub fn is_correct(&self, i: usize) -> bool {
        self.rewards[i] > 0.0
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

pub fn reward(task: &Task, completion: &[crate::vocab::TokenId]) -> f64 {
    if check_answer(task, completion) {
        1.0
    } else {
        -1.0
    }
}

/// Samples one completion per stream in `streams`; the group size is `streams.len()`.
pub fn sample_group(
    params_old: &Params,
    task: &Task,
    budget: usize,
    decoding: Decoding,
    streams: &mut [Rng],
    snapshot_id: u64,
) -> Result<RolloutGroup> {
    if streams.len() < 2 {
        return Err(Error::Domain(format!("group size must be at least 2, got {}", streams.len())));
    }
    let completions = streams
        .iter_mut()
        .map(|rng| sample_completion(params_old, &task.query, budget, decoding, Vocab::EOS, rng))
        .collect::<Result<Vec<_>>>()?;
    let rewards = completions.iter().map(|c| reward(task, &c.tokens)).collect();
    Ok(RolloutGroup {
        task: task.clone(),
        completions,
        rewards,
        snapshot_id,
    })
}

/// `ρ_{i,t} = exp(log π_live − log π_old)` for every token of every completion.
pub fn importance_ratios(params_live: &Params, group: &RolloutGroup) -> Result<Vec<Vec<f64>>> {
    group
        .completions
        .iter()
        .map(|c| {
            let live = token_scores(params_live, &group.task.query, &c.tokens)?;
            let ratios: Vec<f64> = live
                .logprobs
                .iter()
                .zip(&c.logprobs_old)
                .map(|(l, o)| (l - o).exp())
                .collect();
            if ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) {
                return Err(Error::Numeric("importance ratio is not positive and finite".into()));
            }
            Ok(ratios)
        })
        .collect()
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    query: String,
    tokens: String,
    reward: f64,
    logprobs_old: &'a [f64],
}

/// Appends one JSONL record per completion.
pub fn dump_rollouts(path: impl AsRef<Path>, groups: &[RolloutGroup]) -> Result<()> {
    let path = path.as_ref();
    let vocab = Vocab::new();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for g in groups {
        for (c, &r) in g.completions.iter().zip(&g.rewards) {
            let rec = DumpRecord {
                query: vocab.detokenize(&g.task.query),
                tokens: vocab.detokenize(&c.tokens),
                reward: r,
                logprobs_old: &c.logprobs_old,
            };
            serde_json::to_writer(&mut f, &rec)?;
            f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng;
    use crate::vocab::generate_task;

    fn streams(seed: u64, g: usize) -> Vec<Rng> {
        (0..g as u64).map(|i| rng::stream(seed, &[i])).collect()
    }

    #[test]
    fn groups_are_deterministic_with_binary_rewards() {
        let p = Params::init_with_std(ModelConfig::default(), 1, 0.1).unwrap();
        let task = generate_task(5, 2).unwrap();
        let a = sample_group(&p, &task, 16, Decoding::Temperature(1.0), &mut streams(3, 8), 0).unwrap();
        let b = sample_group(&p, &task, 16, Decoding::Temperature(1.0), &mut streams(3, 8), 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        for (c, &r) in a.completions.iter().zip(&a.rewards) {
            assert!(r == 1.0 || r == -1.0);
            assert_eq!(r == 1.0, check_answer(&task, &c.tokens));
        }
        assert!((-1.0..=1.0).contains(&a.mean_reward()));
        assert!(sample_group(&p, &task, 16, Decoding::Greedy, &mut streams(3, 1), 0).is_err());
    }

    #[test]
    fn scripted_correct_policy_earns_full_reward() {
        let task = generate_task(8, 2).unwrap();
        let q = task.query.len();
        let script = [(q - 1, Vocab::ANS), (q, task.answer), (q + 1, Vocab::EOS)];
        let p = Params::scripted(ModelConfig::default(), &script).unwrap();
        let g = sample_group(&p, &task, 16, Decoding::Temperature(1.0), &mut streams(1, 8), 0).unwrap();
        for c in &g.completions {
            assert_eq!(c.tokens, vec![Vocab::ANS, task.answer, Vocab::EOS]);
        }
        assert!(g.rewards.iter().all(|&r| r == 1.0));
    }

    #[test]
    fn ratios_are_one_on_the_snapshot_and_closed_form_elsewhere() {
        let p = Params::init_with_std(ModelConfig::default(), 2, 0.2).unwrap();
        let task = generate_task(1, 3).unwrap();
        let g = sample_group(&p, &task, 24, Decoding::Temperature(1.0), &mut streams(4, 4), 0).unwrap();
        for row in importance_ratios(&p, &g).unwrap() {
            assert!(row.iter().all(|r| (r - 1.0).abs() <= 1e-9));
        }
        let mut shifted = g.clone();
        shifted.completions[0].logprobs_old[0] -= 2f64.ln();
        let rho = importance_ratios(&p, &shifted).unwrap();
        assert!((rho[0][0] - 2.0).abs() <= 1e-9);
    }

    #[test]
    fn dump_writes_one_line_per_completion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let p = Params::init(ModelConfig::default(), 2).unwrap();
        let task = generate_task(1, 2).unwrap();
        let g = sample_group(&p, &task, 8, Decoding::Temperature(1.0), &mut streams(4, 3), 0).unwrap();
        dump_rollouts(&path, &[g]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(v["reward"].is_number() && v["logprobs_old"].is_array());
    }
}
