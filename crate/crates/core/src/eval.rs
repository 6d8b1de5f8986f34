//! Pass@k, Length@k and Ratio@k over a task set.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_completion, Decoding, Params};
use crate::rng;
use crate::vocab::{check_answer, Task, Vocab};

const EVAL_STREAM: u64 = 0xE7A1;

/// Fraction of tasks with at least one success among their first `k` trials.
pub fn pass_at_k(correct: &[Vec<bool>], k: usize) -> Result<f64> {
    check_matrix(correct, k)?;
    let solved = correct.iter().filter(|row| row[..k].iter().any(|&c| c)).count();
    Ok(solved as f64 / correct.len() as f64)
}

/// Mean completion length over the first `k` trials of every task.
pub fn length_at_k(lengths: &[Vec<usize>], k: usize) -> Result<f64> {
    check_matrix(lengths, k)?;
    let total: usize = lengths.iter().map(|row| row[..k].iter().sum::<usize>()).sum();
    Ok(total as f64 / (lengths.len() * k) as f64)
}

fn check_matrix<T>(m: &[Vec<T>], k: usize) -> Result<()> {
    if m.is_empty() {
        return Err(Error::Domain("empty task set".into()));
    }
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    let width = m[0].len();
    if m.iter().any(|row| row.len() != width) {
        return Err(Error::Shape("trial matrix is not rectangular".into()));
    }
    if k > width {
        return Err(Error::Domain(format!("k = {k} exceeds the {width} recorded trials")));
    }
    Ok(())
}

/// Raw outcomes of `k_max` trials per task for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialMatrix {
    pub seed: u64,
    pub correct: Vec<Vec<bool>>,
    pub lengths: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub pass: f64,
    pub length: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: BTreeMap<usize, KMetrics>,
    pub tau: f64,
    pub tau_satisfied: bool,
    pub n_tasks: usize,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    /// Averages Pass@k and Length@k over the seeds' trial matrices; Ratio@k is
    /// the quotient of the averages.
    pub fn from_trials(trials: &[TrialMatrix], k_set: &[usize], tau: f64) -> Result<Self> {
        if trials.is_empty() || k_set.is_empty() {
            return Err(Error::Domain("need at least one seed and one k".into()));
        }
        let mut k = BTreeMap::new();
        for &kk in k_set {
            let mut pass = 0.0;
            let mut length = 0.0;
            for t in trials {
                pass += pass_at_k(&t.correct, kk)?;
                length += length_at_k(&t.lengths, kk)?;
            }
            pass /= trials.len() as f64;
            length /= trials.len() as f64;
            if !(length > 0.0) {
                return Err(Error::Domain("zero mean completion length".into()));
            }
            k.insert(kk, KMetrics { pass, length, ratio: pass / length });
        }
        let k_max = *k_set.iter().max().expect("non-empty");
        Ok(Self {
            tau_satisfied: k[&k_max].pass >= tau,
            k,
            tau,
            n_tasks: trials[0].correct.len(),
            seeds: trials.iter().map(|t| t.seed).collect(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,pass,length,ratio\n");
        for (k, m) in &self.k {
            s.push_str(&format!("{k},{},{},{}\n", m.pass, m.length, m.ratio));
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.csv` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Samples `k_max` trials per task under one seed.
pub fn sample_trials(params: &Params, tasks: &[Task], k_max: usize, budget: usize, decoding: Decoding, seed: u64) -> Result<TrialMatrix> {
    let mut correct = Vec::with_capacity(tasks.len());
    let mut lengths = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let mut c_row = Vec::with_capacity(k_max);
        let mut l_row = Vec::with_capacity(k_max);
        for j in 0..k_max {
            let mut r = rng::stream(seed, &[EVAL_STREAM, i as u64, j as u64]);
            let out = sample_completion(params, &task.query, budget, decoding, Vocab::EOS, &mut r)?;
            c_row.push(check_answer(task, &out.tokens));
            l_row.push(out.len());
        }
        correct.push(c_row);
        lengths.push(l_row);
    }
    Ok(TrialMatrix { seed, correct, lengths })
}

pub fn evaluate_policy(
    params: &Params,
    tasks: &[Task],
    k_set: &[usize],
    budget: usize,
    decoding: Decoding,
    seeds: &[u64],
    tau: f64,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::Domain("empty task set".into()));
    }
    let k_max = k_set.iter().copied().max().ok_or_else(|| Error::Domain("empty k set".into()))?;
    let trials = seeds
        .iter()
        .map(|&s| sample_trials(params, tasks, k_max, budget, decoding, s))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_trials(&trials, k_set, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::vocab::TaskSource;
    use proptest::prelude::*;

    #[test]
    fn pass_examples() {
        assert_eq!(pass_at_k(&[vec![true, true], vec![true, true]], 2).unwrap(), 1.0);
        let one = [vec![false, false, true]];
        assert_eq!(pass_at_k(&one, 3).unwrap(), 1.0);
        assert_eq!(pass_at_k(&one, 1).unwrap(), 0.0);
        let four = [vec![false], vec![true], vec![false], vec![false]];
        assert_eq!(pass_at_k(&four, 1).unwrap(), 0.25);
        assert!(pass_at_k(&[], 1).is_err());
        assert!(pass_at_k(&[vec![true], vec![true, false]], 1).is_err());
    }

    #[test]
    fn length_examples() {
        assert_eq!(length_at_k(&[vec![10, 10], vec![10, 10]], 2).unwrap(), 10.0);
        assert_eq!(length_at_k(&[vec![2, 4]], 2).unwrap(), 3.0);
        assert_eq!(
            length_at_k(&[vec![1, 5], vec![7, 2]], 2).unwrap(),
            length_at_k(&[vec![7, 2], vec![1, 5]], 2).unwrap()
        );
        assert!(length_at_k(&[], 1).is_err());
    }

    fn sevens() -> Vec<Task> {
        [[3, 10, 4], [2, 10, 5], [1, 11, 7]]
            .iter()
            .map(|q| Task {
                query: q.iter().map(|&i| crate::vocab::TokenId(i)).chain([Vocab::EQUALS]).collect(),
                answer: Vocab::digit(7),
                source: TaskSource::Ingested,
                difficulty: 2,
            })
            .collect()
    }

    #[test]
    fn always_correct_policy() {
        let script = [(3, Vocab::ANS), (4, Vocab::digit(7)), (5, Vocab::EOS)];
        let p = Params::scripted(ModelConfig::default(), &script).unwrap();
        let r = evaluate_policy(&p, &sevens(), &[1, 2, 4], 16, Decoding::Temperature(1.0), &[1, 2], 0.0).unwrap();
        for m in r.k.values() {
            assert_eq!(m.pass, 1.0);
            assert_eq!(m.length, 3.0);
            assert!((m.ratio - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(r.tau_satisfied);
        assert_eq!(r.n_tasks, 3);
        let again = evaluate_policy(&p, &sevens(), &[1, 2, 4], 16, Decoding::Temperature(1.0), &[1, 2], 0.0).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn tau_gate_and_roundtrip() {
        let p = Params::init(ModelConfig::default(), 3).unwrap();
        let r = evaluate_policy(&p, &sevens(), &[1, 2], 8, Decoding::Temperature(1.0), &[5], 0.0).unwrap();
        assert!(r.tau_satisfied);
        let strict = EvalReport::from_trials(
            &[sample_trials(&p, &sevens(), 2, 8, Decoding::Temperature(1.0), 5).unwrap()],
            &[1, 2],
            1.01,
        )
        .unwrap();
        assert!(!strict.tau_satisfied);
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path(), "eval").unwrap();
        let csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
        assert!(csv.starts_with("k,pass,length,ratio\n"));
    }

    proptest! {
        #[test]
        fn algebra_on_random_matrices(
            rows in prop::collection::vec(prop::collection::vec((any::<bool>(), 1usize..64), 8), 1..20)
        ) {
            let correct: Vec<Vec<bool>> = rows.iter().map(|r| r.iter().map(|x| x.0).collect()).collect();
            let lengths: Vec<Vec<usize>> = rows.iter().map(|r| r.iter().map(|x| x.1).collect()).collect();
            let t = TrialMatrix { seed: 0, correct: correct.clone(), lengths };
            let report = EvalReport::from_trials(&[t], &[1, 2, 4, 8], 0.0).unwrap();
            let mut prev = 0.0;
            for m in report.k.values() {
                prop_assert!(m.pass >= prev);
                prev = m.pass;
                prop_assert!((m.ratio * m.length - m.pass).abs() <= 1e-12);
            }
        }
    }
}
