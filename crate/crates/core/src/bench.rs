//! Micro-benchmark of the three MI estimators over completion length.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mi::{mi_profile_chunked, mi_profile_naive, mi_profile_preload, MiEstimator, MiProfile};
use crate::model::{AnswerProbe, ForwardCounter, ModelConfig, Params};
use crate::rng;
use crate::vocab::{generate_task, TokenId, Vocab};

/// Scores of different estimators must agree this closely before any timing counts.
pub const EQUALITY_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub estimators: Vec<MiEstimator>,
    pub repetitions: usize,
    /// Chunk count per length for the chunked estimator; `None` uses `ceil(|o|/8)`.
    pub chunks: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![32, 64, 128, 256],
            estimators: vec![MiEstimator::Naive, MiEstimator::Preload, MiEstimator::Chunked],
            repetitions: 3,
            chunks: None,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths.contains(&0) || self.lengths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("bench lengths must be positive and strictly ascending".into()));
        }
        if self.repetitions < 3 {
            return Err(Error::Config("bench needs at least 3 repetitions".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("bench needs at least one estimator".into()));
        }
        if self.chunks == Some(0) {
            return Err(Error::Config("chunk count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub estimator: MiEstimator,
    pub length: usize,
    pub chunks: Option<usize>,
    pub median_secs: f64,
    pub full_passes: usize,
    pub cached_passes: usize,
    pub peak_positions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub cells: Vec<BenchCell>,
    /// Least-squares slope of log(median time) against log(|o|).
    pub slopes: BTreeMap<String, f64>,
    /// Largest score discrepancy seen in the equality spot-check.
    pub max_discrepancy: f64,
}

impl BenchReport {
    pub fn slope(&self, e: MiEstimator) -> Option<f64> {
        self.slopes.get(estimator_name(e)).copied()
    }

    pub fn cell(&self, e: MiEstimator, length: usize) -> Option<&BenchCell> {
        self.cells.iter().find(|c| c.estimator == e && c.length == length)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("estimator,length,chunks,median_secs,full_passes,cached_passes,peak_positions\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                estimator_name(c.estimator),
                c.length,
                c.chunks.map_or(String::new(), |x| x.to_string()),
                c.median_secs,
                c.full_passes,
                c.cached_passes,
                c.peak_positions
            ));
        }
        s
    }

    /// Writes `bench.csv` and `bench.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let csv = dir.join("bench.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("bench.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))
    }
}

pub fn estimator_name(e: MiEstimator) -> &'static str {
    match e {
        MiEstimator::Naive => "naive",
        MiEstimator::Preload => "preload",
        MiEstimator::Chunked => "chunked",
    }
}

/// `model` with `max_seq_len` raised, if needed, to fit the longest benchmark
/// completion after a difficulty-2 query and the probe postfix.
pub fn bench_model_config(model: &ModelConfig, max_length: usize) -> ModelConfig {
    let need = 4 + max_length + Vocab::POSTFIX_LEN;
    ModelConfig {
        max_seq_len: model.max_seq_len.max(need),
        ..model.clone()
    }
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::Domain("slope fit needs two or more positive points".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("slope fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn run(params: &Params, e: MiEstimator, q: &[TokenId], o: &[TokenId], probe: &AnswerProbe, chunks: usize) -> Result<MiProfile> {
    match e {
        MiEstimator::Naive => mi_profile_naive(params, q, o, probe),
        MiEstimator::Preload => mi_profile_preload(params, q, o, probe),
        MiEstimator::Chunked => mi_profile_chunked(params, q, o, probe, chunks),
    }
}

/// Times every estimator on a fixed random completion of each length.
pub fn bench_mi(params: &Params, cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let probe = AnswerProbe::standard(&Vocab::new());
    let query = generate_task(cfg.seed, 2)?.query;
    let mut cells = Vec::new();
    let mut max_discrepancy: f64 = 0.0;
    for &len in &cfg.lengths {
        let mut r = rng::stream(cfg.seed, &[0xBE7C, len as u64]);
        // completion tokens avoid EOS so every position is a real prefix
        let completion: Vec<TokenId> = (0..len).map(|_| TokenId(r.random_range(0..Vocab::EOS.0))).collect();
        let chunks = cfg.chunks.unwrap_or(len.div_ceil(8)).min(len);

        let profiles = cfg
            .estimators
            .iter()
            .map(|&e| run(params, e, &query, &completion, &probe, chunks))
            .collect::<Result<Vec<_>>>()?;
        for p in &profiles[1..] {
            for (a, b) in p.scores.iter().zip(&profiles[0].scores) {
                let d = (a - b).abs();
                max_discrepancy = max_discrepancy.max(d);
                if !(d <= EQUALITY_TOLERANCE) {
                    return Err(Error::Integrity(format!(
                        "{} and {} scores differ by {d:e} at |o| = {len}",
                        estimator_name(p.estimator),
                        estimator_name(profiles[0].estimator)
                    )));
                }
            }
        }

        for (&e, profile) in cfg.estimators.iter().zip(&profiles) {
            let mut times = Vec::with_capacity(cfg.repetitions);
            for _ in 0..cfg.repetitions {
                let t0 = Instant::now();
                std::hint::black_box(run(params, e, &query, &completion, &probe, chunks)?);
                times.push(t0.elapsed().as_secs_f64().max(1e-9));
            }
            cells.push(BenchCell {
                estimator: e,
                length: len,
                chunks: profile.chunks,
                median_secs: median(&mut times),
                full_passes: profile.forwards.full_passes,
                cached_passes: profile.forwards.cached_passes,
                peak_positions: profile.forwards.peak_positions,
            });
        }
    }
    let xs: Vec<f64> = cfg.lengths.iter().map(|&l| l as f64).collect();
    let mut slopes = BTreeMap::new();
    if xs.len() >= 2 {
        for &e in &cfg.estimators {
            let ys: Vec<f64> = cells.iter().filter(|c| c.estimator == e).map(|c| c.median_secs).collect();
            slopes.insert(estimator_name(e).to_string(), log_log_slope(&xs, &ys)?);
        }
    }
    Ok(BenchReport {
        cells,
        slopes,
        max_discrepancy,
    })
}

/// Forward-count columns expected for an estimator at `|o| = len`.
pub fn expected_forwards(e: MiEstimator, len: usize, chunks: usize) -> ForwardCounter {
    let (full_passes, cached_passes) = match e {
        MiEstimator::Naive => (2 * len, 0),
        MiEstimator::Preload => (1, len + 1),
        MiEstimator::Chunked => (1, chunks),
    };
    ForwardCounter {
        full_passes,
        cached_passes,
        ..ForwardCounter::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Params {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 64,
            vocab_size: 18,
        };
        Params::init_with_std(cfg, 2, 0.3).unwrap()
    }

    #[test]
    fn slope_of_power_laws() {
        let xs = [32.0, 64.0, 128.0, 256.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(2.5)).collect();
        assert!((log_log_slope(&xs, &ys).unwrap() - 2.5).abs() < 1e-12);
        assert!(log_log_slope(&[1.0], &[1.0]).is_err());
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn accounting_columns() {
        let p = small();
        let cfg = BenchConfig {
            lengths: vec![8, 16, 24],
            repetitions: 3,
            ..Default::default()
        };
        let r = bench_mi(&p, &cfg).unwrap();
        assert_eq!(r.cells.len(), 9);
        assert!(r.max_discrepancy <= EQUALITY_TOLERANCE);
        for c in &r.cells {
            assert!(c.median_secs > 0.0);
            let want = expected_forwards(c.estimator, c.length, c.length.div_ceil(8));
            assert_eq!((c.full_passes, c.cached_passes), (want.full_passes, want.cached_passes), "{c:?}");
            assert!(c.peak_positions >= 4 + c.length);
        }
        assert_eq!(r.slopes.len(), 3);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 10);
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let back: BenchReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
        assert_eq!(back.cells.len(), 9);
    }

    #[test]
    fn rejects_bad_configs() {
        let p = small();
        for cfg in [
            BenchConfig { lengths: vec![16, 8], ..Default::default() },
            BenchConfig { lengths: vec![8], repetitions: 2, ..Default::default() },
            BenchConfig { lengths: vec![8], estimators: vec![], ..Default::default() },
        ] {
            assert!(matches!(bench_mi(&p, &cfg), Err(Error::Config(_))));
        }
        let too_long = BenchConfig { lengths: vec![100], ..Default::default() };
        assert!(matches!(bench_mi(&p, &too_long), Err(Error::Length { .. })));
        assert_eq!(bench_model_config(&ModelConfig::default(), 256).max_seq_len, 262);
    }
}
