//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 domain or runtime failure, 2 usage or
//! configuration error. Every output directory receives the effective config
//! (`config.json`, re-loadable) and a separate `meta.json` holding the
//! non-reproducible bits (timestamp, argv, version).

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::bench::{bench_mi, bench_model_config};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate_policy;
use crate::mi::{mi_profile, MiEstimator};
use crate::model::{load_checkpoint, sample_completion, AnswerProbe, Decoding, Params};
use crate::rng;
use crate::theory::run_theory_checks;
use crate::trainer::{heldout_tasks, train_loop, LoopOptions, TaskStream};
use crate::vocab::{generate_task, load_tasks_jsonl, write_tasks_jsonl, Vocab};

#[derive(Parser, Debug)]
#[command(name = "iapo", version, about = "Information-aware advantage shaping on a tiny transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `trainer.total_steps=10`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overwrites every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Log filter (falls back to IAPO_LOG, then `info`).
    #[arg(long)]
    log_level: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a policy and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Dump rollouts and per-token advantages.
        #[arg(long)]
        dump: bool,
        /// Train on a fixed JSONL task file instead of synthetic tasks.
        #[arg(long)]
        tasks: Option<PathBuf>,
    },
    /// Pass@k, Length@k and Ratio@k of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL task file; defaults to the held-out synthetic set.
        #[arg(long)]
        tasks: Option<PathBuf>,
    },
    /// Per-token informativeness profile of one completion.
    EstimateMi {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint; a fresh initialization when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Space-separated query tokens, e.g. "3 + 4 =".
        #[arg(long)]
        query: Option<String>,
        /// Space-separated completion tokens; sampled from the policy when absent.
        #[arg(long)]
        completion: Option<String>,
        /// naive, preload or chunked; defaults to `mi.estimator`.
        #[arg(long, value_parser = parse_estimator)]
        estimator: Option<MiEstimator>,
    },
    /// Exact checks of the length and entropy laws on a reduced policy.
    TheoryCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Time the MI estimators over completion lengths.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Write synthetic tasks as JSONL.
    GenData {
        /// Base seed; task j uses a key derived from (seed, j).
        #[arg(long)]
        seed: u64,
        /// Operand count.
        #[arg(long)]
        n: usize,
        /// Number of tasks.
        #[arg(long)]
        count: usize,
        /// Output JSONL file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_estimator(s: &str) -> std::result::Result<MiEstimator, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown estimator `{s}` (naive, preload, chunked)"))
}

fn init_logging(level: Option<&str>) {
    let env = env_logger::Env::new().filter_or("IAPO_LOG", "info");
    let mut b = env_logger::Builder::from_env(env);
    if let Some(l) = level {
        b.parse_filters(l);
    }
    let _ = b.try_init();
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let base = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&c.overrides)?;
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(dir: &Path, cfg: &ExperimentConfig, command: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.save(dir.join("config.json"))?;
    let meta = serde_json::json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "unix_time": SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    });
    let path = dir.join("meta.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))
}

fn write_json(path: PathBuf, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(&path, e))
}

fn load_params(path: &Path, cfg: &ExperimentConfig) -> Result<Params> {
    let ck = load_checkpoint(path)?;
    ck.ensure_compatible(&cfg.model)?;
    Ok(ck.params)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { common, resume, dump, tasks } => {
            init_logging(common.log_level.as_deref());
            let cfg = load_config(&common)?;
            prepare_out(&common.out, &cfg, "train")?;
            let stream = match tasks {
                Some(p) => TaskStream::Fixed(load_tasks_jsonl(p)?),
                None => TaskStream::Synthetic {
                    difficulty: cfg.trainer.difficulty,
                    seed: cfg.trainer.seed,
                },
            };
            let opts = LoopOptions {
                out_dir: Some(common.out.clone()),
                resume,
                dump,
            };
            let out = train_loop(&cfg.model, &cfg.trainer, &stream, &opts)?;
            if let Some(r) = out.reports.last() {
                println!("step {} mean_reward {:.4} mean_length {:.2}", r.step, r.mean_reward, r.mean_length);
            }
            Ok(())
        }
        Command::Eval { common, checkpoint, tasks } => {
            init_logging(common.log_level.as_deref());
            let cfg = load_config(&common)?;
            let params = load_params(&checkpoint, &cfg)?;
            prepare_out(&common.out, &cfg, "eval")?;
            let e = &cfg.eval;
            let tasks = match tasks {
                Some(p) => load_tasks_jsonl(p)?,
                None => heldout_tasks(e.task_seed, e.difficulty, e.n_tasks)?,
            };
            let report = evaluate_policy(&params, &tasks, &e.k_set, e.budget, e.decoding(), &e.seeds, e.tau)?;
            report.write(&common.out, "eval")?;
            for (k, m) in &report.k {
                println!("k={k} pass={:.4} length={:.2} ratio={:.5}", m.pass, m.length, m.ratio);
            }
            Ok(())
        }
        Command::EstimateMi {
            common,
            checkpoint,
            query,
            completion,
            estimator,
        } => {
            init_logging(common.log_level.as_deref());
            let mut cfg = load_config(&common)?;
            if let Some(e) = estimator {
                cfg.mi.estimator = e;
            }
            let params = match &checkpoint {
                Some(p) => load_params(p, &cfg)?,
                None => Params::init_with_std(cfg.model.clone(), cfg.seed, cfg.trainer.init_std)?,
            };
            prepare_out(&common.out, &cfg, "estimate-mi")?;
            let vocab = Vocab::new();
            let query = match query {
                Some(q) => vocab.tokenize(&q)?,
                None => generate_task(cfg.seed, cfg.trainer.difficulty)?.query,
            };
            let completion = match completion {
                Some(c) => vocab.tokenize(&c)?,
                None => {
                    let mut r = rng::stream(cfg.seed, &[0x3E1]);
                    let t = cfg.trainer.temperature;
                    sample_completion(&params, &query, cfg.trainer.budget, Decoding::Temperature(t), Vocab::EOS, &mut r)?.tokens
                }
            };
            let profile = mi_profile(&params, &query, &completion, &AnswerProbe::standard(&vocab), &cfg.mi)?;
            profile.write_csv(common.out.join("mi.csv"), &completion)?;
            let total: f64 = profile.scores.iter().sum();
            write_json(
                common.out.join("mi.json"),
                &serde_json::json!({
                    "query": vocab.detokenize(&query),
                    "completion": vocab.detokenize(&completion),
                    "estimator": profile.estimator,
                    "chunks": profile.chunks,
                    "full_passes": profile.forwards.full_passes,
                    "cached_passes": profile.forwards.cached_passes,
                    "peak_positions": profile.forwards.peak_positions,
                    "scores": profile.scores,
                    "total_information": total,
                }),
            )?;
            println!("|o|={} total information {total:.6}", completion.len());
            Ok(())
        }
        Command::TheoryCheck { common } => {
            init_logging(common.log_level.as_deref());
            let cfg = load_config(&common)?;
            prepare_out(&common.out, &cfg, "theory-check")?;
            let report = run_theory_checks(&cfg.theory, cfg.seed)?;
            write_json(common.out.join("theory.json"), &report)?;
            let l = &report.length;
            let verdicts = [
                ("length first-order", l.first_order_pass),
                ("length zero direction", l.zero_pass),
                ("length constant S", l.constant_s_pass),
                ("length negative covariance", l.negative_pass),
                ("entropy law", report.entropy.pass),
            ];
            for (name, ok) in verdicts {
                println!("{} {name}", if ok { "PASS" } else { "FAIL" });
            }
            if report.pass() {
                Ok(())
            } else {
                Err(Error::Domain("theory checks failed".into()))
            }
        }
        Command::Bench { common } => {
            init_logging(common.log_level.as_deref());
            let cfg = load_config(&common)?;
            prepare_out(&common.out, &cfg, "bench")?;
            let longest = *cfg.bench.lengths.last().expect("validated non-empty");
            let params = Params::init(bench_model_config(&cfg.model, longest), cfg.bench.seed)?;
            let report = bench_mi(&params, &cfg.bench)?;
            report.write(&common.out)?;
            for (name, slope) in &report.slopes {
                println!("{name} slope {slope:.3}");
            }
            Ok(())
        }
        Command::GenData { seed, n, count, out } => {
            let tasks = (0..count as u64)
                .map(|j| generate_task(rng::derive_key(seed, &[j]), n))
                .collect::<Result<Vec<_>>>()?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            write_tasks_jsonl(&out, &tasks)
        }
    }
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e @ (Error::Config(_) | Error::InvalidDifficulty(_))) => {
            eprintln!("error: {e}");
            eprintln!("config keys: seed, model.*, trainer.*, eval.*, mi.*, bench.*, theory.* (see `config.json` in any output directory)");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> i32 {
        run_cli(std::iter::once("iapo").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(&["frobnicate"]), 2);
        assert_eq!(run(&[]), 2);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(&["train", "--out", out, "--override", "trainer.lr=abc"]), 2);
        assert_eq!(run(&["train", "--out", out, "--override", "trainer.bogus=1"]), 2);
        assert_eq!(run(&["gen-data", "--seed", "0", "--n", "1", "--count", "3", "--out", &format!("{out}/t.jsonl")]), 2);
    }

    #[test]
    fn gen_data_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/tasks.jsonl");
        assert_eq!(run(&["gen-data", "--seed", "3", "--n", "2", "--count", "5", "--out", path.to_str().unwrap()]), 0);
        let tasks = load_tasks_jsonl(&path).unwrap();
        assert_eq!(tasks.len(), 5);
        let first = std::fs::read(&path).unwrap();
        run(&["gen-data", "--seed", "3", "--n", "2", "--count", "5", "--out", path.to_str().unwrap()]);
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn estimator_names() {
        assert_eq!(parse_estimator("preload").unwrap(), MiEstimator::Preload);
        assert!(parse_estimator("fast").is_err());
    }
}
