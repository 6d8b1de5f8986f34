use iapo::advantage::{ShapingConfig, Variant};
use iapo::bench::{bench_mi, bench_model_config, BenchConfig};
use iapo::mi::MiEstimator;
use iapo::model::{ModelConfig, Params};
use iapo::trainer::{train_loop, LoopOptions, TaskStream, TrainConfig};

fn window_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn smoke_config_improves_mean_reward() {
    let cfg = TrainConfig {
        lr: 3e-4,
        total_steps: 200,
        shaping: ShapingConfig { variant: Variant::Grpo, ..ShapingConfig::default() },
        ..TrainConfig::default()
    };
    let out = train_loop(&ModelConfig::default(), &cfg, &TaskStream::Synthetic { difficulty: 2, seed: 0 }, &LoopOptions::default()).unwrap();
    let rewards: Vec<f64> = out.reports.iter().map(|r| r.mean_reward).collect();
    let first = window_mean(&rewards[..20]);
    let last = window_mean(&rewards[rewards.len() - 20..]);
    println!("first-20 mean reward {first:.4}, last-20 {last:.4}");
    assert!(last > first);
}

#[test]
fn iapo_run_dumps_rollouts_and_advantages() {
    let model = ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_seq_len: 48, vocab_size: 18 };
    let cfg = TrainConfig {
        lr: 1e-3,
        total_steps: 2,
        batch_size: 2,
        group_size: 4,
        budget: 10,
        init_std: 0.3,
        shaping: ShapingConfig { variant: Variant::Iapo, alpha: 1e-2, ..ShapingConfig::default() },
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let opts = LoopOptions { out_dir: Some(dir.path().to_path_buf()), resume: None, dump: true };
    let out = train_loop(&model, &cfg, &TaskStream::Synthetic { difficulty: 2, seed: 1 }, &opts).unwrap();
    assert_eq!(out.reports.len(), 2);
    assert!(out.reports.iter().all(|r| r.alpha == 1e-2 && r.beta_explo == 1e-4));
    let rollouts = std::fs::read_to_string(dir.path().join("rollouts.jsonl")).unwrap();
    assert_eq!(rollouts.lines().count(), 2 * 2 * 4);
    for line in rollouts.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let n = v["tokens"].as_str().unwrap().split_whitespace().count();
        assert_eq!(v["logprobs_old"].as_array().unwrap().len(), n);
        assert!(v["reward"] == 1.0 || v["reward"] == -1.0);
    }
    assert!(dir.path().join("advantages.csv").exists());
    assert!(dir.path().join("final.ckpt").exists());
}

#[test]
fn chunked_is_no_slower_than_preload_at_256() {
    let cfg = BenchConfig {
        lengths: vec![256],
        estimators: vec![MiEstimator::Preload, MiEstimator::Chunked],
        repetitions: 5,
        chunks: Some(32),
        seed: 0,
    };
    let params = Params::init(bench_model_config(&ModelConfig::default(), 256), 0).unwrap();
    let r = bench_mi(&params, &cfg).unwrap();
    let pre = r.cell(MiEstimator::Preload, 256).unwrap().median_secs;
    let chunked = r.cell(MiEstimator::Chunked, 256).unwrap();
    println!("preload {pre:.4}s chunked(C=32) {:.4}s", chunked.median_secs);
    assert_eq!((chunked.full_passes, chunked.cached_passes), (1, 32));
    assert!(chunked.median_secs <= pre);
}
