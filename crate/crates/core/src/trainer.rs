//! Clipped-surrogate objective with exact KL regularization, training steps,
//! and the training loop with metrics and checkpoints.

use std::collections::VecDeque;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::advantage::{compose_advantages, AdvantageBreakdown, ShapingConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_policy, EvalReport};
use crate::grad::{adamw_step, backward, clip_grad_norm, AdamWHyper, AdamWState, Gradients};
use crate::linalg::log_softmax;
use crate::mi::{mi_profile, MiConfig};
use crate::model::{
    forward_packed, forward_trace, load_checkpoint, save_checkpoint, AnswerProbe, Decoding, ModelConfig, Params,
};
use crate::rng;
use crate::rollout::{dump_rollouts, sample_group, RolloutGroup};
use crate::vocab::{generate_task, Task, TokenId, Vocab};

const ROLLOUT_STREAM: u64 = 0x5A11;
const TASK_STREAM: u64 = 0x7A51;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Steps between learning-rate decays; `None` means half of `total_steps`,
    /// `Some(0)` disables decay.
    pub decay_every: Option<u64>,
    pub weight_decay: f64,
    pub kl_coeff: f64,
    pub clip_epsilon: f64,
    pub grad_clip: f64,
    /// Completion token cap.
    pub budget: usize,
    /// Queries per step.
    pub batch_size: usize,
    pub total_steps: u64,
    pub temperature: f64,
    /// Operand count of synthetic training tasks.
    pub difficulty: usize,
    /// Gradient steps per sampled batch (π_old fixed across them).
    pub inner_epochs: usize,
    pub init_std: f64,
    pub seed: u64,
    /// Periodic checkpoint cadence in steps; 0 disables.
    pub checkpoint_every: u64,
    /// Validation cadence in steps; 0 disables best-checkpoint selection.
    pub validation_every: u64,
    pub validation_tasks: usize,
    pub shaping: ShapingConfig,
    pub mi: MiConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            lr: 1e-6,
            lr_decay: 0.5,
            decay_every: None,
            weight_decay: 0.0,
            kl_coeff: 0.001,
            clip_epsilon: 0.2,
            grad_clip: 1.0,
            budget: 64,
            batch_size: 4,
            total_steps: 200,
            temperature: 1.0,
            difficulty: 2,
            inner_epochs: 1,
            init_std: 0.02,
            seed: 0,
            checkpoint_every: 0,
            validation_every: 0,
            validation_tasks: 100,
            shaping: ShapingConfig::default(),
            mi: MiConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.kl_coeff >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip > 0.0) {
            return bad("kl_coeff and weight_decay must be non-negative and grad_clip positive");
        }
        if self.budget == 0 || self.batch_size == 0 || self.inner_epochs == 0 {
            return bad("budget, batch_size and inner_epochs must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.difficulty < 2 {
            return bad("difficulty must be at least 2");
        }
        self.shaping.validate()
    }

    pub fn adamw(&self) -> AdamWHyper {
        AdamWHyper {
            lr: self.lr,
            weight_decay: self.weight_decay,
            lr_decay: self.lr_decay,
            decay_every: self
                .decay_every
                .unwrap_or((self.total_steps / 2).max(1) * self.inner_epochs as u64),
            ..AdamWHyper::default()
        }
    }
}

/// Where training queries come from.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskStream {
    /// Fresh synthetic expressions per (step, slot), keyed by `seed`.
    Synthetic { difficulty: usize, seed: u64 },
    /// A fixed list, cycled.
    Fixed(Vec<Task>),
}

impl TaskStream {
    pub fn batch(&self, step: u64, size: usize) -> Result<Vec<Task>> {
        match self {
            TaskStream::Synthetic { difficulty, seed } => (0..size as u64)
                .map(|j| generate_task(rng::derive_key(*seed, &[TASK_STREAM, step, j]), *difficulty))
                .collect(),
            TaskStream::Fixed(tasks) => {
                if tasks.is_empty() {
                    return Err(Error::Domain("empty task list".into()));
                }
                Ok((0..size)
                    .map(|j| tasks[(step as usize * size + j) % tasks.len()].clone())
                    .collect())
            }
        }
    }
}

/// Held-out synthetic tasks, drawn from a stream disjoint from training draws.
pub fn heldout_tasks(seed: u64, difficulty: usize, n: usize) -> Result<Vec<Task>> {
    (0..n as u64)
        .map(|j| generate_task(rng::derive_key(seed, &[0x4E1D, j]), difficulty))
        .collect()
}

/// Loss terms for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateTerms {
    pub loss: f64,
    /// Mean per-token KL to the reference, averaged like the surrogate.
    pub kl: f64,
    /// Fraction of tokens whose clipped branch is active.
    pub clip_fraction: f64,
}

fn teacher_forced(group: &RolloutGroup) -> impl Iterator<Item = Vec<TokenId>> + '_ {
    group.completions.iter().map(|c| {
        let mut seq = group.task.query.clone();
        seq.extend_from_slice(&c.tokens[..c.len() - 1]);
        seq
    })
}

fn objective(
    live: &Params,
    reference: &Params,
    groups: &[RolloutGroup],
    advantages: &[AdvantageBreakdown],
    clip_epsilon: f64,
    kl_coeff: f64,
    want_grad: bool,
) -> Result<(SurrogateTerms, Option<Gradients>)> {
    if groups.len() != advantages.len() {
        return Err(Error::Shape("one advantage breakdown per group required".into()));
    }
    let seqs: Vec<Vec<TokenId>> = groups.iter().flat_map(teacher_forced).collect();
    if seqs.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let refs: Vec<&[TokenId]> = seqs.iter().map(|s| s.as_slice()).collect();
    let (logits, trace) = if want_grad {
        let (l, t) = forward_trace(live, &refs)?;
        (l, Some(t))
    } else {
        (forward_packed(live, &refs)?, None)
    };
    let ref_logits = if kl_coeff > 0.0 {
        Some(forward_packed(reference, &refs)?)
    } else {
        None
    };
    let v = live.config.vocab_size;
    let n_completions = seqs.len() as f64;
    let mut j_total = 0.0;
    let mut kl_total = 0.0;
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    let mut dlogits = if want_grad { vec![0.0; logits.data.len()] } else { Vec::new() };
    let mut offset = 0;
    let mut seq_iter = seqs.iter();
    for (group, adv) in groups.iter().zip(advantages) {
        if adv.total.len() != group.len() {
            return Err(Error::Shape("advantages do not match group size".into()));
        }
        let q = group.task.query.len();
        for (c, a_row) in group.completions.iter().zip(&adv.total) {
            if a_row.len() != c.len() {
                return Err(Error::Shape("advantages do not match completion length".into()));
            }
            let w = 1.0 / (n_completions * c.len() as f64);
            for (t, (&tok, &a)) in c.tokens.iter().zip(a_row).enumerate() {
                let r = offset + q - 1 + t;
                let logp = log_softmax(logits.row(r));
                let rho = (logp[tok.idx()] - c.logprobs_old[t]).exp();
                let unclipped = rho * a;
                let clipped_val = rho.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * a;
                j_total += w * unclipped.min(clipped_val);
                let active = unclipped <= clipped_val;
                if !active {
                    clipped += 1;
                }
                tokens += 1;
                let kl_parts = ref_logits.as_ref().map(|rl| {
                    let rlogp = log_softmax(rl.row(r));
                    let kl: f64 = logp.iter().zip(&rlogp).map(|(l, m)| l.exp() * (l - m)).sum();
                    (rlogp, kl)
                });
                if let Some((_, kl)) = &kl_parts {
                    j_total -= w * kl_coeff * kl;
                    kl_total += w * kl;
                }
                if want_grad {
                    let d = &mut dlogits[r * v..(r + 1) * v];
                    if active && a != 0.0 {
                        // −∂(ρA)/∂z = −Aρ(onehot − p)
                        for (j, dj) in d.iter_mut().enumerate() {
                            let onehot = if j == tok.idx() { 1.0 } else { 0.0 };
                            *dj -= w * a * rho * (onehot - logp[j].exp());
                        }
                    }
                    if let Some((rlogp, kl)) = &kl_parts {
                        for (j, dj) in d.iter_mut().enumerate() {
                            let p = logp[j].exp();
                            *dj += w * kl_coeff * p * (logp[j] - rlogp[j] - kl);
                        }
                    }
                }
            }
            offset += seq_iter.next().expect("one sequence per completion").len();
        }
    }
    let loss = -j_total;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite surrogate loss".into()));
    }
    let grads = match trace {
        Some(trace) => {
            let mut g = Gradients::zeros_like(live);
            backward(live, &trace, &dlogits, &mut g)?;
            Some(g)
        }
        None => None,
    };
    Ok((
        SurrogateTerms {
            loss,
            kl: kl_total,
            clip_fraction: clipped as f64 / tokens.max(1) as f64,
        },
        grads,
    ))
}

/// Negative clipped-surrogate objective minus the KL penalty, evaluated at
/// `live` with π_old log-probabilities taken from the groups.
pub fn surrogate_loss(
    live: &Params,
    reference: &Params,
    groups: &[RolloutGroup],
    advantages: &[AdvantageBreakdown],
    config: &TrainConfig,
) -> Result<SurrogateTerms> {
    Ok(objective(live, reference, groups, advantages, config.clip_epsilon, config.kl_coeff, false)?.0)
}

/// [`surrogate_loss`] and its gradient with respect to `live`.
pub fn surrogate_loss_and_grad(
    live: &Params,
    reference: &Params,
    groups: &[RolloutGroup],
    advantages: &[AdvantageBreakdown],
    config: &TrainConfig,
) -> Result<(SurrogateTerms, Gradients)> {
    let (terms, g) = objective(live, reference, groups, advantages, config.clip_epsilon, config.kl_coeff, true)?;
    Ok((terms, g.expect("gradient requested")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub snapshot_id: u64,
    pub mean_reward: f64,
    pub mean_length: f64,
    /// Fraction correct divided by mean length.
    pub ratio: f64,
    pub mean_entropy: f64,
    pub loss: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub alpha: f64,
    pub beta_explo: f64,
    pub seq_rms: f64,
    pub info_rms: f64,
    pub explo_rms: f64,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "step,mean_reward,mean_length,ratio,loss,alpha,beta_explo";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.mean_reward, self.mean_length, self.ratio, self.loss, self.alpha, self.beta_explo
        )
    }
}

/// Everything a training run mutates.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub live: Params,
    /// π_ref, fixed at initialization.
    pub reference: Params,
    /// π_old, refreshed from `live` at the start of every step.
    pub snapshot: Params,
    pub snapshot_id: u64,
    pub optimizer: AdamWState,
    /// Completed training steps.
    pub step: u64,
    pub metrics: VecDeque<StepReport>,
}

const METRICS_RING: usize = 256;

impl TrainState {
    pub fn new(model: ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let live = Params::init_with_std(model, config.seed, config.init_std)?;
        Ok(Self::from_params(live, config))
    }

    pub fn from_params(live: Params, config: &TrainConfig) -> Self {
        Self {
            reference: live.clone(),
            snapshot: live.clone(),
            snapshot_id: 0,
            optimizer: AdamWState::new(live.len(), config.adamw()),
            step: 0,
            metrics: VecDeque::with_capacity(METRICS_RING),
            live,
        }
    }

    pub fn last_report(&self) -> Option<&StepReport> {
        self.metrics.back()
    }
}

/// Output of one step before the optimizer update is applied.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub groups: Vec<RolloutGroup>,
    pub advantages: Vec<AdvantageBreakdown>,
}

/// Refreshes π_old, samples one group per task, profiles and shapes
/// advantages, then takes `inner_epochs` clipped AdamW steps. On error the
/// state is left as it was.
pub fn train_step(state: &mut TrainState, tasks: &[Task], config: &TrainConfig) -> Result<(StepReport, StepBatch)> {
    let snapshot = state.live.clone();
    let snapshot_id = state.snapshot_id + 1;
    let probe = AnswerProbe::standard(&Vocab::new());
    let decoding = Decoding::Temperature(config.temperature);

    let mut groups = Vec::with_capacity(tasks.len());
    for (qi, task) in tasks.iter().enumerate() {
        let mut streams: Vec<rng::Rng> = (0..config.group_size as u64)
            .map(|i| rng::stream(config.seed, &[ROLLOUT_STREAM, state.step, qi as u64, i]))
            .collect();
        groups.push(sample_group(&snapshot, task, config.budget, decoding, &mut streams, snapshot_id)?);
    }
    let mut advantages = Vec::with_capacity(groups.len());
    for g in &groups {
        let profiles = if config.shaping.variant.needs_mi() {
            Some(
                g.completions
                    .iter()
                    .map(|c| mi_profile(&snapshot, &g.task.query, &c.tokens, &probe, &config.mi))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        advantages.push(compose_advantages(g, profiles.as_deref(), &config.shaping)?);
    }

    let mut live = state.live.clone();
    let mut optimizer = state.optimizer.clone();
    optimizer.hyper = config.adamw();
    let mut first_terms = None;
    let mut grad_norm = 0.0;
    let lr = optimizer.hyper.lr_at(optimizer.step);
    for _ in 0..config.inner_epochs {
        let (terms, mut g) = surrogate_loss_and_grad(&live, &state.reference, &groups, &advantages, config)?;
        let norm = clip_grad_norm(&mut g, config.grad_clip);
        adamw_step(&mut live, &mut optimizer, &g)?;
        if first_terms.is_none() {
            first_terms = Some(terms);
            grad_norm = norm;
        }
    }
    let terms = first_terms.expect("at least one inner epoch");

    let n: usize = groups.iter().map(|g| g.len()).sum();
    let mean_reward = groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / n as f64;
    let mean_length = groups.iter().flat_map(|g| &g.completions).map(|c| c.len()).sum::<usize>() as f64 / n as f64;
    let n_tokens: usize = groups.iter().flat_map(|g| &g.completions).map(|c| c.len()).sum();
    let mean_entropy = groups
        .iter()
        .flat_map(|g| &g.completions)
        .flat_map(|c| &c.next_token_entropies)
        .sum::<f64>()
        / n_tokens as f64;
    let (mut seq_rms, mut info_rms, mut explo_rms) = (0.0, 0.0, 0.0);
    for a in &advantages {
        let (s, i, e) = a.term_rms();
        seq_rms += s / advantages.len() as f64;
        info_rms += i / advantages.len() as f64;
        explo_rms += e / advantages.len() as f64;
    }
    let (alpha, beta_explo) = config.shaping.effective_coefficients();
    let report = StepReport {
        step: state.step,
        snapshot_id,
        mean_reward,
        mean_length,
        ratio: (mean_reward + 1.0) / 2.0 / mean_length,
        mean_entropy,
        loss: terms.loss,
        kl: terms.kl,
        clip_fraction: terms.clip_fraction,
        grad_norm,
        lr,
        alpha,
        beta_explo,
        seq_rms,
        info_rms,
        explo_rms,
    };

    state.live = live;
    state.optimizer = optimizer;
    state.snapshot = snapshot;
    state.snapshot_id = snapshot_id;
    state.step += 1;
    if state.metrics.len() == METRICS_RING {
        state.metrics.pop_front();
    }
    state.metrics.push_back(report.clone());
    Ok((report, StepBatch { groups, advantages }))
}

/// Files and options for [`train_loop`].
#[derive(Clone, Debug, Default)]
pub struct LoopOptions {
    /// Metrics, checkpoints and dumps go here; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint (written by a previous run with the same config).
    pub resume: Option<PathBuf>,
    /// Append rollouts and advantages to JSONL/CSV dumps.
    pub dump: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub reports: Vec<StepReport>,
    /// Best validation report and its step, when validation ran.
    pub best: Option<(u64, EvalReport)>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

fn checkpoint_meta(config: &TrainConfig, state: &TrainState) -> serde_json::Value {
    serde_json::json!({
        "step": state.step,
        "snapshot_id": state.snapshot_id,
        "seed": config.seed,
    })
}

fn validation_key(r: &EvalReport) -> (f64, f64) {
    let m = r.k.values().next().expect("k = 1 evaluated");
    (m.pass, m.ratio)
}

/// Runs `total_steps` steps (or the remainder after a resume).
pub fn train_loop(model: &ModelConfig, config: &TrainConfig, tasks: &TaskStream, opts: &LoopOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let mut state = match &opts.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            ck.ensure_compatible(model)?;
            let mut st = TrainState::new(model.clone(), config)?;
            st.live = ck.params;
            st.snapshot = st.live.clone();
            st.step = ck.meta["step"]
                .as_u64()
                .ok_or_else(|| Error::Integrity("checkpoint lacks a step counter".into()))?;
            st.snapshot_id = ck.meta["snapshot_id"].as_u64().unwrap_or(st.step);
            if let Some(mut opt) = ck.optimizer {
                opt.hyper = config.adamw();
                st.optimizer = opt;
            }
            st
        }
        None => TrainState::new(model.clone(), config)?,
    };

    let mut metrics = None;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let f = if opts.resume.is_some() && path.exists() {
            std::fs::OpenOptions::new().append(true).open(&path)
        } else {
            std::fs::File::create(&path).and_then(|mut f| {
                writeln!(f, "{}", StepReport::CSV_HEADER)?;
                Ok(f)
            })
        }
        .map_err(|e| Error::io(&path, e))?;
        metrics = Some((f, path));
        if opts.resume.is_none() {
            save_checkpoint(dir.join(checkpoint_name(0)), &state.live, Some(&state.optimizer), checkpoint_meta(config, &state))?;
        }
    }

    let validation = if config.validation_every > 0 {
        Some(heldout_tasks(config.seed ^ 0x00DA_7A5E, config.difficulty, config.validation_tasks)?)
    } else {
        None
    };
    let mut best: Option<(u64, EvalReport)> = None;
    let mut reports = Vec::new();
    while state.step < config.total_steps {
        let batch = tasks.batch(state.step, config.batch_size)?;
        let (report, step_batch) = train_step(&mut state, &batch, config)?;
        if state.step % 50 == 0 || state.step == config.total_steps {
            log::info!(
                "step {} reward {:.3} length {:.1} loss {:.4}",
                report.step,
                report.mean_reward,
                report.mean_length,
                report.loss
            );
        }
        if let Some((f, path)) = metrics.as_mut() {
            writeln!(f, "{}", report.csv_row()).map_err(|e| Error::io(&*path, e))?;
        }
        if let (Some(dir), true) = (&opts.out_dir, opts.dump) {
            dump_rollouts(dir.join("rollouts.jsonl"), &step_batch.groups)?;
            for a in &step_batch.advantages {
                a.append_csv(dir.join("advantages.csv"))?;
            }
        }
        if let Some(dir) = &opts.out_dir {
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                save_checkpoint(
                    dir.join(checkpoint_name(state.step)),
                    &state.live,
                    Some(&state.optimizer),
                    checkpoint_meta(config, &state),
                )?;
            }
        }
        if let Some(val) = &validation {
            if state.step % config.validation_every == 0 {
                let r = evaluate_policy(
                    &state.live,
                    val,
                    &[1],
                    config.budget,
                    Decoding::Temperature(config.temperature),
                    &[config.seed],
                    0.0,
                )?;
                let better = best.as_ref().is_none_or(|(_, b)| {
                    let (p, q) = (validation_key(&r), validation_key(b));
                    p.0 > q.0 || (p.0 == q.0 && p.1 > q.1)
                });
                if better {
                    if let Some(dir) = &opts.out_dir {
                        save_checkpoint(dir.join(BEST_CHECKPOINT), &state.live, None, checkpoint_meta(config, &state))?;
                    }
                    best = Some((state.step, r));
                }
            }
        }
        reports.push(report);
    }
    if let Some(dir) = &opts.out_dir {
        if !reports.is_empty() {
            save_checkpoint(dir.join(FINAL_CHECKPOINT), &state.live, Some(&state.optimizer), checkpoint_meta(config, &state))?;
        }
    }
    if let Some((mut f, path)) = metrics {
        f.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome { state, reports, best })
}
