//! Reverse-mode gradients for the transformer, global-norm clipping and AdamW.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul_at_acc, matmul_bt};
use crate::model::{gelu_grad, Params, Trace};

/// One gradient entry per parameter, in the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub data: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &Params) -> Self {
        Self {
            data: vec![0.0; params.len()],
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|g| *g *= s);
    }

    /// Adds another buffer (per-worker reduction).
    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn dot(&self, other: &Gradients) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

fn layernorm_backward(
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
    dy: &[f64],
    x: &[f64],
    mean: &[f64],
    rstd: &[f64],
    g: &[f64],
    d: usize,
) {
    let mut dxhat = vec![0.0; d];
    for r in 0..mean.len() {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let (mu, rs) = (mean[r], rstd[r]);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let xhat = (xr[j] - mu) * rs;
            dxhat[j] = dyr[j] * g[j];
            dg[j] += dyr[j] * xhat;
            db[j] += dyr[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            let xhat = (xr[j] - mu) * rs;
            dxr[j] += rs * (dxhat[j] - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
}

fn bias_backward(db: &mut [f64], dy: &[f64]) {
    for row in dy.chunks_exact(db.len()) {
        for (b, y) in db.iter_mut().zip(row) {
            *b += y;
        }
    }
}

/// Accumulates into `grads` the gradient of `Σ dlogits ⊙ logits` for the pass
/// recorded in `trace`; `dlogits` holds ∂loss/∂logits, one row per position.
pub fn backward(params: &Params, trace: &Trace, dlogits: &[f64], grads: &mut Gradients) -> Result<()> {
    let cfg = &params.config;
    let (d, nh, hd, ff, v) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff, cfg.vocab_size);
    let rows = trace.tokens.len();
    if dlogits.len() != rows * v {
        return Err(Error::Shape(format!(
            "dlogits has {} entries, expected {}",
            dlogits.len(),
            rows * v
        )));
    }
    if grads.data.len() != params.len() {
        return Err(Error::Shape("gradient buffer does not match parameters".into()));
    }
    let w = &params.data;
    let lay = &params.layout;
    let gd = &mut grads.data;

    matmul_at_acc(&mut gd[lay.w_out..lay.w_out + d * v], &trace.hf, dlogits, rows, d, v);
    bias_backward(&mut gd[lay.b_out..lay.b_out + v], dlogits);
    let mut dhf = vec![0.0; rows * d];
    matmul_bt(&mut dhf, dlogits, &w[lay.w_out..lay.w_out + d * v], rows, d, v, false);

    let mut dx = vec![0.0; rows * d];
    {
        let (dg, db) = split_two(gd, lay.lnf_g, lay.lnf_b, d);
        layernorm_backward(&mut dx, dg, db, &dhf, &trace.x_final, &trace.lnf_mean, &trace.lnf_rstd, &w[lay.lnf_g..lay.lnf_g + d], d);
    }

    let scale = 1.0 / (hd as f64).sqrt();
    let mut dfc = vec![0.0; rows * ff];
    let mut dh = vec![0.0; rows * d];
    let mut datt = vec![0.0; rows * d];
    let mut dqkv = vec![0.0; rows * 3 * d];
    for (lo, lt) in lay.layers.iter().zip(&trace.layers).rev() {
        // MLP branch: x_out = x_mid + gelu(h2·W_fc + b_fc)·W_proj + b_proj
        matmul_bt(&mut dfc, &dx, &w[lo.w_proj..lo.w_proj + ff * d], rows, ff, d, false);
        matmul_at_acc(&mut gd[lo.w_proj..lo.w_proj + ff * d], &lt.fc_act, &dx, rows, ff, d);
        bias_backward(&mut gd[lo.b_proj..lo.b_proj + d], &dx);
        for (g, &pre) in dfc.iter_mut().zip(&lt.fc_pre) {
            *g *= gelu_grad(pre);
        }
        matmul_bt(&mut dh, &dfc, &w[lo.w_fc..lo.w_fc + d * ff], rows, d, ff, false);
        matmul_at_acc(&mut gd[lo.w_fc..lo.w_fc + d * ff], &lt.h2, &dfc, rows, d, ff);
        bias_backward(&mut gd[lo.b_fc..lo.b_fc + ff], &dfc);
        {
            let (dg, db) = split_two(gd, lo.ln2_g, lo.ln2_b, d);
            layernorm_backward(&mut dx, dg, db, &dh, &lt.x_mid, &lt.ln2_mean, &lt.ln2_rstd, &w[lo.ln2_g..lo.ln2_g + d], d);
        }

        // attention branch: x_mid = x_in + att_out·W_o + b_o
        matmul_bt(&mut datt, &dx, &w[lo.w_o..lo.w_o + d * d], rows, d, d, false);
        matmul_at_acc(&mut gd[lo.w_o..lo.w_o + d * d], &lt.att_out, &dx, rows, d, d);
        bias_backward(&mut gd[lo.b_o..lo.b_o + d], &dx);

        dqkv.fill(0.0);
        let qkv = &lt.qkv;
        for (&(start, len), att) in trace.segments.iter().zip(&lt.att) {
            let mut dp = vec![0.0; len];
            for h in 0..nh {
                for i in 0..len {
                    let r = start + i;
                    let probs = &att[(h * len + i) * len..(h * len + i) * len + i + 1];
                    let dout = &datt[r * d + h * hd..r * d + (h + 1) * hd];
                    let mut weighted = 0.0;
                    for j in 0..=i {
                        let rj = start + j;
                        let vj = &qkv[rj * 3 * d + 2 * d + h * hd..rj * 3 * d + 2 * d + (h + 1) * hd];
                        dp[j] = dout.iter().zip(vj).map(|(a, b)| a * b).sum();
                        weighted += probs[j] * dp[j];
                        let dvj = &mut dqkv[rj * 3 * d + 2 * d + h * hd..rj * 3 * d + 2 * d + (h + 1) * hd];
                        for (g, &o) in dvj.iter_mut().zip(dout) {
                            *g += probs[j] * o;
                        }
                    }
                    for j in 0..=i {
                        let ds = probs[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let rj = start + j;
                        for c in 0..hd {
                            let qi = qkv[r * 3 * d + h * hd + c];
                            let kj = qkv[rj * 3 * d + d + h * hd + c];
                            dqkv[r * 3 * d + h * hd + c] += ds * kj;
                            dqkv[rj * 3 * d + d + h * hd + c] += ds * qi;
                        }
                    }
                }
            }
        }
        matmul_bt(&mut dh, &dqkv, &w[lo.w_qkv..lo.w_qkv + d * 3 * d], rows, d, 3 * d, false);
        matmul_at_acc(&mut gd[lo.w_qkv..lo.w_qkv + d * 3 * d], &lt.h1, &dqkv, rows, d, 3 * d);
        bias_backward(&mut gd[lo.b_qkv..lo.b_qkv + 3 * d], &dqkv);
        {
            let (dg, db) = split_two(gd, lo.ln1_g, lo.ln1_b, d);
            layernorm_backward(&mut dx, dg, db, &dh, &lt.x_in, &lt.ln1_mean, &lt.ln1_rstd, &w[lo.ln1_g..lo.ln1_g + d], d);
        }
    }

    for (r, (&t, &p)) in trace.tokens.iter().zip(&trace.positions).enumerate() {
        let src = &dx[r * d..(r + 1) * d];
        let te = lay.tok_emb + t.idx() * d;
        for (g, s) in gd[te..te + d].iter_mut().zip(src) {
            *g += s;
        }
        let pe = lay.pos_emb + p * d;
        for (g, s) in gd[pe..pe + d].iter_mut().zip(src) {
            *g += s;
        }
    }
    if !grads.all_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(())
}

/// Disjoint mutable views of two adjacent `d`-blocks (`a` before `b`).
fn split_two(buf: &mut [f64], a: usize, b: usize, d: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + d <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + d], &mut hi[..d])
}

/// Scales `grads` so the global L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiplicative learning-rate decay applied every `decay_every` steps.
    pub lr_decay: f64,
    /// `0` disables decay.
    pub decay_every: u64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            lr_decay: 0.5,
            decay_every: 0,
        }
    }
}

impl AdamWHyper {
    /// Learning rate in effect for the step with 0-based index `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.decay_every == 0 {
            self.lr
        } else {
            self.lr * self.lr_decay.powi((step / self.decay_every) as i32)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub hyper: AdamWHyper,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Completed steps.
    pub step: u64,
}

impl AdamWState {
    pub fn new(n: usize, hyper: AdamWHyper) -> Self {
        Self {
            hyper,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Bias-corrected AdamW step with decoupled weight decay. Non-finite gradients
/// are rejected before anything is modified.
pub fn adamw_step(params: &mut Params, state: &mut AdamWState, grads: &Gradients) -> Result<()> {
    if grads.data.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape("optimizer, gradient and parameter sizes differ".into()));
    }
    if !grads.all_finite() {
        return Err(Error::Numeric("refusing AdamW step on non-finite gradients".into()));
    }
    let h = &state.hyper;
    let lr = h.lr_at(state.step);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for i in 0..params.data.len() {
        let g = grads.data[i];
        let m = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        let v = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let mhat = m / bc1;
        let vhat = v / bc2;
        let p = &mut params.data[i];
        *p -= lr * (mhat / (vhat.sqrt() + h.eps) + h.weight_decay * *p);
    }
    state.step += 1;
    Ok(())
}

/// Central finite differences of `loss` along the given coordinates.
pub fn central_difference(
    params: &Params,
    coords: &[usize],
    eps: f64,
    mut loss: impl FnMut(&Params) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut work = params.clone();
    coords
        .iter()
        .map(|&c| {
            let orig = work.data[c];
            work.data[c] = orig + eps;
            let up = loss(&work)?;
            work.data[c] = orig - eps;
            let down = loss(&work)?;
            work.data[c] = orig;
            Ok((up - down) / (2.0 * eps))
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps coordinates whose true
/// gradient is numerically zero from dividing noise by noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
