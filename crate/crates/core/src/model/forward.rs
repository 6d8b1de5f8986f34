use std::cell::Cell;

use super::{ModelConfig, Params};
use crate::error::{Error, Result};
use crate::linalg::{matmul, softmax};
use crate::vocab::TokenId;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Per-layer keys and values for the first `len` positions of a sequence.
///
/// Rows are `d_model` wide with heads laid out contiguously. A continuation
/// may attend to any prefix `0..prefix_len` of the cache without copying it.
#[derive(Clone, Debug)]
pub struct KvCache {
    d_model: usize,
    max_len: usize,
    len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            d_model: cfg.d_model,
            max_len: cfg.max_seq_len,
            len: 0,
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
        }
    }

    /// Number of cached positions (identical across layers).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self, layer: usize) -> &[f64] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[f64] {
        &self.values[layer]
    }

    /// Drops positions beyond `len`.
    pub fn truncate(&mut self, len: usize) {
        if len < self.len {
            for l in 0..self.keys.len() {
                self.keys[l].truncate(len * self.d_model);
                self.values[l].truncate(len * self.d_model);
            }
            self.len = len;
        }
    }

    fn append(&mut self, new_kv: &[(Vec<f64>, Vec<f64>)], rows: usize) {
        for (l, (k, v)) in new_kv.iter().enumerate() {
            self.keys[l].extend_from_slice(k);
            self.values[l].extend_from_slice(v);
        }
        self.len += rows;
        debug_assert!(self.len <= self.max_len);
    }
}

/// Logit rows, one per input position.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn last_row(&self) -> &[f64] {
        self.row(self.rows - 1)
    }

    pub fn max_abs_diff(&self, other: &Logits) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// New tokens that continue the first `prefix_len` cached positions.
#[derive(Clone, Copy, Debug)]
pub struct Segment<'a> {
    pub prefix_len: usize,
    pub tokens: &'a [TokenId],
}

/// Per-thread tally of forward invocations, read by the estimator accounting
/// and the benchmark.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardCounter {
    /// Calls without a cache (every position computed from scratch).
    pub full_passes: usize,
    /// Calls continuing a preloaded cache (one or many segments).
    pub cached_passes: usize,
    /// Total rows pushed through the network.
    pub rows: usize,
    /// Largest attended context (prefix plus new tokens).
    pub peak_positions: usize,
}

thread_local! {
    static COUNTER: Cell<ForwardCounter> = Cell::new(ForwardCounter::default());
}

impl ForwardCounter {
    pub fn current() -> Self {
        COUNTER.with(|c| c.get())
    }

    pub fn reset() {
        COUNTER.with(|c| c.set(ForwardCounter::default()));
    }

    /// Counts accumulated since `earlier`.
    pub fn since(earlier: ForwardCounter) -> Self {
        let now = Self::current();
        Self {
            full_passes: now.full_passes - earlier.full_passes,
            cached_passes: now.cached_passes - earlier.cached_passes,
            rows: now.rows - earlier.rows,
            peak_positions: now.peak_positions,
        }
    }

    fn record(cached: bool, rows: usize, peak: usize) {
        COUNTER.with(|c| {
            let mut v = c.get();
            if cached {
                v.cached_passes += 1;
            } else {
                v.full_passes += 1;
            }
            v.rows += rows;
            v.peak_positions = v.peak_positions.max(peak);
            c.set(v);
        });
    }
}

/// Activations kept for the backward pass. Only recorded for passes without a
/// cache prefix.
#[derive(Clone, Debug)]
pub struct Trace {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
    /// `(start_row, len)` per segment.
    pub segments: Vec<(usize, usize)>,
    pub layers: Vec<LayerTrace>,
    pub x_final: Vec<f64>,
    pub hf: Vec<f64>,
    pub lnf_mean: Vec<f64>,
    pub lnf_rstd: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub x_in: Vec<f64>,
    pub h1: Vec<f64>,
    pub ln1_mean: Vec<f64>,
    pub ln1_rstd: Vec<f64>,
    pub qkv: Vec<f64>,
    /// Per segment, `[n_heads × len × len]` causal attention probabilities.
    pub att: Vec<Vec<f64>>,
    pub att_out: Vec<f64>,
    pub x_mid: Vec<f64>,
    pub h2: Vec<f64>,
    pub ln2_mean: Vec<f64>,
    pub ln2_rstd: Vec<f64>,
    pub fc_pre: Vec<f64>,
    pub fc_act: Vec<f64>,
}

pub(crate) fn layernorm(
    out: &mut [f64],
    mean_out: &mut [f64],
    rstd_out: &mut [f64],
    x: &[f64],
    g: &[f64],
    b: &[f64],
    d: usize,
) {
    for (r, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            or[j] = (xr[j] - mean) * rstd * g[j] + b[j];
        }
        mean_out[r] = mean;
        rstd_out[r] = rstd;
    }
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_exact_mut(b.len()) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

pub(crate) struct SegmentsOutput {
    pub logits: Logits,
    pub new_kv: Vec<(Vec<f64>, Vec<f64>)>,
    pub trace: Option<Trace>,
}

/// Runs any number of independent segments through the network in one
/// invocation. Segment `s` attends to cached positions `0..prefix_len` and to
/// its own earlier rows; its positional indices continue from `prefix_len`.
pub(crate) fn run_segments(
    params: &Params,
    cache: Option<&KvCache>,
    segments: &[Segment<'_>],
    record: bool,
) -> Result<SegmentsOutput> {
    let cfg = &params.config;
    let (d, nh, hd, ff, v) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff, cfg.vocab_size);
    if segments.is_empty() || segments.iter().any(|s| s.tokens.is_empty()) {
        return Err(Error::Domain("forward called with no tokens to compute".into()));
    }
    let cached_len = cache.map_or(0, |c| c.len());
    let mut peak = 0;
    for s in segments {
        if s.prefix_len > cached_len {
            return Err(Error::Domain(format!(
                "segment prefix {} exceeds cached length {cached_len}",
                s.prefix_len
            )));
        }
        let end = s.prefix_len + s.tokens.len();
        if end > cfg.max_seq_len {
            return Err(Error::Length {
                requested: end,
                max: cfg.max_seq_len,
            });
        }
        if let Some(bad) = s.tokens.iter().find(|t| t.idx() >= v) {
            return Err(Error::Domain(format!("token id {bad} outside vocabulary of {v}")));
        }
        peak = peak.max(end);
    }
    if record && segments.iter().any(|s| s.prefix_len > 0) {
        return Err(Error::Domain("activation traces require passes without a cache prefix".into()));
    }

    let mut starts = Vec::with_capacity(segments.len());
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    for s in segments {
        starts.push((tokens.len(), s.tokens.len()));
        tokens.extend_from_slice(s.tokens);
        positions.extend(s.prefix_len..s.prefix_len + s.tokens.len());
    }
    let rows = tokens.len();
    ForwardCounter::record(cache.is_some(), rows, peak);

    let w = &params.data;
    let lay = &params.layout;
    let mut x = vec![0.0; rows * d];
    for (r, (&t, &p)) in tokens.iter().zip(&positions).enumerate() {
        let te = &w[lay.tok_emb + t.idx() * d..lay.tok_emb + (t.idx() + 1) * d];
        let pe = &w[lay.pos_emb + p * d..lay.pos_emb + (p + 1) * d];
        for j in 0..d {
            x[r * d + j] = te[j] + pe[j];
        }
    }

    let scale = 1.0 / (hd as f64).sqrt();
    let mut new_kv = Vec::with_capacity(cfg.n_layers);
    let mut layer_traces = Vec::new();
    let mut h1 = vec![0.0; rows * d];
    let mut mean = vec![0.0; rows];
    let mut rstd = vec![0.0; rows];
    let mut qkv = vec![0.0; rows * 3 * d];
    let mut att_out = vec![0.0; rows * d];
    let mut fc = vec![0.0; rows * ff];
    let mut scores: Vec<f64> = Vec::new();

    for (l, lo) in lay.layers.iter().enumerate() {
        let x_in = record.then(|| x.clone());
        layernorm(&mut h1, &mut mean, &mut rstd, &x, &w[lo.ln1_g..lo.ln1_g + d], &w[lo.ln1_b..lo.ln1_b + d], d);
        let (ln1_mean, ln1_rstd, h1_rec) = if record {
            (mean.clone(), rstd.clone(), h1.clone())
        } else {
            Default::default()
        };
        matmul(&mut qkv, &h1, &w[lo.w_qkv..lo.w_qkv + d * 3 * d], rows, d, 3 * d, false);
        add_bias(&mut qkv, &w[lo.b_qkv..lo.b_qkv + 3 * d]);

        let mut att_rec = Vec::new();
        for (seg, &(start, len)) in segments.iter().zip(&starts) {
            let pre = seg.prefix_len;
            let (ck, cv) = match cache {
                Some(c) => (c.keys(l), c.values(l)),
                None => (&[][..], &[][..]),
            };
            let mut seg_att = if record { vec![0.0; nh * len * len] } else { Vec::new() };
            for i in 0..len {
                let r = start + i;
                for h in 0..nh {
                    let q = &qkv[r * 3 * d + h * hd..r * 3 * d + (h + 1) * hd];
                    scores.clear();
                    for j in 0..pre {
                        let k = &ck[j * d + h * hd..j * d + (h + 1) * hd];
                        scores.push(q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale);
                    }
                    for j in 0..=i {
                        let rj = start + j;
                        let k = &qkv[rj * 3 * d + d + h * hd..rj * 3 * d + d + (h + 1) * hd];
                        scores.push(q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale);
                    }
                    let probs = softmax(&scores);
                    let out = &mut att_out[r * d + h * hd..r * d + (h + 1) * hd];
                    out.fill(0.0);
                    for (j, &p) in probs[..pre].iter().enumerate() {
                        let vv = &cv[j * d + h * hd..j * d + (h + 1) * hd];
                        for (o, &vx) in out.iter_mut().zip(vv) {
                            *o += p * vx;
                        }
                    }
                    for (j, &p) in probs[pre..].iter().enumerate() {
                        let rj = start + j;
                        let vv = &qkv[rj * 3 * d + 2 * d + h * hd..rj * 3 * d + 2 * d + (h + 1) * hd];
                        for (o, &vx) in out.iter_mut().zip(vv) {
                            *o += p * vx;
                        }
                    }
                    if record {
                        seg_att[(h * len + i) * len..(h * len + i) * len + i + 1].copy_from_slice(&probs);
                    }
                }
            }
            if record {
                att_rec.push(seg_att);
            }
        }

        let mut kk = vec![0.0; rows * d];
        let mut vv = vec![0.0; rows * d];
        for r in 0..rows {
            kk[r * d..(r + 1) * d].copy_from_slice(&qkv[r * 3 * d + d..r * 3 * d + 2 * d]);
            vv[r * d..(r + 1) * d].copy_from_slice(&qkv[r * 3 * d + 2 * d..r * 3 * d + 3 * d]);
        }
        new_kv.push((kk, vv));

        // x += att_out·W_o + b_o
        matmul(&mut x, &att_out, &w[lo.w_o..lo.w_o + d * d], rows, d, d, true);
        add_bias(&mut x, &w[lo.b_o..lo.b_o + d]);
        let x_mid = record.then(|| x.clone());

        let mut h2 = vec![0.0; rows * d];
        layernorm(&mut h2, &mut mean, &mut rstd, &x, &w[lo.ln2_g..lo.ln2_g + d], &w[lo.ln2_b..lo.ln2_b + d], d);
        matmul(&mut fc, &h2, &w[lo.w_fc..lo.w_fc + d * ff], rows, d, ff, false);
        add_bias(&mut fc, &w[lo.b_fc..lo.b_fc + ff]);
        let fc_pre = record.then(|| fc.clone());
        for f in fc.iter_mut() {
            *f = gelu(*f);
        }
        matmul(&mut x, &fc, &w[lo.w_proj..lo.w_proj + ff * d], rows, ff, d, true);
        add_bias(&mut x, &w[lo.b_proj..lo.b_proj + d]);

        if record {
            layer_traces.push(LayerTrace {
                x_in: x_in.unwrap(),
                h1: h1_rec,
                ln1_mean,
                ln1_rstd,
                qkv: qkv.clone(),
                att: att_rec,
                att_out: att_out.clone(),
                x_mid: x_mid.unwrap(),
                h2,
                ln2_mean: mean.clone(),
                ln2_rstd: rstd.clone(),
                fc_pre: fc_pre.unwrap(),
                fc_act: fc.clone(),
            });
        }
    }

    let mut hf = vec![0.0; rows * d];
    layernorm(&mut hf, &mut mean, &mut rstd, &x, &w[lay.lnf_g..lay.lnf_g + d], &w[lay.lnf_b..lay.lnf_b + d], d);
    let mut logits = vec![0.0; rows * v];
    matmul(&mut logits, &hf, &w[lay.w_out..lay.w_out + d * v], rows, d, v, false);
    add_bias(&mut logits, &w[lay.b_out..lay.b_out + v]);
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite logits in forward pass".into()));
    }

    let trace = record.then(|| Trace {
        tokens,
        positions,
        segments: starts,
        layers: layer_traces,
        x_final: x,
        hf,
        lnf_mean: mean,
        lnf_rstd: rstd,
    });
    Ok(SegmentsOutput {
        logits: Logits {
            rows,
            vocab: v,
            data: logits,
        },
        new_kv,
        trace,
    })
}

/// Forwards `tokens`, continuing `cache` when given. Returns one logit row per
/// new token and the cache extended to cover them.
pub fn forward_logits(params: &Params, tokens: &[TokenId], cache: Option<KvCache>) -> Result<(Logits, KvCache)> {
    let mut cache = cache.unwrap_or_else(|| KvCache::new(&params.config));
    let seg = Segment {
        prefix_len: cache.len(),
        tokens,
    };
    let out = run_segments(params, (!cache.is_empty()).then_some(&cache), &[seg], false)?;
    cache.append(&out.new_kv, tokens.len());
    Ok((out.logits, cache))
}

/// Batched continuations of prefixes of one shared cache. Returns logits for
/// all segment rows, concatenated in segment order.
pub fn forward_segments(params: &Params, cache: &KvCache, segments: &[Segment<'_>]) -> Result<Logits> {
    Ok(run_segments(params, Some(cache), segments, false)?.logits)
}

/// Teacher-forced pass over independent sequences that records activations.
pub fn forward_trace(params: &Params, seqs: &[&[TokenId]]) -> Result<(Logits, Trace)> {
    let segs: Vec<Segment<'_>> = seqs
        .iter()
        .map(|s| Segment {
            prefix_len: 0,
            tokens: s,
        })
        .collect();
    let out = run_segments(params, None, &segs, true)?;
    Ok((out.logits, out.trace.expect("trace recorded")))
}

/// Logits of independent full sequences in one packed pass, without a cache.
pub fn forward_packed(params: &Params, seqs: &[&[TokenId]]) -> Result<Logits> {
    let segs: Vec<Segment<'_>> = seqs
        .iter()
        .map(|s| Segment {
            prefix_len: 0,
            tokens: s,
        })
        .collect();
    Ok(run_segments(params, None, &segs, false)?.logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::softmax;
    use proptest::prelude::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 80,
            vocab_size: 18,
        }
    }

    fn toks(ids: &[u32]) -> Vec<TokenId> {
        ids.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn cache_continuation_matches_full_pass() {
        let p = Params::init_with_std(ModelConfig::default(), 1, 0.2).unwrap();
        let q = toks(&[3, 10, 4, 12, 1, 2, 3, 4]);
        let o = toks(&[5, 6, 7, 14, 8, 15, 16, 9]);
        let all: Vec<TokenId> = q.iter().chain(&o).copied().collect();
        let (full, _) = forward_logits(&p, &all, None).unwrap();
        let (lq, cache) = forward_logits(&p, &q, None).unwrap();
        let (lo, cache) = forward_logits(&p, &o, Some(cache)).unwrap();
        assert_eq!(cache.len(), 16);
        let mut stitched = lq.data.clone();
        stitched.extend_from_slice(&lo.data);
        let diff = full
            .data
            .iter()
            .zip(&stitched)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-9, "max |Δlogit| = {diff}");
        for r in 0..full.rows {
            let s: f64 = softmax(full.row(r)).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_and_overflow_are_rejected() {
        let p = Params::init(small_cfg(), 0).unwrap();
        let (_, cache) = forward_logits(&p, &toks(&[1, 2]), None).unwrap();
        assert!(matches!(forward_logits(&p, &[], Some(cache)), Err(Error::Domain(_))));
        let long = vec![TokenId(1); 81];
        assert!(matches!(forward_logits(&p, &long, None), Err(Error::Length { .. })));
    }

    #[test]
    fn segments_share_a_prefix_without_copying() {
        let p = Params::init_with_std(small_cfg(), 2, 0.3).unwrap();
        let seq = toks(&[1, 2, 3, 4, 5, 6]);
        let post = toks(&[13, 14]);
        let (_, master) = forward_logits(&p, &seq, None).unwrap();
        let segs: Vec<Segment<'_>> = (0..=6)
            .map(|pl| Segment {
                prefix_len: pl,
                tokens: &post,
            })
            .collect();
        let batched = forward_segments(&p, &master, &segs).unwrap();
        for pl in 0..=6 {
            let full: Vec<TokenId> = seq[..pl].iter().chain(&post).copied().collect();
            let (lf, _) = forward_logits(&p, &full, None).unwrap();
            for k in 0..2 {
                let a = batched.row(pl * 2 + k);
                let b = lf.row(pl + k);
                let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(diff <= 1e-9, "prefix {pl}: {diff}");
            }
        }
    }

    #[test]
    fn counter_tracks_invocations() {
        let p = Params::init(small_cfg(), 0).unwrap();
        let before = ForwardCounter::current();
        let (_, c) = forward_logits(&p, &toks(&[1, 2, 3]), None).unwrap();
        let _ = forward_logits(&p, &toks(&[4]), Some(c)).unwrap();
        let delta = ForwardCounter::since(before);
        assert_eq!(delta.full_passes, 1);
        assert_eq!(delta.cached_passes, 1);
        assert_eq!(delta.rows, 4);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn any_chunking_matches_full_pass(
            seed in 0u64..1000,
            ids in proptest::collection::vec(0u32..18, 2..64),
            cuts in proptest::collection::vec(1usize..8, 1..10),
        ) {
            let p = Params::init_with_std(small_cfg(), seed, 0.3).unwrap();
            let seq = toks(&ids);
            let (full, _) = forward_logits(&p, &seq, None).unwrap();
            let mut cache = None;
            let mut rows = Vec::new();
            let mut at = 0;
            let mut ci = 0;
            while at < seq.len() {
                let step = cuts[ci % cuts.len()].min(seq.len() - at);
                ci += 1;
                let (l, c) = forward_logits(&p, &seq[at..at + step], cache.take()).unwrap();
                rows.extend_from_slice(&l.data);
                cache = Some(c);
                at += step;
            }
            let diff = full.data.iter().zip(&rows).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(diff <= 1e-9);
        }
    }
}
