//! Tiny pre-layernorm decoder-only transformer policy.
//!
//! All weights live in one flat `f64` buffer; [`Layout`] names the blocks inside
//! it. Gradients and optimizer moments reuse the same layout, which keeps
//! clipping, AdamW and checkpointing simple loops over one slice.

mod checkpoint;
mod forward;
mod sampling;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    forward_logits, forward_packed, forward_segments, forward_trace, ForwardCounter, KvCache, LayerTrace, Logits, Segment,
    Trace,
};
pub(crate) use forward::gelu_grad;
pub use sampling::{
    answer_distribution, answer_distribution_from_logits, greedy_completion, sample_completion,
    token_scores, AnswerProbe, Decoding, SampledCompletion, TokenScores,
};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::TokenId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 256,
            vocab_size: 18,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_seq_len == 0 || self.vocab_size == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Offsets of one transformer block inside the flat parameter buffer.
#[derive(Clone, Debug)]
pub struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    /// `[d × 3d]`, columns ordered q | k | v.
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub w_out: usize,
    pub b_out: usize,
    pub blocks: Vec<Block>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, v, f) = (cfg.d_model, cfg.vocab_size, cfg.d_ff);
        let mut blocks = Vec::new();
        let mut total = 0;
        let mut push = |name: String, len: usize| {
            let off = total;
            blocks.push(Block { name, offset: off, len });
            total += len;
            off
        };
        let tok_emb = push("tok_emb".into(), v * d);
        let pos_emb = push("pos_emb".into(), cfg.max_seq_len * d);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerOffsets {
                ln1_g: push(format!("layer{l}.ln1_g"), d),
                ln1_b: push(format!("layer{l}.ln1_b"), d),
                w_qkv: push(format!("layer{l}.w_qkv"), d * 3 * d),
                b_qkv: push(format!("layer{l}.b_qkv"), 3 * d),
                w_o: push(format!("layer{l}.w_o"), d * d),
                b_o: push(format!("layer{l}.b_o"), d),
                ln2_g: push(format!("layer{l}.ln2_g"), d),
                ln2_b: push(format!("layer{l}.ln2_b"), d),
                w_fc: push(format!("layer{l}.w_fc"), d * f),
                b_fc: push(format!("layer{l}.b_fc"), f),
                w_proj: push(format!("layer{l}.w_proj"), f * d),
                b_proj: push(format!("layer{l}.b_proj"), d),
            })
            .collect();
        let lnf_g = push("lnf_g".into(), d);
        let lnf_b = push("lnf_b".into(), d);
        let w_out = push("w_out".into(), d * v);
        let b_out = push("b_out".into(), v);
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            blocks,
            total,
        }
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// Policy weights θ.
#[derive(Clone, Debug)]
pub struct Params {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl Params {
    /// All-zero buffer with unit layernorm gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0; layout.total];
        let d = config.d_model;
        for off in layout
            .layers
            .iter()
            .flat_map(|l| [l.ln1_g, l.ln2_g])
            .chain([layout.lnf_g])
        {
            data[off..off + d].fill(1.0);
        }
        Ok(Self { config, layout, data })
    }

    /// Gaussian initialization with std 0.02; residual projections are scaled
    /// down by `sqrt(2 n_layers)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, 0.02)
    }

    pub fn init_with_std(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = rng::stream(seed, &[0x1417]);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let resid_scale = 1.0 / (2.0 * p.config.n_layers.max(1) as f64).sqrt();
        let layout = p.layout.clone();
        let mut fill = |off: usize, len: usize, scale: f64, data: &mut [f64]| {
            for x in &mut data[off..off + len] {
                *x = normal.sample(&mut rng) * scale;
            }
        };
        let (d, f, v) = (p.config.d_model, p.config.d_ff, p.config.vocab_size);
        fill(layout.tok_emb, v * d, 1.0, &mut p.data);
        fill(layout.pos_emb, p.config.max_seq_len * d, 1.0, &mut p.data);
        for l in &layout.layers {
            fill(l.w_qkv, d * 3 * d, 1.0, &mut p.data);
            fill(l.w_o, d * d, resid_scale, &mut p.data);
            fill(l.w_fc, d * f, 1.0, &mut p.data);
            fill(l.w_proj, f * d, resid_scale, &mut p.data);
        }
        fill(layout.w_out, d * v, 1.0, &mut p.data);
        Ok(p)
    }

    /// Weights whose logits are identically zero (a uniform policy): random
    /// body, zero output projection and bias.
    pub fn uniform_logits(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::init(config, seed)?;
        let (off, len) = (p.layout.w_out, p.config.d_model * p.config.vocab_size);
        p.data[off..off + len].fill(0.0);
        let (off, len) = (p.layout.b_out, p.config.vocab_size);
        p.data[off..off + len].fill(0.0);
        Ok(p)
    }

    /// Hand-built, effectively deterministic policy: the logits at absolute
    /// position `pos` put all mass on `token` (margin about `10·sqrt(d_model)`
    /// nats). Positions must be distinct modulo `d_model`; unscripted positions
    /// are uniform.
    pub fn scripted(config: ModelConfig, script: &[(usize, TokenId)]) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let (d, v) = (p.config.d_model, p.config.vocab_size);
        let mut used = vec![false; d];
        for &(pos, tok) in script {
            if pos >= p.config.max_seq_len || tok.idx() >= v {
                return Err(Error::Config(format!("script entry ({pos}, {tok}) out of range")));
            }
            let k = pos % d;
            if std::mem::replace(&mut used[k], true) {
                return Err(Error::Config(format!("script positions collide modulo d_model at {pos}")));
            }
            p.data[p.layout.pos_emb + pos * d + k] = 1.0;
            p.data[p.layout.w_out + k * v + tok.idx()] = 10.0;
        }
        Ok(p)
    }

    /// Adds independent N(0, scale²) noise to every weight.
    pub fn perturbed(&self, seed: u64, scale: f64) -> Self {
        let mut out = self.clone();
        let mut rng = rng::stream(seed, &[0x9E27]);
        for x in &mut out.data {
            let u: f64 = rng.sample(rand_distr::StandardNormal);
            *x += scale * u;
        }
        out
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.block(name).map(|b| &self.data[b.offset..b.offset + b.len])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_covers_buffer_without_gaps() {
        let cfg = ModelConfig::default();
        let layout = Layout::new(&cfg);
        let mut next = 0;
        for b in &layout.blocks {
            assert_eq!(b.offset, next, "{}", b.name);
            next += b.len;
        }
        assert_eq!(next, layout.total);
        let d = 64;
        let per_layer = 2 * d + d * 3 * d + 3 * d + d * d + d + 2 * d + d * 256 + 256 + 256 * d + d;
        assert_eq!(layout.total, 18 * d + 256 * d + 2 * per_layer + 2 * d + d * 18 + 18);
    }

    #[test]
    fn config_validation() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        let a = Params::init(cfg.clone(), 3).unwrap();
        let b = Params::init(cfg.clone(), 3).unwrap();
        let c = Params::init(cfg, 4).unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
        assert!(a.all_finite());
    }
}
