//! Deterministic toy decoder-only GQA transformer.
//!
//! Pre-RMSNorm blocks with rotate-half RoPE on queries and keys, a SwiGLU
//! feed-forward and an LM head tied to the token embedding. Weights are a
//! pure function of the config and seed (see [`crate::rng`]).
//!
//! Three forward paths share the same per-position arithmetic:
//! * [`Model::prefill`]: dense causal encoding of a prompt, appended to the cache.
//! * [`Model::decode_step`]: one token, dense or block-sparse attention.
//! * [`Model::dense_forward_batch`]: dense re-encoding of the newest window,
//!   overwriting its cache entries in place.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::attention::{causal_window_attention, dot, group_block_sparse_attention, BlockMask};
use crate::block_index::{pool_queries, select_blocks, SparsityConfig};
use crate::error::{ResaError, Result};
use crate::kv_store::{MemCounters, PagedKvCache};
use crate::rng::SplitMixStream;

pub const BYTE_VOCAB: usize = 256;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const WEIGHT_MAGIC: &[u8; 6] = b"RESAW1";
const RMS_EPS: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub rope_theta: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ModelConfig {
    /// Two layers, 4 query heads sharing 2 kv heads, head_dim 16.
    pub fn reference() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_query_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            ffn_dim: 128,
            vocab_size: BYTE_VOCAB + 2,
            rope_theta: 10_000.0,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(ResaError::InvalidConfig(msg.into()));
        if self.n_layers == 0 || self.n_kv_heads == 0 || self.head_dim == 0 || self.ffn_dim == 0 {
            return bad("layer, kv-head, head_dim and ffn_dim counts must be positive");
        }
        if !self.n_query_heads.is_multiple_of(self.n_kv_heads) {
            return bad("query heads must be a multiple of kv heads");
        }
        if self.d_model != self.n_query_heads * self.head_dim {
            return bad("d_model must equal query heads × head_dim");
        }
        if !self.head_dim.is_multiple_of(2) {
            return bad("head_dim must be even for rotary embeddings");
        }
        if self.vocab_size <= EOS as usize {
            return bad("vocabulary must include the BOS and EOS specials");
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return bad("rope_theta must be positive");
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.n_query_heads / self.n_kv_heads
    }

    fn q_width(&self) -> usize {
        self.n_query_heads * self.head_dim
    }

    fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    /// `[out][in]` row-major, here `(heads × head_dim) × d_model`.
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub ffn_norm: Vec<f32>,
    pub w_gate: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embed: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
}

fn uniform_tensor(seed: u64, name: &str, len: usize, fan_in: usize) -> Vec<f32> {
    let stream = SplitMixStream::new(seed, name);
    let bound = 1.0 / (fan_in as f32).sqrt();
    (0..len as u64).map(|i| stream.symmetric(i, bound)).collect()
}

/// Draws every matrix from its own SplitMix64 stream, uniform in
/// `±1/sqrt(fan_in)`. Norm gains start at one.
pub fn generate_weights(cfg: &ModelConfig) -> Result<ModelWeights> {
    cfg.validate()?;
    let (dm, ff, seed) = (cfg.d_model, cfg.ffn_dim, cfg.seed);
    let layers = (0..cfg.n_layers)
        .map(|l| {
            let t = |name: &str, rows: usize, fan_in: usize| {
                uniform_tensor(seed, &format!("layers.{l}.{name}"), rows * fan_in, fan_in)
            };
            LayerWeights {
                attn_norm: vec![1.0; dm],
                wq: t("wq", cfg.q_width(), dm),
                wk: t("wk", cfg.kv_width(), dm),
                wv: t("wv", cfg.kv_width(), dm),
                wo: t("wo", dm, cfg.q_width()),
                ffn_norm: vec![1.0; dm],
                w_gate: t("w_gate", ff, dm),
                w_up: t("w_up", ff, dm),
                w_down: t("w_down", dm, ff),
            }
        })
        .collect();
    Ok(ModelWeights {
        config: cfg.clone(),
        embed: uniform_tensor(seed, "embed", cfg.vocab_size * dm, dm),
        layers,
        final_norm: vec![1.0; dm],
    })
}

impl ModelWeights {
    fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.embed];
        for l in &self.layers {
            out.extend([
                &l.attn_norm[..],
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ffn_norm,
                &l.w_gate,
                &l.w_up,
                &l.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out
    }

    /// Flat little-endian file: magic, config header, then tensors in the
    /// order embed, per layer (attn_norm, wq, wk, wv, wo, ffn_norm, w_gate,
    /// w_up, w_down), final_norm.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        w.write_all(WEIGHT_MAGIC)?;
        for field in [
            c.n_layers,
            c.d_model,
            c.n_query_heads,
            c.n_kv_heads,
            c.head_dim,
            c.ffn_dim,
            c.vocab_size,
        ] {
            w.write_all(&(field as u32).to_le_bytes())?;
        }
        w.write_all(&c.rope_theta.to_le_bytes())?;
        w.write_all(&c.seed.to_le_bytes())?;
        for tensor in self.tensors() {
            for &x in tensor {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(|_| ResaError::BadWeightHeader)?;
        if &magic != WEIGHT_MAGIC {
            return Err(ResaError::BadWeightHeader);
        }
        let mut u32s = [0usize; 7];
        for field in &mut u32s {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf).map_err(|_| ResaError::BadWeightHeader)?;
            *field = u32::from_le_bytes(buf) as usize;
        }
        let mut theta = [0u8; 4];
        let mut seed = [0u8; 8];
        r.read_exact(&mut theta).map_err(|_| ResaError::BadWeightHeader)?;
        r.read_exact(&mut seed).map_err(|_| ResaError::BadWeightHeader)?;
        let [n_layers, d_model, n_query_heads, n_kv_heads, head_dim, ffn_dim, vocab_size] = u32s;
        let config = ModelConfig {
            n_layers,
            d_model,
            n_query_heads,
            n_kv_heads,
            head_dim,
            ffn_dim,
            vocab_size,
            rope_theta: f32::from_le_bytes(theta),
            seed: u64::from_le_bytes(seed),
        };
        config.validate().map_err(|_| ResaError::BadWeightHeader)?;
        // Shapes come from a config-shaped template; only the values are read.
        let mut weights = generate_weights(&config)?;
        let mut read_into = |dst: &mut Vec<f32>| -> Result<()> {
            let mut bytes = vec![0u8; dst.len() * 4];
            r.read_exact(&mut bytes)?;
            for (x, c) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
                *x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
            Ok(())
        };
        read_into(&mut weights.embed)?;
        for l in &mut weights.layers {
            for t in [
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ] {
                read_into(t)?;
            }
        }
        read_into(&mut weights.final_norm)?;
        if weights.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(ResaError::InvalidConfig("weight file holds non-finite values".into()));
        }
        Ok(weights)
    }
}

/// `x / rms(x) * gain`.
pub fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let mean_sq = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (mean_sq + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

/// Rotate-half rotary embedding of one head vector in place.
pub fn apply_rope(x: &mut [f32], pos: usize, theta: f32) {
    let half = x.len() / 2;
    for i in 0..half {
        let inv_freq = f64::from(theta).powf(-2.0 * i as f64 / x.len() as f64);
        let (sin, cos) = (pos as f64 * inv_freq).sin_cos();
        let (sin, cos) = (sin as f32, cos as f32);
        let (a, b) = (x[i], x[i + half]);
        x[i] = a * cos - b * sin;
        x[i + half] = a * sin + b * cos;
    }
}

fn matvec(w: &[f32], x: &[f32]) -> Vec<f32> {
    w.chunks_exact(x.len()).map(|row| dot(row, x)).collect()
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Lowest token id wins ties.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Roped q, k and v of one position.
type Projected = (Vec<f32>, Vec<f32>, Vec<f32>);

/// How a decode step attends to the cache.
#[derive(Clone, Copy, Debug)]
pub enum StepAttention<'a> {
    Dense,
    Sparse(&'a SparsityConfig),
}

/// Whether a dense window appends new positions or overwrites the newest ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum WindowWrite {
    Append,
    Overwrite,
}

/// Immutable model handle; forward passes mutate only the caller's cache.
#[derive(Clone, Debug)]
pub struct Model {
    weights: ModelWeights,
    scale: f32,
}

impl Model {
    pub fn new(weights: ModelWeights) -> Result<Self> {
        weights.config.validate()?;
        let scale = 1.0 / (weights.config.head_dim as f32).sqrt();
        Ok(Self { weights, scale })
    }

    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        Self::new(generate_weights(cfg)?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn new_cache(&self, block_size: usize) -> PagedKvCache {
        let c = self.config();
        PagedKvCache::new(c.n_layers, c.n_kv_heads, c.head_dim, block_size)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let vocab = self.config().vocab_size;
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(&token) => Err(ResaError::TokenOutOfRange { token, vocab }),
            None => Ok(()),
        }
    }

    fn embed(&self, token: u32) -> &[f32] {
        let dm = self.config().d_model;
        &self.weights.embed[token as usize * dm..(token as usize + 1) * dm]
    }

    /// Tied LM head over the final-normed hidden state.
    pub fn logits(&self, hidden: &[f32]) -> Vec<f32> {
        let h = rms_norm(hidden, &self.weights.final_norm);
        matvec(&self.weights.embed, &h)
    }

    /// Roped q, k and v for one position of one layer.
    fn project(&self, layer: &LayerWeights, x: &[f32], pos: usize) -> Projected {
        let c = self.config();
        let h = rms_norm(x, &layer.attn_norm);
        let mut q = matvec(&layer.wq, &h);
        let mut k = matvec(&layer.wk, &h);
        let v = matvec(&layer.wv, &h);
        for head in q.chunks_exact_mut(c.head_dim) {
            apply_rope(head, pos, c.rope_theta);
        }
        for head in k.chunks_exact_mut(c.head_dim) {
            apply_rope(head, pos, c.rope_theta);
        }
        (q, k, v)
    }

    /// Output projection, residual, then the SwiGLU block with its residual.
    fn finish_layer(&self, layer: &LayerWeights, x: &mut [f32], attn: &[f32]) {
        for (xi, o) in x.iter_mut().zip(matvec(&layer.wo, attn)) {
            *xi += o;
        }
        let h = rms_norm(x, &layer.ffn_norm);
        let gate = matvec(&layer.w_gate, &h);
        let up = matvec(&layer.w_up, &h);
        let act: Vec<f32> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
        for (xi, o) in x.iter_mut().zip(matvec(&layer.w_down, &act)) {
            *xi += o;
        }
    }

    /// Dense causal encoding of `tokens` at positions `start_pos..`.
    /// Returns the residual stream of every window position.
    fn encode_window(
        &self,
        tokens: &[u32],
        start_pos: usize,
        cache: &mut PagedKvCache,
        write: WindowWrite,
    ) -> Result<Vec<Vec<f32>>> {
        self.check_tokens(tokens)?;
        let c = self.config();
        let (d, g) = (c.head_dim, c.group_size());
        let n = tokens.len();
        let mut xs: Vec<Vec<f32>> = tokens.iter().map(|&t| self.embed(t).to_vec()).collect();
        for (l, layer) in self.weights.layers.iter().enumerate() {
            let projected: Vec<_> = xs
                .iter()
                .enumerate()
                .map(|(i, x)| self.project(layer, x, start_pos + i))
                .collect();
            for kv_head in 0..c.n_kv_heads {
                let lane = |pick: fn(&Projected) -> &Vec<f32>| -> Vec<f32> {
                    projected
                        .iter()
                        .flat_map(|p| pick(p)[kv_head * d..(kv_head + 1) * d].iter().copied())
                        .collect()
                };
                let (keys, values) = (lane(|p| &p.1), lane(|p| &p.2));
                match write {
                    WindowWrite::Append => {
                        for (k, v) in keys.chunks_exact(d).zip(values.chunks_exact(d)) {
                            cache.append(l, kv_head, k, v)?;
                        }
                    }
                    WindowWrite::Overwrite => cache.rectify_tail(l, kv_head, start_pos, &keys, &values)?,
                }
            }
            let mut attn = vec![vec![0.0f32; c.q_width()]; n];
            for kv_head in 0..c.n_kv_heads {
                let cols = kv_head * g * d..(kv_head + 1) * g * d;
                let queries: Vec<f32> = projected
                    .iter()
                    .flat_map(|p| p.0[cols.clone()].iter().copied())
                    .collect();
                let out = causal_window_attention(&queries, g, start_pos, cache.view(l, kv_head), self.scale)?;
                for (row, o) in attn.iter_mut().zip(out.chunks_exact(g * d)) {
                    row[cols.clone()].copy_from_slice(o);
                }
            }
            for (x, a) in xs.iter_mut().zip(&attn) {
                self.finish_layer(layer, x, a);
            }
        }
        Ok(xs)
    }

    /// Dense prefill appended to `cache`; returns the last position's logits.
    pub fn prefill(&self, tokens: &[u32], cache: &mut PagedKvCache) -> Result<Vec<f32>> {
        if tokens.is_empty() {
            return Err(ResaError::EmptyPrompt);
        }
        let start = cache.len();
        let xs = self.encode_window(tokens, start, cache, WindowWrite::Append)?;
        Ok(self.logits(xs.last().expect("non-empty window")))
    }

    /// Logits at every position of a from-scratch dense pass.
    pub fn dense_logits_all(&self, tokens: &[u32], block_size: usize) -> Result<Vec<Vec<f32>>> {
        if tokens.is_empty() {
            return Err(ResaError::EmptyPrompt);
        }
        let mut cache = self.new_cache(block_size);
        let xs = self.encode_window(tokens, 0, &mut cache, WindowWrite::Append)?;
        Ok(xs.iter().map(|x| self.logits(x)).collect())
    }

    /// One autoregressive step: appends `token`'s K/V at the next position,
    /// attends (the new token always included) and returns next-token logits.
    pub fn decode_step(
        &self,
        token: u32,
        cache: &mut PagedKvCache,
        attention: StepAttention<'_>,
        counters: &mut MemCounters,
    ) -> Result<Vec<f32>> {
        self.check_tokens(&[token])?;
        let c = self.config();
        let (d, g) = (c.head_dim, c.group_size());
        let pos = cache.len();
        let mut x = self.embed(token).to_vec();
        for (l, layer) in self.weights.layers.iter().enumerate() {
            let (q, k, v) = self.project(layer, &x, pos);
            for kv_head in 0..c.n_kv_heads {
                let cols = kv_head * d..(kv_head + 1) * d;
                cache.append(l, kv_head, &k[cols.clone()], &v[cols])?;
            }
            let mut attn = Vec::with_capacity(c.q_width());
            for kv_head in 0..c.n_kv_heads {
                let queries = &q[kv_head * g * d..(kv_head + 1) * g * d];
                let view = cache.view(l, kv_head);
                let total = view.num_blocks();
                let mask = match attention {
                    StepAttention::Sparse(cfg) if l >= cfg.dense_layers => {
                        let lane = cache.lane(l, kv_head);
                        counters.charge_selection(total, d);
                        select_blocks(&pool_queries(queries, d), lane.descriptors(), cfg)
                    }
                    _ => BlockMask::full(total),
                };
                let tokens: usize = mask.selected().iter().map(|&blk| view.block(blk).0.len() / d).sum();
                counters.charge_attention(tokens, d);
                counters.charge_dense_baseline(pos + 1, d);
                attn.extend(group_block_sparse_attention(queries, view, &mask, pos, self.scale)?);
            }
            self.finish_layer(layer, &mut x, &attn);
        }
        counters.steps += 1;
        Ok(self.logits(&x))
    }

    /// `decode_step` with block-sparse attention.
    pub fn sparse_forward(
        &self,
        token: u32,
        cache: &mut PagedKvCache,
        cfg: &SparsityConfig,
        counters: &mut MemCounters,
    ) -> Result<Vec<f32>> {
        self.decode_step(token, cache, StepAttention::Sparse(cfg), counters)
    }

    /// Re-encodes the newest `tokens.len()` positions with dense causal
    /// attention over the whole cache and overwrites their K/V in place.
    pub fn dense_forward_batch(
        &self,
        tokens: &[u32],
        cache: &mut PagedKvCache,
        start_pos: usize,
        counters: &mut MemCounters,
    ) -> Result<()> {
        if start_pos + tokens.len() != cache.len() || !cache.lanes_consistent() {
            return Err(ResaError::RectifyMisaligned {
                start: start_pos,
                window: tokens.len(),
                len: cache.len(),
            });
        }
        if tokens.is_empty() {
            return Ok(());
        }
        self.encode_window(tokens, start_pos, cache, WindowWrite::Overwrite)?;
        let c = self.config();
        for _ in 0..c.n_layers * c.n_kv_heads {
            counters.charge_rectification(cache.len(), c.head_dim);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_embedding_prefix() {
        // Frozen from tests/fixtures/splitmix_golden.py (seed 42, fan_in 64).
        let w = generate_weights(&ModelConfig::reference()).unwrap();
        let bits: Vec<u32> = w.embed[..4].iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, vec![0xbc79ec50, 0x3d7b4564, 0x3ddb5bec, 0x3dcb4c24]);
    }

    #[test]
    fn seeds_separate_streams() {
        let a = generate_weights(&ModelConfig::reference()).unwrap();
        let b = generate_weights(&ModelConfig {
            seed: 43,
            ..ModelConfig::reference()
        })
        .unwrap();
        assert_ne!(a.embed[0], b.embed[0]);
        assert_eq!(b.embed[0], 0.090_444_505);
    }

    #[test]
    fn weight_file_round_trip_and_bad_magic() {
        let w = generate_weights(&ModelConfig::reference()).unwrap();
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        assert_eq!(ModelWeights::read_from(&buf[..]).unwrap(), w);
        buf[2] = b'Z';
        let err = ModelWeights::read_from(&buf[..]).unwrap_err();
        assert_eq!(err.to_string(), "bad weight header");
    }

    #[test]
    fn invalid_configs() {
        let bad = ModelConfig {
            n_query_heads: 3,
            ..ModelConfig::reference()
        };
        assert!(generate_weights(&bad).is_err());
        let bad = ModelConfig {
            d_model: 60,
            ..ModelConfig::reference()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn token_out_of_range() {
        let model = Model::from_config(&ModelConfig::reference()).unwrap();
        let mut cache = model.new_cache(16);
        let err = model.prefill(&[1, 2, 258], &mut cache).unwrap_err();
        assert!(matches!(err, ResaError::TokenOutOfRange { token: 258, .. }));
        assert!(matches!(model.prefill(&[], &mut cache), Err(ResaError::EmptyPrompt)));
    }

    #[test]
    fn argmax_prefers_lowest_id() {
        assert_eq!(argmax(&[0.0, 2.0, 2.0, 1.0]), 1);
    }
}
