//! Naive reference transformer used as an oracle by the integration tests.
//!
//! Written independently of the crate's forward path: f64 everywhere except
//! where the stored weights are fp32, no paging, no streaming softmax.

#![allow(dead_code)]

use resa_core::ModelWeights;

pub fn rms(x: &[f64], gain: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(gain).map(|(v, &g)| v * inv * f64::from(g)).collect()
}

pub fn matvec(w: &[f32], x: &[f64]) -> Vec<f64> {
    w.chunks_exact(x.len())
        .map(|row| row.iter().zip(x).map(|(&a, b)| f64::from(a) * b).sum())
        .collect()
}

pub fn rope(x: &mut [f64], pos: usize, theta: f64) {
    let half = x.len() / 2;
    for i in 0..half {
        let angle = pos as f64 * theta.powf(-2.0 * i as f64 / x.len() as f64);
        let (s, c) = angle.sin_cos();
        let (a, b) = (x[i], x[i + half]);
        x[i] = a * c - b * s;
        x[i + half] = a * s + b * c;
    }
}

pub fn softmax_attend(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], scale: f64) -> Vec<f64> {
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| k.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; q.len()];
    for (wi, v) in w.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += wi / z * x;
        }
    }
    out
}

/// `[layer][kv_head][pos]` keys and values.
#[derive(Clone, Debug, Default)]
pub struct RefCache {
    pub keys: Vec<Vec<Vec<Vec<f64>>>>,
    pub values: Vec<Vec<Vec<Vec<f64>>>>,
}

impl RefCache {
    pub fn new(layers: usize, heads: usize) -> Self {
        Self {
            keys: vec![vec![Vec::new(); heads]; layers],
            values: vec![vec![Vec::new(); heads]; layers],
        }
    }

    /// Copy of a crate cache, widened to f64.
    pub fn from_cache(cache: &resa_core::PagedKvCache) -> Self {
        let d = cache.head_dim();
        let mut out = Self::new(cache.n_layers(), cache.n_kv_heads());
        for l in 0..cache.n_layers() {
            for h in 0..cache.n_kv_heads() {
                let lane = cache.lane(l, h);
                out.keys[l][h] = lane
                    .keys()
                    .chunks(d)
                    .map(|k| k.iter().map(|&x| f64::from(x)).collect())
                    .collect();
                out.values[l][h] = lane
                    .values()
                    .chunks(d)
                    .map(|k| k.iter().map(|&x| f64::from(x)).collect())
                    .collect();
            }
        }
        out
    }
}

/// Which cached positions a (layer, kv_head) attends to, given the pooled
/// group query and the lane's keys (new token included). `None` means all.
pub type Gather<'a> = &'a dyn Fn(usize, usize, &[f64], &[Vec<f64>]) -> Option<Vec<usize>>;

/// One token through the reference model, appending to `cache`.
pub fn step(w: &ModelWeights, token: u32, cache: &mut RefCache, gather: Gather<'_>) -> Vec<f64> {
    let c = &w.config;
    let (d, g, dm) = (c.head_dim, c.n_query_heads / c.n_kv_heads, c.d_model);
    let pos = cache.keys[0][0].len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut x: Vec<f64> = w.embed[token as usize * dm..(token as usize + 1) * dm]
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    for (l, lw) in w.layers.iter().enumerate() {
        let h = rms(&x, &lw.attn_norm);
        let mut q = matvec(&lw.wq, &h);
        let mut k = matvec(&lw.wk, &h);
        let v = matvec(&lw.wv, &h);
        for head in q.chunks_mut(d) {
            rope(head, pos, f64::from(c.rope_theta));
        }
        for head in k.chunks_mut(d) {
            rope(head, pos, f64::from(c.rope_theta));
        }
        let mut attn = Vec::with_capacity(q.len());
        for kvh in 0..c.n_kv_heads {
            cache.keys[l][kvh].push(k[kvh * d..(kvh + 1) * d].to_vec());
            cache.values[l][kvh].push(v[kvh * d..(kvh + 1) * d].to_vec());
            let group = &q[kvh * g * d..(kvh + 1) * g * d];
            let mut pooled = vec![0.0; d];
            for qh in group.chunks(d) {
                for (p, x) in pooled.iter_mut().zip(qh) {
                    *p += x / g as f64;
                }
            }
            let lane_k = &cache.keys[l][kvh];
            let lane_v = &cache.values[l][kvh];
            let positions = gather(l, kvh, &pooled, lane_k).unwrap_or_else(|| (0..lane_k.len()).collect());
            let ks: Vec<Vec<f64>> = positions.iter().map(|&p| lane_k[p].clone()).collect();
            let vs: Vec<Vec<f64>> = positions.iter().map(|&p| lane_v[p].clone()).collect();
            for qh in group.chunks(d) {
                attn.extend(softmax_attend(qh, &ks, &vs, scale));
            }
        }
        let o = matvec(&lw.wo, &attn);
        for (xi, oi) in x.iter_mut().zip(o) {
            *xi += oi;
        }
        let h2 = rms(&x, &lw.ffn_norm);
        let gate = matvec(&lw.w_gate, &h2);
        let up = matvec(&lw.w_up, &h2);
        let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
        for (xi, oi) in x.iter_mut().zip(matvec(&lw.w_down, &act)) {
            *xi += oi;
        }
    }
    matvec(&w.embed, &rms(&x, &w.final_norm))
}

/// Dense teacher-forced pass; returns every position's logits.
pub fn dense_all(w: &ModelWeights, tokens: &[u32]) -> (Vec<Vec<f64>>, RefCache) {
    let mut cache = RefCache::new(w.config.n_layers, w.config.n_kv_heads);
    let logits = tokens
        .iter()
        .map(|&t| step(w, t, &mut cache, &|_, _, _, _| None))
        .collect();
    (logits, cache)
}

pub fn max_abs_f32_f64(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, y)| (f64::from(x) - y).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
        .fold(0.0, f64::max)
}

/// Largest key/value difference between a crate cache and a reference cache
/// over the crate cache's positions.
pub fn cache_vs_ref(cache: &resa_core::PagedKvCache, reference: &RefCache) -> f64 {
    let d = cache.head_dim();
    let mut worst = 0.0f64;
    for l in 0..cache.n_layers() {
        for h in 0..cache.n_kv_heads() {
            let lane = cache.lane(l, h);
            for (p, (k, v)) in lane.keys().chunks(d).zip(lane.values().chunks(d)).enumerate() {
                worst = worst.max(max_abs_f32_f64(k, &reference.keys[l][h][p]));
                worst = worst.max(max_abs_f32_f64(v, &reference.values[l][h][p]));
            }
        }
    }
    worst
}

pub fn seeded(len: usize, seed: u64) -> Vec<u32> {
    resa_core::harness::seeded_prompt(seed, len)
}
