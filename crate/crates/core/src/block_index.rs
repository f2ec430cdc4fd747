//! Min/max key descriptors per block, query-aware block scoring and dynamic
//! top-n block selection.
//!
//! Sparsity convention: [`SparsityConfig::sparsity`] is the fraction of the
//! context that is *skipped*. The fraction attended is the active ratio
//! `rho = 1 - sparsity`, and the selected block count is
//! `n = max(n_min, ceil(M * rho))` clamped to `M`. A sparsity of 0.9 keeps
//! roughly a tenth of the blocks.

use serde::{Deserialize, Serialize};

use crate::attention::BlockMask;
use crate::error::{ResaError, Result};

/// Slack absorbed before taking `ceil(M * rho)`, so that e.g. `1000 * (1 - 0.9)`
/// (which is 99.999... in binary floating point) rounds to 100.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockDescriptor {
    pub kmin: Vec<f32>,
    pub kmax: Vec<f32>,
    pub fill: usize,
}

impl BlockDescriptor {
    /// Descriptor of a block holding the single key `key`.
    pub fn from_key(key: &[f32]) -> Self {
        Self {
            kmin: key.to_vec(),
            kmax: key.to_vec(),
            fill: 1,
        }
    }

    /// Descriptor of a block built from token-major `keys` in one pass.
    pub fn from_keys(keys: &[f32], head_dim: usize) -> Self {
        let mut rows = keys.chunks_exact(head_dim);
        let mut desc = Self::from_key(rows.next().expect("block must hold at least one key"));
        for key in rows {
            desc.absorb(key);
        }
        desc
    }

    fn absorb(&mut self, key: &[f32]) {
        for ((lo, hi), &k) in self.kmin.iter_mut().zip(self.kmax.iter_mut()).zip(key) {
            *lo = lo.min(k);
            *hi = hi.max(k);
        }
        self.fill += 1;
    }

    pub fn head_dim(&self) -> usize {
        self.kmin.len()
    }

    /// Whether `key` lies inside the `[kmin, kmax]` box.
    pub fn contains(&self, key: &[f32]) -> bool {
        self.kmin
            .iter()
            .zip(&self.kmax)
            .zip(key)
            .all(|((&lo, &hi), &k)| lo <= k && k <= hi)
    }
}

/// Splits `keys` into blocks of `block_size` tokens and describes each one.
/// The last descriptor may be partial.
pub fn build_descriptors(keys: &[f32], head_dim: usize, block_size: usize) -> Vec<BlockDescriptor> {
    assert!(head_dim > 0 && block_size > 0);
    keys.chunks(head_dim * block_size)
        .map(|block| BlockDescriptor::from_keys(block, head_dim))
        .collect()
}

/// Widens `desc` to cover `new_key`.
pub fn update_descriptor(desc: &mut BlockDescriptor, new_key: &[f32], block_size: usize) -> Result<()> {
    if desc.fill >= block_size {
        return Err(ResaError::BlockFull);
    }
    if new_key.len() != desc.head_dim() {
        return Err(ResaError::DimensionMismatch {
            expected: desc.head_dim(),
            got: new_key.len(),
        });
    }
    desc.absorb(new_key);
    Ok(())
}

/// `sum_j max(q_j * kmax_j, q_j * kmin_j)`: an upper bound on `q·k` for
/// every key inside the descriptor's box.
pub fn score_block(query: &[f32], desc: &BlockDescriptor) -> f32 {
    query
        .iter()
        .zip(desc.kmin.iter().zip(&desc.kmax))
        .map(|(&q, (&lo, &hi))| (q * hi).max(q * lo))
        .sum()
}

/// Arithmetic mean of the `g` query heads of one GQA group (`g × d` row-major).
pub fn pool_queries(queries: &[f32], head_dim: usize) -> Vec<f32> {
    let heads = queries.len() / head_dim;
    let mut pooled = vec![0.0f32; head_dim];
    for q in queries.chunks_exact(head_dim) {
        for (p, &x) in pooled.iter_mut().zip(q) {
            *p += x;
        }
    }
    let inv = 1.0 / heads as f32;
    for p in &mut pooled {
        *p *= inv;
    }
    pooled
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    /// Tokens per block.
    pub block_size: usize,
    /// Fraction of the context skipped, in `[0, 1)`.
    pub sparsity: f64,
    /// Floor on the number of selected blocks.
    pub n_min: usize,
    /// Most recent blocks that are always selected.
    pub n_local: usize,
    /// Decode steps between dense rectifications.
    pub rectify_freq: usize,
    /// Leading layers that always decode with dense attention.
    #[serde(default)]
    pub dense_layers: usize,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self {
            block_size: 16,
            sparsity: 0.9,
            n_min: 16,
            n_local: 1,
            rectify_freq: 32,
            dense_layers: 0,
        }
    }
}

impl SparsityConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ResaError::InvalidConfig(msg));
        if self.block_size == 0 {
            return bad("block size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return bad(format!(
                "sparsity {} must lie in [0, 1) so the active ratio stays in (0, 1]",
                self.sparsity
            ));
        }
        if self.n_local == 0 || self.n_min < self.n_local {
            return bad(format!(
                "need n_min >= n_local >= 1, got n_min {} n_local {}",
                self.n_min, self.n_local
            ));
        }
        if self.rectify_freq == 0 {
            return bad("rectification frequency must be at least 1".into());
        }
        Ok(())
    }

    /// Fraction of the context attended, `1 - sparsity`.
    pub fn active_ratio(&self) -> f64 {
        1.0 - self.sparsity
    }

    /// Number of blocks selected out of `total_blocks`.
    pub fn selected_count(&self, total_blocks: usize) -> usize {
        let dynamic = (total_blocks as f64 * self.active_ratio() - CEIL_SLACK).ceil().max(0.0) as usize;
        self.n_min.max(dynamic).min(total_blocks)
    }
}

/// Dynamic top-n selection. The `n_local` newest blocks are forced in; the
/// remaining slots go to the highest-scoring blocks, lower index first on
/// ties. The result is sorted ascending.
pub fn select_blocks(query: &[f32], descs: &[BlockDescriptor], cfg: &SparsityConfig) -> BlockMask {
    let total = descs.len();
    let n = cfg.selected_count(total);
    if n >= total {
        return BlockMask::full(total);
    }
    let forced_from = total - cfg.n_local.min(n);
    let mut ranked: Vec<(usize, f32)> = descs[..forced_from]
        .iter()
        .enumerate()
        .map(|(i, d)| (i, score_block(query, d)))
        .collect();
    let remaining = n - (total - forced_from);
    if remaining < ranked.len() {
        let by_rank = |a: &(usize, f32), b: &(usize, f32)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        ranked.select_nth_unstable_by(remaining, by_rank);
        ranked.truncate(remaining);
    }
    let selected: Vec<usize> = ranked.into_iter().map(|(i, _)| i).chain(forced_from..total).collect();
    BlockMask::new(selected, total).expect("selection indices are unique and in range")
}
