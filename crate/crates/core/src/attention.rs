//! Dense, group block-sparse and split/combine attention over fp32 buffers.
//!
//! All paths share one streaming-softmax accumulator ([`SoftmaxState`]) that
//! consumes the context one block at a time. Scores are fp32 dot products;
//! the running denominator and weighted value sums are kept in fp64. Because
//! every path feeds the same blocks in the same order through the same
//! accumulator, a full-mask sparse call and a dense call over the same paged
//! context produce bitwise identical outputs.

use crate::error::{ResaError, Result};

/// Additive score assigned to positions past `current_pos` inside a loaded block.
pub const MASKED_SCORE: f32 = -1e6;

/// Token count per tile when [`dense_attention`] walks a flat context.
const DENSE_TILE: usize = 16;

/// Read-only view of one (layer, kv-head) lane: token-major keys and values,
/// chunked into contiguous blocks of `block_size` tokens.
#[derive(Clone, Copy, Debug)]
pub struct PagedKv<'a> {
    keys: &'a [f32],
    values: &'a [f32],
    head_dim: usize,
    block_size: usize,
}

impl<'a> PagedKv<'a> {
    pub fn new(keys: &'a [f32], values: &'a [f32], head_dim: usize, block_size: usize) -> Result<Self> {
        if head_dim == 0 || block_size == 0 {
            return Err(ResaError::InvalidConfig(
                "head_dim and block_size must be positive".into(),
            ));
        }
        if keys.len() != values.len() {
            return Err(ResaError::DimensionMismatch {
                expected: keys.len(),
                got: values.len(),
            });
        }
        if !keys.len().is_multiple_of(head_dim) {
            return Err(ResaError::DimensionMismatch {
                expected: keys.len() / head_dim * head_dim,
                got: keys.len(),
            });
        }
        Ok(Self {
            keys,
            values,
            head_dim,
            block_size,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.head_dim
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.len().div_ceil(self.block_size)
    }

    /// Keys, values and first token position of block `index`.
    pub fn block(&self, index: usize) -> (&'a [f32], &'a [f32], usize) {
        let start = index * self.block_size;
        let end = (start + self.block_size).min(self.len());
        let d = self.head_dim;
        (&self.keys[start * d..end * d], &self.values[start * d..end * d], start)
    }

    pub fn key(&self, pos: usize) -> &'a [f32] {
        &self.keys[pos * self.head_dim..(pos + 1) * self.head_dim]
    }

    pub fn value(&self, pos: usize) -> &'a [f32] {
        &self.values[pos * self.head_dim..(pos + 1) * self.head_dim]
    }
}

/// The set of selected blocks for one query row, kept sparse and sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    selected: Vec<usize>,
    total_blocks: usize,
}

impl BlockMask {
    pub fn new(mut selected: Vec<usize>, total_blocks: usize) -> Result<Self> {
        selected.sort_unstable();
        if selected.windows(2).any(|w| w[0] == w[1]) {
            return Err(ResaError::InvalidConfig("duplicate block index in mask".into()));
        }
        if let Some(&last) = selected.last() {
            if last >= total_blocks {
                return Err(ResaError::InvalidConfig(format!(
                    "block index {last} out of range for {total_blocks} blocks"
                )));
            }
        }
        Ok(Self { selected, total_blocks })
    }

    pub fn full(total_blocks: usize) -> Self {
        Self {
            selected: (0..total_blocks).collect(),
            total_blocks,
        }
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn total_blocks(&self) -> usize {
        self.total_blocks
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.selected.len() == self.total_blocks
    }

    /// Contiguous chunks of `ceil(k / num_splits)` blocks in ascending index
    /// order. Always returns `num_splits` masks; trailing ones may be empty.
    pub fn split(&self, num_splits: usize) -> Vec<BlockMask> {
        assert!(num_splits > 0, "num_splits must be positive");
        let chunk = self.selected.len().div_ceil(num_splits).max(1);
        let mut parts: Vec<BlockMask> = self
            .selected
            .chunks(chunk)
            .map(|c| BlockMask {
                selected: c.to_vec(),
                total_blocks: self.total_blocks,
            })
            .collect();
        parts.resize(
            num_splits,
            BlockMask {
                selected: Vec::new(),
                total_blocks: self.total_blocks,
            },
        );
        parts
    }
}

/// Result of attending over one partition of the selected blocks.
#[derive(Clone, Debug, PartialEq)]
pub enum PartialAttnResult {
    /// The partition contained no attendable token.
    Empty,
    Partial {
        /// Output normalized within the partition.
        out: Vec<f32>,
        /// Log of the partition's softmax denominator (max included).
        logsum: f32,
        /// Largest pre-softmax score seen in the partition.
        maxscore: f32,
    },
}

impl PartialAttnResult {
    pub fn is_empty(&self) -> bool {
        matches!(self, PartialAttnResult::Empty)
    }
}

/// Streaming softmax accumulator for a single query head.
#[derive(Clone, Debug)]
pub struct SoftmaxState {
    max: f64,
    denom: f64,
    acc: Vec<f64>,
    maxscore: f32,
    any: bool,
}

impl SoftmaxState {
    pub fn new(head_dim: usize) -> Self {
        Self {
            max: f64::NEG_INFINITY,
            denom: 0.0,
            acc: vec![0.0; head_dim],
            maxscore: f32::NEG_INFINITY,
            any: false,
        }
    }

    /// Folds in a tile of pre-softmax scores and their value rows.
    /// `valid` marks whether the tile holds at least one unmasked score.
    pub fn absorb_scores(&mut self, scores: &[f32], values: &[f32], valid: bool) {
        let d = self.acc.len();
        debug_assert_eq!(scores.len() * d, values.len());
        if !valid || scores.is_empty() {
            return;
        }
        let tile_max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        for &s in scores {
            if s > MASKED_SCORE {
                self.maxscore = self.maxscore.max(s);
            }
        }
        let new_max = self.max.max(f64::from(tile_max));
        if new_max > self.max {
            let correction = (self.max - new_max).exp();
            self.denom *= correction;
            for a in &mut self.acc {
                *a *= correction;
            }
            self.max = new_max;
        }
        for (&s, v) in scores.iter().zip(values.chunks_exact(d)) {
            let p = (f64::from(s) - new_max).exp();
            self.denom += p;
            for (a, &x) in self.acc.iter_mut().zip(v) {
                *a += p * f64::from(x);
            }
        }
        self.any = true;
    }

    pub fn finish(self) -> PartialAttnResult {
        if !self.any {
            return PartialAttnResult::Empty;
        }
        let inv = 1.0 / self.denom;
        PartialAttnResult::Partial {
            out: self.acc.iter().map(|&a| (a * inv) as f32).collect(),
            logsum: (self.max + self.denom.ln()) as f32,
            maxscore: self.maxscore,
        }
    }
}

/// Sequential fp32 dot product. [`QueryTile`] reproduces this exact
/// summation order for every query it holds.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// A set of query heads stored dimension-major (`d × n`), so that scoring a
/// key against all of them vectorizes across queries while each query keeps
/// the sequential summation order of [`dot`].
#[derive(Clone, Debug)]
pub struct QueryTile {
    transposed: Vec<f32>,
    /// Last attendable position for each query.
    limits: Vec<usize>,
    head_dim: usize,
}

impl QueryTile {
    /// `queries` is `n × d` row-major; `limits[i]` is query `i`'s position.
    pub fn new(queries: &[f32], head_dim: usize, limits: Vec<usize>) -> Self {
        let n = limits.len();
        assert_eq!(queries.len(), n * head_dim, "query tile shape mismatch");
        let mut transposed = vec![0.0f32; n * head_dim];
        for (i, q) in queries.chunks_exact(head_dim).enumerate() {
            for (j, &x) in q.iter().enumerate() {
                transposed[j * n + i] = x;
            }
        }
        Self {
            transposed,
            limits,
            head_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.limits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.limits.is_empty()
    }

    /// Scores one block against every query of the tile and folds it into
    /// `states[i]`. Queries positioned before the block are left untouched.
    pub fn absorb_block(
        &self,
        states: &mut [SoftmaxState],
        keys: &[f32],
        values: &[f32],
        start_pos: usize,
        scale: f32,
        scratch: &mut TileScratch,
    ) {
        let (n, d) = (self.len(), self.head_dim);
        let tokens = keys.len() / d;
        if tokens == 0 || self.limits.iter().all(|&lim| lim < start_pos) {
            return;
        }
        let raw = &mut scratch.raw;
        raw.clear();
        raw.resize(tokens * n, 0.0);
        for (row, k) in raw.chunks_exact_mut(n).zip(keys.chunks_exact(d)) {
            for (&kj, qcol) in k.iter().zip(self.transposed.chunks_exact(n)) {
                for (s, &q) in row.iter_mut().zip(qcol) {
                    *s += q * kj;
                }
            }
        }
        for (i, state) in states.iter_mut().enumerate() {
            let limit = self.limits[i];
            if limit < start_pos {
                continue;
            }
            scratch.column.clear();
            scratch.column.extend((0..tokens).map(|t| {
                if start_pos + t <= limit {
                    raw[t * n + i] * scale
                } else {
                    MASKED_SCORE
                }
            }));
            state.absorb_scores(&scratch.column, values, true);
        }
    }
}

/// Reusable buffers for [`QueryTile::absorb_block`].
#[derive(Clone, Debug, Default)]
pub struct TileScratch {
    raw: Vec<f32>,
    column: Vec<f32>,
}

/// `softmax(q·kᵀ · scale) · V` over a flat token-major context.
pub fn dense_attention(q: &[f32], keys: &[f32], values: &[f32], scale: f32) -> Result<Vec<f32>> {
    let d = q.len();
    if d == 0 {
        return Err(ResaError::DimensionMismatch { expected: 1, got: 0 });
    }
    let kv = PagedKv::new(keys, values, d, DENSE_TILE)?;
    if kv.is_empty() {
        return Err(ResaError::EmptyContext);
    }
    let mask = BlockMask::full(kv.num_blocks());
    let part = partial_attention(q, kv, &mask, kv.len() - 1, scale);
    combine_partials(std::slice::from_ref(&part))
}

/// Partial attention of every head in a GQA group over `blocks`.
/// `queries` is `g × d` row-major. Block loads are shared across the heads.
pub fn group_partial_attention(
    queries: &[f32],
    kv: PagedKv<'_>,
    blocks: &[usize],
    current_pos: usize,
    scale: f32,
) -> Vec<PartialAttnResult> {
    let d = kv.head_dim();
    assert_eq!(queries.len() % d, 0, "query buffer not a multiple of head_dim");
    let heads = queries.len() / d;
    let tile = QueryTile::new(queries, d, vec![current_pos; heads]);
    let mut states: Vec<SoftmaxState> = (0..heads).map(|_| SoftmaxState::new(d)).collect();
    let mut scratch = TileScratch::default();
    for &block in blocks {
        let (keys, values, start) = kv.block(block);
        tile.absorb_block(&mut states, keys, values, start, scale, &mut scratch);
    }
    states.into_iter().map(SoftmaxState::finish).collect()
}

/// Attention for one query head restricted to `assigned` blocks.
pub fn partial_attention(
    q: &[f32],
    kv: PagedKv<'_>,
    assigned: &BlockMask,
    current_pos: usize,
    scale: f32,
) -> PartialAttnResult {
    group_partial_attention(q, kv, assigned.selected(), current_pos, scale)
        .pop()
        .unwrap_or(PartialAttnResult::Empty)
}

/// Group block-sparse attention: every head of the group attends to the
/// same selected blocks. Returns `g × d` outputs, row-major.
pub fn group_block_sparse_attention(
    queries: &[f32],
    kv: PagedKv<'_>,
    mask: &BlockMask,
    current_pos: usize,
    scale: f32,
) -> Result<Vec<f32>> {
    let d = kv.head_dim();
    if queries.is_empty() || !queries.len().is_multiple_of(d) {
        return Err(ResaError::DimensionMismatch {
            expected: d,
            got: queries.len(),
        });
    }
    if let Some(&last) = mask.selected().last() {
        if last >= kv.num_blocks() {
            return Err(ResaError::InvalidConfig(format!(
                "mask selects block {last} but the cache holds {}",
                kv.num_blocks()
            )));
        }
    }
    let parts = group_partial_attention(queries, kv, mask.selected(), current_pos, scale);
    let mut out = Vec::with_capacity(queries.len());
    for part in &parts {
        out.extend(combine_partials(std::slice::from_ref(part))?);
    }
    Ok(out)
}

/// Merges partial results by log-sum-exp weighting. Empty parts are ignored.
pub fn combine_partials(parts: &[PartialAttnResult]) -> Result<Vec<f32>> {
    let filled = || {
        parts.iter().filter_map(|p| match p {
            PartialAttnResult::Partial { out, logsum, .. } => Some((out, f64::from(*logsum))),
            PartialAttnResult::Empty => None,
        })
    };
    let global_max = filled().map(|(_, ls)| ls).fold(f64::NEG_INFINITY, f64::max);
    let Some((first, _)) = filled().next() else {
        return Err(ResaError::EmptySelection);
    };
    let mut acc = vec![0.0f64; first.len()];
    let mut total = 0.0f64;
    for (out, ls) in filled() {
        let w = (ls - global_max).exp();
        total += w;
        for (a, &x) in acc.iter_mut().zip(out) {
            *a += w * f64::from(x);
        }
    }
    Ok(acc.iter().map(|&a| (a / total) as f32).collect())
}

/// Causal dense attention for a window of consecutive query positions
/// starting at `first_pos`, each attending to every cached token at or
/// before its own position. `queries` is `positions × g × d`.
///
/// Keys are loaded once per block for the whole window; per query the
/// arithmetic is identical to a single-position call over the full prefix.
pub fn causal_window_attention(
    queries: &[f32],
    group_size: usize,
    first_pos: usize,
    kv: PagedKv<'_>,
    scale: f32,
) -> Result<Vec<f32>> {
    let d = kv.head_dim();
    let row = group_size * d;
    if row == 0 || !queries.len().is_multiple_of(row) {
        return Err(ResaError::DimensionMismatch {
            expected: row,
            got: queries.len(),
        });
    }
    let positions = queries.len() / row;
    if positions == 0 {
        return Ok(Vec::new());
    }
    let last_pos = first_pos + positions - 1;
    if last_pos >= kv.len() {
        return Err(ResaError::EmptyContext);
    }
    let b = kv.block_size();
    let limits = (0..positions * group_size)
        .map(|i| first_pos + i / group_size)
        .collect();
    let tile = QueryTile::new(queries, d, limits);
    let mut states: Vec<SoftmaxState> = (0..tile.len()).map(|_| SoftmaxState::new(d)).collect();
    let mut scratch = TileScratch::default();
    for block in 0..=last_pos / b {
        let (keys, values, start) = kv.block(block);
        tile.absorb_block(&mut states, keys, values, start, scale, &mut scratch);
    }
    let mut out = Vec::with_capacity(queries.len());
    for state in states {
        out.extend(combine_partials(&[state.finish()])?);
    }
    Ok(out)
}
