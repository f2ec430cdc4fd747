//! Block-paged KV cache with per-block key descriptors and element-read
//! accounting.
//!
//! Each (layer, kv-head) lane stores keys and values token-major, so every
//! block of `block_size` tokens is one contiguous slice. Descriptors are kept
//! in lockstep with the key blocks: appends widen the newest descriptor and
//! rectification rebuilds every block that overlaps the rewritten window.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::attention::PagedKv;
use crate::block_index::{build_descriptors, update_descriptor, BlockDescriptor, SparsityConfig};
use crate::error::{ResaError, Result};

pub const SNAPSHOT_MAGIC: &[u8; 7] = b"RESAKV1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lane {
    keys: Vec<f32>,
    values: Vec<f32>,
    descriptors: Vec<BlockDescriptor>,
}

impl Lane {
    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn descriptors(&self) -> &[BlockDescriptor] {
        &self.descriptors
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PagedKvCache {
    n_layers: usize,
    n_kv_heads: usize,
    head_dim: usize,
    block_size: usize,
    lanes: Vec<Lane>,
}

impl PagedKvCache {
    pub fn new(n_layers: usize, n_kv_heads: usize, head_dim: usize, block_size: usize) -> Self {
        assert!(
            head_dim > 0 && block_size > 0,
            "head_dim and block_size must be positive"
        );
        Self {
            n_layers,
            n_kv_heads,
            head_dim,
            block_size,
            lanes: vec![Lane::default(); n_layers * n_kv_heads],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    fn lane_index(&self, layer: usize, kv_head: usize) -> usize {
        assert!(layer < self.n_layers && kv_head < self.n_kv_heads, "lane out of range");
        layer * self.n_kv_heads + kv_head
    }

    pub fn lane(&self, layer: usize, kv_head: usize) -> &Lane {
        &self.lanes[self.lane_index(layer, kv_head)]
    }

    pub fn lanes(&self) -> impl Iterator<Item = &Lane> {
        self.lanes.iter()
    }

    pub fn lane_len(&self, layer: usize, kv_head: usize) -> usize {
        self.lane(layer, kv_head).keys.len() / self.head_dim
    }

    /// Tokens cached. Lanes may transiently disagree while a token is being
    /// written layer by layer; this reports the first lane.
    pub fn len(&self) -> usize {
        self.lanes.first().map_or(0, |l| l.keys.len() / self.head_dim)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_blocks(&self) -> usize {
        self.len().div_ceil(self.block_size)
    }

    pub fn lanes_consistent(&self) -> bool {
        let len = self.len();
        self.lanes.iter().all(|l| l.keys.len() / self.head_dim == len)
    }

    pub fn view(&self, layer: usize, kv_head: usize) -> PagedKv<'_> {
        let lane = self.lane(layer, kv_head);
        PagedKv::new(&lane.keys, &lane.values, self.head_dim, self.block_size)
            .expect("lane buffers are consistent by construction")
    }

    fn check_dim(&self, buf: &[f32], tokens: usize) -> Result<()> {
        if buf.len() != tokens * self.head_dim {
            return Err(ResaError::DimensionMismatch {
                expected: tokens * self.head_dim,
                got: buf.len(),
            });
        }
        Ok(())
    }

    pub fn append(&mut self, layer: usize, kv_head: usize, key: &[f32], value: &[f32]) -> Result<()> {
        self.check_dim(key, 1)?;
        self.check_dim(value, 1)?;
        let (b, d) = (self.block_size, self.head_dim);
        let idx = self.lane_index(layer, kv_head);
        let lane = &mut self.lanes[idx];
        let len = lane.keys.len() / d;
        lane.keys.extend_from_slice(key);
        lane.values.extend_from_slice(value);
        if len.is_multiple_of(b) {
            lane.descriptors.push(BlockDescriptor::from_key(key));
        } else {
            let last = lane.descriptors.last_mut().expect("open block has a descriptor");
            update_descriptor(last, key, b)?;
        }
        Ok(())
    }

    /// Overwrites positions `[start_pos, len)` of one lane and rebuilds the
    /// descriptor of every block overlapping that window.
    pub fn rectify_tail(
        &mut self,
        layer: usize,
        kv_head: usize,
        start_pos: usize,
        new_keys: &[f32],
        new_values: &[f32],
    ) -> Result<()> {
        let (b, d) = (self.block_size, self.head_dim);
        let window = new_keys.len() / d;
        self.check_dim(new_keys, window)?;
        self.check_dim(new_values, window)?;
        let idx = self.lane_index(layer, kv_head);
        let lane = &mut self.lanes[idx];
        let len = lane.keys.len() / d;
        if start_pos + window != len {
            return Err(ResaError::RectifyMisaligned {
                start: start_pos,
                window,
                len,
            });
        }
        if window == 0 {
            return Ok(());
        }
        lane.keys[start_pos * d..].copy_from_slice(new_keys);
        lane.values[start_pos * d..].copy_from_slice(new_values);
        for block in start_pos / b..len.div_ceil(b) {
            let end = ((block + 1) * b).min(len);
            lane.descriptors[block] = BlockDescriptor::from_keys(&lane.keys[block * b * d..end * d], d);
        }
        Ok(())
    }

    /// Whether every stored descriptor equals a from-scratch rebuild.
    pub fn descriptors_coherent(&self) -> bool {
        self.lanes
            .iter()
            .all(|lane| lane.descriptors == build_descriptors(&lane.keys, self.head_dim, self.block_size))
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        for field in [
            self.n_layers,
            self.n_kv_heads,
            self.block_size,
            self.len(),
            self.head_dim,
        ] {
            w.write_all(&(field as u32).to_le_bytes())?;
        }
        for lane in &self.lanes {
            for &x in lane.keys.iter().chain(&lane.values) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(|_| ResaError::BadSnapshotHeader)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(ResaError::BadSnapshotHeader);
        }
        let mut header = [0usize; 5];
        for field in &mut header {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf).map_err(|_| ResaError::BadSnapshotHeader)?;
            *field = u32::from_le_bytes(buf) as usize;
        }
        let [n_layers, n_kv_heads, block_size, len, head_dim] = header;
        if head_dim == 0 || block_size == 0 {
            return Err(ResaError::BadSnapshotHeader);
        }
        let mut cache = Self::new(n_layers, n_kv_heads, head_dim, block_size);
        let count = len * head_dim;
        for lane in &mut cache.lanes {
            lane.keys = read_f32s(&mut r, count)?;
            lane.values = read_f32s(&mut r, count)?;
            lane.descriptors = build_descriptors(&lane.keys, head_dim, block_size);
        }
        Ok(cache)
    }
}

fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Abstract element reads: one element is one fp32 of K, V or a descriptor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemCounters {
    pub selection_reads: u64,
    pub attention_reads: u64,
    pub rectification_reads: u64,
    /// What a dense decoder would have read over the same steps.
    pub dense_reads: u64,
    pub steps: u64,
}

impl MemCounters {
    /// Block selection in one lane: kmin and kmax of every block.
    pub fn charge_selection(&mut self, num_blocks: usize, head_dim: usize) {
        self.selection_reads += (num_blocks * 2 * head_dim) as u64;
    }

    /// Attention in one lane over `tokens` cached positions (K and V).
    pub fn charge_attention(&mut self, tokens: usize, head_dim: usize) {
        self.attention_reads += (tokens * 2 * head_dim) as u64;
    }

    /// One rectification event in one lane: the whole cache, K and V, once.
    pub fn charge_rectification(&mut self, cache_len: usize, head_dim: usize) {
        self.rectification_reads += (cache_len * 2 * head_dim) as u64;
    }

    /// Dense baseline for one lane at one decode step.
    pub fn charge_dense_baseline(&mut self, cache_len: usize, head_dim: usize) {
        self.dense_reads += (cache_len * 2 * head_dim) as u64;
    }

    pub fn total_reads(&self) -> u64 {
        self.selection_reads + self.attention_reads + self.rectification_reads
    }
}

/// `1/b + rho + 1/f`; `None` for `rectify_freq` drops the last term.
pub fn predicted_ratio(block_size: usize, active_ratio: f64, rectify_freq: Option<usize>) -> f64 {
    1.0 / block_size as f64 + active_ratio + rectify_freq.map_or(0.0, |f| 1.0 / f as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemReport {
    pub steps: u64,
    pub cache_len: usize,
    pub selection_per_step: f64,
    pub attention_per_step: f64,
    pub rectification_per_step: f64,
    pub dense_per_step: f64,
    /// Category reads divided by dense reads.
    pub selection_ratio: f64,
    pub attention_ratio: f64,
    pub rectification_ratio: f64,
    pub measured_ratio: f64,
    pub predicted_ratio: f64,
    /// Rectification reads as a fraction of all reads.
    pub rectification_share: f64,
    pub predicted_rectification_share: f64,
}

/// Summarizes a decode run's counters against the closed-form prediction.
/// `rectify_freq` is `None` when rectification was disabled for the run.
pub fn charge_and_report(
    counters: &MemCounters,
    cfg: &SparsityConfig,
    rectify_freq: Option<usize>,
    cache: &PagedKvCache,
) -> MemReport {
    let steps = counters.steps.max(1) as f64;
    let dense = counters.dense_reads.max(1) as f64;
    let ratio = |x: u64| x as f64 / dense;
    let predicted = predicted_ratio(cfg.block_size, cfg.active_ratio(), rectify_freq);
    let total = counters.total_reads().max(1) as f64;
    MemReport {
        steps: counters.steps,
        cache_len: cache.len(),
        selection_per_step: counters.selection_reads as f64 / steps,
        attention_per_step: counters.attention_reads as f64 / steps,
        rectification_per_step: counters.rectification_reads as f64 / steps,
        dense_per_step: counters.dense_reads as f64 / steps,
        selection_ratio: ratio(counters.selection_reads),
        attention_ratio: ratio(counters.attention_reads),
        rectification_ratio: ratio(counters.rectification_reads),
        measured_ratio: ratio(counters.total_reads()),
        predicted_ratio: predicted,
        rectification_share: counters.rectification_reads as f64 / total,
        predicted_rectification_share: rectify_freq.map_or(0.0, |f| 1.0 / f as f64) / predicted,
    }
}
