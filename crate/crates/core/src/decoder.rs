//! Prefill, block-sparse decode and periodic dense rectification.
//!
//! Token bookkeeping: `generated[0]` comes from the prefill logits. Step `i`
//! (1-based) feeds `generated[i - 1]`, appending its K/V at position
//! `prompt_len + i - 1`, and emits `generated[i]`. In [`DecodeMode::Resa`],
//! whenever `i % f == 0` the window `generated[i - f..i]` is re-encoded
//! densely over positions `prompt_len + i - f .. prompt_len + i`.
//!
//! Drift is measured against a teacher-forced dense encoding of the realized
//! tokens; the oracle cache is grown incrementally, which is bitwise the same
//! as re-encoding it from scratch because dense encoding is causal.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::block_index::SparsityConfig;
use crate::error::{ResaError, Result};
use crate::kv_store::{MemCounters, PagedKvCache};
use crate::model::{argmax, Model, StepAttention, EOS};

/// Largest prompt + generation length the drift oracle accepts.
pub const MAX_ORACLE_LEN: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Dense attention every step.
    Dense,
    /// Block-sparse attention, never rectified.
    SparseOnly,
    /// Block-sparse attention, rectified every `f` steps.
    Resa,
}

impl DecodeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecodeMode::Dense => "dense",
            DecodeMode::SparseOnly => "sparse_only",
            DecodeMode::Resa => "resa",
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecodeMode {
    type Err = ResaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(DecodeMode::Dense),
            "sparse" | "sparse_only" => Ok(DecodeMode::SparseOnly),
            "resa" => Ok(DecodeMode::Resa),
            other => Err(ResaError::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeSchedule {
    #[default]
    Never,
    /// Powers of two, plus immediately after every rectification.
    Default,
    AtSteps(Vec<usize>),
}

impl ProbeSchedule {
    fn wants(&self, step: usize, rectified: bool) -> bool {
        match self {
            ProbeSchedule::Never => false,
            ProbeSchedule::Default => rectified || step.is_power_of_two(),
            ProbeSchedule::AtSteps(steps) => steps.contains(&step),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftEntry {
    pub step: usize,
    /// Max-abs difference over every cached key element.
    pub max_abs: f64,
    /// Mean over (lane, position) of the key-vector L2 error.
    pub mean_l2: f64,
    pub after_rectification: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftTrace {
    pub entries: Vec<DriftEntry>,
}

impl DriftTrace {
    pub fn at_step(&self, step: usize) -> Option<&DriftEntry> {
        self.entries.iter().find(|e| e.step == step)
    }
}

/// Dense teacher-forced cache over the realized tokens.
#[derive(Clone, Debug)]
pub struct DriftOracle {
    cache: PagedKvCache,
}

impl DriftOracle {
    pub fn new(model: &Model, block_size: usize) -> Self {
        Self {
            cache: model.new_cache(block_size),
        }
    }

    /// Dense encoding of `tokens` from scratch.
    pub fn from_scratch(model: &Model, tokens: &[u32], block_size: usize) -> Result<Self> {
        let mut oracle = Self::new(model, block_size);
        oracle.extend_to(model, tokens)?;
        Ok(oracle)
    }

    /// Grows the oracle so it covers every token of `tokens`.
    pub fn extend_to(&mut self, model: &Model, tokens: &[u32]) -> Result<()> {
        if tokens.len() > MAX_ORACLE_LEN {
            return Err(ResaError::OracleTooLong {
                len: tokens.len(),
                limit: MAX_ORACLE_LEN,
            });
        }
        let have = self.cache.len();
        if tokens.len() > have {
            model.prefill(&tokens[have..], &mut self.cache)?;
        }
        Ok(())
    }

    pub fn cache(&self) -> &PagedKvCache {
        &self.cache
    }
}

/// Key-cache error of `cache` against `oracle` over `cache`'s positions:
/// `(max_abs, mean_l2)`.
pub fn key_drift(cache: &PagedKvCache, oracle: &PagedKvCache) -> (f64, f64) {
    let d = cache.head_dim();
    let mut max_abs = 0.0f64;
    let mut l2_sum = 0.0f64;
    let mut rows = 0usize;
    for (lane, truth) in cache.lanes().zip(oracle.lanes()) {
        for (k, t) in lane.keys().chunks_exact(d).zip(truth.keys().chunks_exact(d)) {
            let mut sq = 0.0f64;
            for (&a, &b) in k.iter().zip(t) {
                let diff = f64::from(a) - f64::from(b);
                max_abs = max_abs.max(diff.abs());
                sq += diff * diff;
            }
            l2_sum += sq.sqrt();
            rows += 1;
        }
    }
    (max_abs, if rows == 0 { 0.0 } else { l2_sum / rows as f64 })
}

/// Cache positions where any key or value element of any lane differs from
/// the oracle by more than `tol`.
pub fn divergent_positions(cache: &PagedKvCache, oracle: &PagedKvCache, tol: f64) -> Vec<usize> {
    let d = cache.head_dim();
    let mut bad = vec![false; cache.len()];
    for (lane, truth) in cache.lanes().zip(oracle.lanes()) {
        let pairs = [(lane.keys(), truth.keys()), (lane.values(), truth.values())];
        for (mine, theirs) in pairs {
            for (pos, (a, b)) in mine.chunks_exact(d).zip(theirs.chunks_exact(d)).enumerate() {
                if a.iter()
                    .zip(b)
                    .any(|(&x, &y)| (f64::from(x) - f64::from(y)).abs() > tol)
                {
                    bad[pos] = true;
                }
            }
        }
    }
    bad.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

#[derive(Clone, Debug)]
pub struct DecodeState {
    pub mode: DecodeMode,
    pub cfg: SparsityConfig,
    pub prompt: Vec<u32>,
    pub generated: Vec<u32>,
    pub step: usize,
    pub cache: PagedKvCache,
    pub counters: MemCounters,
    /// First cache position not yet covered by prefill or rectification.
    pub last_rectified: usize,
    /// Steps after which a rectification ran.
    pub rectified_at: Vec<usize>,
    pub finished: bool,
}

impl DecodeState {
    /// Dense prefill of `prompt`; the first token is taken from its logits.
    pub fn start(model: &Model, prompt: &[u32], cfg: &SparsityConfig, mode: DecodeMode) -> Result<Self> {
        cfg.validate()?;
        let mut cache = model.new_cache(cfg.block_size);
        let logits = model.prefill(prompt, &mut cache)?;
        let first = argmax(&logits);
        Ok(Self {
            mode,
            cfg: cfg.clone(),
            prompt: prompt.to_vec(),
            generated: vec![first],
            step: 0,
            cache,
            counters: MemCounters::default(),
            last_rectified: prompt.len(),
            rectified_at: Vec::new(),
            finished: first == EOS,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt.len()
    }

    /// Prompt followed by every generated token whose K/V is cached.
    pub fn realized_tokens(&self) -> Vec<u32> {
        let mut tokens = self.prompt.clone();
        tokens.extend_from_slice(&self.generated[..self.step]);
        tokens
    }

    /// Same prefilled state decoded under another mode, counters reset.
    pub fn fork(&self, mode: DecodeMode) -> Self {
        let mut forked = self.clone();
        forked.mode = mode;
        forked.counters = MemCounters::default();
        forked
    }

    /// One decode step plus, in resa mode, the rectification it triggers.
    /// Returns whether a rectification ran.
    pub fn step(&mut self, model: &Model) -> Result<bool> {
        if self.finished {
            return Ok(false);
        }
        let input = self.generated[self.step];
        let attention = match self.mode {
            DecodeMode::Dense => StepAttention::Dense,
            DecodeMode::SparseOnly | DecodeMode::Resa => StepAttention::Sparse(&self.cfg),
        };
        let logits = model.decode_step(input, &mut self.cache, attention, &mut self.counters)?;
        self.step += 1;
        let next = argmax(&logits);
        self.generated.push(next);
        self.finished = next == EOS;

        let f = self.cfg.rectify_freq;
        if self.mode == DecodeMode::Resa && self.step.is_multiple_of(f) {
            let window = &self.generated[self.step - f..self.step];
            let start = self.prompt.len() + self.step - f;
            model.dense_forward_batch(window, &mut self.cache, start, &mut self.counters)?;
            self.last_rectified = self.prompt.len() + self.step;
            self.rectified_at.push(self.step);
            return Ok(true);
        }
        Ok(false)
    }
}

/// Drift of the live cache against the oracle, grown to the realized tokens.
pub fn drift_probe(
    model: &Model,
    state: &DecodeState,
    oracle: &mut DriftOracle,
    after_rectification: bool,
) -> Result<DriftEntry> {
    oracle.extend_to(model, &state.realized_tokens())?;
    let (max_abs, mean_l2) = key_drift(&state.cache, oracle.cache());
    Ok(DriftEntry {
        step: state.step,
        max_abs,
        mean_l2,
        after_rectification,
    })
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// Every emitted token, starting with the one predicted by prefill.
    pub tokens: Vec<u32>,
    pub counters: MemCounters,
    pub drift: Option<DriftTrace>,
    pub rectified_at: Vec<usize>,
    pub cache: PagedKvCache,
    pub steps: usize,
}

/// Runs up to `max_steps` decode steps (stopping early on EOS).
pub fn decode(
    model: &Model,
    prompt: &[u32],
    cfg: &SparsityConfig,
    max_steps: usize,
    mode: DecodeMode,
    probes: &ProbeSchedule,
) -> Result<DecodeOutput> {
    if max_steps == 0 {
        return Err(ResaError::InvalidConfig("max steps must be at least 1".into()));
    }
    let probing = *probes != ProbeSchedule::Never;
    if probing && prompt.len() + max_steps > MAX_ORACLE_LEN {
        return Err(ResaError::OracleTooLong {
            len: prompt.len() + max_steps,
            limit: MAX_ORACLE_LEN,
        });
    }
    let mut state = DecodeState::start(model, prompt, cfg, mode)?;
    let mut oracle = probing.then(|| DriftOracle::new(model, cfg.block_size));
    let mut trace = DriftTrace::default();
    while state.step < max_steps && !state.finished {
        let rectified = state.step(model)?;
        if let Some(oracle) = oracle.as_mut() {
            if probes.wants(state.step, rectified) {
                trace.entries.push(drift_probe(model, &state, oracle, rectified)?);
            }
        }
    }
    Ok(DecodeOutput {
        tokens: state.generated,
        counters: state.counters,
        drift: probing.then_some(trace),
        rectified_at: state.rectified_at,
        cache: state.cache,
        steps: state.step,
    })
}
