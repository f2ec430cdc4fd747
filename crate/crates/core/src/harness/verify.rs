use serde::{Deserialize, Serialize};

use super::spec::{seeded_prompt, RunSpec};
use crate::attention::{
    combine_partials, dense_attention, group_block_sparse_attention, partial_attention, BlockMask, PagedKv,
    PartialAttnResult, SoftmaxState,
};
use crate::block_index::{
    build_descriptors, score_block, select_blocks, update_descriptor, BlockDescriptor, SparsityConfig,
};
use crate::decoder::{decode, divergent_positions, DecodeMode, DecodeState, DriftOracle, ProbeSchedule};
use crate::error::Result;
use crate::kv_store::MemCounters;
use crate::model::{apply_rope, rms_norm, Model};
use crate::rng::SplitMixStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub observed: f64,
    pub allowed: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, observed: f64, allowed: f64) {
        self.checks.push(CheckResult {
            name: name.into(),
            passed: observed <= allowed,
            observed,
            allowed,
        });
    }
}

/// Deterministic uniform samples for the suite.
struct Sampler {
    stream: SplitMixStream,
    next: u64,
}

impl Sampler {
    fn new(seed: u64, name: &str) -> Self {
        Self {
            stream: SplitMixStream::new(seed, name),
            next: 0,
        }
    }

    fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        self.next += 1;
        lo + (hi - lo) * self.stream.unit(self.next)
    }

    fn vec(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }

    fn below(&mut self, n: usize) -> usize {
        self.next += 1;
        (self.stream.at(self.next) % n as u64) as usize
    }
}

/// Max-abs difference scaled by the reference's largest magnitude.
pub(crate) fn rel_err(got: &[f32], want: &[f32]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, &x| m.max(f64::from(x).abs())).max(1e-30);
    got.iter()
        .zip(want)
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
        .fold(0.0, f64::max)
        / scale
}

fn max_abs(got: &[f32], want: &[f32]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
        .fold(0.0, f64::max)
}

fn attention_checks(report: &mut VerifyReport, seed: u64) -> Result<()> {
    let mut rng = Sampler::new(seed, "verify.attention");

    let mut worst_sum = 0.0f64;
    for _ in 0..20 {
        let n = 1 + rng.below(40);
        let keys = rng.vec(n * n, -3.0, 3.0);
        let mut onehot = vec![0.0f32; n * n];
        for t in 0..n {
            onehot[t * n + t] = 1.0;
        }
        let q = rng.vec(n, -3.0, 3.0);
        let w = dense_attention(&q, &keys, &onehot, 1.0)?;
        worst_sum = worst_sum.max((w.iter().map(|&x| f64::from(x)).sum::<f64>() - 1.0).abs());
    }
    report.push("softmax weights sum to one", worst_sum, 1e-6);

    let mut worst_full = 0.0f64;
    for &g in &[1usize, 2, 4] {
        for _ in 0..10 {
            let d = [8, 16, 64][rng.below(3)];
            let n = 1 + rng.below(100);
            let b = 1 + rng.below(16);
            let keys = rng.vec(n * d, -1.0, 1.0);
            let values = rng.vec(n * d, -1.0, 1.0);
            let queries = rng.vec(g * d, -1.0, 1.0);
            let scale = 1.0 / (d as f32).sqrt();
            let kv = PagedKv::new(&keys, &values, d, b)?;
            let out = group_block_sparse_attention(&queries, kv, &BlockMask::full(kv.num_blocks()), n - 1, scale)?;
            for (h, q) in queries.chunks_exact(d).enumerate() {
                let oracle = dense_attention(q, &keys, &values, scale)?;
                worst_full = worst_full.max(rel_err(&out[h * d..(h + 1) * d], &oracle));
            }
        }
    }
    report.push("full-mask block-sparse attention equals dense", worst_full, 1e-5);

    let (d, b, blocks) = (16usize, 4usize, 32usize);
    let keys = rng.vec(blocks * b * d, -2.0, 2.0);
    let values = rng.vec(blocks * b * d, -1.0, 1.0);
    let kv = PagedKv::new(&keys, &values, d, b)?;
    let q = rng.vec(d, -2.0, 2.0);
    let selection = BlockMask::new((0..blocks).filter(|i| i % 3 != 1).collect(), blocks)?;
    let last = kv.len() - 1;
    let mono = group_block_sparse_attention(&q, kv, &selection, last, 0.25)?;
    let mut worst_split = 0.0f64;
    let mut worst_order = 0.0f64;
    for splits in 1..=8 {
        let mut parts: Vec<PartialAttnResult> = selection
            .split(splits)
            .iter()
            .map(|m| partial_attention(&q, kv, m, last, 0.25))
            .collect();
        let combined = combine_partials(&parts)?;
        worst_split = worst_split.max(rel_err(&combined, &mono));
        parts.reverse();
        worst_order = worst_order.max(max_abs(&combine_partials(&parts)?, &combined));
    }
    report.push("split/combine equals monolithic", worst_split, 1e-5);
    report.push("combine is order independent", worst_order, 1e-6);

    let mut worst_shift = 0.0f64;
    for _ in 0..10 {
        let n = 1 + rng.below(50);
        // Scores on a 2^-10 grid and integer shifts keep `s + shift` exact,
        // so any difference comes from the softmax itself.
        let scores: Vec<f32> = rng
            .vec(n, -10.0, 10.0)
            .iter()
            .map(|s| (s * 1024.0).round() / 1024.0)
            .collect();
        let values = rng.vec(n * 8, -1.0, 1.0);
        let shift = rng.uniform(-50.0, 50.0).round();
        let run = |s: &[f32]| {
            let mut st = SoftmaxState::new(8);
            st.absorb_scores(s, &values, true);
            combine_partials(&[st.finish()])
        };
        let shifted: Vec<f32> = scores.iter().map(|s| s + shift).collect();
        worst_shift = worst_shift.max(max_abs(&run(&shifted)?, &run(&scores)?));
    }
    report.push("softmax is shift invariant", worst_shift, 1e-6);
    Ok(())
}

fn block_index_checks(report: &mut VerifyReport, seed: u64) {
    let mut rng = Sampler::new(seed, "verify.block_index");
    let mut violations = 0usize;
    for _ in 0..10_000 {
        let d = 1 + rng.below(16);
        let lo = rng.vec(d, -2.0, 1.0);
        let hi: Vec<f32> = lo.iter().map(|&l| l + rng.uniform(0.0, 2.0)).collect();
        let desc = BlockDescriptor {
            kmin: lo.clone(),
            kmax: hi.clone(),
            fill: 1,
        };
        let k: Vec<f32> = lo
            .iter()
            .zip(&hi)
            .map(|(&l, &h)| (l + (h - l) * rng.uniform(0.0, 1.0)).clamp(l, h))
            .collect();
        let q = rng.vec(d, -3.0, 3.0);
        let qk: f32 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
        if qk > score_block(&q, &desc) + 1e-6 {
            violations += 1;
        }
    }
    report.push("block score bounds every in-box key", violations as f64, 0.0);

    let mut mismatches = 0usize;
    for _ in 0..200 {
        let (d, b) = (1 + rng.below(8), 1 + rng.below(16));
        let n = 1 + rng.below(64);
        let keys = rng.vec(n * d, -5.0, 5.0);
        let mut descs: Vec<BlockDescriptor> = Vec::new();
        for (t, k) in keys.chunks_exact(d).enumerate() {
            if t % b == 0 {
                descs.push(BlockDescriptor::from_key(k));
            } else if update_descriptor(descs.last_mut().expect("open block"), k, b).is_err() {
                mismatches += 1;
            }
        }
        if descs != build_descriptors(&keys, d, b) {
            mismatches += 1;
        }
    }
    report.push("incremental descriptors equal batch build", mismatches as f64, 0.0);

    let mut contract = 0usize;
    let mut scaling = 0usize;
    let mut monotone = 0usize;
    for _ in 0..300 {
        let m = 1 + rng.below(200);
        let n_local = 1 + rng.below(3);
        let cfg = SparsityConfig {
            block_size: 16,
            sparsity: f64::from(rng.uniform(0.0, 0.99)),
            n_min: n_local + rng.below(8),
            n_local,
            rectify_freq: 32,
            dense_layers: 0,
        };
        let descs: Vec<BlockDescriptor> = (0..m)
            .map(|_| {
                let lo = rng.vec(4, -1.0, 0.0);
                let hi: Vec<f32> = lo.iter().map(|&l| l + rng.uniform(0.0, 1.0)).collect();
                BlockDescriptor {
                    kmin: lo,
                    kmax: hi,
                    fill: 16,
                }
            })
            .collect();
        let q = rng.vec(4, -1.0, 1.0);
        let mask = select_blocks(&q, &descs, &cfg);
        let expected = m.min(cfg.n_min.max((m as f64 * cfg.active_ratio() - 1e-9).ceil() as usize));
        let recents_ok = (m.saturating_sub(n_local)..m).all(|i| mask.selected().contains(&i));
        if mask.len() != expected || !recents_ok || mask.selected().windows(2).any(|w| w[0] >= w[1]) {
            contract += 1;
        }
        let scaled: Vec<f32> = q.iter().map(|x| x * 4.0).collect();
        if select_blocks(&scaled, &descs, &cfg) != mask {
            scaling += 1;
        }
        let denser = SparsityConfig {
            sparsity: cfg.sparsity * 0.5,
            ..cfg.clone()
        };
        let wider = select_blocks(&q, &descs, &denser);
        if !mask.selected().iter().all(|i| wider.selected().contains(i)) {
            monotone += 1;
        }
    }
    report.push("selection size, recency and ordering contract", contract as f64, 0.0);
    report.push("selection invariant to positive query scaling", scaling as f64, 0.0);
    report.push("selection monotone in active ratio", monotone as f64, 0.0);
}

fn model_checks(report: &mut VerifyReport, model: &Model, seed: u64) -> Result<()> {
    let mut rng = Sampler::new(seed, "verify.model");
    let d = model.config().head_dim;
    let mut worst_rope = 0.0f64;
    for pos in [0usize, 1, 7, 100, 4095, 65_535] {
        let x = rng.vec(d, -2.0, 2.0);
        let mut y = x.clone();
        apply_rope(&mut y, pos, model.config().rope_theta);
        let norm = |v: &[f32]| v.iter().map(|&a| f64::from(a) * f64::from(a)).sum::<f64>().sqrt();
        worst_rope = worst_rope.max((norm(&y) - norm(&x)).abs() / norm(&x));
    }
    report.push("rotary embedding preserves norm", worst_rope, 1e-5);

    let mut worst_rms = 0.0f64;
    let dm = model.config().d_model;
    for _ in 0..20 {
        let x = rng.vec(dm, -2.0, 2.0);
        let y = rms_norm(&x, &vec![1.0; dm]);
        let rms = (y.iter().map(|&a| f64::from(a) * f64::from(a)).sum::<f64>() / dm as f64).sqrt();
        worst_rms = worst_rms.max((rms - 1.0).abs());
    }
    report.push("rmsnorm output has unit rms", worst_rms, 1e-5);

    let tokens = seeded_prompt(seed, 16);
    let base = model.dense_logits_all(&tokens, 4)?;
    let mut leak = 0.0f64;
    for t in [3usize, 9, 15] {
        let mut perturbed = tokens.clone();
        perturbed[t] = (perturbed[t] + 1) % 256;
        let logits = model.dense_logits_all(&perturbed, 4)?;
        for p in 0..t {
            leak = leak.max(max_abs(&logits[p], &base[p]));
        }
    }
    report.push("dense forward is causal", leak, 0.0);
    Ok(())
}

fn decode_checks(report: &mut VerifyReport, model: &Model, spec: &RunSpec) -> Result<()> {
    let cfg = spec.sparsity_config();
    let prompt = seeded_prompt(spec.seed, spec.prefix_len.clamp(1, 1024));
    let steps = spec.max_steps.clamp(1, 128);

    let full = SparsityConfig {
        sparsity: 0.0,
        ..cfg.clone()
    };
    let dense = decode(model, &prompt, &cfg, steps, DecodeMode::Dense, &ProbeSchedule::Never)?;
    let resa_full = decode(model, &prompt, &full, steps, DecodeMode::Resa, &ProbeSchedule::Never)?;
    let mismatched = dense
        .tokens
        .iter()
        .zip(&resa_full.tokens)
        .filter(|(a, b)| a != b)
        .count()
        + dense.tokens.len().abs_diff(resa_full.tokens.len());
    report.push("full-density decode matches dense greedy", mismatched as f64, 0.0);

    let mut state = DecodeState::start(model, &prompt, &cfg, DecodeMode::Resa)?;
    let mut oracle = DriftOracle::new(model, cfg.block_size);
    let mut worst_rectified = 0.0f64;
    let mut widest_window = 0usize;
    let mut incoherent = 0usize;
    while state.step < steps && !state.finished {
        let rectified = state.step(model)?;
        oracle.extend_to(model, &state.realized_tokens())?;
        if rectified {
            let (max_abs, _) = crate::decoder::key_drift(&state.cache, oracle.cache());
            worst_rectified = worst_rectified.max(max_abs);
        }
        widest_window = widest_window.max(divergent_positions(&state.cache, oracle.cache(), 1e-4).len());
        if !state.cache.lanes_consistent() || !state.cache.descriptors_coherent() {
            incoherent += 1;
        }
    }
    report.push("rectified cache matches dense oracle", worst_rectified, 1e-4);
    report.push(
        "divergent positions stay inside f + b - 1",
        widest_window as f64,
        (cfg.rectify_freq + cfg.block_size - 1) as f64,
    );
    report.push("lanes consistent and descriptors coherent", incoherent as f64, 0.0);

    let sparse = decode(
        model,
        &prompt,
        &cfg,
        steps,
        DecodeMode::SparseOnly,
        &ProbeSchedule::Never,
    )?;
    let expected = expected_sparse_counters(model, &cfg, prompt.len(), sparse.steps);
    let off = [
        sparse.counters.selection_reads.abs_diff(expected.selection_reads),
        sparse.counters.dense_reads.abs_diff(expected.dense_reads),
        sparse.counters.rectification_reads,
    ]
    .iter()
    .sum::<u64>();
    report.push("selection and dense read accounting is exact", off as f64, 0.0);
    Ok(())
}

/// Selection and dense-baseline reads implied by the accounting formulas.
fn expected_sparse_counters(model: &Model, cfg: &SparsityConfig, prompt_len: usize, steps: usize) -> MemCounters {
    let c = model.config();
    let sparse_lanes = (c.n_layers - cfg.dense_layers.min(c.n_layers)) * c.n_kv_heads;
    let all_lanes = c.n_layers * c.n_kv_heads;
    let mut counters = MemCounters::default();
    for step in 1..=steps {
        let len = prompt_len + step;
        for _ in 0..sparse_lanes {
            counters.charge_selection(len.div_ceil(cfg.block_size), c.head_dim);
        }
        for _ in 0..all_lanes {
            counters.charge_dense_baseline(len, c.head_dim);
        }
    }
    counters
}

/// Runs the invariant suite against the spec's model and sparsity settings.
pub fn cmd_verify(spec: &RunSpec) -> Result<VerifyReport> {
    spec.validate()?;
    let model = spec.load_model()?;
    let mut report = VerifyReport::default();
    attention_checks(&mut report, spec.seed)?;
    block_index_checks(&mut report, spec.seed);
    model_checks(&mut report, &model, spec.seed)?;
    decode_checks(&mut report, &model, spec)?;
    Ok(report)
}
