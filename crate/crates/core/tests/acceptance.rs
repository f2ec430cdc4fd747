//! Acceptance suite. Runs every criterion in order, prints one
//! `[PASS]`/`[FAIL]` line each and exits non-zero if any failed.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resa_core::attention::dot;
use resa_core::decoder::DriftOracle;
use resa_core::harness::seeded_prompt;
use resa_core::{
    build_descriptors, charge_and_report, combine_partials, decode, dense_attention, group_block_sparse_attention,
    partial_attention, score_block, select_blocks, BlockDescriptor, BlockMask, DecodeMode, DecodeState, Model,
    ModelConfig, PagedKv, PagedKvCache, ProbeSchedule, SparsityConfig,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, &x| m.max(f64::from(x).abs())).max(1e-12);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Two-pass softmax attention in f64, independent of the crate's kernels.
fn naive_attention(q: &[f32], k: &[f32], v: &[f32], scale: f32) -> Vec<f32> {
    let d = q.len();
    let scores: Vec<f64> = k
        .chunks(d)
        .map(|kr| {
            kr.iter()
                .zip(q)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum::<f64>()
                * f64::from(scale)
        })
        .collect();
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = w.iter().sum();
    (0..d)
        .map(|j| {
            (w.iter()
                .zip(v.chunks(d))
                .map(|(wi, vr)| wi * f64::from(vr[j]))
                .sum::<f64>()
                / z) as f32
        })
        .collect()
}

/// Max-abs difference over every cached key and value element.
fn kv_max_abs(cache: &PagedKvCache, oracle: &PagedKvCache) -> f64 {
    let diff = |a: &[f32], b: &[f32]| {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
            .fold(0.0, f64::max)
    };
    cache
        .lanes()
        .zip(oracle.lanes())
        .map(|(a, b)| diff(a.keys(), b.keys()).max(diff(a.values(), b.values())))
        .fold(0.0, f64::max)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-2.0f32..2.0)).collect()
}

fn reference_model() -> Model {
    Model::from_config(&ModelConfig::reference()).unwrap()
}

fn cfg(sparsity: f64, f: usize) -> SparsityConfig {
    SparsityConfig {
        sparsity,
        rectify_freq: f,
        ..SparsityConfig::default()
    }
}

fn ac1_oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let g = [1, 2, 4][i % 3];
        let d = [8, 16, 64][(i / 3) % 3];
        let len = rng.gen_range(1..300);
        let b = [1, 4, 16, 32][rng.gen_range(0..4)];
        let q = normals(&mut rng, g * d);
        let k = normals(&mut rng, len * d);
        let v = normals(&mut rng, len * d);
        let kv = PagedKv::new(&k, &v, d, b).unwrap();
        let scale = 1.0 / (d as f32).sqrt();
        let out = group_block_sparse_attention(&q, kv, &BlockMask::full(kv.num_blocks()), len - 1, scale).unwrap();
        for h in 0..g {
            let head = &q[h * d..(h + 1) * d];
            let naive = naive_attention(head, &k, &v, scale);
            worst = worst.max(rel_err(&out[h * d..(h + 1) * d], &naive));
            worst = worst.max(rel_err(&dense_attention(head, &k, &v, scale).unwrap(), &naive));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-5 && secs < 10.0,
        format!("200 instances vs naive f64 softmax, max rel err {worst:.2e} (<= 1e-5), {secs:.2}s (< 10s)"),
    )
}

fn ac2_split_combine() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (d, b, blocks) = (16, 16, 64);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let len = blocks * b - rng.gen_range(0..b);
        let k = normals(&mut rng, len * d);
        let v = normals(&mut rng, len * d);
        let q = normals(&mut rng, d);
        let kv = PagedKv::new(&k, &v, d, b).unwrap();
        let mut chosen: Vec<usize> = (0..blocks).collect();
        while chosen.len() > 32 {
            chosen.swap_remove(rng.gen_range(0..chosen.len()));
        }
        let mask = BlockMask::new(chosen, blocks).unwrap();
        let whole = group_block_sparse_attention(&q, kv, &mask, len - 1, 0.25).unwrap();
        for s in 1..=8 {
            let parts: Vec<_> = mask
                .split(s)
                .iter()
                .map(|m| partial_attention(&q, kv, m, len - 1, 0.25))
                .collect();
            worst = worst.max(rel_err(&combine_partials(&parts).unwrap(), &whole));
        }
    }
    outcome(
        worst <= 1e-5,
        format!("S = 1..8 over 32 of 64 blocks, max rel err {worst:.2e} (<= 1e-5)"),
    )
}

fn ac3_full_ratio_identity(m: &Model) -> Outcome {
    let prompt = seeded_prompt(42, 512);
    let dense = decode(m, &prompt, &cfg(0.0, 32), 255, DecodeMode::Dense, &ProbeSchedule::Never).unwrap();
    let mut ok = dense.tokens.len() == 256;
    let mut detail = format!("dense emitted {} tokens", dense.tokens.len());
    for f in [1, 16, 32] {
        let resa = decode(m, &prompt, &cfg(0.0, f), 255, DecodeMode::Resa, &ProbeSchedule::Never).unwrap();
        let same = resa.tokens == dense.tokens;
        ok &= same;
        detail += &format!(", f={f} {}", if same { "identical" } else { "differs" });
    }
    outcome(ok, detail)
}

fn ac4_rectification_correctness(m: &Model) -> Outcome {
    let started = Instant::now();
    let prompt = seeded_prompt(42, 512);
    let mut state = DecodeState::start(m, &prompt, &cfg(0.9, 32), DecodeMode::Resa).unwrap();
    let mut oracle = DriftOracle::new(m, 16);
    let mut worst = 0.0f64;
    let mut events = 0;
    while state.step < 256 && !state.finished {
        if state.step(m).unwrap() {
            oracle.extend_to(m, &state.realized_tokens()).unwrap();
            worst = worst.max(kv_max_abs(&state.cache, oracle.cache()));
            events += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        events >= 8 && worst <= 1e-4 && secs < 60.0,
        format!("{events} rectifications (>= 8), max-abs K/V vs oracle {worst:.2e} (<= 1e-4), {secs:.2}s (< 60s)"),
    )
}

fn ac5_drift_trend(m: &Model) -> Outcome {
    let prompt = seeded_prompt(42, 512);
    let sc = cfg(0.9, 32);
    let sparse = decode(
        m,
        &prompt,
        &sc,
        256,
        DecodeMode::SparseOnly,
        &ProbeSchedule::AtSteps(vec![32, 256]),
    )
    .unwrap();
    let resa = decode(m, &prompt, &sc, 256, DecodeMode::Resa, &ProbeSchedule::Default).unwrap();
    let s = sparse.drift.unwrap();
    let (at32, at256) = (s.at_step(32).unwrap().max_abs, s.at_step(256).unwrap().max_abs);
    let post: Vec<f64> = resa
        .drift
        .unwrap()
        .entries
        .iter()
        .filter(|e| e.after_rectification)
        .map(|e| e.max_abs)
        .collect();
    let resa_worst = post.iter().copied().fold(0.0, f64::max);
    outcome(
        at256 > at32 && !post.is_empty() && resa_worst <= 1e-4,
        format!(
            "sparse-only drift {at32:.3e} at 32 -> {at256:.3e} at 256; resa max over {} post-rectification probes {resa_worst:.2e} (<= 1e-4)",
            post.len()
        ),
    )
}

/// Runs `steps` resa steps from `base` and reports (measured, predicted,
/// rectification ratio, |share - predicted share|).
fn eq6_run(m: &Model, base: &DecodeState, steps: usize) -> (f64, f64, f64, f64) {
    let mut state = base.fork(DecodeMode::Resa);
    state.finished = false;
    for _ in 0..steps {
        state.step(m).unwrap();
        state.finished = false;
    }
    let r = charge_and_report(&state.counters, &state.cfg, Some(state.cfg.rectify_freq), &state.cache);
    (
        r.measured_ratio,
        r.predicted_ratio,
        r.rectification_ratio,
        (r.rectification_share - r.predicted_rectification_share).abs(),
    )
}

fn ac6_eq6(m: &Model, long: &DecodeState) -> Outcome {
    let sc = cfg(0.9, 32);
    let short = DecodeState::start(m, &seeded_prompt(42, 1024), &sc, DecodeMode::Dense).unwrap();
    let (_, _, _, short_gap) = eq6_run(m, &short, 1024);
    let (measured, predicted, rect, long_gap) = eq6_run(m, long, 1024);
    let within = (measured - predicted).abs() / predicted <= 0.10;
    let rect_ok = (rect - 1.0 / 32.0).abs() / (1.0 / 32.0) <= 0.10;
    let converging = long_gap <= short_gap;
    outcome(
        within && rect_ok && converging,
        format!(
            "measured {measured:.5} vs predicted {predicted:.5} ({:+.1}%, within 10%); rectification {rect:.5} of dense vs 1/f {:.5}; share gap {short_gap:.4} at 1024 -> {long_gap:.4} at 8192",
            (measured / predicted - 1.0) * 100.0,
            1.0 / 32.0
        ),
    )
}

fn ac7_score_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for _ in 0..100_000 {
        let d = rng.gen_range(1..=64);
        let mut lo = Vec::with_capacity(d);
        let mut hi = Vec::with_capacity(d);
        let mut k = Vec::with_capacity(d);
        for _ in 0..d {
            let a = rng.gen_range(-4.0f32..4.0);
            let b = rng.gen_range(-4.0f32..4.0);
            let (l, h) = (a.min(b), a.max(b));
            lo.push(l);
            hi.push(h);
            k.push((l + rng.gen::<f32>() * (h - l)).clamp(l, h));
        }
        let q = normals(&mut rng, d);
        let desc = BlockDescriptor {
            kmin: lo,
            kmax: hi,
            fill: 1,
        };
        let slack = f64::from(score_block(&q, &desc)) + 1e-6 - f64::from(dot(&q, &k));
        tightest = tightest.min(slack);
        if slack < 0.0 {
            violations += 1;
        }
    }
    outcome(
        violations == 0,
        format!("1e5 triples, {violations} violations, smallest margin {tightest:.2e}"),
    )
}

fn ac8_incremental_descriptors() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let d = rng.gen_range(1..=16);
        let b = rng.gen_range(1..=32);
        let len = rng.gen_range(1..=160);
        let mut cache = PagedKvCache::new(1, 1, d, b);
        let mut all = Vec::with_capacity(len * d);
        for _ in 0..len {
            let k = normals(&mut rng, d);
            cache.append(0, 0, &k, &k).unwrap();
            all.extend_from_slice(&k);
        }
        if cache.lane(0, 0).descriptors() != build_descriptors(&all, d, b).as_slice() {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("1e4 append sequences, {mismatches} differ from batch rebuild"),
    )
}

fn ac9_selection_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = Vec::new();
    for case in 0..5_000 {
        let d = 8;
        let m = rng.gen_range(1..200usize);
        let pct = rng.gen_range(0..100usize);
        let n_local = rng.gen_range(1..4);
        let sc = SparsityConfig {
            sparsity: pct as f64 / 100.0,
            n_local,
            n_min: n_local + rng.gen_range(0..20),
            ..SparsityConfig::default()
        };
        // Few distinct descriptors so that score ties are common.
        let palette: Vec<BlockDescriptor> = (0..rng.gen_range(1..6))
            .map(|_| BlockDescriptor::from_key(&normals(&mut rng, d)))
            .collect();
        let descs: Vec<BlockDescriptor> = (0..m)
            .map(|_| palette[rng.gen_range(0..palette.len())].clone())
            .collect();
        let q = normals(&mut rng, d);
        let got = select_blocks(&q, &descs, &sc);

        // ceil(M * rho) in exact integer arithmetic, rho = (100 - pct) / 100.
        let dynamic = (m * (100 - pct)).div_ceil(100);
        let n = m.min(sc.n_min.max(dynamic));
        let forced_from = m - n_local.min(n);
        let mut ranked: Vec<usize> = (0..forced_from).collect();
        ranked.sort_by(|&a, &b| {
            score_block(&q, &descs[b])
                .total_cmp(&score_block(&q, &descs[a]))
                .then(a.cmp(&b))
        });
        let mut expected: Vec<usize> = ranked[..n - (m - forced_from)].to_vec();
        expected.extend(forced_from..m);
        expected.sort_unstable();
        if got.selected() != expected.as_slice() {
            failures.push(case);
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "5000 randomized selections (tie-heavy), {} mismatches vs brute force",
            failures.len()
        ),
    )
}

fn ac10_speed(m: &Model, long: &DecodeState) -> Outcome {
    let mut dense = long.fork(DecodeMode::Dense);
    let mut resa = long.fork(DecodeMode::Resa);
    let (mut t_dense, mut t_resa) = (0.0, 0.0);
    let steps = 128;
    // Interleaved so that machine noise hits both modes alike.
    for _ in 0..steps {
        for (state, total) in [(&mut dense, &mut t_dense), (&mut resa, &mut t_resa)] {
            state.finished = false;
            let started = Instant::now();
            state.step(m).unwrap();
            *total += started.elapsed().as_secs_f64();
        }
    }
    let (md, mr) = (t_dense / steps as f64 * 1e3, t_resa / steps as f64 * 1e3);
    outcome(
        mr < md,
        format!(
            "prefix 8192: resa {mr:.3} ms/step vs dense {md:.3} ms/step ({:.2}x)",
            md / mr
        ),
    )
}

fn main() -> ExitCode {
    let m = reference_model();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("AC1 oracle equivalence", ac1_oracle_equivalence()),
        ("AC2 split/combine fidelity", ac2_split_combine()),
        ("AC3 full-ratio decode identity", ac3_full_ratio_identity(&m)),
        ("AC4 rectification correctness", ac4_rectification_correctness(&m)),
        ("AC5 drift trend", ac5_drift_trend(&m)),
    ];
    let long = DecodeState::start(&m, &seeded_prompt(42, 8192), &cfg(0.9, 32), DecodeMode::Dense).unwrap();
    results.push(("AC6 memory-access ratio", ac6_eq6(&m, &long)));
    results.push(("AC7 score upper bound", ac7_score_bound()));
    results.push(("AC8 incremental descriptors", ac8_incremental_descriptors()));
    results.push(("AC9 top-n selection contract", ac9_selection_contract()));
    results.push(("AC10 speed direction", ac10_speed(&m, &long)));

    let mut all = true;
    for (name, o) in &results {
        println!("[{}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        all &= o.passed;
    }
    println!(
        "acceptance: {}/{} passed",
        results.iter().filter(|(_, o)| o.passed).count(),
        results.len()
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
