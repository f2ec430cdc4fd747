use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::spec::{seeded_prompt, RunSpec};
use crate::decoder::{DecodeMode, DecodeState};
use crate::error::{ResaError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub prefix: usize,
    pub mode: DecodeMode,
    pub mean_ms_per_step: f64,
    pub p50: f64,
    pub p95: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Per-step wall time of dense and rectified decoding after the same dense
/// prefill. A resa step's time includes any rectification it triggers.
pub fn cmd_bench(spec: &RunSpec) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    if spec.bench_steps == 0 {
        return Err(ResaError::InvalidConfig("bench_steps must be at least 1".into()));
    }
    let model = spec.load_model()?;
    let cfg = spec.sparsity_config();
    let mut rows = Vec::new();
    for &prefix in &spec.bench_prefixes {
        let prompt = seeded_prompt(spec.seed, prefix.max(1));
        let base = DecodeState::start(&model, &prompt, &cfg, DecodeMode::Dense)?;
        for mode in [DecodeMode::Dense, DecodeMode::Resa] {
            let mut state = base.fork(mode);
            // EOS is ignored so every mode times the same number of steps.
            state.finished = false;
            let mut times = Vec::with_capacity(spec.bench_steps);
            for _ in 0..spec.bench_steps {
                let started = Instant::now();
                state.step(&model)?;
                times.push(started.elapsed().as_secs_f64() * 1e3);
                state.finished = false;
            }
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            times.sort_by(f64::total_cmp);
            rows.push(BenchRow {
                prefix,
                mode,
                mean_ms_per_step: mean,
                p50: percentile(&times, 0.5),
                p95: percentile(&times, 0.95),
            });
        }
    }
    Ok(rows)
}
