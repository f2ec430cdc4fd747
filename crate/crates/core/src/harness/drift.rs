use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::spec::RunSpec;
use super::sweep_pool;
use crate::decoder::{decode, DecodeMode, MAX_ORACLE_LEN};
use crate::error::{ResaError, Result};

pub const SWEEP_RECTIFY_FREQS: [usize; 4] = [16, 32, 64, 128];
pub const SWEEP_SPARSITIES: [f64; 3] = [0.9, 0.95, 0.98];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub step: usize,
    pub mode: DecodeMode,
    pub max_abs_drift: f64,
    pub mean_l2_drift: f64,
    pub rectify_freq: usize,
    pub sparsity: f64,
    pub after_rectification: bool,
}

fn drift_rows(spec: &RunSpec, prompt: &[u32], mode: DecodeMode) -> Result<Vec<DriftRow>> {
    let model = spec.load_model()?;
    let cfg = spec.sparsity_config();
    let out = decode(&model, prompt, &cfg, spec.max_steps, mode, &spec.probe_schedule())?;
    Ok(out
        .drift
        .unwrap_or_default()
        .entries
        .into_iter()
        .map(|e| DriftRow {
            step: e.step,
            mode,
            max_abs_drift: e.max_abs,
            mean_l2_drift: e.mean_l2,
            rectify_freq: cfg.rectify_freq,
            sparsity: cfg.sparsity,
            after_rectification: e.after_rectification,
        })
        .collect())
}

/// Key-cache drift against the dense oracle for sparse-only and rectified
/// decoding on the same seed. A dense spec mode adds a dense reference run.
/// With `spec.sweep`, repeats over the frequency × sparsity grid.
pub fn cmd_drift(spec: &RunSpec) -> Result<Vec<DriftRow>> {
    spec.validate()?;
    let prompt = spec.load_prompt()?;
    if prompt.len() + spec.max_steps > MAX_ORACLE_LEN {
        return Err(ResaError::OracleTooLong {
            len: prompt.len() + spec.max_steps,
            limit: MAX_ORACLE_LEN,
        });
    }
    let mut runs: Vec<(RunSpec, DecodeMode)> = Vec::new();
    let grid: Vec<(usize, f64)> = if spec.sweep {
        SWEEP_SPARSITIES
            .iter()
            .flat_map(|&s| SWEEP_RECTIFY_FREQS.iter().map(move |&f| (f, s)))
            .collect()
    } else {
        vec![(spec.rectify_freq, spec.sparsity)]
    };
    if spec.mode == DecodeMode::Dense {
        runs.push((spec.clone(), DecodeMode::Dense));
    }
    for (i, &(f, s)) in grid.iter().enumerate() {
        let point = RunSpec {
            rectify_freq: f,
            sparsity: s,
            ..spec.clone()
        };
        // Sparse-only decoding ignores f; run it once per sparsity.
        if i == 0 || grid[i - 1].1 != s {
            runs.push((point.clone(), DecodeMode::SparseOnly));
        }
        runs.push((point, DecodeMode::Resa));
    }
    let results: Vec<Result<Vec<DriftRow>>> = sweep_pool().install(|| {
        runs.par_iter()
            .map(|(point, mode)| drift_rows(point, &prompt, *mode))
            .collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}
