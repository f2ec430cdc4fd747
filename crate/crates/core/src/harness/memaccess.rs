use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::spec::{run_id, ResultRow, RunSpec};
use crate::decoder::{key_drift, DecodeMode, DecodeState, DriftOracle, MAX_ORACLE_LEN};
use crate::error::Result;
use crate::kv_store::{charge_and_report, predicted_ratio, MemReport};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemAccessResult {
    pub row: ResultRow,
    pub report: MemReport,
}

fn mode_prediction(spec: &RunSpec, mode: DecodeMode) -> (Option<usize>, f64) {
    let cfg = spec.sparsity_config();
    match mode {
        DecodeMode::Dense => (None, 1.0),
        DecodeMode::SparseOnly => (None, predicted_ratio(cfg.block_size, cfg.active_ratio(), None)),
        DecodeMode::Resa => (
            Some(cfg.rectify_freq),
            predicted_ratio(cfg.block_size, cfg.active_ratio(), Some(cfg.rectify_freq)),
        ),
    }
}

/// Prefills `prompt`, decodes up to `max_steps` tokens under `mode` and
/// summarizes the run. The final key drift is filled in when the run fits
/// the dense oracle's length limit.
pub fn run_row(
    spec: &RunSpec,
    model: &Model,
    prompt: &[u32],
    mode: DecodeMode,
) -> Result<(ResultRow, MemReport, DecodeState)> {
    let cfg = spec.sparsity_config();
    let mut state = DecodeState::start(model, prompt, &cfg, mode)?;
    let started = Instant::now();
    while state.step < spec.max_steps && !state.finished {
        state.step(model)?;
    }
    let elapsed = started.elapsed().as_secs_f64();
    let (freq, predicted) = mode_prediction(spec, mode);
    let mut report = charge_and_report(&state.counters, &cfg, freq, &state.cache);
    report.predicted_ratio = predicted;
    let realized = state.realized_tokens();
    let final_drift = if realized.len() <= MAX_ORACLE_LEN {
        let oracle = DriftOracle::from_scratch(model, &realized, cfg.block_size)?;
        Some(key_drift(&state.cache, oracle.cache()).0)
    } else {
        None
    };
    let row = ResultRow {
        run_id: run_id(spec, mode, prompt.len()),
        mode,
        block_size: cfg.block_size,
        sparsity: cfg.sparsity,
        rectify_freq: cfg.rectify_freq,
        max_steps: spec.max_steps,
        prefix_len: prompt.len(),
        tokens_per_sec: if elapsed > 0.0 {
            state.step as f64 / elapsed
        } else {
            0.0
        },
        mem_ratio_measured: report.measured_ratio,
        mem_ratio_predicted: predicted,
        final_drift_max_abs: final_drift,
        tokens_emitted: state.generated.len(),
    };
    Ok((row, report, state))
}

/// Measured against predicted element-read ratio with a per-category breakdown.
pub fn cmd_memaccess(spec: &RunSpec) -> Result<MemAccessResult> {
    spec.validate()?;
    let model = spec.load_model()?;
    let prompt = spec.load_prompt()?;
    let (row, report, _) = run_row(spec, &model, &prompt, spec.mode)?;
    Ok(MemAccessResult { row, report })
}

/// Decodes and returns the emitted tokens with the run summary.
pub fn cmd_generate(spec: &RunSpec) -> Result<(Vec<u32>, ResultRow)> {
    spec.validate()?;
    let model = spec.load_model()?;
    let prompt = spec.load_prompt()?;
    let (row, _, state) = run_row(spec, &model, &prompt, spec.mode)?;
    Ok((state.generated, row))
}
