//! Wall-clock latency measurement.
//!
//! One pass = encode a fixed source once + a fixed number of greedy decoder
//! steps (EOS does not cut a pass short, so every pass does identical
//! work). Warmup passes run first and are discarded. The reported figure is
//! a truncated mean: sort the samples, drop `floor(n·trim)` from each end,
//! average the rest — robust to scheduler spikes without hiding a slow
//! tail entirely. Budgets are inclusive: a measurement exactly on the
//! budget satisfies it.
//!
//! Everything runs on the calling thread; the decode loop recomputes the
//! full prefix each step (no incremental cache), and the encoder's share of
//! each pass is captured inside the same pass.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::jsonl::JsonlWriter;
use crate::model::{self, ModelConfig};
use crate::space::Gene;
use crate::tensor::{ParamStore, Result, TensorError};

/// How exact a measurement claims to be.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LatencySpec {
    /// Timed passes (after warmup).
    pub passes: usize,
    /// Untimed passes run first and discarded.
    pub warmup: usize,
    /// Fraction trimmed from EACH end of the sorted samples.
    pub trim_frac: f64,
    pub src_len: usize,
    /// Greedy steps per pass.
    pub tgt_len: usize,
}

impl LatencySpec {
    /// The report-quality protocol: 300 timed passes.
    pub fn gold() -> LatencySpec {
        LatencySpec { passes: 300, warmup: 10, trim_frac: 0.10, src_len: 30, tgt_len: 30 }
    }

    /// The search-time protocol: 100 timed passes, same shape otherwise.
    pub fn partially_gold() -> LatencySpec {
        LatencySpec { passes: 100, ..LatencySpec::gold() }
    }

    /// Tiny protocol for tests.
    pub fn quick(passes: usize, src_len: usize, tgt_len: usize) -> LatencySpec {
        LatencySpec { passes, warmup: 2, trim_frac: 0.10, src_len, tgt_len }
    }

    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 || self.src_len == 0 || self.tgt_len == 0 {
            return Err(TensorError::Invalid("latency spec needs passes and lengths".into()));
        }
        if !(0.0..0.5).contains(&self.trim_frac) {
            return Err(TensorError::Invalid("trim fraction must be in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Mean of `samples` after dropping `floor(n·trim_frac)` smallest and the
/// same number of largest values. Order of the input does not matter.
pub fn truncated_mean(samples: &[f64], trim_frac: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(TensorError::Invalid("truncated mean of no samples".into()));
    }
    if !(0.0..0.5).contains(&trim_frac) {
        return Err(TensorError::Invalid(format!(
            "trim fraction {trim_frac} must be in [0, 0.5)"
        )));
    }
    let n = samples.len();
    let k = (n as f64 * trim_frac).floor() as usize;
    if n - 2 * k == 0 {
        return Err(TensorError::Invalid(format!(
            "trimming {k} from each end of {n} samples leaves nothing"
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let kept = &sorted[k..n - k];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Inclusive budget check: a value exactly on the budget satisfies it.
pub fn satisfies(value_ms: f64, budget_ms: f64) -> bool {
    value_ms <= budget_ms
}

/// One gene's measurement under one spec.
#[derive(Clone, Debug, Serialize)]
pub struct LatencyReport {
    pub gene_hash: String,
    pub spec: LatencySpec,
    /// Per-pass wall time, milliseconds, in measurement order.
    pub total_ms: Vec<f64>,
    /// Encoder section of each pass, milliseconds.
    pub encoder_ms: Vec<f64>,
    pub truncated_mean_ms: f64,
    pub encoder_truncated_mean_ms: f64,
    /// 1 − encoder/total of the truncated means: how much of a pass the
    /// autoregressive decoder costs.
    pub decoder_share: f64,
    pub host: String,
    pub unix_time: u64,
}

/// First CPU model line from /proc/cpuinfo plus the logical core count.
pub fn host_descriptor() -> String {
    let cores = std::thread::available_parallelism().map(|c| c.get()).unwrap_or(0);
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    format!("{model} ({cores} cores)")
}

/// Measures one gene: `spec.warmup` discarded passes, then `spec.passes`
/// timed passes of encode-once + `tgt_len` greedy steps over a fixed
/// deterministic source.
pub fn measure(
    store: &ParamStore,
    gene: &Gene,
    cfg: &ModelConfig,
    spec: &LatencySpec,
) -> Result<LatencyReport> {
    spec.validate()?;
    let lo = crate::data::RESERVED;
    if cfg.vocab <= lo {
        return Err(TensorError::Invalid("vocab too small for a probe source".into()));
    }
    let src: Vec<usize> = (0..spec.src_len).map(|i| lo + (i % (cfg.vocab - lo))).collect();

    for _ in 0..spec.warmup {
        model::timed_decode_pass(store, gene, cfg, &src, spec.tgt_len)?;
    }
    let mut total_ms = Vec::with_capacity(spec.passes);
    let mut encoder_ms = Vec::with_capacity(spec.passes);
    for _ in 0..spec.passes {
        let pass = model::timed_decode_pass(store, gene, cfg, &src, spec.tgt_len)?;
        total_ms.push(pass.total_ns as f64 / 1e6);
        encoder_ms.push(pass.encoder_ns as f64 / 1e6);
    }
    let truncated_mean_ms = truncated_mean(&total_ms, spec.trim_frac)?;
    let encoder_truncated_mean_ms = truncated_mean(&encoder_ms, spec.trim_frac)?;
    Ok(LatencyReport {
        gene_hash: gene.hash_hex(),
        spec: *spec,
        total_ms,
        encoder_ms,
        truncated_mean_ms,
        encoder_truncated_mean_ms,
        decoder_share: 1.0 - encoder_truncated_mean_ms / truncated_mean_ms,
        host: host_descriptor(),
        unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    })
}

/// Appends the report as one JSONL line.
pub fn append_report(report: &LatencyReport, path: &Path) -> Result<()> {
    let mut w = JsonlWriter::append(path)?;
    w.write(report)?;
    w.flush()
}
