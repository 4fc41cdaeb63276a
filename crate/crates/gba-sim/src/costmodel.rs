//! Communication volume, peak gathered-activation memory, and simulated
//! step-time accounting for the three aggregation strategies.
//!
//! Collectives are costed as a naive full exchange: a group of m workers
//! moves m*(m-1) payloads per collective. The formula is isolated in
//! [`full_exchange_bytes`] so a ring or tree variant can replace it without
//! touching the callers.

use crate::cluster::StrategyConfig;
use crate::error::{Result, SimError};

/// Per-step accounting of collective traffic and resident activation rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostLedger {
    pub bytes_all_gather: u64,
    pub bytes_all_reduce: u64,
    /// Collective events (one per group per call).
    pub all_gather_events: u64,
    /// Per-member participations summed over events.
    pub all_gather_participations: u64,
    pub all_reduce_events: u64,
    /// Max embedding rows held by any worker at any instant.
    pub peak_resident_rows: u64,
    pub simulated_time: f64,
}

impl CostLedger {
    pub fn record_all_gather(&mut self, members: usize, payload_bytes: usize) {
        self.bytes_all_gather += full_exchange_bytes(members, payload_bytes);
        self.all_gather_events += 1;
        self.all_gather_participations += members as u64;
    }

    pub fn record_all_reduce(&mut self, members: usize, payload_bytes: usize) {
        self.bytes_all_reduce += full_exchange_bytes(members, payload_bytes);
        self.all_reduce_events += 1;
    }

    pub fn note_resident_rows(&mut self, rows: u64) {
        self.peak_resident_rows = self.peak_resident_rows.max(rows);
    }
}

/// Bytes moved by a naive full exchange among `members` workers, each
/// contributing one payload.
pub fn full_exchange_bytes(members: usize, payload_bytes: usize) -> u64 {
    (members as u64) * (members as u64 - 1) * payload_bytes as u64
}

/// Counters sum, peaks take the max. Associative and commutative.
pub fn ledger_merge(a: &CostLedger, b: &CostLedger) -> CostLedger {
    CostLedger {
        bytes_all_gather: a.bytes_all_gather + b.bytes_all_gather,
        bytes_all_reduce: a.bytes_all_reduce + b.bytes_all_reduce,
        all_gather_events: a.all_gather_events + b.all_gather_events,
        all_gather_participations: a.all_gather_participations + b.all_gather_participations,
        all_reduce_events: a.all_reduce_events + b.all_reduce_events,
        peak_resident_rows: a.peak_resident_rows.max(b.peak_resident_rows),
        simulated_time: a.simulated_time + b.simulated_time,
    }
}

/// Calibration knobs standing in for real interconnect and accelerator rates.
#[derive(Debug, Clone, Copy)]
pub struct HardwareModel {
    /// Bytes per second per worker for collective traffic.
    pub bandwidth: f64,
    /// Fixed seconds per collective.
    pub latency: f64,
    /// Pairs encoded per second per worker.
    pub compute_rate: f64,
}

impl HardwareModel {
    pub fn new(bandwidth: f64, latency: f64, compute_rate: f64) -> Result<Self> {
        if bandwidth <= 0.0 || latency <= 0.0 || compute_rate <= 0.0 {
            return Err(SimError::InvalidArgument {
                arg: "hardware model",
                reason: format!(
                    "bandwidth, latency and compute_rate must be positive, got ({bandwidth}, {latency}, {compute_rate})"
                ),
            });
        }
        Ok(Self {
            bandwidth,
            latency,
            compute_rate,
        })
    }
}

impl Default for HardwareModel {
    fn default() -> Self {
        Self {
            bandwidth: 1e9,
            latency: 1e-5,
            compute_rate: 1e6,
        }
    }
}

/// Embedding rows (image + text) gathered on each worker for one loss
/// computation: 2 * group_size * batch_per_worker.
pub fn peak_gathered_rows(strategy: &StrategyConfig) -> u64 {
    2 * strategy.group_size as u64 * strategy.batch_per_worker as u64
}

/// Simulated seconds for one optimizer step on one worker.
///
/// T = k * (compute per micro-batch)
///   + (all-gather bytes per worker) / bandwidth
///   + latency * (collectives per step)
///   + (all-reduce bytes per worker) / bandwidth
///
/// Per-worker gather traffic per micro-step is (m-1) payloads of
/// 2 * B * d * 8 bytes (both modalities). The gradient payload is modeled as
/// two d x d projection matrices.
pub fn step_time(
    strategy: &StrategyConfig,
    world_size: usize,
    hw: &HardwareModel,
    embed_dim: usize,
) -> f64 {
    let k = strategy.accumulation_steps as f64;
    let b = strategy.batch_per_worker as f64;
    let m = strategy.group_size as f64;
    let d = embed_dim as f64;
    let real = 8.0;

    let compute = k * b / hw.compute_rate;
    let gather_bytes_per_worker = k * (m - 1.0) * b * d * real * 2.0;
    let grad_bytes = 2.0 * d * d * real;
    let reduce_bytes_per_worker = (world_size as f64 - 1.0) * grad_bytes;
    let collectives = k + 1.0;

    compute
        + gather_bytes_per_worker / hw.bandwidth
        + hw.latency * collectives
        + reduce_bytes_per_worker / hw.bandwidth
}

/// Per-sample time: step time divided by samples a worker contributes per
/// optimizer step.
pub fn per_sample_time(
    strategy: &StrategyConfig,
    world_size: usize,
    hw: &HardwareModel,
    embed_dim: usize,
) -> f64 {
    let samples = (strategy.accumulation_steps * strategy.batch_per_worker) as f64;
    step_time(strategy, world_size, hw, embed_dim) / samples
}

/// Grid-search fit of the hardware knobs so the model's pairwise throughput
/// ratios best match a pair of target ratios. Returns the fitted model and
/// the residuals (model ratio minus target) for reporting.
pub fn calibrate(
    strategies: &[StrategyConfig; 3],
    world_size: usize,
    embed_dim: usize,
    target_ratios: (f64, f64),
) -> (HardwareModel, (f64, f64)) {
    let mut best = HardwareModel::default();
    let mut best_err = f64::INFINITY;
    for &bw_exp in &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0] {
        for &lat_exp in &[-6.0, -5.0, -4.0, -3.0] {
            for &rate_exp in &[3.0, 4.0, 5.0, 6.0] {
                let hw = HardwareModel {
                    bandwidth: 10f64.powf(bw_exp),
                    latency: 10f64.powf(lat_exp),
                    compute_rate: 10f64.powf(rate_exp),
                };
                let (r1, r2) = throughput_ratios(strategies, world_size, &hw, embed_dim);
                let err = (r1 - target_ratios.0).powi(2) + (r2 - target_ratios.1).powi(2);
                if err < best_err {
                    best_err = err;
                    best = hw;
                }
            }
        }
    }
    let (r1, r2) = throughput_ratios(strategies, world_size, &best, embed_dim);
    (best, (r1 - target_ratios.0, r2 - target_ratios.1))
}

/// (grouped vs conventional, gba vs conventional) throughput ratios, where
/// throughput is inverse per-sample time.
pub fn throughput_ratios(
    strategies: &[StrategyConfig; 3],
    world_size: usize,
    hw: &HardwareModel,
    embed_dim: usize,
) -> (f64, f64) {
    let t: Vec<f64> = strategies
        .iter()
        .map(|s| per_sample_time(s, world_size, hw, embed_dim))
        .collect();
    (t[0] / t[1], t[0] / t[2])
}
