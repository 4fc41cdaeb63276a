//! Simulated multi-worker cluster executing the three aggregation
//! strategies with deterministic rank-order scheduling and
//! ledger-instrumented collectives.
//!
//! Workers are logical: one process iterates them in rank order, so runs are
//! bit-reproducible and the grouped/conventional equivalence tests can use
//! tight tolerances.

use crate::costmodel::CostLedger;
use crate::datapipe::RawPairs;
use crate::error::{Result, SimError};
use crate::losses::{itc_loss, EmbeddingBatch};
use crate::numerics::{matmul, Matrix};
use crate::trainer::DualEncoder;

/// World of logical workers partitioned into equal contiguous groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    world_size: usize,
    group_size: usize,
    groups: Vec<Vec<usize>>,
}

impl Topology {
    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }
}

/// Partition `0..world_size` into contiguous rank ranges of `group_size`.
pub fn make_topology(world_size: usize, group_size: usize) -> Result<Topology> {
    if world_size == 0 || group_size == 0 {
        return Err(SimError::InvalidArgument {
            arg: "topology",
            reason: format!(
                "world_size and group_size must be >= 1, got ({world_size}, {group_size})"
            ),
        });
    }
    if world_size % group_size != 0 {
        return Err(SimError::IndivisibleWorld {
            world_size,
            group_size,
        });
    }
    let groups = (0..world_size / group_size)
        .map(|g| (g * group_size..(g + 1) * group_size).collect())
        .collect();
    Ok(Topology {
        world_size,
        group_size,
        groups,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    ConventionalItc,
    GroupedItc,
    GbaItc,
}

impl StrategyKind {
    pub fn label(&self) -> &'static str {
        match self {
            StrategyKind::ConventionalItc => "conventional",
            StrategyKind::GroupedItc => "grouped",
            StrategyKind::GbaItc => "gba",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub batch_per_worker: usize,
    pub group_size: usize,
    pub accumulation_steps: usize,
}

impl StrategyConfig {
    pub fn validate(&self, world_size: usize) -> Result<()> {
        if self.batch_per_worker == 0 || self.group_size == 0 || self.accumulation_steps == 0 {
            return Err(SimError::InvalidArgument {
                arg: "strategy",
                reason: "batch, group size and accumulation steps must be >= 1".to_string(),
            });
        }
        if world_size == 0 || world_size % self.group_size != 0 {
            return Err(SimError::IndivisibleWorld {
                world_size,
                group_size: self.group_size,
            });
        }
        match self.kind {
            StrategyKind::ConventionalItc => {
                if self.group_size != world_size {
                    return Err(SimError::InvalidArgument {
                        arg: "strategy",
                        reason: format!(
                            "conventional ITC requires group_size = world_size ({} != {world_size})",
                            self.group_size
                        ),
                    });
                }
                if self.accumulation_steps != 1 {
                    return Err(SimError::InvalidArgument {
                        arg: "strategy",
                        reason: "conventional ITC uses a single accumulation step".to_string(),
                    });
                }
            }
            StrategyKind::GroupedItc => {
                if self.accumulation_steps != 1 {
                    return Err(SimError::InvalidArgument {
                        arg: "strategy",
                        reason: "grouped ITC uses a single accumulation step".to_string(),
                    });
                }
            }
            StrategyKind::GbaItc => {}
        }
        Ok(())
    }
}

/// Parameter gradients for one worker's copy of the dual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub w_img: Matrix,
    pub w_txt: Matrix,
    pub log_tau: f64,
}

impl ParamGrads {
    pub fn zeros_like(enc: &DualEncoder) -> ParamGrads {
        ParamGrads {
            w_img: Matrix::zeros(enc.w_img.rows(), enc.w_img.cols()),
            w_txt: Matrix::zeros(enc.w_txt.rows(), enc.w_txt.cols()),
            log_tau: 0.0,
        }
    }

    fn flatten(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.w_img.data().len() + self.w_txt.data().len() + 1);
        data.extend_from_slice(self.w_img.data());
        data.extend_from_slice(self.w_txt.data());
        data.push(self.log_tau);
        Matrix::new(1, data.len(), data).expect("flat gradient")
    }

    fn unflatten(flat: &Matrix, like: &ParamGrads) -> ParamGrads {
        let data = flat.data();
        let ni = like.w_img.data().len();
        let nt = like.w_txt.data().len();
        ParamGrads {
            w_img: Matrix::new(like.w_img.rows(), like.w_img.cols(), data[..ni].to_vec()).unwrap(),
            w_txt: Matrix::new(
                like.w_txt.rows(),
                like.w_txt.cols(),
                data[ni..ni + nt].to_vec(),
            )
            .unwrap(),
            log_tau: data[ni + nt],
        }
    }
}

/// One optimizer step's outcome across the whole world.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// Mean over all per-group per-micro-step losses.
    pub loss_value: f64,
    /// Per-worker gradients after the global all-reduce; identical entries.
    pub accumulated_grads: Vec<ParamGrads>,
    pub ledger: CostLedger,
}

/// All-gather within one group: every member ends holding the rank-ordered
/// concatenation of the members' payloads. Bytes are ledgered as a naive
/// full exchange, m*(m-1) payloads.
pub fn all_gather(
    topology: &Topology,
    group_index: usize,
    payload_per_member: &[Matrix],
    ledger: &mut CostLedger,
) -> Result<Matrix> {
    let group = topology
        .groups
        .get(group_index)
        .ok_or_else(|| SimError::InvalidArgument {
            arg: "group_index",
            reason: format!("group {group_index} out of range"),
        })?;
    if payload_per_member.len() != group.len() {
        return Err(SimError::InvalidArgument {
            arg: "payload_per_member",
            reason: format!(
                "expected {} payloads for group of {}, got {}",
                group.len(),
                group.len(),
                payload_per_member.len()
            ),
        });
    }
    let first = &payload_per_member[0];
    for p in payload_per_member {
        if p.rows() != first.rows() || p.cols() != first.cols() {
            return Err(SimError::DimensionMismatch {
                left_rows: first.rows(),
                left_cols: first.cols(),
                right_rows: p.rows(),
                right_cols: p.cols(),
            });
        }
    }
    ledger.record_all_gather(group.len(), first.byte_len());
    let refs: Vec<&Matrix> = payload_per_member.iter().collect();
    Matrix::vstack(&refs)
}

/// Global all-reduce: every worker ends holding the element-wise sum of all
/// inputs, reduced in rank order.
pub fn all_reduce_sum(
    topology: &Topology,
    per_worker_grads: &[Matrix],
    ledger: &mut CostLedger,
) -> Result<Matrix> {
    if per_worker_grads.len() != topology.world_size {
        return Err(SimError::InvalidArgument {
            arg: "per_worker_grads",
            reason: format!(
                "expected {} gradient payloads, got {}",
                topology.world_size,
                per_worker_grads.len()
            ),
        });
    }
    let mut sum = per_worker_grads[0].clone();
    for g in &per_worker_grads[1..] {
        sum.add_assign(g)?;
    }
    ledger.record_all_reduce(topology.world_size, per_worker_grads[0].byte_len());
    Ok(sum)
}

/// Execute one optimizer step of the configured strategy.
///
/// `micro_batches[worker][s]` supplies micro-batch `s` for `worker`, each of
/// `batch_per_worker` pairs. Per micro-step and group: members project their
/// pairs, all-gather both modality embeddings within the group in one
/// collective, compute the contrastive loss over the gathered batch, and
/// accumulate parameter gradients. One global all-reduce then synchronizes;
/// the result is the exact gradient of the reported mean loss.
pub fn run_step(
    strategy: &StrategyConfig,
    topology: &Topology,
    encoder: &DualEncoder,
    micro_batches: &[Vec<RawPairs>],
) -> Result<StepResult> {
    strategy.validate(topology.world_size)?;
    if strategy.group_size != topology.group_size {
        return Err(SimError::InvalidArgument {
            arg: "strategy",
            reason: format!(
                "strategy group size {} does not match topology group size {}",
                strategy.group_size, topology.group_size
            ),
        });
    }
    if micro_batches.len() != topology.world_size {
        return Err(SimError::InvalidArgument {
            arg: "micro_batches",
            reason: format!(
                "expected batches for {} workers, got {}",
                topology.world_size,
                micro_batches.len()
            ),
        });
    }
    let b = strategy.batch_per_worker;
    let k = strategy.accumulation_steps;
    for (w, batches) in micro_batches.iter().enumerate() {
        if batches.len() != k {
            return Err(SimError::InvalidArgument {
                arg: "micro_batches",
                reason: format!(
                    "worker {w} has {} micro-batches, expected {k}",
                    batches.len()
                ),
            });
        }
        for (s, batch) in batches.iter().enumerate() {
            if batch.len() != b || batch.img.cols() != encoder.w_img.rows() {
                return Err(SimError::InvalidArgument {
                    arg: "micro_batches",
                    reason: format!(
                        "worker {w} micro-batch {s} is {}x{}, expected {b}x{}",
                        batch.len(),
                        batch.img.cols(),
                        encoder.w_img.rows()
                    ),
                });
            }
        }
    }

    let mut ledger = CostLedger::default();
    let mut grads: Vec<ParamGrads> = (0..topology.world_size)
        .map(|_| ParamGrads::zeros_like(encoder))
        .collect();
    let num_groups = topology.num_groups();
    let scale = 1.0 / (k as f64 * num_groups as f64);
    let mut loss_sum = 0.0;

    for s in 0..k {
        for (g_idx, group) in topology.groups.iter().enumerate() {
            let m = group.len();
            // raw projections per member, both modalities stacked into one
            // payload so the gather is a single collective per group
            let mut z_img = Vec::with_capacity(m);
            let mut z_txt = Vec::with_capacity(m);
            let mut payloads = Vec::with_capacity(m);
            for &rank in group {
                let batch = &micro_batches[rank][s];
                let zi = matmul(&batch.img, &encoder.w_img)?;
                let zt = matmul(&batch.txt, &encoder.w_txt)?;
                payloads.push(Matrix::vstack(&[&zi, &zt])?);
                z_img.push(zi);
                z_txt.push(zt);
            }
            let gathered = all_gather(topology, g_idx, &payloads, &mut ledger)?;
            ledger.note_resident_rows(2 * (m * b) as u64);

            // split the gathered payload back into modality stacks
            let mut v_rows = Vec::with_capacity(m);
            let mut t_rows = Vec::with_capacity(m);
            for j in 0..m {
                v_rows.push(gathered.slice_rows(2 * b * j, b));
                t_rows.push(gathered.slice_rows(2 * b * j + b, b));
            }
            let v_refs: Vec<&Matrix> = v_rows.iter().collect();
            let t_refs: Vec<&Matrix> = t_rows.iter().collect();
            let batch = EmbeddingBatch::new(Matrix::vstack(&v_refs)?, Matrix::vstack(&t_refs)?)?;

            let res = itc_loss(&batch, encoder.temp, true)?;
            loss_sum += res.value;

            // every member backpropagates through its own slice of the
            // gathered batch; summed over the group this is the full group
            // gradient
            for (j, &rank) in group.iter().enumerate() {
                let gv = res.grad_v.slice_rows(j * b, b);
                let gt = res.grad_t.slice_rows(j * b, b);
                let raw = &micro_batches[rank][s];
                let gw_img = matmul(&raw.img.transpose(), &gv)?.scale(scale);
                let gw_txt = matmul(&raw.txt.transpose(), &gt)?.scale(scale);
                grads[rank].w_img.add_assign(&gw_img)?;
                grads[rank].w_txt.add_assign(&gw_txt)?;
                grads[rank].log_tau += res.grad_log_tau / m as f64 * scale;
            }
        }
    }

    // one global all-reduce over the flattened gradients
    let flats: Vec<Matrix> = grads.iter().map(ParamGrads::flatten).collect();
    let summed = all_reduce_sum(topology, &flats, &mut ledger)?;
    let synced = ParamGrads::unflatten(&summed, &grads[0]);
    let accumulated_grads = vec![synced; topology.world_size];

    Ok(StepResult {
        loss_value: loss_sum * scale,
        accumulated_grads,
        ledger,
    })
}
