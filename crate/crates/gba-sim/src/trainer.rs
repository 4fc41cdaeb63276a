//! Toy bilingual dual encoder trained under any aggregation strategy, with
//! SGD and LAMB optimizers and retrieval evaluation.
//!
//! The encoders are single linear projections followed by L2 normalization;
//! the point is verifying the distributed objective, not representation
//! power. The default training path is contrastive-only; an optional flag
//! adds toy linear reconstruction and token-prediction heads so the combined
//! objective is exercised end to end.

use crate::cluster::{make_topology, run_step, ParamGrads, StrategyConfig};
use crate::costmodel::{step_time, CostLedger, HardwareModel};
use crate::datapipe::{synth_pairs, RawPairs, SyntheticTask};
use crate::error::{Result, SimError};
use crate::losses::{
    cmim_loss, cmlm_loss, overall_loss, EmbeddingBatch, ItcLossResult, LossWeights,
    MaskedImageTarget, MaskedTextTarget, Temperature,
};
use crate::numerics::{l2_normalize_rows, matmul, Matrix, Rng};

/// Linear image and text projections sharing an output width, plus the
/// learnable softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub w_img: Matrix,
    pub w_txt: Matrix,
    pub temp: Temperature,
}

impl DualEncoder {
    pub fn random(rng: &mut Rng, d_in: usize, d: usize, init_std: f64) -> Result<Self> {
        Ok(Self {
            w_img: rng.gaussian(d_in, d, init_std)?,
            w_txt: rng.gaussian(d_in, d, init_std)?,
            temp: Temperature::default(),
        })
    }

    /// Project both modalities and L2-normalize the rows.
    pub fn encode(&self, raw: &RawPairs) -> Result<EmbeddingBatch> {
        if raw.img.cols() != self.w_img.rows() {
            return Err(SimError::DimensionMismatch {
                left_rows: raw.img.rows(),
                left_cols: raw.img.cols(),
                right_rows: self.w_img.rows(),
                right_cols: self.w_img.cols(),
            });
        }
        let v = l2_normalize_rows(&matmul(&raw.img, &self.w_img)?)?;
        let t = l2_normalize_rows(&matmul(&raw.txt, &self.w_txt)?)?;
        EmbeddingBatch::new(v, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Lamb,
}

/// Optimizer hyperparameters. LAMB defaults follow the large-batch training
/// recipe: betas (0.9, 0.98), eps 1e-6, decoupled weight decay 0.05.
#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub lamb_betas: (f64, f64),
    pub lamb_eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            lamb_betas: (0.9, 0.98),
            lamb_eps: 1e-6,
            weight_decay,
        }
    }

    pub fn lamb(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Lamb,
            learning_rate,
            lamb_betas: (0.9, 0.98),
            lamb_eps: 1e-6,
            weight_decay: 0.05,
        }
    }
}

/// Per-tensor Adam-style moments for LAMB.
#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Stateful optimizer over the dual encoder's three parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    step_count: u64,
    m_img: Moments,
    m_txt: Moments,
    m_tau: Moments,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step_count: 0,
            m_img: Moments::default(),
            m_txt: Moments::default(),
            m_tau: Moments::default(),
        }
    }

    /// Apply one update and return the new parameters. The temperature is
    /// updated in log space, never weight-decayed, and re-clamped.
    pub fn step(&mut self, enc: &DualEncoder, grads: &ParamGrads) -> Result<DualEncoder> {
        if !grads.w_img.is_finite() || !grads.w_txt.is_finite() || !grads.log_tau.is_finite() {
            return Err(SimError::NonFinite {
                context: "optimizer gradients".to_string(),
            });
        }
        self.step_count += 1;
        let w_img = self.update_tensor(
            enc.w_img.data(),
            grads.w_img.data(),
            self.config.weight_decay,
            TensorSlot::Img,
        );
        let w_txt = self.update_tensor(
            enc.w_txt.data(),
            grads.w_txt.data(),
            self.config.weight_decay,
            TensorSlot::Txt,
        );
        let tau = self.update_tensor(
            &[enc.temp.log_tau()],
            &[grads.log_tau],
            0.0,
            TensorSlot::Tau,
        );
        Ok(DualEncoder {
            w_img: Matrix::new(enc.w_img.rows(), enc.w_img.cols(), w_img)?,
            w_txt: Matrix::new(enc.w_txt.rows(), enc.w_txt.cols(), w_txt)?,
            temp: Temperature::from_log(enc.temp.log_tau()).updated(tau[0] - enc.temp.log_tau()),
        })
    }

    fn update_tensor(
        &mut self,
        params: &[f64],
        grads: &[f64],
        weight_decay: f64,
        slot: TensorSlot,
    ) -> Vec<f64> {
        let cfg = self.config;
        match cfg.kind {
            OptimizerKind::Sgd => params
                .iter()
                .zip(grads)
                .map(|(p, g)| p - cfg.learning_rate * (g + weight_decay * p))
                .collect(),
            OptimizerKind::Lamb => {
                let (b1, b2) = cfg.lamb_betas;
                let t = self.step_count as i32;
                let moments = match slot {
                    TensorSlot::Img => &mut self.m_img,
                    TensorSlot::Txt => &mut self.m_txt,
                    TensorSlot::Tau => &mut self.m_tau,
                };
                if moments.m.is_empty() {
                    moments.m = vec![0.0; params.len()];
                    moments.v = vec![0.0; params.len()];
                }
                let mut update = Vec::with_capacity(params.len());
                for i in 0..params.len() {
                    moments.m[i] = b1 * moments.m[i] + (1.0 - b1) * grads[i];
                    moments.v[i] = b2 * moments.v[i] + (1.0 - b2) * grads[i] * grads[i];
                    let m_hat = moments.m[i] / (1.0 - b1.powi(t));
                    let v_hat = moments.v[i] / (1.0 - b2.powi(t));
                    update.push(m_hat / (v_hat.sqrt() + cfg.lamb_eps) + weight_decay * params[i]);
                }
                let p_norm = params.iter().map(|p| p * p).sum::<f64>().sqrt();
                let u_norm = update.iter().map(|u| u * u).sum::<f64>().sqrt();
                let trust = if p_norm > 0.0 && u_norm > 0.0 {
                    p_norm / u_norm
                } else {
                    1.0
                };
                params
                    .iter()
                    .zip(&update)
                    .map(|(p, u)| p - cfg.learning_rate * trust * u)
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum TensorSlot {
    Img,
    Txt,
    Tau,
}

/// Toy prediction heads for the reconstruction and token objectives.
#[derive(Debug, Clone)]
struct AuxHeads {
    /// d x P pixel predictor fed by the text embedding.
    pixel: Matrix,
    /// d x Q vocabulary predictor fed by the text embedding.
    vocab: Matrix,
    labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub strategy: StrategyConfig,
    pub world_size: usize,
    pub steps: usize,
    pub embed_dim: usize,
    pub optimizer: OptimizerConfig,
    pub loss_weights: LossWeights,
    /// Off: contrastive-only training (the ablation setting). On: adds the
    /// toy reconstruction and token heads to the reported objective.
    pub full_objective: bool,
    pub vocab_size: usize,
    pub seed: u64,
    pub hardware: HardwareModel,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(SimError::InvalidArgument {
                arg: "steps",
                reason: "must be >= 1".to_string(),
            });
        }
        if self.optimizer.learning_rate < 0.0 {
            return Err(SimError::InvalidArgument {
                arg: "learning_rate",
                reason: "must be non-negative".to_string(),
            });
        }
        self.strategy.validate(self.world_size)
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub ledger: CostLedger,
}

/// Recall at each cutoff in both directions, as fractions, plus the mean
/// recall in percent.
#[derive(Debug, Clone)]
pub struct RetrievalMetrics {
    /// (K, text-to-image recall, image-to-text recall)
    pub recalls: Vec<(usize, f64, f64)>,
    pub mean_recall: f64,
}

#[derive(Debug, Clone)]
pub struct MetricsHistory {
    pub records: Vec<StepRecord>,
    pub final_retrieval: RetrievalMetrics,
    pub final_encoder: DualEncoder,
}

/// Rows `[start, start+count)` of the corpus, wrapping around the end.
fn take_cyclic(pairs: &RawPairs, start: usize, count: usize) -> RawPairs {
    let n = pairs.len();
    let img: Vec<Vec<f64>> = (0..count)
        .map(|i| pairs.img.row((start + i) % n).to_vec())
        .collect();
    let txt: Vec<Vec<f64>> = (0..count)
        .map(|i| pairs.txt.row((start + i) % n).to_vec())
        .collect();
    RawPairs {
        img: Matrix::from_rows(&img).expect("cyclic slice"),
        txt: Matrix::from_rows(&txt).expect("cyclic slice"),
    }
}

/// Deterministic training loop: run_step then optimizer_step per step, with
/// per-step ledger snapshots and a final retrieval evaluation on the corpus.
pub fn train(config: &TrainConfig, data: &RawPairs) -> Result<MetricsHistory> {
    config.validate()?;
    let topo = make_topology(config.world_size, config.strategy.group_size)?;
    let d_in = data.img.cols();
    let mut rng = Rng::from_seed(config.seed);
    let mut enc = DualEncoder::random(&mut rng, d_in, config.embed_dim, 0.3)?;
    let mut opt = Optimizer::new(config.optimizer);
    let mut heads = if config.full_objective {
        let mut head_rng = rng.split(1);
        Some(AuxHeads {
            pixel: head_rng.gaussian(config.embed_dim, d_in, 0.3)?,
            vocab: head_rng.gaussian(config.embed_dim, config.vocab_size, 0.3)?,
            labels: (0..config.strategy.batch_per_worker)
                .map(|_| head_rng.below(config.vocab_size))
                .collect(),
        })
    } else {
        None
    };

    let b = config.strategy.batch_per_worker;
    let k = config.strategy.accumulation_steps;
    let per_step = config.world_size * k * b;
    let sim_time = step_time(
        &config.strategy,
        config.world_size,
        &config.hardware,
        config.embed_dim,
    );

    let mut records = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let base = step * per_step;
        let micro_batches: Vec<Vec<RawPairs>> = (0..config.world_size)
            .map(|w| {
                (0..k)
                    .map(|s| take_cyclic(data, base + (s * config.world_size + w) * b, b))
                    .collect()
            })
            .collect();
        let mut result = run_step(&config.strategy, &topo, &enc, &micro_batches)?;
        result.ledger.simulated_time = sim_time;

        let mut loss = result.loss_value;
        if let Some(h) = heads.as_mut() {
            loss = aux_objective(&enc, h, &micro_batches[0][0], result.loss_value, config)?;
        }

        records.push(StepRecord {
            step,
            loss,
            ledger: result.ledger.clone(),
        });
        enc = opt.step(&enc, &result.accumulated_grads[0])?;
    }

    let batch = enc.encode(data)?;
    let final_retrieval = evaluate_retrieval(&batch.v_cls, &batch.t_cls)?;
    Ok(MetricsHistory {
        records,
        final_retrieval,
        final_encoder: enc,
    })
}

/// Combined-objective bookkeeping: toy heads predict the raw image features
/// and fixed token labels from the text embedding; the heads train on their
/// own gradients and the weighted sum is the reported loss.
fn aux_objective(
    enc: &DualEncoder,
    heads: &mut AuxHeads,
    raw: &RawPairs,
    itc_value: f64,
    config: &TrainConfig,
) -> Result<f64> {
    let t = l2_normalize_rows(&matmul(&raw.txt, &enc.w_txt)?)?;
    let x_hat = matmul(&t, &heads.pixel)?;
    let cmim = cmim_loss(&MaskedImageTarget::new(raw.img.clone(), x_hat)?)?;
    let logits = matmul(&t, &heads.vocab)?;
    let cmlm = cmlm_loss(&MaskedTextTarget::new(logits, heads.labels.clone())?)?;
    let itc = ItcLossResult {
        value: itc_value,
        grad_v: Matrix::zeros(1, 1),
        grad_t: Matrix::zeros(1, 1),
        grad_log_tau: 0.0,
    };
    let overall = overall_loss(&itc, &cmim, &cmlm, config.loss_weights)?;
    // plain gradient steps on the heads
    let lr = config.optimizer.learning_rate;
    let g_pixel = matmul(&t.transpose(), &overall.grad_x_hat)?;
    let g_vocab = matmul(&t.transpose(), &overall.grad_logits)?;
    heads.pixel = heads.pixel.sub(&g_pixel.scale(lr))?;
    heads.vocab = heads.vocab.sub(&g_vocab.scale(lr))?;
    Ok(overall.value)
}

/// Recall at K in both directions by similarity ranking, ties broken toward
/// the lower candidate index. Cutoffs above the candidate count are dropped.
pub fn evaluate_retrieval(v: &Matrix, t: &Matrix) -> Result<RetrievalMetrics> {
    if v.rows() == 0 {
        return Err(SimError::InvalidArgument {
            arg: "embeddings",
            reason: "empty input".to_string(),
        });
    }
    if v.rows() != t.rows() || v.cols() != t.cols() {
        return Err(SimError::DimensionMismatch {
            left_rows: v.rows(),
            left_cols: v.cols(),
            right_rows: t.rows(),
            right_cols: t.cols(),
        });
    }
    let n = v.rows();
    let sims = matmul(v, &t.transpose())?;
    let ks: Vec<usize> = [1usize, 5, 10].into_iter().filter(|&k| k <= n).collect();

    // rank of the positive for query i over the given candidate scores
    let rank = |scores: &dyn Fn(usize) -> f64, pos: usize| -> usize {
        let s_pos = scores(pos);
        let mut r = 1;
        for j in 0..n {
            if j == pos {
                continue;
            }
            let s = scores(j);
            if s > s_pos || (s == s_pos && j < pos) {
                r += 1;
            }
        }
        r
    };

    let mut recalls = Vec::new();
    let mut all = Vec::new();
    for &k in &ks {
        let mut i2t_hits = 0usize;
        let mut t2i_hits = 0usize;
        for i in 0..n {
            if rank(&|j| sims.get(i, j), i) <= k {
                i2t_hits += 1;
            }
            if rank(&|j| sims.get(j, i), i) <= k {
                t2i_hits += 1;
            }
        }
        let i2t = i2t_hits as f64 / n as f64;
        let t2i = t2i_hits as f64 / n as f64;
        recalls.push((k, t2i, i2t));
        all.push(t2i);
        all.push(i2t);
    }
    let mean_recall = 100.0 * all.iter().sum::<f64>() / all.len() as f64;
    Ok(RetrievalMetrics {
        recalls,
        mean_recall,
    })
}

/// Convenience: separable synthetic corpus for the given task parameters.
pub fn synthetic_corpus(
    n_pairs: usize,
    d_in: usize,
    noise_std: f64,
    seed: u64,
) -> Result<RawPairs> {
    synth_pairs(&SyntheticTask {
        n_pairs,
        d_in,
        noise_std,
        seed,
    })
}
