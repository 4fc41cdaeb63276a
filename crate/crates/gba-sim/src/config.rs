//! Flat key-value experiment configuration with `#` comments.
//!
//! Unknown keys are rejected; missing keys take the documented defaults.
//! All randomness flows from the single `seed` key.

use crate::cluster::{StrategyConfig, StrategyKind};
use crate::costmodel::HardwareModel;
use crate::datapipe::SyntheticTask;
use crate::error::{Result, SimError};
use crate::losses::LossWeights;
use crate::trainer::{OptimizerConfig, OptimizerKind, TrainConfig};
use std::collections::HashMap;
use std::path::Path;

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "steps",
    "learning_rate",
    "optimizer",
    "weight_decay",
    "alpha",
    "beta",
    "full_objective",
    "vocab_size",
    "strategy",
    "world_size",
    "group_size",
    "batch_per_worker",
    "accumulation_steps",
    "n_pairs",
    "d_in",
    "embed_dim",
    "noise_std",
    "bandwidth",
    "latency",
    "compute_rate",
    "strategies",
    "sweep_bandwidths",
    "sweep_latencies",
];

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub full_objective: bool,
    pub vocab_size: usize,
    pub strategy: StrategyKind,
    pub world_size: usize,
    pub group_size: Option<usize>,
    pub batch_per_worker: usize,
    pub accumulation_steps: usize,
    pub n_pairs: usize,
    pub d_in: usize,
    pub embed_dim: usize,
    pub noise_std: f64,
    pub bandwidth: f64,
    pub latency: f64,
    pub compute_rate: f64,
    /// For `compare`: kind/batch/group/accum tuples.
    pub strategies: Vec<StrategyConfig>,
    pub sweep_bandwidths: Vec<f64>,
    pub sweep_latencies: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            steps: 50,
            learning_rate: 1.0,
            optimizer: OptimizerKind::Sgd,
            weight_decay: None,
            alpha: 0.3,
            beta: 0.3,
            full_objective: false,
            vocab_size: 32,
            strategy: StrategyKind::ConventionalItc,
            world_size: 8,
            group_size: None,
            batch_per_worker: 8,
            accumulation_steps: 1,
            n_pairs: 256,
            d_in: 16,
            embed_dim: 16,
            noise_std: 0.01,
            bandwidth: 1e9,
            latency: 1e-5,
            compute_rate: 1e6,
            strategies: Vec::new(),
            sweep_bandwidths: vec![1e8, 1e9, 1e10],
            sweep_latencies: vec![1e-6, 1e-5, 1e-4],
        }
    }
}

fn bad_key(key: &str, reason: impl std::fmt::Display) -> SimError {
    SimError::Config(format!("key '{key}': {reason}"))
}

fn parse_kind(key: &str, value: &str) -> Result<StrategyKind> {
    match value {
        "conventional" => Ok(StrategyKind::ConventionalItc),
        "grouped" => Ok(StrategyKind::GroupedItc),
        "gba" => Ok(StrategyKind::GbaItc),
        other => Err(bad_key(
            key,
            format!("unknown strategy '{other}' (expected conventional, grouped or gba)"),
        )),
    }
}

fn parse_strategy_spec(key: &str, spec: &str) -> Result<StrategyConfig> {
    let parts: Vec<&str> = spec.trim().split('/').collect();
    if parts.len() != 4 {
        return Err(bad_key(
            key,
            format!("strategy spec '{spec}' must be kind/batch/group/accum"),
        ));
    }
    let kind = parse_kind(key, parts[0])?;
    let nums: Vec<usize> = parts[1..]
        .iter()
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| bad_key(key, format!("'{p}' is not a count in spec '{spec}'")))
        })
        .collect::<Result<_>>()?;
    Ok(StrategyConfig {
        kind,
        batch_per_worker: nums[0],
        group_size: nums[1],
        accumulation_steps: nums[2],
    })
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| bad_key(key, format!("'{p}' is not a number")))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self> {
        let mut map: HashMap<String, String> = HashMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SimError::Config(format!("line {}: expected 'key = value'", idx + 1))
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(SimError::Config(format!("unknown key '{key}'")));
            }
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(SimError::Config(format!("duplicate key '{key}'")));
            }
        }
        Self::from_map(&map)
    }

    fn from_map(map: &HashMap<String, String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        macro_rules! num {
            ($field:ident, $key:expr, $ty:ty) => {
                if let Some(v) = map.get($key) {
                    cfg.$field = v
                        .parse::<$ty>()
                        .map_err(|_| bad_key($key, format!("'{v}' is not a valid value")))?;
                }
            };
        }
        num!(seed, "seed", u64);
        num!(steps, "steps", usize);
        num!(learning_rate, "learning_rate", f64);
        num!(alpha, "alpha", f64);
        num!(beta, "beta", f64);
        num!(vocab_size, "vocab_size", usize);
        num!(world_size, "world_size", usize);
        num!(batch_per_worker, "batch_per_worker", usize);
        num!(accumulation_steps, "accumulation_steps", usize);
        num!(n_pairs, "n_pairs", usize);
        num!(d_in, "d_in", usize);
        num!(embed_dim, "embed_dim", usize);
        num!(noise_std, "noise_std", f64);
        num!(bandwidth, "bandwidth", f64);
        num!(latency, "latency", f64);
        num!(compute_rate, "compute_rate", f64);

        if let Some(v) = map.get("weight_decay") {
            cfg.weight_decay = Some(
                v.parse::<f64>()
                    .map_err(|_| bad_key("weight_decay", format!("'{v}' is not a number")))?,
            );
        }
        if let Some(v) = map.get("group_size") {
            cfg.group_size = Some(
                v.parse::<usize>()
                    .map_err(|_| bad_key("group_size", format!("'{v}' is not a count")))?,
            );
        }
        if let Some(v) = map.get("optimizer") {
            cfg.optimizer = match v.as_str() {
                "sgd" => OptimizerKind::Sgd,
                "lamb" => OptimizerKind::Lamb,
                other => {
                    return Err(bad_key(
                        "optimizer",
                        format!("unknown optimizer '{other}' (expected sgd or lamb)"),
                    ))
                }
            };
        }
        if let Some(v) = map.get("full_objective") {
            cfg.full_objective = match v.as_str() {
                "true" | "1" | "on" => true,
                "false" | "0" | "off" => false,
                other => {
                    return Err(bad_key(
                        "full_objective",
                        format!("'{other}' is not a flag"),
                    ))
                }
            };
        }
        if let Some(v) = map.get("strategy") {
            cfg.strategy = parse_kind("strategy", v)?;
        }
        if let Some(v) = map.get("strategies") {
            cfg.strategies = v
                .split(',')
                .map(|s| parse_strategy_spec("strategies", s))
                .collect::<Result<_>>()?;
        }
        if let Some(v) = map.get("sweep_bandwidths") {
            cfg.sweep_bandwidths = parse_f64_list("sweep_bandwidths", v)?;
        }
        if let Some(v) = map.get("sweep_latencies") {
            cfg.sweep_latencies = parse_f64_list("sweep_latencies", v)?;
        }
        Ok(cfg)
    }

    pub fn single_strategy(&self) -> StrategyConfig {
        StrategyConfig {
            kind: self.strategy,
            batch_per_worker: self.batch_per_worker,
            group_size: self.group_size.unwrap_or(self.world_size),
            accumulation_steps: self.accumulation_steps,
        }
    }

    pub fn hardware(&self) -> Result<HardwareModel> {
        HardwareModel::new(self.bandwidth, self.latency, self.compute_rate)
            .map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn task(&self) -> SyntheticTask {
        SyntheticTask {
            n_pairs: self.n_pairs,
            d_in: self.d_in,
            noise_std: self.noise_std,
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn train_config(&self, strategy: StrategyConfig) -> Result<TrainConfig> {
        let weight_decay = self.weight_decay.unwrap_or(match self.optimizer {
            OptimizerKind::Sgd => 0.0,
            OptimizerKind::Lamb => 0.05,
        });
        let optimizer = OptimizerConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            lamb_betas: (0.9, 0.98),
            lamb_eps: 1e-6,
            weight_decay,
        };
        Ok(TrainConfig {
            strategy,
            world_size: self.world_size,
            steps: self.steps,
            embed_dim: self.embed_dim,
            optimizer,
            loss_weights: LossWeights::new(self.alpha, self.beta)
                .map_err(|e| SimError::Config(e.to_string()))?,
            full_objective: self.full_objective,
            vocab_size: self.vocab_size,
            seed: self.seed,
            hardware: self.hardware()?,
        })
    }
}
