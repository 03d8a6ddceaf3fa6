//! Policy training: normalization, windowing, optimization and checkpoints.

mod normalize;
mod policy;
mod window;

pub use normalize::{Normalizer, Range};
pub use policy::{GoldenWindow, Policy, PolicyConfig, CHECKPOINT_VERSION};
pub use window::{make_windows, PolicyObs, TrainingSet, Window};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{diffusion_loss, DiffusionError};
use crate::encoder::EncoderError;
use crate::nn::optim::{AdamW, AdamWConfig, CosineSchedule, Ema};
use crate::nn::Graph;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "policy.bin";
pub const PERIODIC_CHECKPOINT: &str = "checkpoint_last.bin";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.bin";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("non-finite loss at step {step}; last good weights: {checkpoint:?}")]
    NonFinite { step: usize, checkpoint: Option<PathBuf> },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Demo(#[from] crate::demo::DemoError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    /// Decay of the weight average used for the final checkpoint.
    pub ema_decay: Option<f64>,
    pub box_conditioning_enabled: bool,
    pub dataset: PathBuf,
    /// Where logs and checkpoints go; nothing is written when unset.
    pub output_dir: Option<PathBuf>,
    pub log_every: usize,
    /// Periodic checkpoint cadence in steps; 0 disables.
    pub checkpoint_every: usize,
    pub golden_windows: usize,
    pub policy: PolicyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 32,
            steps: 3000,
            lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 1e-6,
            max_grad_norm: Some(1.0),
            ema_decay: None,
            box_conditioning_enabled: true,
            dataset: PathBuf::from("data"),
            output_dir: None,
            log_every: 50,
            checkpoint_every: 1000,
            golden_windows: 2,
            policy: PolicyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(TrainError::Config("ema_decay must lie in [0, 1)".into()));
            }
        }
        self.policy.validate()
    }

    /// The architecture actually trained: the box switch comes from here.
    pub fn effective_policy(&self) -> PolicyConfig {
        let mut p = self.policy.clone();
        p.encoder.box_conditioning_enabled = self.box_conditioning_enabled;
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    /// Loss at every step.
    pub losses: Vec<f64>,
    pub log: Vec<LogRecord>,
}

/// Loads the configured dataset and trains, writing into `output_dir`.
pub fn train_from_config(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let data = TrainingSet::load(&cfg.dataset)?;
    train_policy(cfg, &data)
}

/// Optimizes the epsilon-prediction loss end to end over encoder and
/// denoiser. Bit-reproducible for a fixed config and dataset.
pub fn train_policy(cfg: &TrainConfig, data: &TrainingSet) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let pcfg = cfg.effective_policy();
    let mut policy = Policy::new(pcfg, data.normalizer.clone(), cfg.seed)?;
    policy.train_config = Some(cfg.clone());
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
    }
    let mut log_file = match &cfg.output_dir {
        Some(dir) => Some(fs::File::create(dir.join(LOG_FILE))?),
        None => None,
    };
    let degenerate = data.normalizer.degenerate_dims();
    if !degenerate.is_empty() {
        log::info!("identity normalization for constant dims {degenerate:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7A1_0BEE);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            max_grad_norm: cfg.max_grad_norm,
            ..Default::default()
        },
        &policy.store,
    );
    let sched = CosineSchedule {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup_steps.min(cfg.steps / 2),
        total_steps: cfg.steps,
    };
    let mut ema = cfg.ema_decay.map(|d| Ema::new(d, &policy.store));
    let history = policy.history();
    let horizon = policy.horizon();
    let mut order: Vec<usize> = (0..data.windows.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut log = Vec::new();
    let start = Instant::now();

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data.windows[order[cursor]]);
            cursor += 1;
        }
        let obs: Vec<PolicyObs> = batch.iter().map(|w| data.obs(w, history)).collect();
        let x0: Vec<f64> = batch.iter().flat_map(|w| data.target(w, horizon)).collect();

        let mut g = Graph::<f32>::new();
        let tokens = policy.encode(&mut g, &policy.store, &obs)?;
        let loss = diffusion_loss(&mut g, &policy.store, &policy.denoiser, &policy.schedule, &x0, tokens, &mut rng)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            let checkpoint = match &cfg.output_dir {
                Some(dir) => {
                    let path = dir.join(LAST_GOOD_CHECKPOINT);
                    policy.save(&path)?;
                    Some(path)
                }
                None => None,
            };
            return Err(TrainError::NonFinite { step, checkpoint });
        }
        let grads = g.backward(loss);
        let lr = sched.lr(step);
        opt.step(&mut policy.store, &grads, lr);
        if let Some(e) = ema.as_mut() {
            e.update(&policy.store);
        }
        losses.push(value);

        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            let rec = LogRecord {
                step,
                loss: value,
                lr,
                wall_time_s: start.elapsed().as_secs_f64(),
            };
            log::debug!("train step {step} loss {value:.5} lr {lr:.2e}");
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec).expect("log record serializes"))?;
            }
            log.push(rec);
        }
        if let Some(dir) = &cfg.output_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                policy.save(&dir.join(PERIODIC_CHECKPOINT))?;
            }
        }
    }

    if let Some(e) = ema {
        policy.store = e.weights().clone();
    }
    let golden: Vec<Window> = data.windows.iter().step_by((data.windows.len() / cfg.golden_windows.max(1)).max(1)).take(cfg.golden_windows).copied().collect();
    let golden_obs: Vec<PolicyObs> = golden.iter().map(|w| data.obs(w, history)).collect();
    policy.set_golden(&golden_obs, cfg.seed)?;
    if let Some(dir) = &cfg.output_dir {
        policy.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { policy, losses, log })
}

/// Scalar-count audit of a policy's parameters by name prefix, used to show
/// that two arms share every non-box path.
pub fn shape_audit(policy: &Policy) -> Vec<(String, Vec<usize>)> {
    policy.store.entries().iter().map(|e| (e.name.clone(), e.value.shape().to_vec())).collect()
}

/// Reads a line-delimited training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, TrainError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Data(format!("bad log line: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests;
