use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Normalizer, PolicyObs, TrainConfig, TrainError};
use crate::blob::{self, BlobError};
use crate::demo::ObservationFrame;
use crate::detect::GraspBox;
use crate::diffusion::{make_schedule, Denoiser, DenoiserConfig, NoiseSchedule};
use crate::encoder::{box_features_for_size, image_tensor, EncoderConfig, EncoderInput, ObsEncoder};
use crate::nn::{Graph, ParamSpec, ParamStore, Scalar, Tensor, Var};
use crate::sim::ActionCommand;

const MAGIC: &[u8; 8] = b"GBPOLICY";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Golden inputs must reproduce their stored outputs this closely.
const GOLDEN_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig {
                image_width: 48,
                image_height: 48,
                stage_channels: vec![16, 32, 32],
                token_dim: 64,
                attn_depth: 1,
                ..Default::default()
            },
            denoiser: DenoiserConfig {
                token_dim: 64,
                depth: 2,
                ..Default::default()
            },
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.encoder.validate()?;
        self.denoiser.validate()?;
        if self.encoder.token_dim != self.denoiser.token_dim {
            return Err(TrainError::Config(format!(
                "encoder token_dim {} differs from denoiser token_dim {}",
                self.encoder.token_dim, self.denoiser.token_dim
            )));
        }
        Ok(())
    }
}

/// A stored input with the noise prediction it produced when saved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenWindow {
    pub frames: Vec<ObservationFrame>,
    pub boxes: Vec<Option<GraspBox>>,
    pub t: usize,
    pub x_t: Vec<f64>,
    pub eps_hat: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: PolicyConfig,
    normalizer: Normalizer,
    schedule: NoiseSchedule,
    train_config: Option<TrainConfig>,
    specs: Vec<ParamSpec>,
    golden: Vec<GoldenWindow>,
}

/// Encoder, denoiser, weights and everything needed to act.
#[derive(Debug, Clone)]
pub struct Policy {
    pub config: PolicyConfig,
    pub encoder: ObsEncoder,
    pub denoiser: Denoiser,
    pub store: ParamStore<f32>,
    pub normalizer: Normalizer,
    pub schedule: NoiseSchedule,
    pub train_config: Option<TrainConfig>,
    pub golden: Vec<GoldenWindow>,
}

impl Policy {
    pub fn new(config: PolicyConfig, normalizer: Normalizer, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = ObsEncoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let denoiser = Denoiser::new(config.denoiser.clone(), &mut store, &mut rng)?;
        let schedule = make_schedule(config.denoiser.t_train)?;
        Ok(Self {
            config,
            encoder,
            denoiser,
            store,
            normalizer,
            schedule,
            train_config: None,
            golden: Vec::new(),
        })
    }

    pub fn history(&self) -> usize {
        self.config.encoder.history
    }

    pub fn horizon(&self) -> usize {
        self.config.denoiser.horizon
    }

    pub fn categories(&self) -> usize {
        self.config.encoder.categories
    }

    /// Encoder tensors for a batch of observations.
    pub fn encoder_input<T: Scalar>(&self, obs: &[PolicyObs<'_>]) -> Result<EncoderInput<T>, TrainError> {
        let ec = &self.config.encoder;
        let h = ec.history;
        let mut lowdim = Vec::with_capacity(obs.len() * h * 4);
        let mut boxes = Vec::with_capacity(obs.len() * h * ec.box_dim());
        for o in obs {
            if o.frames.len() != h || o.boxes.len() != h {
                return Err(TrainError::Data(format!(
                    "{} frames and {} boxes for a history of {h}",
                    o.frames.len(),
                    o.boxes.len()
                )));
            }
            for (f, b) in o.frames.iter().zip(&o.boxes) {
                if f.views.len() != ec.view_count {
                    return Err(TrainError::Data(format!("frame has {} views, policy expects {}", f.views.len(), ec.view_count)));
                }
                lowdim.extend(self.normalizer.norm_lowdim(f.lowdim()));
                let size = (f.views[0].width, f.views[0].height);
                boxes.extend(box_features_for_size(b.as_ref(), size, ec.categories)?);
            }
        }
        let rows = obs.len() * h;
        let views = (0..ec.view_count)
            .map(|v| {
                let imgs: Vec<_> = obs.iter().flat_map(|o| o.frames.iter().map(move |f| &f.views[v])).collect();
                image_tensor(&imgs, ec.image_width, ec.image_height)
            })
            .collect::<Result<_, _>>()?;
        Ok(EncoderInput {
            batch: obs.len(),
            views,
            lowdim: Tensor::from_f64(&[rows, 4], &lowdim),
            boxes: Tensor::from_f64(&[rows, ec.box_dim()], &boxes),
        })
    }

    /// Observation tokens `[B, T_o, d]` in graph `g`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, obs: &[PolicyObs<'_>]) -> Result<Var, TrainError> {
        let input = self.encoder_input(obs)?;
        Ok(self.encoder.forward(g, store, &input)?)
    }

    /// Noise predictions for explicit noised chunks, flat `B * horizon * 4`.
    pub fn eps_hat(&self, obs: &[PolicyObs<'_>], t: &[usize], x_t: &[f64]) -> Result<Vec<f64>, TrainError> {
        let c = &self.config.denoiser;
        let mut g = Graph::<f32>::new();
        let tokens = self.encode(&mut g, &self.store, obs)?;
        let x = g.constant(Tensor::from_f64(&[t.len(), c.horizon, c.action_dim], x_t));
        let e = self.denoiser.predict_eps(&mut g, &self.store, x, t, tokens)?;
        Ok(g.value(e).to_f64_vec())
    }

    /// Normalized DDIM chunks, one per observation and seed.
    pub fn sample_normalized(&self, obs: &[PolicyObs<'_>], seeds: &[u64]) -> Result<Vec<Vec<f64>>, TrainError> {
        if obs.len() != seeds.len() {
            return Err(TrainError::Data(format!("{} observations for {} seeds", obs.len(), seeds.len())));
        }
        if obs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::<f32>::new();
        let tokens = self.encode(&mut g, &self.store, obs)?;
        let tokens = g.value(tokens).clone();
        Ok(self.denoiser.sample(&self.store, &tokens, &self.schedule, seeds)?)
    }

    /// Action chunks in world units, one per observation and seed.
    pub fn predict(&self, obs: &[PolicyObs<'_>], seeds: &[u64]) -> Result<Vec<Vec<ActionCommand>>, TrainError> {
        let a = self.config.denoiser.action_dim;
        Ok(self
            .sample_normalized(obs, seeds)?
            .iter()
            .map(|chunk| {
                chunk
                    .chunks(a)
                    .map(|row| ActionCommand::from_array(self.normalizer.denorm_action([row[0], row[1], row[2], row[3]])))
                    .collect()
            })
            .collect())
    }

    /// Stores `obs` as golden windows with seeded timesteps and noise.
    pub fn set_golden(&mut self, obs: &[PolicyObs<'_>], seed: u64) -> Result<(), TrainError> {
        let c = &self.config.denoiser;
        let n = c.horizon * c.action_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut golden = Vec::with_capacity(obs.len());
        for (i, o) in obs.iter().enumerate() {
            let t = (i * 37 + 11) % c.t_train;
            let x_t: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eps_hat = self.eps_hat(std::slice::from_ref(o), &[t], &x_t)?;
            golden.push(GoldenWindow {
                frames: o.frames.iter().map(|&f| f.clone()).collect(),
                boxes: o.boxes.clone(),
                t,
                x_t,
                eps_hat,
            });
        }
        self.golden = golden;
        Ok(())
    }

    /// Largest deviation between stored and recomputed golden outputs.
    pub fn golden_error(&self) -> Result<f64, TrainError> {
        let mut worst: f64 = 0.0;
        for gw in &self.golden {
            let obs = PolicyObs {
                frames: gw.frames.iter().collect(),
                boxes: gw.boxes.clone(),
            };
            let e = self.eps_hat(&[obs], &[gw.t], &gw.x_t)?;
            for (a, b) in e.iter().zip(&gw.eps_hat) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let header = Header {
            config: self.config.clone(),
            normalizer: self.normalizer.clone(),
            schedule: self.schedule.clone(),
            train_config: self.train_config.clone(),
            specs: self.store.specs(),
            golden: self.golden.clone(),
        };
        blob::write(path, MAGIC, CHECKPOINT_VERSION, &header, &self.store.flat_values()).map_err(from_blob)
    }

    /// Loads and checks a checkpoint, including its golden windows.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let (header, flat): (Header, Vec<f32>) = blob::read(path, MAGIC, CHECKPOINT_VERSION).map_err(from_blob)?;
        let mut policy = Self::new(header.config, header.normalizer, 0)?;
        let store = ParamStore::from_specs(&header.specs, &flat)
            .ok_or_else(|| TrainError::Corrupt("parameter payload does not match specs".into()))?;
        if store.specs() != policy.store.specs() {
            return Err(TrainError::Corrupt("stored parameters do not match the architecture".into()));
        }
        if header.schedule != policy.schedule {
            return Err(TrainError::Corrupt("stored noise schedule differs from its closed form".into()));
        }
        policy.store = store;
        policy.train_config = header.train_config;
        policy.golden = header.golden;
        let err = policy.golden_error()?;
        if err > GOLDEN_TOL {
            return Err(TrainError::Corrupt(format!("golden windows deviate by {err:e}")));
        }
        Ok(policy)
    }
}

fn from_blob(e: BlobError) -> TrainError {
    match e {
        BlobError::Version { found, expected } => TrainError::Version { found, expected },
        BlobError::Corrupt(m) => TrainError::Corrupt(m),
        BlobError::Io(e) => TrainError::Io(e),
    }
}
