//! Cosine noise schedule, forward noising, the epsilon-predicting denoiser
//! transformer and the DDIM sampler.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::layers::{LayerNorm, Linear, TransformerBlock};
use crate::nn::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub const HORIZON: usize = 16;
pub const ACTION_DIM: usize = 4;
/// Parameter-name prefix of the denoiser.
pub const PREFIX: &str = "den";
const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid diffusion config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{steps} sampling steps exceed {t_train} training steps")]
    Steps { steps: usize, t_train: usize },
    #[error("timestep {t} outside [0, {t_train})")]
    Timestep { t: usize, t_train: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_train: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alphabar: Vec<f64>,
}

/// Squared-cosine signal level at fractional time `u ∈ [0, 1]`, unnormalized.
fn cosine_level(u: f64) -> f64 {
    (((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * PI / 2.0).cos().powi(2)
}

/// Cosine schedule over `t_train` steps; each beta is capped at 0.999.
pub fn make_schedule(t_train: usize) -> Result<NoiseSchedule, DiffusionError> {
    if t_train < 2 {
        return Err(DiffusionError::Config(format!("t_train must be >= 2, got {t_train}")));
    }
    let f0 = cosine_level(0.0);
    let level = |i: usize| cosine_level(i as f64 / t_train as f64) / f0;
    let betas: Vec<f64> = (0..t_train).map(|i| (1.0 - level(i + 1) / level(i)).min(MAX_BETA)).collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alphabar = Vec::with_capacity(t_train);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alphabar.push(acc);
    }
    Ok(NoiseSchedule {
        t_train,
        betas,
        alphas,
        alphabar,
    })
}

impl NoiseSchedule {
    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t >= self.t_train {
            return Err(DiffusionError::Timestep { t, t_train: self.t_train });
        }
        Ok(())
    }

    /// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        self.check_t(t)?;
        if x0.len() != eps.len() {
            return Err(DiffusionError::Shape(format!("x0 has {} values, eps {}", x0.len(), eps.len())));
        }
        let ab = self.alphabar[t];
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| s * x + n * e).collect())
    }

    /// `S` timesteps evenly spaced over `[0, T)`, descending, always
    /// starting at `T - 1` and ending at 0 when `S > 1`.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::Config("need at least one sampling step".into()));
        }
        if steps > self.t_train {
            return Err(DiffusionError::Steps {
                steps,
                t_train: self.t_train,
            });
        }
        let last = (self.t_train - 1) as f64;
        if steps == 1 {
            return Ok(vec![self.t_train - 1]);
        }
        Ok((0..steps)
            .rev()
            .map(|i| (i as f64 * last / (steps - 1) as f64).round() as usize)
            .collect())
    }
}

/// Generic DDIM loop over a flat batch of `seeds.len()` chunks of
/// `item_len` values. `eps_fn(x_t, t)` predicts the noise for the whole
/// batch. Each chunk draws its starting noise (and, for `eta > 0`, its
/// per-step noise) from its own seeded stream.
pub fn ddim_sample_with(
    schedule: &NoiseSchedule,
    steps: usize,
    eta: f64,
    clip: bool,
    item_len: usize,
    seeds: &[u64],
    mut eps_fn: impl FnMut(&[f64], usize) -> Result<Vec<f64>, DiffusionError>,
) -> Result<Vec<Vec<f64>>, DiffusionError> {
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(DiffusionError::Config(format!("eta must be non-negative, got {eta}")));
    }
    let ts = schedule.ddim_timesteps(steps)?;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut x: Vec<f64> = rngs
        .iter_mut()
        .flat_map(|r| (0..item_len).map(|_| r.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>())
        .collect();
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alphabar[t];
        let ab_prev = ts.get(i + 1).map_or(1.0, |&p| schedule.alphabar[p]);
        let eps = eps_fn(&x, t)?;
        if eps.len() != x.len() {
            return Err(DiffusionError::Shape(format!("eps has {} values, expected {}", eps.len(), x.len())));
        }
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        for (k, (xv, &e)) in x.iter_mut().zip(&eps).enumerate() {
            let mut x0 = (*xv - (1.0 - ab).sqrt() * e) / ab.sqrt();
            let mut e = e;
            if clip {
                x0 = x0.clamp(-1.0, 1.0);
                e = (*xv - ab.sqrt() * x0) / (1.0 - ab).sqrt();
            }
            let mut next = ab_prev.sqrt() * x0 + dir * e;
            if sigma > 0.0 {
                next += sigma * rngs[k / item_len].sample::<f64, _>(StandardNormal);
            }
            *xv = next;
        }
    }
    Ok(x.chunks(item_len.max(1)).map(|c| c.to_vec()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub token_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub t_train: usize,
    pub ddim_steps: usize,
    pub eta: f64,
    /// Clip predicted clean chunks to `[-1, 1]` during sampling.
    pub clip_sample: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            token_dim: 128,
            depth: 4,
            heads: 4,
            horizon: HORIZON,
            action_dim: ACTION_DIM,
            t_train: 100,
            ddim_steps: 16,
            eta: 0.0,
            clip_sample: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let fail = |m: String| Err(DiffusionError::Config(m));
        if self.token_dim == 0 || self.token_dim % 2 != 0 {
            return fail(format!("token_dim must be positive and even, got {}", self.token_dim));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return fail("token_dim must be divisible by heads".into());
        }
        if self.horizon == 0 || self.action_dim == 0 {
            return fail("horizon and action_dim must be positive".into());
        }
        if self.t_train < 2 {
            return fail("t_train must be >= 2".into());
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.t_train {
            return Err(DiffusionError::Steps {
                steps: self.ddim_steps,
                t_train: self.t_train,
            });
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return fail("eta must be non-negative".into());
        }
        Ok(())
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }
}

/// Sinusoidal timestep features, `[t.len(), dim]`.
pub fn timestep_features(t: &[usize], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp() * ti as f64);
        let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|a| (a.sin(), a.cos())).unzip();
        out.extend(s);
        out.extend(c);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    in_proj: Linear,
    pos: ParamId,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    out_proj: Linear,
}

impl Denoiser {
    pub fn new<T: Scalar>(config: DenoiserConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self, DiffusionError> {
        config.validate()?;
        let d = config.token_dim;
        let in_proj = Linear::new(store, &format!("{PREFIX}.in"), config.action_dim, d, rng);
        let pos = store.uniform(format!("{PREFIX}.pos"), &[config.horizon, d], 0.1, rng);
        let time_in = Linear::new(store, &format!("{PREFIX}.time_in"), d, d, rng);
        let time_out = Linear::new(store, &format!("{PREFIX}.time_out"), d, d, rng);
        let blocks = (0..config.depth)
            .map(|i| TransformerBlock::new(store, &format!("{PREFIX}.block{i}"), d, config.heads, true, rng))
            .collect();
        let norm = LayerNorm::new(store, &format!("{PREFIX}.norm"), d);
        let out_proj = Linear::new(store, &format!("{PREFIX}.out"), d, config.action_dim, rng);
        Ok(Self {
            config,
            in_proj,
            pos,
            time_in,
            time_out,
            blocks,
            norm,
            out_proj,
        })
    }

    /// Predicted noise `[B, horizon, action_dim]` for noised chunks
    /// `x_t [B, horizon, action_dim]` at per-sample timesteps `t`, attending
    /// over observation tokens `obs [B, T_o, d]`.
    pub fn predict_eps<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_t: Var,
        t: &[usize],
        obs: Var,
    ) -> Result<Var, DiffusionError> {
        let c = &self.config;
        let b = t.len();
        if g.shape(x_t) != [b, c.horizon, c.action_dim] {
            return Err(DiffusionError::Shape(format!(
                "x_t {:?}, expected [{b}, {}, {}]",
                g.shape(x_t),
                c.horizon,
                c.action_dim
            )));
        }
        let os = g.shape(obs);
        if os.len() != 3 || os[0] != b || os[2] != c.token_dim {
            return Err(DiffusionError::Shape(format!("obs tokens {os:?}, expected [{b}, T_o, {}]", c.token_dim)));
        }
        if let Some(&bad) = t.iter().find(|&&ti| ti >= c.t_train) {
            return Err(DiffusionError::Timestep {
                t: bad,
                t_train: c.t_train,
            });
        }
        let d = c.token_dim;
        let feats = g.constant(Tensor::from_f64(&[b, d], &timestep_features(t, d)));
        let temb = self.time_in.forward(g, store, feats);
        let temb = g.silu(temb);
        let temb = self.time_out.forward(g, store, temb);

        let x = self.in_proj.forward(g, store, x_t);
        let pos = g.param(store, self.pos);
        let x = g.add_broadcast(x, pos);
        let mut x = g.add_group(x, temb);
        for block in &self.blocks {
            x = block.forward(g, store, x, Some(obs));
        }
        let x = self.norm.forward(g, store, x);
        Ok(self.out_proj.forward(g, store, x))
    }

    /// DDIM chunks in normalized action space, one per seed, for
    /// observation tokens `obs [B, T_o, d]`.
    pub fn sample<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        obs: &Tensor<T>,
        schedule: &NoiseSchedule,
        seeds: &[u64],
    ) -> Result<Vec<Vec<f64>>, DiffusionError> {
        ddim_sample(self, store, obs, schedule, self.config.ddim_steps, self.config.eta, seeds)
    }
}

/// DDIM sampling through the denoiser with an explicit step count and eta.
pub fn ddim_sample<T: Scalar>(
    den: &Denoiser,
    store: &ParamStore<T>,
    obs: &Tensor<T>,
    schedule: &NoiseSchedule,
    steps: usize,
    eta: f64,
    seeds: &[u64],
) -> Result<Vec<Vec<f64>>, DiffusionError> {
    let c = &den.config;
    if schedule.t_train != c.t_train {
        return Err(DiffusionError::Config(format!(
            "schedule has {} steps, denoiser expects {}",
            schedule.t_train, c.t_train
        )));
    }
    let b = seeds.len();
    if obs.shape().first() != Some(&b) {
        return Err(DiffusionError::Shape(format!("obs {:?} for {b} seeds", obs.shape())));
    }
    ddim_sample_with(schedule, steps, eta, c.clip_sample, c.chunk_len(), seeds, |x, t| {
        let mut g = Graph::<T>::new();
        let xv = g.constant(Tensor::from_f64(&[b, c.horizon, c.action_dim], x));
        let ov = g.constant(obs.clone());
        let eps = den.predict_eps(&mut g, store, xv, &vec![t; b], ov)?;
        Ok(g.value(eps).to_f64_vec())
    })
}

/// Timesteps and noise drawn for one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDraw {
    pub t: Vec<usize>,
    pub eps: Vec<f64>,
}

impl LossDraw {
    pub fn sample(schedule: &NoiseSchedule, batch: usize, chunk_len: usize, rng: &mut impl Rng) -> Self {
        let t = (0..batch).map(|_| rng.random_range(0..schedule.t_train)).collect();
        let eps = (0..batch * chunk_len).map(|_| rng.sample(StandardNormal)).collect();
        Self { t, eps }
    }
}

/// Epsilon-prediction MSE for clean chunks `x0` (flat, `B * chunk_len`)
/// under a fixed draw of timesteps and noise.
pub fn diffusion_loss_with<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    den: &Denoiser,
    schedule: &NoiseSchedule,
    x0: &[f64],
    obs: Var,
    draw: &LossDraw,
) -> Result<Var, DiffusionError> {
    let c = &den.config;
    let n = c.chunk_len();
    let b = draw.t.len();
    if x0.len() != b * n || draw.eps.len() != b * n {
        return Err(DiffusionError::Shape(format!("x0 {} / eps {} values for batch {b}", x0.len(), draw.eps.len())));
    }
    let mut xt = Vec::with_capacity(b * n);
    for (i, &t) in draw.t.iter().enumerate() {
        xt.extend(schedule.q_sample(&x0[i * n..(i + 1) * n], t, &draw.eps[i * n..(i + 1) * n])?);
    }
    let xv = g.constant(Tensor::from_f64(&[b, c.horizon, c.action_dim], &xt));
    let eps_hat = den.predict_eps(g, store, xv, &draw.t, obs)?;
    let target: Vec<T> = draw.eps.iter().map(|&e| T::lit(e)).collect();
    Ok(g.mse_loss(eps_hat, &target))
}

/// [`diffusion_loss_with`] with uniform timesteps and unit Gaussian noise.
pub fn diffusion_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    den: &Denoiser,
    schedule: &NoiseSchedule,
    x0: &[f64],
    obs: Var,
    rng: &mut impl Rng,
) -> Result<Var, DiffusionError> {
    let b = x0.len() / den.config.chunk_len();
    let draw = LossDraw::sample(schedule, b, den.config.chunk_len(), rng);
    diffusion_loss_with(g, store, den, schedule, x0, obs, &draw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{central_difference, spread_coords};
    use crate::nn::optim::{AdamW, AdamWConfig, CosineSchedule};

    /// Independent evaluation of the squared-cosine closed form.
    fn closed_form_alphabar(i: usize, t_train: usize) -> f64 {
        let f = |t: f64| ((t / t_train as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        f((i + 1) as f64) / f(0.0)
    }

    #[test]
    fn schedule_matches_closed_form() {
        let s = make_schedule(100).unwrap();
        assert!(s.alphabar[0] >= 0.999);
        assert!(s.alphabar[99] < 0.01);
        for i in 0..100 {
            assert!(s.betas[i] > 0.0 && s.betas[i] <= 0.999);
            if i > 0 {
                assert!(s.alphabar[i] < s.alphabar[i - 1]);
            }
            // Indices before the first capped beta follow the closed form.
            if s.betas[..=i].iter().all(|&b| b < 0.999) {
                assert!((s.alphabar[i] - closed_form_alphabar(i, 100)).abs() < 1e-12, "t = {i}");
            }
        }
        assert_eq!(s.betas.iter().filter(|&&b| b == 0.999).count(), 1);
        assert!(make_schedule(1).is_err());
        assert!(make_schedule(2).is_ok());
    }

    #[test]
    fn q_sample_examples() {
        let s = make_schedule(100).unwrap();
        let x0 = vec![0.3, -0.7, 1.0];
        let y = s.q_sample(&x0, 10, &[0.0; 3]).unwrap();
        for (a, b) in y.iter().zip(&x0) {
            assert_eq!(*a, s.alphabar[10].sqrt() * b);
        }
        // ab_0 is within 1e-3 of one, so x_0 sits close to the data.
        let y = s.q_sample(&x0, 0, &[1.0; 3]).unwrap();
        for (a, b) in y.iter().zip(&x0) {
            assert!((a - b).abs() < 0.03);
        }
        assert!(s.q_sample(&x0, 100, &[0.0; 3]).is_err());
        assert!(s.q_sample(&x0, 5, &[0.0; 2]).is_err());
    }

    #[test]
    fn q_sample_variance_monte_carlo() {
        let s = make_schedule(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for t in [5, 40, 90] {
            let n = 10_000;
            let xs: Vec<f64> = (0..n)
                .map(|_| s.q_sample(&[0.0], t, &[rng.sample(StandardNormal)]).unwrap()[0])
                .collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let want = 1.0 - s.alphabar[t];
            assert!((var / want - 1.0).abs() < 0.05, "t {t}: {var} vs {want}");
        }
    }

    #[test]
    fn ddim_timesteps_are_strided() {
        let s = make_schedule(100).unwrap();
        let ts = s.ddim_timesteps(16).unwrap();
        assert_eq!(ts.len(), 16);
        assert_eq!((ts[0], ts[15]), (99, 0));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.ddim_timesteps(100).unwrap(), (0..100).rev().collect::<Vec<_>>());
        assert_eq!(s.ddim_timesteps(101), Err(DiffusionError::Steps { steps: 101, t_train: 100 }));
    }

    #[test]
    fn perfect_denoiser_round_trip_recovers_x0() {
        let s = make_schedule(100).unwrap();
        let x0: Vec<f64> = (0..64).map(|i| ((i as f64) * 0.3).sin() * 0.9).collect();
        let oracle = |x: &[f64], t: usize| {
            let ab = s.alphabar[t];
            Ok(x.iter().zip(&x0).map(|(xt, x0)| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt()).collect())
        };
        for clip in [false, true] {
            let out = ddim_sample_with(&s, 100, 0.0, clip, 64, &[3], oracle).unwrap();
            let err = out[0].iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-3, "clip {clip}: {err}");
        }
    }

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            token_dim: 16,
            depth: 1,
            heads: 2,
            ..Default::default()
        }
    }

    fn build<T: Scalar>() -> (Denoiser, ParamStore<T>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let den = Denoiser::new(tiny_config(), &mut store, &mut rng).unwrap();
        (den, store)
    }

    fn obs_tensor(b: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_f64(&[b, 2, 16], &(0..b * 32).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    fn eps_of(den: &Denoiser, store: &ParamStore<f64>, x: &[f64], t: &[usize], obs: &Tensor<f64>) -> Vec<f64> {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::from_f64(&[t.len(), 16, 4], x));
        let ov = g.constant(obs.clone());
        let e = den.predict_eps(&mut g, store, xv, t, ov).unwrap();
        assert_eq!(g.shape(e), &[t.len(), 16, 4]);
        g.value(e).data().to_vec()
    }

    #[test]
    fn predict_eps_shape_and_cross_attention_live() {
        let (den, store) = build::<f64>();
        let x: Vec<f64> = (0..128).map(|i| (i as f64 * 0.1).cos()).collect();
        let a = eps_of(&den, &store, &x, &[3, 70], &obs_tensor(2, 1));
        let b = eps_of(&den, &store, &x, &[3, 70], &obs_tensor(2, 2));
        assert_eq!(a, eps_of(&den, &store, &x, &[3, 70], &obs_tensor(2, 1)));
        assert_ne!(a, b);
        // The second sample's output depends only on its own tokens.
        let mut mixed = obs_tensor(2, 1);
        mixed.data_mut()[32..].copy_from_slice(&obs_tensor(2, 2).data()[32..]);
        let c = eps_of(&den, &store, &x, &[3, 70], &mixed);
        assert_eq!(a[..64], c[..64]);
        assert_ne!(a[64..], c[64..]);
    }

    #[test]
    fn predict_eps_rejects_bad_shapes() {
        let (den, store) = build::<f64>();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::zeros(&[1, 16, 4]));
        let bad_obs = g.constant(Tensor::zeros(&[1, 2, 8]));
        assert!(matches!(den.predict_eps(&mut g, &store, xv, &[0], bad_obs), Err(DiffusionError::Shape(_))));
        let ov = g.constant(Tensor::zeros(&[1, 2, 16]));
        assert!(matches!(den.predict_eps(&mut g, &store, xv, &[100], ov), Err(DiffusionError::Timestep { .. })));
    }

    #[test]
    fn ddim_is_deterministic_and_shape_stable() {
        let (den, store) = build::<f64>();
        let s = make_schedule(100).unwrap();
        let obs = obs_tensor(2, 3);
        let a = ddim_sample(&den, &store, &obs, &s, 16, 0.0, &[1, 2]).unwrap();
        let b = ddim_sample(&den, &store, &obs, &s, 16, 0.0, &[1, 2]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        for steps in [100, 50] {
            let c = ddim_sample(&den, &store, &obs, &s, steps, 0.0, &[1, 2]).unwrap();
            assert!(c.iter().all(|ch| ch.len() == 64 && ch.iter().all(|v| v.is_finite())));
        }
        assert!(matches!(
            ddim_sample(&den, &store, &obs, &s, 101, 0.0, &[1, 2]),
            Err(DiffusionError::Steps { .. })
        ));
        let e1 = ddim_sample(&den, &store, &obs, &s, 16, 1.0, &[1, 2]).unwrap();
        assert_eq!(e1, ddim_sample(&den, &store, &obs, &s, 16, 1.0, &[1, 2]).unwrap());
    }

    #[test]
    fn oracle_denoiser_has_zero_loss_and_untrained_is_order_one() {
        let s = make_schedule(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draw = LossDraw::sample(&s, 4, 64, &mut rng);
        let x0 = vec![0.5; 256];
        // A denoiser that knows x0 inverts q_sample exactly.
        let mut loss = 0.0;
        for (i, &t) in draw.t.iter().enumerate() {
            let eps = &draw.eps[i * 64..(i + 1) * 64];
            let xt = s.q_sample(&x0[..64], t, eps).unwrap();
            let ab = s.alphabar[t];
            for (k, x) in xt.iter().enumerate() {
                let e = (x - ab.sqrt() * 0.5) / (1.0 - ab).sqrt();
                loss += (e - eps[k]).powi(2);
            }
        }
        assert!(loss / 256.0 < 1e-20);

        let (den, store) = build::<f64>();
        let mut g = Graph::new();
        let ov = g.constant(obs_tensor(4, 9));
        let l = diffusion_loss_with(&mut g, &store, &den, &s, &x0, ov, &draw).unwrap();
        let v = g.value(l).data()[0];
        assert!(v.is_finite() && v > 0.3 && v < 5.0, "untrained loss {v}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (den, store) = build::<f64>();
        let s = make_schedule(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let draw = LossDraw::sample(&s, 2, 64, &mut rng);
        let x0: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
        let obs = obs_tensor(2, 4);
        let eval = |st: &ParamStore<f64>, o: &Tensor<f64>| {
            let mut g = Graph::new();
            let ov = g.constant(o.clone());
            let l = diffusion_loss_with(&mut g, st, &den, &s, &x0, ov, &draw).unwrap();
            g.value(l).data()[0]
        };
        let mut g = Graph::new();
        let ov = g.input(obs.clone());
        let l = diffusion_loss_with(&mut g, &store, &den, &s, &x0, ov, &draw).unwrap();
        let grads = g.backward(l);
        for id in store.ids() {
            let analytic = grads.param(id).unwrap().to_vec();
            let base = store.entry(id).value.data().to_vec();
            let chk = central_difference(&base, &analytic, &spread_coords(base.len(), 5), 1e-5, 1e-4, |x| {
                let mut st = store.clone();
                st.entry_mut(id).value.data_mut().copy_from_slice(x);
                eval(&st, &obs)
            });
            assert!(chk.max_rel_err < 1e-4, "{}: {chk:?}", store.entry(id).name);
        }
        let analytic = grads.wrt(ov).unwrap().to_vec();
        let chk = central_difference(obs.data(), &analytic, &spread_coords(64, 16), 1e-5, 1e-4, |x| {
            eval(&store, &Tensor::new(&[2, 2, 16], x.to_vec()))
        });
        assert!(chk.max_rel_err < 1e-4, "obs: {chk:?}");
    }

    #[test]
    fn learns_a_single_mode_with_fixed_tokens() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = DenoiserConfig {
            token_dim: 32,
            depth: 2,
            heads: 4,
            ..Default::default()
        };
        let den = Denoiser::new(cfg, &mut store, &mut rng).unwrap();
        let s = make_schedule(100).unwrap();
        let mode: Vec<f64> = (0..64).map(|i| ((i % 4) as f64 - 1.5) * 0.4).collect();
        let batch = 16;
        let x0: Vec<f64> = mode.iter().copied().cycle().take(batch * 64).collect();
        let obs = Tensor::<f32>::zeros(&[batch, 2, 32]);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 1e-3,
                ..Default::default()
            },
            &store,
        );
        let lr = CosineSchedule {
            base_lr: 1e-3,
            warmup_steps: 50,
            total_steps: 1500,
        };
        let mut first = 0.0;
        let mut recent = Vec::new();
        for step in 0..1500 {
            let mut g = Graph::new();
            let ov = g.constant(obs.clone());
            let l = diffusion_loss(&mut g, &store, &den, &s, &x0, ov, &mut rng).unwrap();
            let v = g.value(l).data()[0] as f64;
            if step == 0 {
                first = v;
            }
            if step >= 1300 {
                recent.push(v);
            }
            let grads = g.backward(l);
            opt.step(&mut store, &grads, lr.lr(step));
        }
        let last = recent.iter().sum::<f64>() / recent.len() as f64;
        let out = den.sample(&store, &Tensor::zeros(&[1, 2, 32]), &s, &[0]).unwrap();
        let err = out[0].iter().zip(&mode).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(last < 0.05 && last * 10.0 < first, "loss {first} -> {last}");
        assert!(err < 0.05, "L-inf {err}");
    }
}
