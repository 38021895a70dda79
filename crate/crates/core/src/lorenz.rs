//! Stochastic Lorenz trajectories and synthetic Poisson/Gaussian
//! observations of them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::path::Path;

use crate::dataio::{write_bundle, DataError, DatasetBundle, Manifest, TrialInfo, BUNDLE_SCHEMA};
use crate::diffcore::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LorenzError {
    #[error("trajectory diverged (|x| = {0:e})")]
    Diverged(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, LorenzError>;

const DIVERGENCE: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LorenzConfig {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
    /// Variance of the per-step state noise.
    pub dyn_noise_var: f64,
    /// Scale the state noise by √dt (Brownian increments) instead of adding
    /// it per step as is.
    pub sqrt_dt_noise: bool,
    pub n_trials: usize,
    pub trial_len: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        LorenzConfig {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.006,
            dyn_noise_var: 0.01,
            sqrt_dt_noise: false,
            n_trials: 750,
            trial_len: 200,
            burn_in: 500,
            seed: 0,
        }
    }
}

impl LorenzConfig {
    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.n_trials == 0 || self.trial_len == 0 || self.dyn_noise_var < 0.0 {
            return Err(LorenzError::Config("dt, counts and noise variance must be positive".into()));
        }
        Ok(())
    }
}

/// Drift of the Lorenz system.
pub fn lorenz_drift(x: [f64; 3], sigma: f64, rho: f64, beta: f64) -> [f64; 3] {
    [sigma * (x[1] - x[0]), x[0] * (rho - x[2]) - x[1], x[0] * x[1] - beta * x[2]]
}

/// One Euler–Maruyama step with the given noise draw.
pub fn euler_step(x: [f64; 3], cfg: &LorenzConfig, noise: [f64; 3]) -> [f64; 3] {
    let f = lorenz_drift(x, cfg.sigma, cfg.rho, cfg.beta);
    let scale = if cfg.sqrt_dt_noise { cfg.dt.sqrt() } else { 1.0 };
    [0, 1, 2].map(|i| x[i] + f[i] * cfg.dt + scale * noise[i])
}

/// Latent trials, normalized over the whole set to zero mean and a
/// maximum absolute value of 1 per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTrials {
    pub trials: Vec<Matrix>,
    /// Largest unnormalized coordinate magnitude seen.
    pub raw_max_abs: f64,
    pub mean: [f64; 3],
    pub scale: [f64; 3],
}

/// Unnormalized trajectory of `steps` states starting after one step from
/// `start`.
pub fn integrate(start: [f64; 3], steps: usize, cfg: &LorenzConfig, rng: &mut impl Rng) -> Result<Vec<[f64; 3]>> {
    let noise = Normal::new(0.0, cfg.dyn_noise_var.sqrt()).map_err(|e| LorenzError::Config(e.to_string()))?;
    let mut x = start;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let q = if cfg.dyn_noise_var > 0.0 { [0; 3].map(|_| noise.sample(rng)) } else { [0.0; 3] };
        x = euler_step(x, cfg, q);
        let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if !(m < DIVERGENCE) {
            return Err(LorenzError::Diverged(m));
        }
        out.push(x);
    }
    Ok(out)
}

/// Each trial starts from a uniform random point in `[-10, 10]³`, runs a
/// fresh burn-in, then records `trial_len` steps.
pub fn simulate_latents(cfg: &LorenzConfig) -> Result<LatentTrials> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut raw = Vec::with_capacity(cfg.n_trials);
    for _ in 0..cfg.n_trials {
        let start = [0; 3].map(|_| rng.gen_range(-10.0..10.0));
        let burn = integrate(start, cfg.burn_in, cfg, &mut rng)?;
        let from = burn.last().copied().unwrap_or(start);
        raw.push(integrate(from, cfg.trial_len, cfg, &mut rng)?);
    }
    Ok(normalize(raw))
}

fn normalize(raw: Vec<Vec<[f64; 3]>>) -> LatentTrials {
    let count = raw.iter().map(Vec::len).sum::<usize>() as f64;
    let mut mean = [0.0; 3];
    let mut raw_max_abs = 0.0f64;
    for x in raw.iter().flatten() {
        for i in 0..3 {
            mean[i] += x[i] / count;
            raw_max_abs = raw_max_abs.max(x[i].abs());
        }
    }
    let mut scale = [0.0f64; 3];
    for x in raw.iter().flatten() {
        for i in 0..3 {
            scale[i] = scale[i].max((x[i] - mean[i]).abs());
        }
    }
    let scale = scale.map(|s| if s > 0.0 { s } else { 1.0 });
    let trials = raw
        .iter()
        .map(|tr| {
            let data = tr.iter().flat_map(|x| (0..3).map(move |i| (x[i] - mean[i]) / scale[i])).collect();
            Matrix::from_vec(tr.len(), 3, data)
        })
        .collect();
    LatentTrials { trials, raw_max_abs, mean, scale }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObsConfig {
    pub n_y: usize,
    pub n_s: usize,
    pub gauss_noise_var: f64,
    /// Baseline firing rate in spikes per second.
    pub base_rate_hz: f64,
    pub bin_s: f64,
    pub seed: u64,
}

impl Default for ObsConfig {
    fn default() -> Self {
        ObsConfig { n_y: 20, n_s: 10, gauss_noise_var: 5.0, base_rate_hz: 5.0, bin_s: 0.005, seed: 0 }
    }
}

impl ObsConfig {
    pub fn log_base_rate(&self) -> f64 {
        (self.base_rate_hz * self.bin_s).ln()
    }
}

/// Standard-normal mixing matrix (`rows × 3`).
pub fn mixing_matrix(rows: usize, rng: &mut impl Rng) -> Matrix {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    Matrix::from_vec(rows, 3, (0..rows * 3).map(|_| n.sample(rng)).collect())
}

/// `y = C_y x + N(0, σ² I)` per step.
pub fn gen_gaussian_obs(latents: &[Matrix], c_y: &Matrix, noise_var: f64, rng: &mut impl Rng) -> Vec<Matrix> {
    let noise = (noise_var > 0.0).then(|| Normal::new(0.0, noise_var.sqrt()).expect("positive variance"));
    latents
        .iter()
        .map(|x| {
            let mut y = x.matmul(&c_y.transpose());
            if let Some(n) = &noise {
                y.data.iter_mut().for_each(|v| *v += n.sample(rng));
            }
            y
        })
        .collect()
}

/// Counts `~ Poisson(exp(C_s x + log_base))` per bin.
pub fn gen_poisson_obs(latents: &[Matrix], c_s: &Matrix, log_base: f64, rng: &mut impl Rng) -> Vec<Matrix> {
    latents
        .iter()
        .map(|x| {
            let mut s = x.matmul(&c_s.transpose());
            s.data.iter_mut().for_each(|v| {
                let rate = (*v + log_base).exp();
                *v = Poisson::new(rate).expect("positive rate").sample(rng);
            });
            s
        })
        .collect()
}

/// Latents, both observation streams and the generating matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimBundle {
    pub latents: LatentTrials,
    pub gaussian: Vec<Matrix>,
    pub spikes: Vec<Matrix>,
    pub c_y: Matrix,
    pub c_s: Matrix,
    pub lorenz: LorenzConfig,
    pub obs: ObsConfig,
}

pub fn simulate(lorenz: &LorenzConfig, obs: &ObsConfig) -> Result<SimBundle> {
    if obs.n_s == 0 || obs.n_y == 0 {
        return Err(LorenzError::Config("channel counts must be positive".into()));
    }
    let latents = simulate_latents(lorenz)?;
    let mut rng = ChaCha8Rng::seed_from_u64(obs.seed);
    let c_y = mixing_matrix(obs.n_y, &mut rng);
    let c_s = mixing_matrix(obs.n_s, &mut rng);
    let gaussian = gen_gaussian_obs(&latents.trials, &c_y, obs.gauss_noise_var, &mut rng);
    let spikes = gen_poisson_obs(&latents.trials, &c_s, obs.log_base_rate(), &mut rng);
    Ok(SimBundle { latents, gaussian, spikes, c_y, c_s, lorenz: lorenz.clone(), obs: obs.clone() })
}

/// Gaussian availability for one trial: every `ratio`-th step from 0.
pub fn subsample_mask(len: usize, ratio: usize) -> Vec<bool> {
    (0..len).map(|t| t % ratio.max(1) == 0).collect()
}

/// Dataset bundle of a simulation: spikes at every step, Gaussian samples
/// kept at every `ratio`-th step, true latents as the behavior target.
pub fn to_bundle(sim: &SimBundle, ratio: usize, name: &str) -> Result<DatasetBundle> {
    if ratio == 0 {
        return Err(LorenzError::Config("timescale ratio must be positive".into()));
    }
    let lens: Vec<usize> = sim.latents.trials.iter().map(|m| m.rows).collect();
    Ok(DatasetBundle {
        manifest: Manifest {
            schema_version: BUNDLE_SCHEMA,
            name: name.to_string(),
            n_s: sim.obs.n_s,
            n_y: sim.obs.n_y,
            base_step_ms: sim.obs.bin_s * 1000.0,
            trials: lens.iter().enumerate().map(|(i, &len)| TrialInfo { id: format!("trial{i:04}"), len }).collect(),
            seeds: vec![sim.lorenz.seed, sim.obs.seed],
            behavior_dim: 3,
            timescale_ratio_y: ratio,
        },
        spikes: sim.spikes.clone(),
        gaussian: sim.gaussian.clone(),
        mask_s: lens.iter().map(|&len| vec![true; len]).collect(),
        mask_y: lens.iter().map(|&len| subsample_mask(len, ratio)).collect(),
        behavior: sim.latents.trials.clone(),
    })
}

pub fn export_bundle(sim: &SimBundle, ratio: usize, name: &str, dir: &Path) -> std::result::Result<DatasetBundle, DataError> {
    let bundle = to_bundle(sim, ratio, name).map_err(|e| DataError::Invalid(e.to_string()))?;
    write_bundle(&bundle, dir)?;
    Ok(bundle)
}
