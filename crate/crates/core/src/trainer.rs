//! Minibatch training: Adam with global-norm clipping, a triangular
//! cyclical learning rate, time-dropout on availability masks and dropout
//! in the encoder.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Graph, Matrix};
use crate::model::{Dropout, MaskedSequence, MlpShape, Modality, ModelConfig, ModelError, ModelInput, MrineModel, ObsModel, SeqBatch, Topology};
use crate::objective::{compute_tau, loss_total_graph, LossBatch, LossBreakdown, LossConfig, ObjectiveError};
use crate::statespace::BatchMask;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize, last_good: Box<MrineModel> },
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Objective(e.into())
    }
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub lr_warm_epochs: usize,
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub rho_t: f64,
    pub rho_d: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            lr_min: 0.001,
            lr_max: 0.01,
            lr_warm_epochs: 10,
            lr_decay: 0.99,
            clip_norm: 0.1,
            rho_t: 0.3,
            rho_d: 0.4,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.rho_t) {
            return bad("rho_t must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.rho_d) {
            return bad("rho_d must lie in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.batch_size == 0 || self.lr_warm_epochs == 0 {
            return bad("batch_size and lr_warm_epochs must be positive");
        }
        if !(self.lr_min > 0.0 && self.lr_max >= self.lr_min && self.lr_decay > 0.0) {
            return bad("learning-rate bounds are inconsistent");
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// Experiment presets from the hyperparameter tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Lorenz,
    GridSame,
    GridDiff,
    CenterOut,
}

/// Which network a preset row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Mrine,
    SsPoisson,
    SsGaussian,
}

impl std::str::FromStr for Preset {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lorenz" => Ok(Preset::Lorenz),
            "grid-same" => Ok(Preset::GridSame),
            "grid-diff" => Ok(Preset::GridDiff),
            "center-out" => Ok(Preset::CenterOut),
            _ => Err(TrainError::UnknownPreset(s.to_string())),
        }
    }
}

impl Preset {
    pub fn latent_dim(self) -> usize {
        match self {
            Preset::Lorenz => 32,
            _ => 64,
        }
    }

    pub fn model_config(self, variant: Variant, n_s: usize, n_y: usize) -> ModelConfig {
        let n = self.latent_dim();
        let mlp = MlpShape::new(3, 128);
        match variant {
            Variant::Mrine => ModelConfig::multiscale(n_s, n_y, n, n, mlp),
            Variant::SsPoisson => ModelConfig::single_scale(Modality::Poisson, n_s, n_y, n, n, mlp),
            Variant::SsGaussian => ModelConfig::single_scale(Modality::Gaussian, n_s, n_y, n, n, mlp),
        }
    }

    /// `(γ_s, γ_y, γ_x, γ_r)`.
    pub fn gammas(self, variant: Variant) -> (f64, f64, f64, f64) {
        match (self, variant) {
            (Preset::Lorenz, Variant::Mrine) => (250.0, 10.0, 30.0, 1e-3),
            (Preset::Lorenz, Variant::SsPoisson) => (100.0, 0.0, 30.0, 1e-4),
            (Preset::Lorenz, Variant::SsGaussian) => (0.0, 50.0, 30.0, 1e-4),
            (Preset::GridSame, Variant::Mrine) => (250.0, 10.0, 30.0, 1e-3),
            (Preset::GridSame, Variant::SsPoisson) => (100.0, 0.0, 30.0, 1e-4),
            (Preset::GridSame, Variant::SsGaussian) => (0.0, 10.0, 30.0, 1e-4),
            (Preset::GridDiff, Variant::Mrine) => (250.0, 5.0, 30.0, 1e-3),
            (Preset::GridDiff, Variant::SsPoisson) => (100.0, 0.0, 30.0, 1e-4),
            (Preset::GridDiff, Variant::SsGaussian) => (0.0, 5.0, 30.0, 1e-4),
            (Preset::CenterOut, Variant::Mrine) => (50.0, 5.0, 30.0, 1e-3),
            (Preset::CenterOut, Variant::SsPoisson) => (30.0, 0.0, 30.0, 1e-4),
            (Preset::CenterOut, Variant::SsGaussian) => (0.0, 5.0, 30.0, 1e-4),
        }
    }

    pub fn train_config(self, variant: Variant) -> TrainConfig {
        let (gamma_s, gamma_y, gamma_x, gamma_r) = self.gammas(variant);
        let (rho_d, epochs) = match self {
            Preset::Lorenz => (0.4, 200),
            Preset::GridSame | Preset::GridDiff => (0.1, 500),
            Preset::CenterOut => (0.1, 200),
        };
        TrainConfig {
            epochs,
            rho_t: 0.3,
            rho_d,
            clip_norm: 0.1,
            loss: LossConfig { horizons: vec![1, 2, 3, 4], gamma_s, gamma_y, gamma_x, gamma_r, ..LossConfig::default() },
            ..TrainConfig::default()
        }
    }
}

/// Triangular cycle of period `2·lr_warm_epochs`: linear rise from
/// `lr_min` to the current peak, linear fall back. The peak shrinks by
/// `lr_decay` each cycle.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.lr_warm_epochs;
    let cycle = epoch / (2 * warm);
    let pos = epoch % (2 * warm);
    let peak = cfg.lr_max * cfg.lr_decay.powi(cycle as i32);
    let frac = if pos <= warm { pos as f64 / warm as f64 } else { (2 * warm - pos) as f64 / warm as f64 };
    cfg.lr_min + (peak - cfg.lr_min) * frac
}

/// Sets each observed entry to 0 with probability `rho`.
pub fn drop_mask(mask: &BatchMask, rho: f64, rng: &mut impl Rng) -> BatchMask {
    let mut out = mask.clone();
    if rho == 0.0 {
        return out;
    }
    for b in 0..mask.batch() {
        for t in 0..mask.len() {
            if mask.get(b, t) && rng.gen::<f64>() < rho {
                out.set(b, t, false);
            }
        }
    }
    out
}

/// Time-dropout on both modality masks. Returns `(dropped, original)`.
pub fn time_dropout(
    mask_s: &BatchMask,
    mask_y: &BatchMask,
    rho: f64,
    rng: &mut impl Rng,
) -> Result<((BatchMask, BatchMask), (BatchMask, BatchMask))> {
    if !(0.0..1.0).contains(&rho) {
        return Err(TrainError::Config("rho_t must lie in [0, 1)".into()));
    }
    let ds = drop_mask(mask_s, rho, rng);
    let dy = drop_mask(mask_y, rho, rng);
    Ok(((ds, dy), (mask_s.clone(), mask_y.clone())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamState { m, v, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// L2 norm over all gradients.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}

/// One bias-corrected Adam update after global-norm clipping. Returns the
/// gradient norm before clipping.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &mut [Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    clip_norm: Option<f64>,
) -> f64 {
    let norm = match clip_norm {
        Some(c) => clip_global_norm(grads, c),
        None => global_norm(grads),
    };
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data.iter_mut().enumerate() {
            let gj = grads[i][j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *x -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    norm
}

/// Xavier-normal MLP weights, zero biases and near-identity LDMs.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<MrineModel> {
    Ok(MrineModel::init(config, seed)?)
}

/// Trials of both modalities. Every trial has the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub s: Vec<MaskedSequence>,
    pub y: Vec<MaskedSequence>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> TrialSet {
        TrialSet { s: idx.iter().map(|&i| self.s[i].clone()).collect(), y: idx.iter().map(|&i| self.y[i].clone()).collect() }
    }

    /// Model input for the trials `idx`, restricted to the modalities the
    /// topology reads.
    pub fn input(&self, idx: &[usize], topology: Topology) -> Result<ModelInput> {
        let s: Vec<&MaskedSequence> = idx.iter().map(|&i| &self.s[i]).collect();
        let y: Vec<&MaskedSequence> = idx.iter().map(|&i| &self.y[i]).collect();
        let (use_s, use_y) = match topology {
            Topology::Multiscale => (true, true),
            Topology::SingleScale(Modality::Poisson) => (true, false),
            Topology::SingleScale(Modality::Gaussian) => (false, true),
        };
        Ok(ModelInput {
            s: if use_s { Some(SeqBatch::from_sequences(&s)?) } else { None },
            y: if use_y { Some(SeqBatch::from_sequences(&y)?) } else { None },
        })
    }
}

/// τ for a model on its training trials: the data-derived ratio for
/// Poisson-plus-Gaussian models, 1 otherwise.
pub fn tau_for(config: &ModelConfig, train: &TrialSet) -> Result<f64> {
    let multi = config.topology()? == Topology::Multiscale;
    if multi && config.obs_model_s == ObsModel::Poisson {
        Ok(compute_tau(&train.s, &train.y)?)
    } else {
        Ok(1.0)
    }
}

/// One line of the epoch log. Epoch 0 evaluates the initial parameters;
/// epoch `e ≥ 1` reports the `e`-th pass, trained at `lr`. Loss fields are
/// per-trial means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_k")]
    pub l_k: f64,
    #[serde(rename = "L_smooth")]
    pub l_smooth: f64,
    #[serde(rename = "L_sm")]
    pub l_sm: f64,
    #[serde(rename = "L_l2")]
    pub l_l2: f64,
    pub total: f64,
    pub val_total: Option<f64>,
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.l_k += b.l_k;
    acc.l_smooth += b.l_smooth;
    acc.l_sm += b.l_sm;
    acc.l_l2 = b.l_l2;
    acc.total += b.total;
}

fn batches(n: usize, size: usize, order: &[usize]) -> Vec<Vec<usize>> {
    debug_assert_eq!(order.len(), n);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Mean total loss per trial, without any dropout.
pub fn evaluate(model: &MrineModel, data: &TrialSet, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let order: Vec<usize> = (0..data.len()).collect();
    let mut acc = LossBreakdown::default();
    for idx in batches(data.len(), cfg.batch_size, &order) {
        let input = data.input(&idx, model.topology())?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let (_, b) = loss_total_graph(&mut g, &bound, &LossBatch::new(input), &cfg.loss, None)?;
        accumulate(&mut acc, &b);
    }
    let n = data.len().max(1) as f64;
    acc.l_k /= n;
    acc.l_smooth /= n;
    acc.l_sm /= n;
    acc.total /= n;
    Ok(acc)
}

/// Trains `model` and returns it with the epoch log. `on_epoch` sees each
/// record as it is produced.
pub fn train_with(
    mut model: MrineModel,
    train: &TrialSet,
    val: Option<&TrialSet>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(MrineModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("no training trials".into()));
    }
    let topology = model.topology();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.named_params().iter().map(|(_, m)| m.data.len()));
    let mut log = Vec::with_capacity(cfg.epochs + 1);

    let init = evaluate(&model, train, cfg)?;
    let val0 = val.map(|v| evaluate(&model, v, cfg)).transpose()?.map(|b| b.total);
    let rec = EpochRecord {
        epoch: 0,
        lr: lr_at(0, cfg),
        l_k: init.l_k,
        l_smooth: init.l_smooth,
        l_sm: init.l_sm,
        l_l2: init.l_l2,
        total: init.total,
        val_total: val0,
    };
    on_epoch(&rec);
    log.push(rec);

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(epoch - 1, cfg);
        let last_good = model.clone();
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        for idx in batches(train.len(), cfg.batch_size, &order) {
            let clean = train.input(&idx, topology)?;
            let mut input = clean.clone();
            if let Some(s) = input.s.as_mut() {
                *s = s.with_mask(drop_mask(&s.mask, cfg.rho_t, &mut rng));
            }
            if let Some(y) = input.y.as_mut() {
                *y = y.with_mask(drop_mask(&y.mask, cfg.rho_t, &mut rng));
            }
            let batch = LossBatch {
                input,
                original_s: clean.s.as_ref().map(|b| b.mask.clone()),
                original_y: clean.y.as_ref().map(|b| b.mask.clone()),
            };
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let drop = (cfg.rho_d > 0.0).then_some(Dropout { rate: cfg.rho_d, rng: &mut rng });
            let (loss, b) = loss_total_graph(&mut g, &bound, &batch, &cfg.loss, drop)?;
            if !b.total.is_finite() {
                return Err(TrainError::NonFinite { epoch, last_good: Box::new(last_good) });
            }
            g.backward(loss).map_err(ModelError::from)?;
            let mut grads: Vec<Vec<f64>> = bound
                .leaves
                .iter()
                .map(|&t| g.grad(t).map_or_else(|| vec![0.0; g.shape(t).numel()], <[f64]>::to_vec))
                .collect();
            if grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite { epoch, last_good: Box::new(last_good) });
            }
            let mut params = model.params_mut();
            adam_step(&mut params, &mut grads, &mut adam, lr, Some(cfg.clip_norm));
            accumulate(&mut acc, &b);
        }
        if !model.is_finite() {
            return Err(TrainError::NonFinite { epoch, last_good: Box::new(last_good) });
        }
        let n = train.len() as f64;
        let val_total = val.map(|v| evaluate(&model, v, cfg)).transpose()?.map(|b| b.total);
        let rec = EpochRecord {
            epoch,
            lr,
            l_k: acc.l_k / n,
            l_smooth: acc.l_smooth / n,
            l_sm: acc.l_sm / n,
            l_l2: acc.l_l2,
            total: acc.total / n,
            val_total,
        };
        on_epoch(&rec);
        log.push(rec);
    }
    Ok((model, log))
}

pub fn train(
    model: MrineModel,
    train_set: &TrialSet,
    val: Option<&TrialSet>,
    cfg: &TrainConfig,
) -> Result<(MrineModel, Vec<EpochRecord>)> {
    train_with(model, train_set, val, cfg, |_| {})
}
