//! Training objective: k-step-ahead prediction, smoothed reconstruction,
//! consecutive-step KL smoothness, likelihood scaling and the L2 penalty.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::diffcore::{Graph, Shape, Tensor};
use crate::model::{
    decode_heads, encode_multiscale, filter_multiscale, BoundModel, Dropout, MaskedSequence, ModelError, ModelInput,
    MrineModel, ObsModel, SeqBatch,
};
use crate::statespace::{emit_embedding, kalman_smooth, kstep_predict, stack_states, stack_variances, BatchMask};

/// Floor on per-channel mean rates when computing τ.
pub const TAU_RATE_FLOOR: f64 = 1e-3;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("negative spike count {0}")]
    NegativeCount(f64),
    #[error("rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("horizon set is empty")]
    EmptyHorizons,
    #[error("horizon {k} does not fit a sequence of length {len}")]
    HorizonTooLong { k: usize, len: usize },
    #[error("{0} modality has no observed step")]
    AllMasked(&'static str),
    #[error("tau must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("slices differ in length")]
    LengthMismatch,
}

impl From<crate::statespace::StateSpaceError> for ObjectiveError {
    fn from(e: crate::statespace::StateSpaceError) -> Self {
        ObjectiveError::Model(e.into())
    }
}

impl From<crate::diffcore::DiffError> for ObjectiveError {
    fn from(e: crate::diffcore::DiffError) -> Self {
        ObjectiveError::Model(e.into())
    }
}

type Result<T> = std::result::Result<T, ObjectiveError>;

// ------------------------------------------------------------ host forms

/// `Σ s·ln λ − λ − ln Γ(s+1)`.
pub fn poisson_loglik(s: &[f64], rates: &[f64]) -> Result<f64> {
    if s.len() != rates.len() {
        return Err(ObjectiveError::LengthMismatch);
    }
    let mut acc = 0.0;
    for (&k, &l) in s.iter().zip(rates) {
        if k < 0.0 {
            return Err(ObjectiveError::NegativeCount(k));
        }
        if l <= 0.0 {
            return Err(ObjectiveError::NonPositiveRate(l));
        }
        acc += k * l.ln() - l - ln_gamma(k + 1.0);
    }
    Ok(acc)
}

/// Unit-variance Gaussian log-density summed over elements.
pub fn gaussian_loglik(y: &[f64], means: &[f64]) -> Result<f64> {
    if y.len() != means.len() {
        return Err(ObjectiveError::LengthMismatch);
    }
    Ok(y.iter().zip(means).map(|(a, m)| -HALF_LN_2PI - 0.5 * (a - m) * (a - m)).sum())
}

/// `KL(Poisson(λ1) ‖ Poisson(λ2))`.
pub fn kl_poisson(l1: f64, l2: f64) -> Result<f64> {
    for l in [l1, l2] {
        if l <= 0.0 || l.is_nan() {
            return Err(ObjectiveError::NonPositiveRate(l));
        }
    }
    Ok(l1 * (l1 / l2).ln() - l1 + l2)
}

/// KL between unit-variance Gaussians.
pub fn kl_gaussian_unitvar(m1: f64, m2: f64) -> f64 {
    0.5 * (m1 - m2) * (m1 - m2)
}

/// `KL(N(m1, v1) ‖ N(m2, v2))` for scalars.
pub fn kl_gaussian_marginal(m1: f64, v1: f64, m2: f64, v2: f64) -> Result<f64> {
    for v in [v1, v2] {
        if v <= 0.0 || v.is_nan() {
            return Err(ObjectiveError::NonPositiveVariance(v));
        }
    }
    Ok(0.5 * (v2 / v1).ln() + (v1 + (m1 - m2) * (m1 - m2)) / (2.0 * v2) - 0.5)
}

/// Ratio of the mean per-step Gaussian log-likelihood under the channel
/// means to the mean per-step Poisson log-likelihood under the channel mean
/// rates, both on observed steps only.
pub fn compute_tau(s: &[MaskedSequence], y: &[MaskedSequence]) -> Result<f64> {
    let (s_mean, s_steps) = channel_means(s).ok_or(ObjectiveError::AllMasked("poisson"))?;
    let (y_mean, y_steps) = channel_means(y).ok_or(ObjectiveError::AllMasked("gaussian"))?;
    let rates: Vec<f64> = s_mean.iter().map(|&r| r.max(TAU_RATE_FLOOR)).collect();

    let mut ll_s = 0.0;
    for seq in s {
        for t in (0..seq.len()).filter(|&t| seq.mask[t]) {
            ll_s += poisson_loglik(seq.values.row(t), &rates)?;
        }
    }
    let mut ll_y = 0.0;
    for seq in y {
        for t in (0..seq.len()).filter(|&t| seq.mask[t]) {
            ll_y += gaussian_loglik(seq.values.row(t), &y_mean)?;
        }
    }
    let tau = (ll_y / y_steps as f64) / (ll_s / s_steps as f64);
    if !(tau.is_finite() && tau > 0.0) {
        return Err(ObjectiveError::InvalidTau(tau));
    }
    Ok(tau)
}

fn channel_means(seqs: &[MaskedSequence]) -> Option<(Vec<f64>, usize)> {
    let width = seqs.first()?.width();
    let mut sum = vec![0.0; width];
    let mut steps = 0usize;
    for seq in seqs {
        for t in (0..seq.len()).filter(|&t| seq.mask[t]) {
            sum.iter_mut().zip(seq.values.row(t)).for_each(|(a, v)| *a += v);
            steps += 1;
        }
    }
    (steps > 0).then(|| (sum.into_iter().map(|v| v / steps as f64).collect(), steps))
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub horizons: Vec<usize>,
    pub tau: f64,
    pub gamma_s: f64,
    pub gamma_y: f64,
    pub gamma_x: f64,
    pub gamma_r: f64,
    /// Leading latent dimensions under the smoothness penalty; `None` means
    /// half of `n_x`.
    pub x_smooth_dims: Option<usize>,
    pub enable_l_smooth: bool,
    pub enable_sm_s: bool,
    pub enable_sm_y: bool,
    pub enable_sm_x: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            horizons: vec![1, 2, 3, 4],
            tau: 1.0,
            gamma_s: 0.0,
            gamma_y: 0.0,
            gamma_x: 0.0,
            gamma_r: 0.0,
            x_smooth_dims: None,
            enable_l_smooth: true,
            enable_sm_s: true,
            enable_sm_y: true,
            enable_sm_x: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(ObjectiveError::EmptyHorizons);
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(ObjectiveError::InvalidTau(self.tau));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_k: f64,
    /// `(k, term)` per horizon.
    pub l_k_per_horizon: Vec<(usize, f64)>,
    pub l_k_s: f64,
    pub l_k_y: f64,
    pub l_smooth: f64,
    pub l_sm: f64,
    pub l_sm_s: f64,
    pub l_sm_y: f64,
    pub l_sm_x: f64,
    pub l_l2: f64,
    pub total: f64,
    /// `l_k` and `l_smooth` divided by their observed-row counts.
    pub l_k_per_step: f64,
    pub l_smooth_per_step: f64,
}

/// A training or evaluation batch. `input` carries the masks used for
/// inference and for the reconstruction terms; the `original_*` masks
/// (before time-dropout) select the pairs of the smoothness terms.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub input: ModelInput,
    pub original_s: Option<BatchMask>,
    pub original_y: Option<BatchMask>,
}

impl LossBatch {
    pub fn new(input: ModelInput) -> Self {
        let original_s = input.s.as_ref().map(|b| b.mask.clone());
        let original_y = input.y.as_ref().map(|b| b.mask.clone());
        LossBatch { input, original_s, original_y }
    }
}

// ---------------------------------------------------------- graph terms

/// `[B, T - start, 1]` 0/1 weights from mask rows `start..`.
fn row_weights(g: &mut Graph, mask: &BatchMask, start: usize) -> Result<(Tensor, usize)> {
    let (batch, len) = (mask.batch(), mask.len());
    let mut w = Vec::with_capacity(batch * (len - start));
    for b in 0..batch {
        w.extend((start..len).map(|t| if mask.get(b, t) { 1.0 } else { 0.0 }));
    }
    let count = w.iter().filter(|&&v| v > 0.0).count();
    Ok((g.constant(Shape::new(batch, len - start, 1), w)?, count))
}

fn target_rows(g: &mut Graph, data: &SeqBatch, start: usize) -> Result<Tensor> {
    let (batch, len, w) = (data.batch(), data.len(), data.width);
    let mut v = Vec::with_capacity(batch * (len - start) * w);
    for b in 0..batch {
        v.extend_from_slice(&data.values[(b * len + start) * w..(b + 1) * len * w]);
    }
    Ok(g.constant(Shape::new(batch, len - start, w), v)?)
}

/// Log-likelihood of `data` rows `start..` (observed only) under the
/// prediction `pred` (`[B, T - start, n]`). Returns the sum and the number
/// of observed rows.
fn loglik_rows(
    g: &mut Graph,
    model: ObsModel,
    pred: Tensor,
    data: &SeqBatch,
    start: usize,
) -> Result<(Tensor, usize)> {
    let (weights, count) = row_weights(g, &data.mask, start)?;
    let target = target_rows(g, data, start)?;
    let per_elem = match model {
        ObsModel::Poisson => {
            let log_rate = g.log(pred);
            let sl = g.mul(target, log_rate)?;
            g.sub(sl, pred)?
        }
        ObsModel::Gaussian => {
            let d = g.sub(target, pred)?;
            let sq = g.square(d);
            let h = g.scale(sq, -0.5);
            g.add_scalar(h, -HALF_LN_2PI)
        }
    };
    let masked = g.mul(per_elem, weights)?;
    let mut total = g.sum(masked);
    if model == ObsModel::Poisson {
        let (len, w) = (data.len(), data.width);
        let mut c = 0.0;
        for b in 0..data.batch() {
            for t in (start..len).filter(|&t| data.mask.get(b, t)) {
                let o = (b * len + t) * w;
                c += data.values[o..o + w].iter().map(|&k| ln_gamma(k + 1.0)).sum::<f64>();
            }
        }
        total = g.add_scalar(total, -c);
    }
    Ok((total, count))
}

/// Negative scaled log-likelihood of both modalities for embeddings `a`
/// whose row 0 refers to step `start`.
struct ReconTerm {
    s: Option<Tensor>,
    y: Option<Tensor>,
    rows: usize,
}

fn recon_term(g: &mut Graph, model: &BoundModel, a: Tensor, input: &ModelInput, start: usize, tau: f64) -> Result<ReconTerm> {
    let heads = decode_heads(g, model, a)?;
    let mut out = ReconTerm { s: None, y: None, rows: 0 };
    if let (Some(pred), Some(data)) = (heads.s, input.s.as_ref()) {
        let obs = model.config.obs_model_s;
        let (ll, n) = loglik_rows(g, obs, pred, data, start)?;
        let scale = if obs == ObsModel::Poisson { -tau } else { -1.0 };
        out.s = Some(g.scale(ll, scale));
        out.rows += n;
    }
    if let (Some(pred), Some(data)) = (heads.y, input.y.as_ref()) {
        let (ll, n) = loglik_rows(g, ObsModel::Gaussian, pred, data, start)?;
        out.y = Some(g.scale(ll, -1.0));
        out.rows += n;
    }
    Ok(out)
}

fn add_opt(g: &mut Graph, a: Option<Tensor>, b: Option<Tensor>) -> Result<Option<Tensor>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(g.add(a, b)?),
        (x, None) | (None, x) => x,
    })
}

fn zero(g: &mut Graph) -> Tensor {
    g.scalar_constant(0.0)
}

/// Flattened row indices of consecutive observed pairs per sequence.
fn consecutive_pairs(mask: &BatchMask) -> (Vec<usize>, Vec<usize>) {
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for b in 0..mask.batch() {
        let obs: Vec<usize> = (0..mask.len()).filter(|&t| mask.get(b, t)).collect();
        for w in obs.windows(2) {
            first.push(b * mask.len() + w[0]);
            second.push(b * mask.len() + w[1]);
        }
    }
    (first, second)
}

fn gather_pairs(g: &mut Graph, x: Tensor, mask: &BatchMask) -> Result<Option<(Tensor, Tensor)>> {
    let (i1, i2) = consecutive_pairs(mask);
    if i1.is_empty() {
        return Ok(None);
    }
    let s = g.shape(x);
    let flat = g.reshape(x, Shape::new(1, s.batch * s.rows, s.cols))?;
    Ok(Some((g.gather_rows(flat, &i1)?, g.gather_rows(flat, &i2)?)))
}

fn kl_poisson_graph(g: &mut Graph, l1: Tensor, l2: Tensor) -> Result<Tensor> {
    let ln1 = g.log(l1);
    let ln2 = g.log(l2);
    let d = g.sub(ln1, ln2)?;
    let a = g.mul(l1, d)?;
    let b = g.sub(a, l1)?;
    let c = g.add(b, l2)?;
    Ok(g.sum(c))
}

fn kl_unitvar_graph(g: &mut Graph, m1: Tensor, m2: Tensor) -> Result<Tensor> {
    let d = g.sub(m1, m2)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 0.5))
}

fn kl_marginal_graph(g: &mut Graph, m1: Tensor, v1: Tensor, m2: Tensor, v2: Tensor) -> Result<Tensor> {
    let ratio = g.div(v2, v1)?;
    let lr = g.log(ratio);
    let half_lr = g.scale(lr, 0.5);
    let d = g.sub(m1, m2)?;
    let sq = g.square(d);
    let num = g.add(v1, sq)?;
    let q = g.div(num, v2)?;
    let hq = g.scale(q, 0.5);
    let s = g.add(half_lr, hq)?;
    let s = g.add_scalar(s, -0.5);
    Ok(g.sum(s))
}

fn l2_penalty(g: &mut Graph, model: &BoundModel) -> Result<Tensor> {
    let mut acc = zero(g);
    for &w in &model.l2_weights {
        let sq = g.square(w);
        let s = g.sum(sq);
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

/// Graph form of the total loss, for backpropagation. `drop` enables
/// training-time dropout in the encoder.
pub fn loss_total_graph(
    g: &mut Graph,
    model: &BoundModel,
    batch: &LossBatch,
    cfg: &LossConfig,
    drop: Option<Dropout<'_>>,
) -> Result<(Tensor, LossBreakdown)> {
    cfg.validate()?;
    let input = &batch.input;
    let len = input.len();
    if let Some(&k) = cfg.horizons.iter().find(|&&k| k >= len) {
        return Err(ObjectiveError::HorizonTooLong { k, len });
    }
    let enc = encode_multiscale(g, model, input, drop)?;
    let filt = filter_multiscale(g, model, &enc)?;
    let x_filt = stack_states(g, &filt.x_filt)?;
    let mut out = LossBreakdown::default();

    // k-step-ahead prediction through the multiscale LDM.
    let mut l_k = zero(g);
    let mut rows_k = 0;
    for &k in &cfg.horizons {
        let pred = kstep_predict(g, model.ldm_m.a, x_filt, k)?;
        let a = emit_embedding(g, model.ldm_m.c, pred)?;
        let term = recon_term(g, model, a, input, k, cfg.tau)?;
        let both = add_opt(g, term.s, term.y)?.unwrap_or_else(|| zero(g));
        out.l_k_per_horizon.push((k, g.scalar(both)));
        out.l_k_s += term.s.map_or(0.0, |t| g.scalar(t));
        out.l_k_y += term.y.map_or(0.0, |t| g.scalar(t));
        rows_k += term.rows;
        l_k = g.add(l_k, both)?;
    }
    out.l_k = g.scalar(l_k);
    out.l_k_per_step = out.l_k / rows_k.max(1) as f64;
    let mut total = l_k;

    let want_sm_s = cfg.enable_sm_s && cfg.gamma_s != 0.0 && model.dec_s.is_some();
    let want_sm_y = cfg.enable_sm_y && cfg.gamma_y != 0.0 && model.dec_y.is_some();
    let want_sm_x = cfg.enable_sm_x && cfg.gamma_x != 0.0;
    if cfg.enable_l_smooth || want_sm_s || want_sm_y || want_sm_x {
        let sm = kalman_smooth(g, &model.ldm_m, &filt)?;
        let x_sm = stack_states(g, &sm.x_smooth)?;
        let a_sm = emit_embedding(g, model.ldm_m.c, x_sm)?;

        if cfg.enable_l_smooth {
            let term = recon_term(g, model, a_sm, input, 0, cfg.tau)?;
            let l = add_opt(g, term.s, term.y)?.unwrap_or_else(|| zero(g));
            out.l_smooth = g.scalar(l);
            out.l_smooth_per_step = out.l_smooth / term.rows.max(1) as f64;
            total = g.add(total, l)?;
        }

        let mut l_sm = zero(g);
        if want_sm_s || want_sm_y {
            let heads = decode_heads(g, model, a_sm)?;
            if want_sm_s {
                if let (Some(pred), Some(mask)) = (heads.s, batch.original_s.as_ref()) {
                    if let Some((p1, p2)) = gather_pairs(g, pred, mask)? {
                        let kl = match model.config.obs_model_s {
                            ObsModel::Poisson => kl_poisson_graph(g, p1, p2)?,
                            ObsModel::Gaussian => kl_unitvar_graph(g, p1, p2)?,
                        };
                        let t = g.scale(kl, cfg.gamma_s);
                        out.l_sm_s = g.scalar(t);
                        l_sm = g.add(l_sm, t)?;
                    }
                }
            }
            if want_sm_y {
                if let (Some(pred), Some(mask)) = (heads.y, batch.original_y.as_ref()) {
                    if let Some((p1, p2)) = gather_pairs(g, pred, mask)? {
                        let kl = kl_unitvar_graph(g, p1, p2)?;
                        let t = g.scale(kl, cfg.gamma_y);
                        out.l_sm_y = g.scalar(t);
                        l_sm = g.add(l_sm, t)?;
                    }
                }
            }
        }
        if want_sm_x {
            let n_x = model.config.n_x;
            let d = cfg.x_smooth_dims.unwrap_or(n_x / 2).min(n_x);
            if d > 0 && len > 1 {
                let var = stack_variances(g, &sm.sigma_smooth)?;
                let m = g.slice_cols(x_sm, 0, d)?;
                let v = g.slice_cols(var, 0, d)?;
                let m1 = g.slice_rows(m, 0, len - 1)?;
                let m2 = g.slice_rows(m, 1, len - 1)?;
                let v1 = g.slice_rows(v, 0, len - 1)?;
                let v2 = g.slice_rows(v, 1, len - 1)?;
                let kl = kl_marginal_graph(g, m1, v1, m2, v2)?;
                let t = g.scale(kl, cfg.gamma_x);
                out.l_sm_x = g.scalar(t);
                l_sm = g.add(l_sm, t)?;
            }
        }
        out.l_sm = g.scalar(l_sm);
        total = g.add(total, l_sm)?;
    }

    let l2 = l2_penalty(g, model)?;
    out.l_l2 = g.scalar(l2);
    if cfg.gamma_r != 0.0 {
        let r = g.scale(l2, cfg.gamma_r);
        total = g.add(total, r)?;
    }
    out.total = g.scalar(total);
    Ok((total, out))
}

/// Evaluates every loss term without dropout.
pub fn loss_total(model: &MrineModel, batch: &LossBatch, cfg: &LossConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    Ok(loss_total_graph(&mut g, &bound, batch, cfg, None)?.1)
}

/// `L_k` alone.
pub fn loss_k_step(model: &MrineModel, batch: &LossBatch, cfg: &LossConfig) -> Result<f64> {
    Ok(loss_total(model, batch, &only_k(cfg))?.l_k)
}

/// Smoothed reconstruction term alone.
pub fn loss_smooth_recon(model: &MrineModel, batch: &LossBatch, cfg: &LossConfig) -> Result<f64> {
    let mut c = only_k(cfg);
    c.enable_l_smooth = true;
    Ok(loss_total(model, batch, &c)?.l_smooth)
}

/// Smoothness regularization alone.
pub fn loss_smoothness(model: &MrineModel, batch: &LossBatch, cfg: &LossConfig) -> Result<f64> {
    let mut c = cfg.clone();
    c.enable_l_smooth = false;
    c.gamma_r = 0.0;
    Ok(loss_total(model, batch, &c)?.l_sm)
}

fn only_k(cfg: &LossConfig) -> LossConfig {
    LossConfig {
        enable_l_smooth: false,
        enable_sm_s: false,
        enable_sm_y: false,
        enable_sm_x: false,
        gamma_r: 0.0,
        ..cfg.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Matrix;
    use std::f64::consts::PI;

    #[test]
    fn poisson_loglik_values() {
        assert!((poisson_loglik(&[0.0], &[1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((poisson_loglik(&[1.0], &[1.0]).unwrap() + 1.0).abs() < 1e-15);
        let oracle = (2f64.powi(3) * (-2f64).exp() / 6.0).ln();
        assert!((poisson_loglik(&[3.0], &[2.0]).unwrap() - oracle).abs() < 1e-12);
        assert!((oracle + 1.7123).abs() < 1e-4);
        assert_eq!(poisson_loglik(&[-1.0], &[1.0]), Err(ObjectiveError::NegativeCount(-1.0)));
        assert_eq!(poisson_loglik(&[1.0], &[0.0]), Err(ObjectiveError::NonPositiveRate(0.0)));
    }

    #[test]
    fn gaussian_loglik_values() {
        assert!((gaussian_loglik(&[0.3], &[0.3]).unwrap() + 0.918939).abs() < 1e-6);
        assert!((gaussian_loglik(&[1.3], &[0.3]).unwrap() + 1.418939).abs() < 1e-6);
        assert!((HALF_LN_2PI - 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_poisson(1.5, 1.5).unwrap(), 0.0);
        assert!((kl_poisson(2.0, 1.0).unwrap() - (2.0 * 2f64.ln() - 1.0)).abs() < 1e-15);
        assert!(kl_poisson(0.0, 1.0).is_err());
        assert_eq!(kl_gaussian_unitvar(0.2, 0.2), 0.0);
        assert_eq!(kl_gaussian_unitvar(1.0, 0.0), 0.5);
        assert_eq!(kl_gaussian_marginal(0.4, 2.0, 0.4, 2.0).unwrap(), 0.0);
        assert!((kl_gaussian_marginal(1.0, 1.0, 0.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_gaussian_marginal(0.0, -1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn tau_hand_example() {
        let y = MaskedSequence::observed(Matrix::filled(4, 1, 0.7));
        let s = MaskedSequence::observed(Matrix::from_vec(4, 1, vec![0.0, 1.0, 0.0, 1.0]));
        let tau = compute_tau(&[s], &[y]).unwrap();
        assert!((tau - 0.918939 / 0.846574).abs() < 1e-5);
        assert!((tau - 1.0855).abs() < 1e-4);
    }

    #[test]
    fn tau_rejects_all_masked() {
        let y = MaskedSequence::new(Matrix::filled(2, 1, 0.0), vec![false, false]).unwrap();
        let s = MaskedSequence::observed(Matrix::filled(2, 1, 1.0));
        assert_eq!(compute_tau(&[s], &[y]), Err(ObjectiveError::AllMasked("gaussian")));
    }

    #[test]
    fn pairs_skip_gaps() {
        // Observed at 1, 3, 4 (gap at 2) and missing at 0.
        let mask = BatchMask::from_rows(&[vec![false, true, false, true, true]]);
        assert_eq!(consecutive_pairs(&mask), (vec![1, 3], vec![3, 4]));
    }
}
