//! Linear dynamical models with differentiable Kalman filtering, RTS
//! smoothing and k-step prediction.
//!
//! All recursions run on a [`Graph`], batched over sequences: states are
//! `[B, n, 1]`, covariances `[B, n, n]`. Each sequence carries its own
//! availability mask; a masked step is a pure prediction step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{softplus_inverse, DiffError, Graph, Matrix, Shape, Tensor};

/// Floor added to every diagonal noise variance.
pub const EPS_PD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StateSpaceError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("observation width {got} does not match emission dimension {expected}")]
    ObservationWidth { expected: usize, got: usize },
    #[error("mask covers {mask_batch}×{mask_len} steps but observations are {batch}×{len}")]
    MaskShape { mask_batch: usize, mask_len: usize, batch: usize, len: usize },
    #[error("prediction horizon must be at least 1")]
    ZeroHorizon,
    #[error("horizon {k} leaves no predictions in a sequence of length {len}")]
    HorizonBeyondSequence { k: usize, len: usize },
    #[error("empty sequence")]
    EmptySequence,
}

type Result<T> = std::result::Result<T, StateSpaceError>;

/// Unconstrained parameters of one LDM. Noise covariances are
/// `diag(softplus(raw)) + EPS_PD·I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdmParams {
    pub a: Matrix,
    pub c: Matrix,
    pub w_raw: Matrix,
    pub r_raw: Matrix,
    pub x0: Matrix,
    pub sigma0_raw: Matrix,
}

impl LdmParams {
    /// Identity dynamics and emission, unit-ish noise, `x₀ = 0`, `Σ₀ = I`.
    pub fn new(state_dim: usize, obs_dim: usize) -> Self {
        let mut c = Matrix::zeros(obs_dim, state_dim);
        for i in 0..obs_dim.min(state_dim) {
            c.set(i, i, 1.0);
        }
        LdmParams {
            a: Matrix::identity(state_dim),
            c,
            w_raw: Matrix::filled(state_dim, 1, raw_for_variance(0.1)),
            r_raw: Matrix::filled(obs_dim, 1, raw_for_variance(0.1)),
            x0: Matrix::zeros(state_dim, 1),
            sigma0_raw: Matrix::filled(state_dim, 1, raw_for_variance(1.0)),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.rows
    }

    pub fn obs_dim(&self) -> usize {
        self.c.rows
    }

    pub fn w_diag(&self) -> Vec<f64> {
        self.w_raw.data.iter().map(|&r| crate::diffcore::softplus(r) + EPS_PD).collect()
    }

    pub fn r_diag(&self) -> Vec<f64> {
        self.r_raw.data.iter().map(|&r| crate::diffcore::softplus(r) + EPS_PD).collect()
    }

    /// Named fields in a fixed order.
    pub fn named(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("A", &self.a),
            ("C", &self.c),
            ("W_raw", &self.w_raw),
            ("R_raw", &self.r_raw),
            ("x0", &self.x0),
            ("Sigma0_raw", &self.sigma0_raw),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Matrix); 6] {
        [
            ("A", &mut self.a),
            ("C", &mut self.c),
            ("W_raw", &mut self.w_raw),
            ("R_raw", &mut self.r_raw),
            ("x0", &mut self.x0),
            ("Sigma0_raw", &mut self.sigma0_raw),
        ]
    }

    /// Places the model on `g`. Dynamics and noise parameters become
    /// trainable leaves; the initial state is trainable only when requested.
    pub fn bind(&self, g: &mut Graph, learn_initial_state: bool) -> (Ldm, [Tensor; 6]) {
        let a = self.a.to_param(g);
        let c = self.c.to_param(g);
        let w_raw = self.w_raw.to_param(g);
        let r_raw = self.r_raw.to_param(g);
        let (x0, s0_raw) = if learn_initial_state {
            (self.x0.to_param(g), self.sigma0_raw.to_param(g))
        } else {
            (self.x0.to_constant(g), self.sigma0_raw.to_constant(g))
        };
        let w = diag_noise(g, w_raw);
        let r = diag_noise(g, r_raw);
        let sigma0 = diag_noise(g, s0_raw);
        (Ldm { a, c, w, r, x0, sigma0 }, [a, c, w_raw, r_raw, x0, s0_raw])
    }
}

/// Raw value whose noise variance equals `variance`.
pub fn raw_for_variance(variance: f64) -> f64 {
    softplus_inverse((variance - EPS_PD).max(1e-12))
}

fn diag_noise(g: &mut Graph, raw: Tensor) -> Tensor {
    let sp = g.softplus(raw);
    let floored = g.add_scalar(sp, EPS_PD);
    g.diag_embed(floored).expect("raw noise parameters are column vectors")
}

/// An LDM materialized on a graph with dense covariances.
#[derive(Debug, Clone, Copy)]
pub struct Ldm {
    pub a: Tensor,
    pub c: Tensor,
    pub w: Tensor,
    pub r: Tensor,
    pub x0: Tensor,
    pub sigma0: Tensor,
}

impl Ldm {
    /// Builds constant (non-trainable) tensors from explicit matrices.
    pub fn from_matrices(
        g: &mut Graph,
        a: &Matrix,
        c: &Matrix,
        w: &Matrix,
        r: &Matrix,
        x0: &Matrix,
        sigma0: &Matrix,
    ) -> Self {
        Ldm {
            a: a.to_constant(g),
            c: c.to_constant(g),
            w: w.to_constant(g),
            r: r.to_constant(g),
            x0: x0.to_constant(g),
            sigma0: sigma0.to_constant(g),
        }
    }

    pub fn state_dim(&self, g: &Graph) -> usize {
        g.shape(self.a).rows
    }

    pub fn obs_dim(&self, g: &Graph) -> usize {
        g.shape(self.c).rows
    }
}

/// Per-sequence, per-step availability.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchMask {
    batch: usize,
    len: usize,
    observed: Vec<bool>,
}

impl BatchMask {
    pub fn full(batch: usize, len: usize, value: bool) -> Self {
        BatchMask { batch, len, observed: vec![value; batch * len] }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Self {
        let batch = rows.len();
        let len = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == len), "mask rows differ in length");
        BatchMask { batch, len, observed: rows.concat() }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, b: usize, t: usize) -> bool {
        self.observed[b * self.len + t]
    }

    pub fn set(&mut self, b: usize, t: usize, v: bool) {
        self.observed[b * self.len + t] = v;
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.observed[b * self.len..(b + 1) * self.len]
    }

    /// Elementwise OR.
    pub fn union(&self, other: &BatchMask) -> BatchMask {
        assert_eq!((self.batch, self.len), (other.batch, other.len));
        BatchMask {
            batch: self.batch,
            len: self.len,
            observed: self.observed.iter().zip(&other.observed).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.observed.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone)]
pub struct FilterResult {
    /// `x_{t|t-1}`, `[B, n, 1]` per step.
    pub x_pred: Vec<Tensor>,
    pub sigma_pred: Vec<Tensor>,
    /// `x_{t|t}`.
    pub x_filt: Vec<Tensor>,
    pub sigma_filt: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct SmoothResult {
    /// `x_{t|T}`.
    pub x_smooth: Vec<Tensor>,
    pub sigma_smooth: Vec<Tensor>,
}

/// Kalman filter over `obs` (`[B, T, m]`). Steps where `mask` is false for a
/// sequence skip the update for that sequence; values stored there are never
/// read into the result.
pub fn kalman_filter(g: &mut Graph, ldm: &Ldm, obs: Tensor, mask: &BatchMask) -> Result<FilterResult> {
    let so = g.shape(obs);
    let m = ldm.obs_dim(g);
    if so.cols != m {
        return Err(StateSpaceError::ObservationWidth { expected: m, got: so.cols });
    }
    if mask.batch() != so.batch || mask.len() != so.rows {
        return Err(StateSpaceError::MaskShape {
            mask_batch: mask.batch(),
            mask_len: mask.len(),
            batch: so.batch,
            len: so.rows,
        });
    }
    let (batch, len) = (so.batch, so.rows);
    if len == 0 {
        return Err(StateSpaceError::EmptySequence);
    }

    let at = g.transpose(ldm.a);
    let ct = g.transpose(ldm.c);
    let obs_cols = g.transpose(obs);
    // Broadcast the shared prior to the batch.
    let zeros = g.constant(Shape::new(batch, 1, 1), vec![0.0; batch])?;
    let mut x = g.add(ldm.x0, zeros)?;
    let mut p = g.add(ldm.sigma0, zeros)?;

    let mut out = FilterResult {
        x_pred: Vec::with_capacity(len),
        sigma_pred: Vec::with_capacity(len),
        x_filt: Vec::with_capacity(len),
        sigma_filt: Vec::with_capacity(len),
    };
    for t in 0..len {
        let x_pred = g.matmul(ldm.a, x)?;
        let ap = g.matmul(ldm.a, p)?;
        let apat = g.matmul(ap, at)?;
        let p_pred = g.add(apat, ldm.w)?;
        let p_pred = g.symmetrize(p_pred)?;

        let observed = (0..batch).filter(|&b| mask.get(b, t)).count();
        let (x_new, p_new) = if observed == 0 {
            (x_pred, p_pred)
        } else {
            let a_t = g.slice_cols(obs_cols, t, 1)?;
            let cp = g.matmul(ldm.c, p_pred)?;
            let cpct = g.matmul(cp, ct)?;
            let s = g.add(cpct, ldm.r)?;
            let gain_t = g.linear_solve(s, cp)?; // S⁻¹ C P = Kᵀ
            let cx = g.matmul(ldm.c, x_pred)?;
            let innov = g.sub(a_t, cx)?;
            let gain = g.transpose(gain_t);
            let mut upd = g.matmul(gain, innov)?;
            let cp_t = g.transpose(cp);
            let mut dec = g.matmul(cp_t, gain_t)?;
            if observed < batch {
                let weights: Vec<f64> = (0..batch).map(|b| if mask.get(b, t) { 1.0 } else { 0.0 }).collect();
                let w = g.constant(Shape::new(batch, 1, 1), weights)?;
                upd = g.mul(upd, w)?;
                dec = g.mul(dec, w)?;
            }
            let x_new = g.add(x_pred, upd)?;
            let p_new = g.sub(p_pred, dec)?;
            (x_new, g.symmetrize(p_new)?)
        };
        out.x_pred.push(x_pred);
        out.sigma_pred.push(p_pred);
        out.x_filt.push(x_new);
        out.sigma_filt.push(p_new);
        x = x_new;
        p = p_new;
    }
    Ok(out)
}

/// Rauch–Tung–Striebel smoother over a completed filter pass.
pub fn kalman_smooth(g: &mut Graph, ldm: &Ldm, filt: &FilterResult) -> Result<SmoothResult> {
    let len = filt.x_filt.len();
    if len == 0 {
        return Err(StateSpaceError::EmptySequence);
    }
    let mut xs = vec![filt.x_filt[len - 1]; len];
    let mut ps = vec![filt.sigma_filt[len - 1]; len];
    for t in (0..len - 1).rev() {
        let ap = g.matmul(ldm.a, filt.sigma_filt[t])?;
        let gain_t = match g.linear_solve(filt.sigma_pred[t + 1], ap) {
            Ok(v) => v,
            Err(DiffError::Singular { .. }) => {
                let n = ldm.state_dim(g);
                let reg = g.constant(Shape::matrix(n, n), Matrix::identity(n).data.iter().map(|v| v * EPS_PD).collect())?;
                let p = g.add(filt.sigma_pred[t + 1], reg)?;
                g.linear_solve(p, ap)?
            }
            Err(e) => return Err(e.into()),
        };
        let gain = g.transpose(gain_t);
        let dx = g.sub(xs[t + 1], filt.x_pred[t + 1])?;
        let corr = g.matmul(gain, dx)?;
        xs[t] = g.add(filt.x_filt[t], corr)?;
        let dp = g.sub(ps[t + 1], filt.sigma_pred[t + 1])?;
        let gdp = g.matmul(gain, dp)?;
        let gdpg = g.matmul(gdp, gain_t)?;
        let p = g.add(filt.sigma_filt[t], gdpg)?;
        ps[t] = g.symmetrize(p)?;
    }
    Ok(SmoothResult { x_smooth: xs, sigma_smooth: ps })
}

/// Stacks per-step `[B, n, 1]` states into `[B, T, n]`.
pub fn stack_states(g: &mut Graph, states: &[Tensor]) -> Result<Tensor> {
    let cols = g.concat_cols(states)?;
    Ok(g.transpose(cols))
}

/// Stacks the diagonals of per-step covariances into `[B, T, n]`.
pub fn stack_variances(g: &mut Graph, covs: &[Tensor]) -> Result<Tensor> {
    let diags = covs.iter().map(|&c| g.diag_part(c)).collect::<std::result::Result<Vec<_>, _>>()?;
    stack_states(g, &diags)
}

/// `A^k` for `k ≥ 1`.
pub fn matrix_power(g: &mut Graph, a: Tensor, k: usize) -> Result<Tensor> {
    if k == 0 {
        return Err(StateSpaceError::ZeroHorizon);
    }
    let mut acc = a;
    for _ in 1..k {
        acc = g.matmul(acc, a)?;
    }
    Ok(acc)
}

/// k-step-ahead predictions from stacked filtered states `[B, T, n]`.
/// Row `t` of the result is `x_{t+k|t} = Aᵏ x_{t|t}`, i.e. the prediction
/// for step `t + k`; the result has `T - k` rows.
pub fn kstep_predict(g: &mut Graph, a: Tensor, states: Tensor, k: usize) -> Result<Tensor> {
    if k == 0 {
        return Err(StateSpaceError::ZeroHorizon);
    }
    let s = g.shape(states);
    if k >= s.rows {
        return Err(StateSpaceError::HorizonBeyondSequence { k, len: s.rows });
    }
    let ak = matrix_power(g, a, k)?;
    let akt = g.transpose(ak);
    let head = g.slice_rows(states, 0, s.rows - k)?;
    Ok(g.matmul(head, akt)?)
}

/// Embeddings `a = C x` for stacked states `[B, T, n]`, returned as `[B, T, m]`.
pub fn emit_embedding(g: &mut Graph, c: Tensor, states: Tensor) -> Result<Tensor> {
    let ct = g.transpose(c);
    Ok(g.matmul(states, ct)?)
}

/// Spectral radius of a host-side square matrix, via `‖A^(2^j)‖^(1/2^j)`
/// with renormalization.
pub fn spectral_radius(a: &Matrix) -> f64 {
    assert_eq!(a.rows, a.cols);
    let norm = |m: &Matrix| m.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut m = a.clone();
    let mut log_scale = 0.0;
    let mut estimate = norm(a);
    for j in 1..=40 {
        m = m.matmul(&m);
        log_scale *= 2.0;
        let nm = norm(&m);
        if nm == 0.0 {
            return 0.0;
        }
        let ln = nm.ln();
        m.data.iter_mut().for_each(|v| *v /= nm);
        log_scale += ln;
        estimate = (log_scale / 2f64.powi(j)).exp();
    }
    estimate
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_ldm(g: &mut Graph, a: f64, c: f64, w: f64, r: f64, x0: f64, s0: f64) -> Ldm {
        let m = |v: f64| Matrix::from_vec(1, 1, vec![v]);
        Ldm::from_matrices(g, &m(a), &m(c), &m(w), &m(r), &m(x0), &m(s0))
    }

    #[test]
    fn scalar_update_by_hand() {
        let mut g = Graph::new();
        let ldm = scalar_ldm(&mut g, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0);
        let obs = g.constant(Shape::new(1, 1, 1), vec![2.0]).unwrap();
        let f = kalman_filter(&mut g, &ldm, obs, &BatchMask::full(1, 1, true)).unwrap();
        assert!((g.value(f.x_filt[0])[0] - 1.0).abs() < 1e-15);
        assert!((g.value(f.sigma_filt[0])[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_is_pure_prediction() {
        let mut g = Graph::new();
        let ldm = scalar_ldm(&mut g, 0.9, 1.0, 0.1, 1.0, 2.0, 1.0);
        let obs = g.constant(Shape::new(1, 5, 1), vec![f64::NAN; 5]).unwrap();
        let f = kalman_filter(&mut g, &ldm, obs, &BatchMask::full(1, 5, false)).unwrap();
        for t in 0..5 {
            let expected = 0.9f64.powi(t as i32 + 1) * 2.0;
            assert!((g.value(f.x_filt[t])[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn smoother_terminal_and_single_step() {
        let mut g = Graph::new();
        let ldm = scalar_ldm(&mut g, 1.0, 1.0, 0.2, 1.0, 0.0, 1.0);
        let obs = g.constant(Shape::new(1, 1, 1), vec![0.7]).unwrap();
        let f = kalman_filter(&mut g, &ldm, obs, &BatchMask::full(1, 1, true)).unwrap();
        let s = kalman_smooth(&mut g, &ldm, &f).unwrap();
        assert_eq!(g.value(s.x_smooth[0]), g.value(f.x_filt[0]));
        assert_eq!(g.value(s.sigma_smooth[0]), g.value(f.sigma_filt[0]));
    }

    #[test]
    fn static_state_smoothing_equals_terminal_filter() {
        let mut g = Graph::new();
        let ldm = scalar_ldm(&mut g, 1.0, 1.0, 0.0, 0.5, 0.0, 2.0);
        let obs = g.constant(Shape::new(1, 4, 1), vec![1.0, -0.3, 2.2, 0.4]).unwrap();
        let f = kalman_filter(&mut g, &ldm, obs, &BatchMask::full(1, 4, true)).unwrap();
        let s = kalman_smooth(&mut g, &ldm, &f).unwrap();
        // Oracle: posterior of a static scalar under 4 observations.
        let prec = 1.0 / 2.0 + 4.0 / 0.5;
        let mean = (1.0 - 0.3 + 2.2 + 0.4) / 0.5 / prec;
        for t in 0..4 {
            assert!((g.value(s.x_smooth[t])[0] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn kstep_examples() {
        let mut g = Graph::new();
        let a = g.constant(Shape::matrix(1, 1), vec![0.5]).unwrap();
        let states = g.constant(Shape::new(1, 3, 1), vec![4.0, 4.0, 4.0]).unwrap();
        let p = kstep_predict(&mut g, a, states, 2).unwrap();
        assert_eq!(g.value(p), &[1.0]);
        assert_eq!(kstep_predict(&mut g, a, states, 0).unwrap_err(), StateSpaceError::ZeroHorizon);
        assert!(matches!(
            kstep_predict(&mut g, a, states, 3),
            Err(StateSpaceError::HorizonBeyondSequence { k: 3, len: 3 })
        ));

        let eye = g.constant(Shape::matrix(2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let states = g.constant(Shape::new(1, 3, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = kstep_predict(&mut g, eye, states, 1).unwrap();
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn emission_examples() {
        let mut g = Graph::new();
        let states = g.constant(Shape::new(1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = g.constant(Shape::matrix(2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = emit_embedding(&mut g, eye, states).unwrap();
        assert_eq!(g.value(a), g.value(states));
        let zero = g.constant(Shape::matrix(3, 2), vec![0.0; 6]).unwrap();
        let a = emit_embedding(&mut g, zero, states).unwrap();
        assert_eq!(g.shape(a), Shape::new(1, 2, 3));
        assert!(g.value(a).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_errors() {
        let mut g = Graph::new();
        let ldm = scalar_ldm(&mut g, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0);
        let obs = g.constant(Shape::new(1, 2, 2), vec![0.0; 4]).unwrap();
        assert!(matches!(
            kalman_filter(&mut g, &ldm, obs, &BatchMask::full(1, 2, true)),
            Err(StateSpaceError::ObservationWidth { .. })
        ));
        let obs = g.constant(Shape::new(1, 2, 1), vec![0.0; 2]).unwrap();
        assert!(matches!(
            kalman_filter(&mut g, &ldm, obs, &BatchMask::full(1, 3, true)),
            Err(StateSpaceError::MaskShape { .. })
        ));
    }

    #[test]
    fn spectral_radius_of_rotation_and_diagonal() {
        let rot = Matrix::from_vec(2, 2, vec![0.0, -0.9, 0.9, 0.0]);
        assert!((spectral_radius(&rot) - 0.9).abs() < 1e-6);
        let d = Matrix::from_vec(2, 2, vec![0.5, 0.0, 0.0, -1.2]);
        assert!((spectral_radius(&d) - 1.2).abs() < 1e-6);
    }

    #[test]
    fn noise_parameterization_hits_targets() {
        let p = LdmParams::new(3, 2);
        for v in p.w_diag() {
            assert!((v - 0.1).abs() < 1e-12);
        }
        let mut g = Graph::new();
        let (ldm, _) = p.bind(&mut g, false);
        let s0 = g.value(ldm.sigma0);
        assert!((s0[0] - 1.0).abs() < 1e-12 && s0[1] == 0.0);
    }
}
