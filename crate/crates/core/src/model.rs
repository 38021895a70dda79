//! MLP blocks and the assembled multiscale network: modality encoders,
//! modality LDMs, fusion, the multiscale LDM and the two decoder heads.
//!
//! A model with both encoders is multiscale. A model with exactly one
//! encoder is single-scale: its encoder feeds the backbone LDM directly.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, Matrix, Shape, Tensor};
use crate::statespace::{
    emit_embedding, kalman_filter, kalman_smooth, kstep_predict, raw_for_variance, stack_states, stack_variances,
    BatchMask, FilterResult, Ldm, LdmParams, StateSpaceError,
};

/// Pre-activation clamp on the log-rate head.
pub const LOG_RATE_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    StateSpace(#[from] StateSpaceError),
    #[error("dropout probability {0} outside [0, 1)")]
    InvalidDropout(f64),
    #[error("model has no {0} branch")]
    MissingModality(&'static str),
    #[error("a single-scale model has no fusion network")]
    FusionOnSingleScale,
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{what}: expected width {expected}, got {got}")]
    Width { what: &'static str, expected: usize, got: usize },
    #[error("sequences disagree in length or count")]
    Ragged,
    #[error("invalid inference mode {0:?}")]
    InvalidMode(String),
}

impl From<DiffError> for ModelError {
    fn from(e: DiffError) -> Self {
        ModelError::StateSpace(e.into())
    }
}

type Result<T> = std::result::Result<T, ModelError>;

/// Hidden layer count and width of an MLP. Zero hidden layers is a single
/// affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub hidden_layers: usize,
    pub hidden_units: usize,
}

impl MlpShape {
    pub const fn new(hidden_layers: usize, hidden_units: usize) -> Self {
        MlpShape { hidden_layers, hidden_units }
    }

    fn widths(&self, input: usize, output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(std::iter::repeat_n(self.hidden_units, self.hidden_layers));
        w.push(output);
        w
    }
}

/// Weights are stored `in × out` so a row of inputs maps as `x·W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

impl MlpParams {
    /// Xavier-normal weights, zero biases.
    pub fn xavier(widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            weights.push(xavier_normal(pair[0], pair[1], rng));
            biases.push(Matrix::zeros(1, pair[1]));
        }
        MlpParams { weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map_or(0, |w| w.cols)
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        BoundMlp {
            weights: self.weights.iter().map(|w| w.to_param(g)).collect(),
            biases: self.biases.iter().map(|b| b.to_param(g)).collect(),
        }
    }
}

/// `N(0, 2 / (fan_in + fan_out))` entries.
pub fn xavier_normal(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_vec(fan_in, fan_out, (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect())
}

#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl BoundMlp {
    /// Applies the MLP row-wise to `[B, T, in]`. Hidden layers use tanh; the
    /// output layer is linear.
    pub fn forward(&self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        let s = g.shape(x);
        let mut h = g.reshape(x, Shape::new(1, s.batch * s.rows, s.cols))?;
        let last = self.weights.len() - 1;
        for (i, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = g.matmul(h, w)?;
            h = g.add(z, b)?;
            if i < last {
                h = g.tanh(h);
            }
        }
        let out = g.shape(h).cols;
        Ok(g.reshape(h, Shape::new(s.batch, s.rows, out))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsModel {
    Poisson,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// The discrete (spike-count) stream `s`.
    Poisson,
    /// The continuous stream `y`.
    Gaussian,
}

impl Modality {
    fn name(self) -> &'static str {
        match self {
            Modality::Poisson => "poisson",
            Modality::Gaussian => "gaussian",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    Multiscale,
    SingleScale(Modality),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_s: usize,
    pub n_y: usize,
    pub n_a: usize,
    pub n_x: usize,
    pub enc_s: Option<MlpShape>,
    pub enc_y: Option<MlpShape>,
    pub fusion: Option<MlpShape>,
    pub dec_s: Option<MlpShape>,
    pub dec_y: Option<MlpShape>,
    pub obs_model_s: ObsModel,
    pub zero_impute: bool,
    pub learn_initial_state: bool,
}

impl ModelConfig {
    /// Two-modality model with every MLP of the given shape and a one-layer
    /// fusion network of the same width.
    pub fn multiscale(n_s: usize, n_y: usize, n_a: usize, n_x: usize, mlp: MlpShape) -> Self {
        ModelConfig {
            n_s,
            n_y,
            n_a,
            n_x,
            enc_s: Some(mlp),
            enc_y: Some(mlp),
            fusion: Some(MlpShape::new(1, mlp.hidden_units)),
            dec_s: Some(mlp),
            dec_y: Some(mlp),
            obs_model_s: ObsModel::Poisson,
            zero_impute: false,
            learn_initial_state: false,
        }
    }

    pub fn single_scale(modality: Modality, n_s: usize, n_y: usize, n_a: usize, n_x: usize, mlp: MlpShape) -> Self {
        let mut cfg = ModelConfig::multiscale(n_s, n_y, n_a, n_x, mlp);
        cfg.fusion = None;
        match modality {
            Modality::Poisson => {
                cfg.enc_y = None;
                cfg.dec_y = None;
            }
            Modality::Gaussian => {
                cfg.enc_s = None;
                cfg.dec_s = None;
            }
        }
        cfg
    }

    pub fn topology(&self) -> Result<Topology> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_a == 0 || self.n_x == 0 {
            return bad("n_a and n_x must be positive");
        }
        match (self.enc_s.is_some(), self.enc_y.is_some()) {
            (true, true) => {
                if self.fusion.is_none() || self.dec_s.is_none() || self.dec_y.is_none() {
                    return bad("a multiscale model needs fusion and both decoders");
                }
                if self.n_s == 0 || self.n_y == 0 {
                    return bad("channel counts must be positive");
                }
                Ok(Topology::Multiscale)
            }
            (true, false) | (false, true) => {
                let modality = if self.enc_s.is_some() { Modality::Poisson } else { Modality::Gaussian };
                if self.fusion.is_some() {
                    return Err(ModelError::FusionOnSingleScale);
                }
                let (dec_ok, other_dec, width) = match modality {
                    Modality::Poisson => (self.dec_s.is_some(), self.dec_y.is_some(), self.n_s),
                    Modality::Gaussian => (self.dec_y.is_some(), self.dec_s.is_some(), self.n_y),
                };
                if !dec_ok || other_dec {
                    return bad("a single-scale model decodes only its own modality");
                }
                if width == 0 {
                    return bad("channel counts must be positive");
                }
                if self.zero_impute {
                    return bad("zero imputation needs the gaussian branch of a multiscale model");
                }
                Ok(Topology::SingleScale(modality))
            }
            (false, false) => bad("no encoder configured"),
        }
    }
}

/// Full parameter set. Absent branches are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrineModel {
    pub config: ModelConfig,
    pub enc_s: Option<MlpParams>,
    pub enc_y: Option<MlpParams>,
    pub ldm_s: Option<LdmParams>,
    pub ldm_y: Option<LdmParams>,
    pub fusion: Option<MlpParams>,
    pub ldm_m: LdmParams,
    pub dec_s: Option<MlpParams>,
    pub dec_y: Option<MlpParams>,
}

/// `A = 0.95·I + N(0, 0.01²)`, Xavier-normal `C`, noise variances 0.1,
/// `x₀ = 0`, `Σ₀ = I`.
pub fn init_ldm(state: usize, obs: usize, rng: &mut impl Rng) -> LdmParams {
    let normal = Normal::new(0.0, 0.01).expect("positive std");
    let mut a = Matrix::identity(state);
    a.data.iter_mut().for_each(|v| *v = 0.95 * *v + normal.sample(rng));
    let c = xavier_normal(obs, state, rng);
    LdmParams {
        a,
        c,
        w_raw: Matrix::filled(state, 1, raw_for_variance(0.1)),
        r_raw: Matrix::filled(obs, 1, raw_for_variance(0.1)),
        x0: Matrix::zeros(state, 1),
        sigma0_raw: Matrix::filled(state, 1, raw_for_variance(1.0)),
    }
}

impl MrineModel {
    /// Deterministic initialization from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let topology = config.topology()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n_a, n_x) = (config.n_a, config.n_x);
        let mlp = |shape: Option<MlpShape>, i: usize, o: usize, rng: &mut ChaCha8Rng| {
            shape.map(|s| MlpParams::xavier(&s.widths(i, o), rng))
        };
        let enc_s = mlp(config.enc_s, config.n_s, n_a, &mut rng);
        let enc_y = mlp(config.enc_y, config.n_y, n_a, &mut rng);
        let (ldm_s, ldm_y) = if topology == Topology::Multiscale {
            (Some(init_ldm(n_a, n_a, &mut rng)), Some(init_ldm(n_a, n_a, &mut rng)))
        } else {
            (None, None)
        };
        let fusion = mlp(config.fusion, 2 * n_a, n_a, &mut rng);
        let ldm_m = init_ldm(n_x, n_a, &mut rng);
        let dec_s = mlp(config.dec_s, n_a, config.n_s, &mut rng);
        let dec_y = mlp(config.dec_y, n_a, config.n_y, &mut rng);
        Ok(MrineModel { config: config.clone(), enc_s, enc_y, ldm_s, ldm_y, fusion, ldm_m, dec_s, dec_y })
    }

    pub fn topology(&self) -> Topology {
        self.config.topology().expect("validated at construction")
    }

    /// The fusion network; absent on single-scale models.
    pub fn fusion_network(&self) -> Result<&MlpParams> {
        self.fusion.as_ref().ok_or(ModelError::FusionOnSingleScale)
    }

    /// Every parameter matrix with a stable dotted name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        let mlps = [("enc_s", &self.enc_s), ("enc_y", &self.enc_y)];
        for (name, mlp) in mlps {
            push_mlp(&mut out, name, mlp.as_ref());
        }
        for (name, ldm) in [("ldm_s", &self.ldm_s), ("ldm_y", &self.ldm_y)] {
            if let Some(l) = ldm {
                out.extend(l.named().into_iter().map(|(f, m)| (format!("{name}.{f}"), m)));
            }
        }
        push_mlp(&mut out, "fusion", self.fusion.as_ref());
        out.extend(self.ldm_m.named().into_iter().map(|(f, m)| (format!("ldm_m.{f}"), m)));
        push_mlp(&mut out, "dec_s", self.dec_s.as_ref());
        push_mlp(&mut out, "dec_y", self.dec_y.as_ref());
        out
    }

    /// Mutable view in the same order as [`MrineModel::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        let MrineModel { enc_s, enc_y, ldm_s, ldm_y, fusion, ldm_m, dec_s, dec_y, .. } = self;
        for mlp in [enc_s, enc_y] {
            push_mlp_mut(&mut out, mlp.as_mut());
        }
        for l in [ldm_s, ldm_y].into_iter().flatten() {
            out.extend(l.named_mut().into_iter().map(|(_, m)| m));
        }
        push_mlp_mut(&mut out, fusion.as_mut());
        out.extend(ldm_m.named_mut().into_iter().map(|(_, m)| m));
        push_mlp_mut(&mut out, dec_s.as_mut());
        push_mlp_mut(&mut out, dec_y.as_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, m)| m.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, m)| m.is_finite())
    }

    /// Places every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        let learn = self.config.learn_initial_state;
        let mut leaves = Vec::new();
        let mut l2 = Vec::new();
        let mut mlp = |g: &mut Graph, p: &Option<MlpParams>, leaves: &mut Vec<Tensor>| {
            p.as_ref().map(|p| {
                let b = p.bind(g);
                for (w, bias) in b.weights.iter().zip(&b.biases) {
                    leaves.push(*w);
                    leaves.push(*bias);
                    l2.push(*w);
                }
                b
            })
        };
        let enc_s = mlp(g, &self.enc_s, &mut leaves);
        let enc_y = mlp(g, &self.enc_y, &mut leaves);
        let ldm = |g: &mut Graph, p: &LdmParams, leaves: &mut Vec<Tensor>| {
            let (l, t) = p.bind(g, learn);
            leaves.extend(t);
            l
        };
        let ldm_s = self.ldm_s.as_ref().map(|p| ldm(g, p, &mut leaves));
        let ldm_y = self.ldm_y.as_ref().map(|p| ldm(g, p, &mut leaves));
        let fusion = mlp(g, &self.fusion, &mut leaves);
        let ldm_m = ldm(g, &self.ldm_m, &mut leaves);
        let dec_s = mlp(g, &self.dec_s, &mut leaves);
        let dec_y = mlp(g, &self.dec_y, &mut leaves);
        BoundModel {
            config: self.config.clone(),
            topology: self.topology(),
            enc_s,
            enc_y,
            ldm_s,
            ldm_y,
            fusion,
            ldm_m,
            dec_s,
            dec_y,
            leaves,
            l2_weights: l2,
        }
    }
}

fn push_mlp<'a>(out: &mut Vec<(String, &'a Matrix)>, name: &str, mlp: Option<&'a MlpParams>) {
    if let Some(p) = mlp {
        for (i, (w, b)) in p.weights.iter().zip(&p.biases).enumerate() {
            out.push((format!("{name}.w{i}"), w));
            out.push((format!("{name}.b{i}"), b));
        }
    }
}

fn push_mlp_mut<'a>(out: &mut Vec<&'a mut Matrix>, mlp: Option<&'a mut MlpParams>) {
    if let Some(p) = mlp {
        for (w, b) in p.weights.iter_mut().zip(p.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
    }
}

/// A model placed on a graph. `leaves` follows the order of
/// [`MrineModel::named_params`].
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub config: ModelConfig,
    pub topology: Topology,
    pub enc_s: Option<BoundMlp>,
    pub enc_y: Option<BoundMlp>,
    pub ldm_s: Option<Ldm>,
    pub ldm_y: Option<Ldm>,
    pub fusion: Option<BoundMlp>,
    pub ldm_m: Ldm,
    pub dec_s: Option<BoundMlp>,
    pub dec_y: Option<BoundMlp>,
    pub leaves: Vec<Tensor>,
    /// MLP weight matrices (no biases), the arguments of the L2 penalty.
    pub l2_weights: Vec<Tensor>,
}

/// One modality of one trial: `T × n` values and a length-`T` mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub values: Matrix,
    pub mask: Vec<bool>,
}

impl MaskedSequence {
    pub fn new(values: Matrix, mask: Vec<bool>) -> Result<Self> {
        if values.rows != mask.len() {
            return Err(ModelError::Ragged);
        }
        Ok(MaskedSequence { values, mask })
    }

    pub fn observed(values: Matrix) -> Self {
        let mask = vec![true; values.rows];
        MaskedSequence { values, mask }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn width(&self) -> usize {
        self.values.cols
    }
}

/// Equal-length sequences of one modality packed as `[B, T, n]`. Values at
/// masked rows are stored as 0, so nothing downstream can read them.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub width: usize,
    pub values: Vec<f64>,
    pub mask: BatchMask,
}

impl SeqBatch {
    pub fn from_sequences(seqs: &[&MaskedSequence]) -> Result<Self> {
        let first = seqs.first().ok_or(ModelError::Ragged)?;
        let (len, width) = (first.len(), first.width());
        if seqs.iter().any(|s| s.len() != len || s.width() != width) {
            return Err(ModelError::Ragged);
        }
        let rows: Vec<Vec<bool>> = seqs.iter().map(|s| s.mask.clone()).collect();
        let values = seqs.iter().flat_map(|s| s.values.data.iter().copied()).collect();
        Ok(SeqBatch { width, values, mask: BatchMask::from_rows(&rows) }.sanitized())
    }

    pub fn batch(&self) -> usize {
        self.mask.batch()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Same values under a different mask, re-zeroing newly masked rows.
    pub fn with_mask(&self, mask: BatchMask) -> Self {
        assert_eq!((mask.batch(), mask.len()), (self.batch(), self.len()));
        SeqBatch { width: self.width, values: self.values.clone(), mask }.sanitized()
    }

    fn sanitized(mut self) -> Self {
        let (len, w) = (self.len(), self.width);
        for b in 0..self.batch() {
            for t in 0..len {
                if !self.mask.get(b, t) {
                    let o = (b * len + t) * w;
                    self.values[o..o + w].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        self
    }

    pub fn tensor(&self, g: &mut Graph) -> Tensor {
        g.constant(Shape::new(self.batch(), self.len(), self.width), self.values.clone())
            .expect("batch values fill their shape")
    }
}

/// Inputs to one forward pass. Single-scale models read only their own
/// modality.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub s: Option<SeqBatch>,
    pub y: Option<SeqBatch>,
}

impl ModelInput {
    pub fn batch(&self) -> usize {
        self.s.as_ref().or(self.y.as_ref()).map_or(0, SeqBatch::batch)
    }

    pub fn len(&self) -> usize {
        self.s.as_ref().or(self.y.as_ref()).map_or(0, SeqBatch::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inverted dropout with a host-side random keep mask. Identity when
/// `training` is false or `rate` is 0.
pub fn apply_input_output_dropout(
    g: &mut Graph,
    x: Tensor,
    rate: f64,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(ModelError::InvalidDropout(rate));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x);
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..shape.numel()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
    let m = g.constant(shape, mask)?;
    Ok(g.mul(x, m)?)
}

/// Training-time dropout settings for a forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

/// Encoder output and the multiscale LDM's view of availability.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub a_s_filt: Option<Tensor>,
    pub a_y_filt: Option<Tensor>,
    /// `[B, T, n_a]`.
    pub a_fused: Tensor,
    /// Steps where at least one modality is observed.
    pub mask: BatchMask,
}

fn check_width(what: &'static str, b: &SeqBatch, expected: usize) -> Result<()> {
    if b.width != expected {
        return Err(ModelError::Width { what, expected, got: b.width });
    }
    Ok(())
}

fn dropout(g: &mut Graph, x: Tensor, d: &mut Option<Dropout<'_>>) -> Result<Tensor> {
    match d {
        Some(d) => apply_input_output_dropout(g, x, d.rate, true, &mut *d.rng),
        None => Ok(x),
    }
}

/// Runs the encoder. For multiscale models: per-modality MLP, masked
/// Kalman filtering in each modality LDM, then fusion of the filtered
/// embeddings. Fully causal.
pub fn encode_multiscale(
    g: &mut Graph,
    model: &BoundModel,
    input: &ModelInput,
    mut drop: Option<Dropout<'_>>,
) -> Result<Encoded> {
    let cfg = &model.config;
    match model.topology {
        Topology::SingleScale(modality) => {
            let (batch, enc, width) = match modality {
                Modality::Poisson => (input.s.as_ref(), model.enc_s.as_ref(), cfg.n_s),
                Modality::Gaussian => (input.y.as_ref(), model.enc_y.as_ref(), cfg.n_y),
            };
            let batch = batch.ok_or(ModelError::MissingModality(modality.name()))?;
            check_width("input", batch, width)?;
            let x = batch.tensor(g);
            let x = dropout(g, x, &mut drop)?;
            let a = enc.expect("validated topology").forward(g, x)?;
            let a = dropout(g, a, &mut drop)?;
            Ok(Encoded { a_s_filt: None, a_y_filt: None, a_fused: a, mask: batch.mask.clone() })
        }
        Topology::Multiscale => {
            let s = input.s.as_ref().ok_or(ModelError::MissingModality("poisson"))?;
            let y = input.y.as_ref().ok_or(ModelError::MissingModality("gaussian"))?;
            check_width("poisson input", s, cfg.n_s)?;
            check_width("gaussian input", y, cfg.n_y)?;
            if (s.batch(), s.len()) != (y.batch(), y.len()) {
                return Err(ModelError::Ragged);
            }
            let y_mask = if cfg.zero_impute { BatchMask::full(y.batch(), y.len(), true) } else { y.mask.clone() };

            let xs = s.tensor(g);
            let xs = dropout(g, xs, &mut drop)?;
            let es = model.enc_s.as_ref().expect("validated").forward(g, xs)?;
            let ldm_s = model.ldm_s.expect("validated");
            let fs = kalman_filter(g, &ldm_s, es, &s.mask)?;
            let st = stack_states(g, &fs.x_filt)?;
            let a_s = emit_embedding(g, ldm_s.c, st)?;

            let xy = y.tensor(g);
            let xy = dropout(g, xy, &mut drop)?;
            let ey = model.enc_y.as_ref().expect("validated").forward(g, xy)?;
            let ldm_y = model.ldm_y.expect("validated");
            let fy = kalman_filter(g, &ldm_y, ey, &y_mask)?;
            let yt = stack_states(g, &fy.x_filt)?;
            let a_y = emit_embedding(g, ldm_y.c, yt)?;

            let cat = g.concat_cols(&[a_s, a_y])?;
            let a = model.fusion.as_ref().expect("validated").forward(g, cat)?;
            let a = dropout(g, a, &mut drop)?;
            Ok(Encoded { a_s_filt: Some(a_s), a_y_filt: Some(a_y), a_fused: a, mask: s.mask.union(&y_mask) })
        }
    }
}

/// Kalman filter of the multiscale LDM over the encoder output.
pub fn filter_multiscale(g: &mut Graph, model: &BoundModel, enc: &Encoded) -> Result<FilterResult> {
    Ok(kalman_filter(g, &model.ldm_m, enc.a_fused, &enc.mask)?)
}

/// Decoder outputs for embeddings `[B, T, n_a]`: the spike head (rates, or
/// linear means under a Gaussian spike model) and the Gaussian means.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub s: Option<Tensor>,
    pub y: Option<Tensor>,
}

pub fn decode_heads(g: &mut Graph, model: &BoundModel, a: Tensor) -> Result<Heads> {
    let s = match &model.dec_s {
        Some(dec) => {
            let pre = dec.forward(g, a)?;
            Some(match model.config.obs_model_s {
                ObsModel::Poisson => {
                    let c = g.clamp(pre, -LOG_RATE_CLAMP, LOG_RATE_CLAMP);
                    g.exp(c)
                }
                ObsModel::Gaussian => pre,
            })
        }
        None => None,
    };
    let y = match &model.dec_y {
        Some(dec) => Some(dec.forward(g, a)?),
        None => None,
    };
    Ok(Heads { s, y })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferenceMode {
    Filter,
    Smooth,
    Predict(usize),
}

impl FromStr for InferenceMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filter" => Ok(InferenceMode::Filter),
            "smooth" => Ok(InferenceMode::Smooth),
            _ => {
                let k = s
                    .strip_prefix("predict:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| ModelError::InvalidMode(s.to_string()))?;
                Ok(InferenceMode::Predict(k))
            }
        }
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferenceMode::Filter => write!(f, "filter"),
            InferenceMode::Smooth => write!(f, "smooth"),
            InferenceMode::Predict(k) => write!(f, "predict:{k}"),
        }
    }
}

/// Host-side inference output, one matrix per trial. In predict mode row
/// `i` refers to step `i + offset`.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub mode: InferenceMode,
    pub offset: usize,
    pub a_s_filt: Option<Vec<Matrix>>,
    pub a_y_filt: Option<Vec<Matrix>>,
    pub a_fused: Vec<Matrix>,
    /// Multiscale latents `x`.
    pub x: Vec<Matrix>,
    /// Posterior marginal variances, absent in predict mode.
    pub x_var: Option<Vec<Matrix>>,
    pub a_out: Vec<Matrix>,
    /// Spike-head output: rates under the Poisson model.
    pub rates: Option<Vec<Matrix>>,
    pub means: Option<Vec<Matrix>>,
}

fn split_trials(g: &Graph, t: Tensor) -> Vec<Matrix> {
    let s = g.shape(t);
    g.value(t).chunks(s.mat_len()).map(|c| Matrix::from_vec(s.rows, s.cols, c.to_vec())).collect()
}

/// Inference on a graph that has the model bound. Returns the latent
/// tensor `[B, T', n_x]` with its offset, and the encoder output.
pub fn infer_on_graph(
    g: &mut Graph,
    model: &BoundModel,
    input: &ModelInput,
    mode: InferenceMode,
) -> Result<(Encoded, Tensor, Option<Tensor>, usize)> {
    let enc = encode_multiscale(g, model, input, None)?;
    let filt = filter_multiscale(g, model, &enc)?;
    Ok(match mode {
        InferenceMode::Filter => {
            let x = stack_states(g, &filt.x_filt)?;
            let v = stack_variances(g, &filt.sigma_filt)?;
            (enc, x, Some(v), 0)
        }
        InferenceMode::Smooth => {
            let sm = kalman_smooth(g, &model.ldm_m, &filt)?;
            let x = stack_states(g, &sm.x_smooth)?;
            let v = stack_variances(g, &sm.sigma_smooth)?;
            (enc, x, Some(v), 0)
        }
        InferenceMode::Predict(k) => {
            let x = stack_states(g, &filt.x_filt)?;
            (enc, kstep_predict(g, model.ldm_m.a, x, k)?, None, k)
        }
    })
}

/// Runs the model on a batch of trials and copies everything to the host.
pub fn infer(model: &MrineModel, input: &ModelInput, mode: InferenceMode) -> Result<InferenceResult> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let (enc, x, var, offset) = infer_on_graph(&mut g, &bound, input, mode)?;
    let a_out = emit_embedding(&mut g, bound.ldm_m.c, x)?;
    let heads = decode_heads(&mut g, &bound, a_out)?;
    Ok(InferenceResult {
        mode,
        offset,
        a_s_filt: enc.a_s_filt.map(|t| split_trials(&g, t)),
        a_y_filt: enc.a_y_filt.map(|t| split_trials(&g, t)),
        a_fused: split_trials(&g, enc.a_fused),
        x: split_trials(&g, x),
        x_var: var.map(|v| split_trials(&g, v)),
        a_out: split_trials(&g, a_out),
        rates: heads.s.map(|t| split_trials(&g, t)),
        means: heads.y.map(|t| split_trials(&g, t)),
    })
}
