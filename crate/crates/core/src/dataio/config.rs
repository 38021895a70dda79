use serde::{Deserialize, Serialize};

use super::{DataError, Result};
use crate::model::{MlpShape, ModelConfig, ObsModel};
use crate::trainer::{Preset, TrainConfig, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SingleScale {
    Off,
    Poisson,
    Gaussian,
}

impl SingleScale {
    pub fn variant(self) -> Variant {
        match self {
            SingleScale::Off => Variant::Mrine,
            SingleScale::Poisson => Variant::SsPoisson,
            SingleScale::Gaussian => Variant::SsGaussian,
        }
    }
}

/// Training run configuration. Keys follow the hyperparameter-table
/// columns; MLP shapes are `"layers,units"` strings. A `preset` fills
/// every key from its table row, explicit keys override it. Unknown keys
/// are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub single_scale: Option<SingleScale>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_s: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_y: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_m: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_s: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_y: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_a: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_x: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub K: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub GC: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_y: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub TE: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub obs_model_s: Option<ObsModel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_impute: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learn_initial_state: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enable_l_smooth: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enable_sm_s: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enable_sm_y: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enable_sm_x: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_warm_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Fixed likelihood scale; computed from the training split when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

pub fn parse_shape(s: &str) -> Result<MlpShape> {
    let bad = || DataError::Config(format!("MLP shape {s:?}; expected \"layers,units\""));
    let (l, h) = s.split_once(',').ok_or_else(bad)?;
    let (l, h): (usize, usize) = (l.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?);
    if l > 0 && h == 0 {
        return Err(bad());
    }
    Ok(MlpShape::new(l, h))
}

fn shape_str(s: MlpShape) -> String {
    format!("{},{}", s.hidden_layers, s.hidden_units)
}

impl RunConfig {
    /// Parses and normalizes (MLP shapes rewritten as `"L,H"`).
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| DataError::Config(e.to_string()))?;
        for s in [&mut cfg.phi_s, &mut cfg.phi_y, &mut cfg.phi_m, &mut cfg.theta_s, &mut cfg.theta_y].into_iter().flatten() {
            *s = shape_str(parse_shape(s)?);
        }
        Ok(cfg)
    }

    /// Compact JSON with fixed key order and absent keys omitted.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn variant(&self) -> Variant {
        self.single_scale.unwrap_or(SingleScale::Off).variant()
    }

    /// Model and training configuration for data with `n_s` spike and
    /// `n_y` Gaussian channels.
    pub fn resolve(&self, n_s: usize, n_y: usize) -> Result<(ModelConfig, TrainConfig)> {
        let variant = self.variant();
        let (mut model, mut train) = match self.preset {
            Some(p) => (p.model_config(variant, n_s, n_y), p.train_config(variant)),
            None => {
                let (Some(n_a), Some(n_x)) = (self.n_a, self.n_x) else {
                    return Err(DataError::Config("without a preset, n_a and n_x are required".into()));
                };
                let placeholder = MlpShape::new(0, 0);
                let m = match variant {
                    Variant::Mrine => ModelConfig::multiscale(n_s, n_y, n_a, n_x, placeholder),
                    Variant::SsPoisson => ModelConfig::single_scale(crate::model::Modality::Poisson, n_s, n_y, n_a, n_x, placeholder),
                    Variant::SsGaussian => ModelConfig::single_scale(crate::model::Modality::Gaussian, n_s, n_y, n_a, n_x, placeholder),
                };
                let slots = [
                    ("phi_s", m.enc_s, &self.phi_s),
                    ("phi_y", m.enc_y, &self.phi_y),
                    ("phi_m", m.fusion, &self.phi_m),
                    ("theta_s", m.dec_s, &self.theta_s),
                    ("theta_y", m.dec_y, &self.theta_y),
                ];
                if let Some((key, ..)) = slots.iter().find(|(_, used, given)| used.is_some() && given.is_none()) {
                    return Err(DataError::Config(format!("without a preset, {key} is required")));
                }
                (m, TrainConfig::default())
            }
        };
        let slots = [
            ("phi_s", &mut model.enc_s, &self.phi_s),
            ("phi_y", &mut model.enc_y, &self.phi_y),
            ("phi_m", &mut model.fusion, &self.phi_m),
            ("theta_s", &mut model.dec_s, &self.theta_s),
            ("theta_y", &mut model.dec_y, &self.theta_y),
        ];
        for (key, slot, given) in slots {
            if let Some(s) = given {
                if slot.is_none() {
                    return Err(DataError::Config(format!("{key} does not exist in a {variant:?} model")));
                }
                *slot = Some(parse_shape(s)?);
            }
        }
        if let Some(v) = self.n_a {
            model.n_a = v;
        }
        if let Some(v) = self.n_x {
            model.n_x = v;
        }
        if let Some(v) = self.obs_model_s {
            model.obs_model_s = v;
        }
        if let Some(v) = self.zero_impute {
            model.zero_impute = v;
        }
        if let Some(v) = self.learn_initial_state {
            model.learn_initial_state = v;
        }
        let l = &mut train.loss;
        let overrides: [(&mut f64, Option<f64>); 11] = [
            (&mut train.rho_t, self.rho_t),
            (&mut train.rho_d, self.rho_d),
            (&mut train.clip_norm, self.GC),
            (&mut l.gamma_s, self.gamma_s),
            (&mut l.gamma_y, self.gamma_y),
            (&mut l.gamma_x, self.gamma_x),
            (&mut l.gamma_r, self.gamma_r),
            (&mut train.lr_min, self.lr_min),
            (&mut train.lr_max, self.lr_max),
            (&mut train.lr_decay, self.lr_decay),
            (&mut l.tau, self.tau),
        ];
        for (slot, v) in overrides {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if let Some(k) = &self.K {
            l.horizons = k.clone();
        }
        for (slot, v) in [
            (&mut l.enable_l_smooth, self.enable_l_smooth),
            (&mut l.enable_sm_s, self.enable_sm_s),
            (&mut l.enable_sm_y, self.enable_sm_y),
            (&mut l.enable_sm_x, self.enable_sm_x),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        for (slot, v) in [(&mut train.epochs, self.TE), (&mut train.batch_size, self.batch_size), (&mut train.lr_warm_epochs, self.lr_warm_epochs)] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if let Some(v) = self.seed {
            train.seed = v;
        }
        model.topology()?;
        train.validate().map_err(|e| DataError::Config(e.to_string()))?;
        Ok((model, train))
    }

    /// Every key written out, as resolved for the given channel counts.
    pub fn expanded(&self, n_s: usize, n_y: usize) -> Result<RunConfig> {
        let (m, t) = self.resolve(n_s, n_y)?;
        let l = &t.loss;
        Ok(RunConfig {
            preset: self.preset,
            single_scale: Some(self.single_scale.unwrap_or(SingleScale::Off)),
            phi_s: m.enc_s.map(shape_str),
            phi_y: m.enc_y.map(shape_str),
            phi_m: m.fusion.map(shape_str),
            theta_s: m.dec_s.map(shape_str),
            theta_y: m.dec_y.map(shape_str),
            n_a: Some(m.n_a),
            n_x: Some(m.n_x),
            K: Some(l.horizons.clone()),
            rho_t: Some(t.rho_t),
            rho_d: Some(t.rho_d),
            GC: Some(t.clip_norm),
            gamma_s: Some(l.gamma_s),
            gamma_y: Some(l.gamma_y),
            gamma_x: Some(l.gamma_x),
            gamma_r: Some(l.gamma_r),
            TE: Some(t.epochs),
            obs_model_s: Some(m.obs_model_s),
            zero_impute: Some(m.zero_impute),
            learn_initial_state: Some(m.learn_initial_state),
            enable_l_smooth: Some(l.enable_l_smooth),
            enable_sm_s: Some(l.enable_sm_s),
            enable_sm_y: Some(l.enable_sm_y),
            enable_sm_x: Some(l.enable_sm_x),
            batch_size: Some(t.batch_size),
            lr_min: Some(t.lr_min),
            lr_max: Some(t.lr_max),
            lr_warm_epochs: Some(t.lr_warm_epochs),
            lr_decay: Some(t.lr_decay),
            seed: Some(t.seed),
            tau: self.tau,
        })
    }
}
