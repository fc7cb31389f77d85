use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graph::{FeaturizerKind, FeaturizerSpec};
use crate::model::{Aggregation, GNSConfig, ModelError, Variant};
use crate::objectives::{LossWeights, NoiseSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key '{key}'; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },
    #[error("bad value '{value}' for '{key}': {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected key=value, got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    ShiftedSoftplus,
    TailoredRelu,
}

impl FromStr for ActivationKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shifted_softplus" => Ok(Self::ShiftedSoftplus),
            "tailored_relu" => Ok(Self::TailoredRelu),
            _ => Err("expected shifted_softplus or tailored_relu".into()),
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ShiftedSoftplus => "shifted_softplus",
            Self::TailoredRelu => "tailored_relu",
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Gns => "gns",
            Variant::GnsTat => "gns_tat",
        })
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Sum => "sum",
            Aggregation::Mean => "mean",
        })
    }
}

/// Wrapper so the featurizer kind parses and prints as a config value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurization(pub FeaturizerKind);

impl FromStr for Featurization {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bessel" => Ok(Self(FeaturizerKind::Bessel)),
            "gaussian" => Ok(Self(FeaturizerKind::Gaussian)),
            _ => Err("expected bessel or gaussian".into()),
        }
    }
}

impl fmt::Display for Featurization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.0 {
            FeaturizerKind::Bessel => "bessel",
            FeaturizerKind::Gaussian => "gaussian",
        })
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr,)*) => {
        /// Every tunable setting, addressable by its snake_case key.
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key),)*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let value = value.trim();
                match key.trim() {
                    $(stringify!($key) => self.$key = parse_value(key, value)?,)*
                    _ => {
                        return Err(ConfigError::UnknownKey {
                            key: key.to_string(),
                            valid: Self::KEYS.join(", "),
                        })
                    }
                }
                Ok(())
            }

            /// One `key=value` line per setting; parses back to `self`.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{}={}\n", stringify!($key), self.$key));)*
                out
            }
        }
    };
}

run_config! {
    gradient_steps: usize = 300_000,
    beta1: f64 = 0.9,
    beta2: f64 = 0.95,
    warm_up_steps: usize = 10_000,
    warm_up_start_learning_rate: f64 = 1e-5,
    warm_up_max_learning_rate: f64 = 1e-4,
    cosine_min_learning_rate: f64 = 1e-7,
    cosine_cycle_length: usize = 500_000,
    max_vertices_in_batch: usize = 256,
    max_edges_in_batch: usize = 9216,
    max_graphs_in_batch: usize = 8,
    distance_featurization: Featurization = Featurization(FeaturizerKind::Bessel),
    /// Connectivity radius.
    r_cut: f64 = 3.0,
    n_basis: usize = 8,
    max_edges_per_vertex: usize = 20,
    mlp_number_of_layers: usize = 3,
    mlp_hidden_sizes: usize = 1024,
    activation: ActivationKind = ActivationKind::TailoredRelu,
    message_passing_layers: usize = 10,
    block_iterations: usize = 3,
    vertex_edge_latent_vector_sizes: usize = 512,
    decoder_aggregation: Aggregation = Aggregation::Mean,
    decoder_layers: usize = 2,
    variant: Variant = Variant::GnsTat,
    tat_eta: f64 = 0.8,
    position_noise_sigma: f64 = 0.02,
    mean_center_noise: bool = true,
    ema_decay: f64 = 0.9999,
    position_loss_coefficient: f64 = 1.0,
    atom_type_mask_probability: f64 = 0.75,
    atom_type_loss_coefficient: f64 = 4.0,
    target_loss_coefficient: f64 = 0.0,
    /// Label regressed during fine-tuning.
    target: String = "surrogate_energy".to_string(),
    /// Steps between validation passes.
    eval_interval: usize = 100,
    /// Validation passes without improvement before stopping.
    patience: usize = 10,
    /// Steps between checkpoints; 0 writes only the final one.
    checkpoint_interval: usize = 0,
    valid_fraction: f64 = 0.1,
    test_fraction: f64 = 0.1,
    /// Train on interpolations between paired initial and relaxed frames.
    relaxation_interpolation: bool = false,
}

impl RunConfig {
    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_text(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: kv.to_string(),
        })?;
        self.set(k, v)
    }

    /// SHA-256 of the canonical text form.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.gradient_steps == 0 {
            return bad("gradient_steps must be at least 1".into());
        }
        if !(self.warm_up_start_learning_rate <= self.warm_up_max_learning_rate) {
            return bad("warm_up_start_learning_rate must not exceed warm_up_max_learning_rate".into());
        }
        if self.cosine_min_learning_rate < 0.0 || self.warm_up_start_learning_rate < 0.0 {
            return bad("learning rates must be non-negative".into());
        }
        for (name, cap) in [
            ("max_vertices_in_batch", self.max_vertices_in_batch),
            ("max_edges_in_batch", self.max_edges_in_batch),
            ("max_graphs_in_batch", self.max_graphs_in_batch),
        ] {
            if cap == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("ema_decay", self.ema_decay)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1)"));
            }
        }
        let expected = match self.variant {
            Variant::Gns => ActivationKind::ShiftedSoftplus,
            Variant::GnsTat => ActivationKind::TailoredRelu,
        };
        if self.activation != expected {
            return bad(format!("variant {} requires activation {expected}", self.variant));
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1".into());
        }
        let f = [self.valid_fraction, self.test_fraction];
        if f.iter().any(|v| !(0.0..1.0).contains(v)) || f[0] + f[1] >= 1.0 {
            return bad("valid_fraction and test_fraction must be in [0, 1) and sum below 1".into());
        }
        self.noise(0).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.weights().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn featurizer(&self) -> FeaturizerSpec {
        match self.distance_featurization.0 {
            FeaturizerKind::Bessel => FeaturizerSpec::bessel(self.n_basis, self.r_cut),
            FeaturizerKind::Gaussian => FeaturizerSpec::gaussian(self.n_basis, self.r_cut),
        }
    }

    /// The model configuration; solves the tailored slope for GNS-TAT.
    pub fn model_config(&self) -> Result<GNSConfig, ModelError> {
        GNSConfig {
            variant: self.variant,
            n_mp_layers: self.message_passing_layers,
            n_block_iterations: self.block_iterations,
            latent: self.vertex_edge_latent_vector_sizes,
            mlp_hidden: self.mlp_hidden_sizes,
            mlp_layers: self.mlp_number_of_layers,
            decoder_layers: self.decoder_layers,
            decoder_aggregation: self.decoder_aggregation,
            activation: crate::model::Activation::ShiftedSoftplus,
            featurizer: self.featurizer(),
            max_edges_per_vertex: self.max_edges_per_vertex,
            eta: self.tat_eta,
        }
        .finalize()
    }

    pub fn noise(&self, seed: u64) -> NoiseSpec {
        NoiseSpec {
            sigma: self.position_noise_sigma,
            mean_center: self.mean_center_noise,
            seed,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            position_coeff: self.position_loss_coefficient,
            target_coeff: self.target_loss_coefficient,
            atom_type_coeff: self.atom_type_loss_coefficient,
            atom_mask_prob: self.atom_type_mask_probability,
        }
    }

    pub fn caps(&self) -> super::BatchCaps {
        super::BatchCaps {
            max_vertices: self.max_vertices_in_batch,
            max_edges: self.max_edges_in_batch,
            max_graphs: self.max_graphs_in_batch,
        }
    }

    /// Table 4 fine-tuning recipe on top of the current settings: sigma 0.05,
    /// position coefficient 0.01, no masking, supervised target on.
    pub fn apply_finetune_recipe(&mut self) {
        self.position_noise_sigma = 0.05;
        self.position_loss_coefficient = 0.01;
        self.atom_type_mask_probability = 0.0;
        self.atom_type_loss_coefficient = 0.0;
        self.target_loss_coefficient = 1.0;
        self.cosine_min_learning_rate = 3e-7;
        self.max_edges_in_batch = 3072;
    }
}
