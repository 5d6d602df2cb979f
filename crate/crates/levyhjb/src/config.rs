//! Experiment configuration: one human-editable TOML file collecting the
//! basis, noise, integrator, control and output blocks, with a stable
//! fingerprint embedded in every artifact the toolkit writes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::hjb::HjbParams;
use crate::noise::{GaussianNoise, JumpModel, MarkDistribution};
use crate::sde::{GalerkinModel, IntegratorConfig, Scheme};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unsupported schema version {0} (expected 1)")]
    BadSchema(u32),
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
}

/// Structured non-fatal finding from config validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigWarning {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BasisBlock {
    pub m: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct JumpBlock {
    pub rate: f64,
    /// Per-mode gain amplitude; the gain field is `gain * lambda_k^{-decay}`.
    pub gain: f64,
    pub decay: f64,
    /// Exponential-moment exponent used by the configuration check.
    pub theta: f64,
    pub mark: MarkDistribution,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseBlock {
    pub epsilon: f64,
    pub jumps: JumpBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IntegratorBlock {
    pub dt: f64,
    pub horizon: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
}

fn default_scheme() -> Scheme {
    Scheme::ExponentialEuler
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeedsBlock {
    pub master: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OutputBlock {
    pub dir: String,
    pub formats: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub basis: BasisBlock,
    pub noise: NoiseBlock,
    pub integrator: IntegratorBlock,
    pub hjb: HjbParams,
    pub seeds: SeedsBlock,
    pub output: OutputBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: 1,
            basis: BasisBlock { m: 4 },
            noise: NoiseBlock {
                epsilon: 1.5,
                jumps: JumpBlock {
                    rate: 0.5,
                    gain: 0.2,
                    decay: 1.0,
                    theta: 0.25,
                    mark: MarkDistribution::ClippedGaussian {
                        mean: 0.0,
                        std: 1.0,
                        clip: 2.0,
                    },
                },
            },
            integrator: IntegratorBlock {
                dt: 1e-3,
                horizon: 0.5,
                scheme: Scheme::ExponentialEuler,
            },
            hjb: HjbParams::default(),
            seeds: SeedsBlock { master: 42 },
            output: OutputBlock {
                dir: "out".to_string(),
                formats: vec!["csv".to_string(), "json".to_string()],
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if cfg.schema_version != 1 {
            return Err(ConfigError::BadSchema(cfg.schema_version));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hard constraints; violations reject the configuration.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |field: &str, message: String| {
            Err(ConfigError::Invalid {
                field: field.to_string(),
                message,
            })
        };
        if self.basis.m == 0 {
            return fail("basis.m", "truncation level must be positive".into());
        }
        if self.integrator.dt <= 0.0 {
            return fail("integrator.dt", "step must be positive".into());
        }
        let steps = self.integrator.horizon / self.integrator.dt;
        if steps < 1.0 || (steps - steps.round()).abs() > 1e-9 * steps.round().max(1.0) {
            return fail(
                "integrator.horizon",
                "horizon must be a positive integer multiple of dt".into(),
            );
        }
        if self.hjb.radius < 0.0 {
            return fail("hjb.radius", "control radius must be nonnegative".into());
        }
        if self.hjb.n_slices == 0 {
            return fail("hjb.n_slices", "need at least one slice".into());
        }
        let delta = self.integrator.horizon / self.hjb.n_slices as f64;
        let per = delta / self.integrator.dt;
        if (per - per.round()).abs() > 1e-9 * per.round().max(1.0) || per.round() < 1.0 {
            return fail(
                "hjb.n_slices",
                "slice width must be an integer multiple of dt".into(),
            );
        }
        if !(self.hjb.alpha1 < self.hjb.alpha
            && self.hjb.alpha < self.hjb.alpha_tilde1
            && self.hjb.alpha_tilde1 < 0.5)
        {
            return fail(
                "hjb.alpha*",
                format!(
                    "exponent chain alpha1 < alpha < alpha_tilde1 < 1/2 violated: {} / {} / {}",
                    self.hjb.alpha1, self.hjb.alpha, self.hjb.alpha_tilde1
                ),
            );
        }
        if self.noise.jumps.rate < 0.0 {
            return fail("noise.jumps.rate", "jump rate must be nonnegative".into());
        }
        Ok(())
    }

    /// Soft constraints; each violation is reported but the configuration
    /// remains usable.
    pub fn warnings(&self) -> Vec<ConfigWarning> {
        let mut out = Vec::new();
        if self.noise.epsilon <= 1.0 {
            out.push(ConfigWarning {
                field: "noise.epsilon".into(),
                message: format!(
                    "epsilon = {} is outside the well-posedness regime (needs > 1)",
                    self.noise.epsilon
                ),
            });
        }
        let smoothing_cap = 1.0 + 2.0 * self.hjb.alpha;
        if self.noise.epsilon >= smoothing_cap {
            out.push(ConfigWarning {
                field: "noise.epsilon".into(),
                message: format!(
                    "epsilon = {} is not below 1 + 2 alpha = {smoothing_cap}; the semigroup-smoothing chain cannot hold for the configured exponents",
                    self.noise.epsilon
                ),
            });
        }
        if self.hjb.gamma < 0.0 {
            out.push(ConfigWarning {
                field: "hjb.gamma".into(),
                message: "negative exponential weight inflates the Feynman-Kac damping".into(),
            });
        }
        out
    }

    /// Stable hash of the canonicalized configuration; embedded in every
    /// output artifact.
    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("config is serializable");
        let canonical = canonical_json(&value);
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn build_model(&self) -> Result<GalerkinModel, crate::spectral::SpectralError> {
        GalerkinModel::new(self.basis.m, self.noise.epsilon)
    }

    pub fn gaussian(&self) -> GaussianNoise {
        GaussianNoise {
            eps: self.noise.epsilon,
        }
    }

    pub fn jump_model(&self, basis: &crate::spectral::Basis) -> JumpModel {
        JumpModel {
            rate: self.noise.jumps.rate,
            mark: self.noise.jumps.mark,
            gain: JumpModel::power_gain(basis, self.noise.jumps.gain, self.noise.jumps.decay),
            theta: self.noise.jumps.theta,
        }
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig {
            dt: self.integrator.dt,
            horizon: self.integrator.horizon,
            scheme: self.integrator.scheme,
        }
    }
}

/// Canonical compact JSON with recursively sorted object keys; the textual
/// base of the fingerprint and snapshot checksums.
pub fn canonical_json(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let inner: Vec<String> = keys
                .into_iter()
                .map(|k| {
                    format!(
                        "{}:{}",
                        serde_json::to_string(k).expect("string"),
                        canonical_json(&map[k])
                    )
                })
                .collect();
            format!("{{{}}}", inner.join(","))
        }
        serde_json::Value::Array(items) => {
            let inner: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", inner.join(","))
        }
        leaf => serde_json::to_string(leaf).expect("leaf serializes"),
    }
}
