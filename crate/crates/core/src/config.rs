//! Run configuration: one TOML file describes data, model, noise, loss,
//! optimizer and evaluation. Command-line flags are applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::decoder::DecoderConfig;
use crate::denoise::NoiseConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::loss::ClassMode;
use crate::matching::LossWeights;
use crate::metrics::EvalConfig;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 200,
            batch_size: 32,
            grad_clip: 0.1,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Validation split: same task as the training data, different samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    pub num_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    /// Start decoding from uniformly random spans instead of the learned bank.
    #[serde(default)]
    pub random_spans: bool,
    /// Number of inference seeds for the dispersion sweep (0 = off).
    #[serde(default)]
    pub seed_sweep: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DatasetConfig,
    pub validation: ValidationConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub noise: NoiseConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DatasetConfig::default(),
            validation: ValidationConfig {
                num_samples: 100,
                seed: 1,
            },
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            noise: NoiseConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
            infer: InferConfig::default(),
        }
    }
}

impl RunConfig {
    /// Single-core desk preset used by the convergence experiments.
    pub fn desk() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/desk"),
            data: DatasetConfig {
                num_samples: 600,
                n_v: 32,
                c_v: 16,
                c_l: 16,
                n_l: 4,
                num_patterns: 6,
                spans_per_sample: [1, 3],
                snr: 3.0,
                seed: 100,
                tal_mode: false,
                pattern_seed: 7,
            },
            validation: ValidationConfig {
                num_samples: 500,
                seed: 200,
            },
            encoder: EncoderConfig {
                d_model: 32,
                n_heads: 4,
                n_layers: 2,
                ffn_width: 64,
                dropout: 0.1,
            },
            decoder: DecoderConfig {
                n_layers: 2,
                n_queries: 16,
                n_heads: 4,
                ffn_width: 64,
                bins: 8,
                d_hidden: 0,
                self_attn: true,
                dynamic_conv: true,
            },
            noise: NoiseConfig {
                enabled: true,
                n_denoise: 20,
                db_range: [-10.0, 0.0],
                diffusion_steps: 0,
                seed: 0,
            },
            loss: LossWeights::default(),
            optim: OptimConfig {
                lr: 1e-3,
                weight_decay: 1e-4,
                epochs: 40,
                batch_size: 16,
                grad_clip: 0.1,
                ..OptimConfig::default()
            },
            eval: EvalConfig::default(),
            infer: InferConfig::default(),
        }
    }

    /// Smallest sensible setup; used for gradient checks and smoke tests.
    pub fn tiny() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/tiny"),
            data: DatasetConfig {
                num_samples: 8,
                n_v: 16,
                c_v: 8,
                c_l: 8,
                n_l: 3,
                num_patterns: 3,
                spans_per_sample: [1, 2],
                snr: 3.0,
                seed: 3,
                tal_mode: false,
                pattern_seed: 1,
            },
            validation: ValidationConfig {
                num_samples: 4,
                seed: 4,
            },
            encoder: EncoderConfig {
                d_model: 16,
                n_heads: 2,
                n_layers: 2,
                ffn_width: 32,
                dropout: 0.0,
            },
            decoder: DecoderConfig {
                n_layers: 2,
                n_queries: 4,
                n_heads: 2,
                ffn_width: 32,
                bins: 4,
                d_hidden: 0,
                self_attn: true,
                dynamic_conv: true,
            },
            noise: NoiseConfig {
                enabled: true,
                n_denoise: 4,
                db_range: [-10.0, 0.0],
                diffusion_steps: 0,
                seed: 0,
            },
            loss: LossWeights::default(),
            optim: OptimConfig {
                lr: 1e-3,
                epochs: 2,
                batch_size: 4,
                ..OptimConfig::default()
            },
            eval: EvalConfig::default(),
            infer: InferConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            "default" => Ok(Self::default()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk, tiny or default)"))),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.validation.num_samples == 0 {
            return Err(Error::Config("validation.num_samples must be positive".into()));
        }
        self.model_config().validate()?;
        self.noise.validate()?;
        self.loss.validate()?;
        self.eval.validate()?;
        let o = &self.optim;
        if o.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be positive".into()));
        }
        let finite_nonneg = [o.lr, o.weight_decay, o.grad_clip, o.eps];
        if finite_nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("optimizer constants must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn class_mode(&self) -> ClassMode {
        if self.data.tal_mode {
            ClassMode::Detection {
                classes: self.data.num_patterns,
            }
        } else {
            ClassMode::Grounding
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            c_v: self.data.c_v,
            c_l: if self.data.tal_mode { 0 } else { self.data.c_l },
            mode: self.class_mode(),
            diffusion_steps: self.noise.diffusion_steps,
        }
    }

    pub fn train_data_config(&self) -> DatasetConfig {
        self.data.clone()
    }

    pub fn val_data_config(&self) -> DatasetConfig {
        DatasetConfig {
            num_samples: self.validation.num_samples,
            seed: self.validation.seed,
            ..self.data.clone()
        }
    }
}

/// Command-line overrides; `None` keeps the config value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub denoise: Option<bool>,
    pub noise_db: Option<[f64; 2]>,
    pub num_queries: Option<usize>,
    pub num_denoise: Option<usize>,
    pub diffusion_steps: Option<usize>,
    pub epochs: Option<usize>,
    pub random_spans: Option<bool>,
    pub seed_sweep: Option<usize>,
    pub self_attn: Option<bool>,
    pub dynamic_conv: Option<bool>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.denoise {
            cfg.noise.enabled = v;
        }
        if let Some(v) = self.noise_db {
            cfg.noise.db_range = v;
        }
        if let Some(v) = self.num_queries {
            cfg.decoder.n_queries = v;
        }
        if let Some(v) = self.num_denoise {
            cfg.noise.n_denoise = v;
        }
        if let Some(v) = self.diffusion_steps {
            cfg.noise.diffusion_steps = v;
        }
        if let Some(v) = self.epochs {
            cfg.optim.epochs = v;
        }
        if let Some(v) = self.random_spans {
            cfg.infer.random_spans = v;
        }
        if let Some(v) = self.seed_sweep {
            cfg.infer.seed_sweep = v;
        }
        if let Some(v) = self.self_attn {
            cfg.decoder.self_attn = v;
        }
        if let Some(v) = self.dynamic_conv {
            cfg.decoder.dynamic_conv = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        cfg.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in ["desk", "tiny", "default"] {
            let c = RunConfig::preset(name).unwrap();
            c.validate().unwrap();
            let back = RunConfig::from_toml_str(&c.to_toml()).unwrap();
            assert_eq!(back, c);
        }
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut s = RunConfig::tiny().to_toml();
        s = s.replacen("[optim]\n", "[optim]\nmomentum = 0.5\n", 1);
        match RunConfig::from_toml_str(&s) {
            Err(Error::Config(m)) => assert!(m.contains("momentum"), "{m}"),
            other => panic!("{other:?}"),
        }
        let s = format!("colour = 3\n{}", RunConfig::tiny().to_toml());
        assert!(RunConfig::from_toml_str(&s).is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let mut c = RunConfig::tiny();
        Overrides {
            seed: Some(9),
            denoise: Some(false),
            noise_db: Some([-20.0, -10.0]),
            num_queries: Some(6),
            epochs: Some(3),
            self_attn: Some(false),
            ..Overrides::default()
        }
        .apply(&mut c)
        .unwrap();
        assert_eq!(c.seed, 9);
        assert!(!c.noise.enabled);
        assert_eq!(c.noise.db_range, [-20.0, -10.0]);
        assert_eq!(c.decoder.n_queries, 6);
        assert_eq!(c.optim.epochs, 3);
        assert!(!c.decoder.self_attn);
        let bad = Overrides {
            num_denoise: Some(3),
            ..Overrides::default()
        };
        assert!(bad.apply(&mut c).is_err());
    }

    #[test]
    fn splits_share_patterns() {
        let c = RunConfig::desk();
        let a = crate::data::patterns(&c.train_data_config());
        let b = crate::data::patterns(&c.val_data_config());
        assert_eq!(a.signatures, b.signatures);
        assert_ne!(c.train_data_config().seed, c.val_data_config().seed);
    }
}
