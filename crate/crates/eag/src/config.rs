//! Run configuration: one TOML file with a section per module. Unknown keys
//! are rejected; every field has a default mirroring the full-scale setup.
//! The `EAG_SEED` environment variable overrides the file's seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::AEConfig;
use crate::energy_transformer::{ETConfig, GuidanceConfig};
use crate::error::{EagError, Result};
use crate::lorenz::LorenzDatasetConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsOptions {
    /// Ridge penalty used by `decode` unless --lambda is given.
    pub ridge_lambda: f64,
    /// Penalties tried (and reported) in the decode sweep.
    pub lambda_sweep: Vec<f64>,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        MetricsOptions { ridge_lambda: 10.0, lambda_sweep: vec![0.1, 1.0, 10.0, 100.0] }
    }
}

fn default_train_ae() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs: 500,
        warmup_epochs: 10,
        batch_size: 64,
        seed: 0,
        grad_clip: None,
        patience: Some(50),
    }
}

fn default_train_eag() -> TrainConfig {
    TrainConfig::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: LorenzDatasetConfig,
    pub autoencoder: AEConfig,
    pub energy_transformer: ETConfig,
    pub guidance: GuidanceConfig,
    #[serde(default = "default_train_ae")]
    pub train_ae: TrainConfig,
    #[serde(default = "default_train_eag")]
    pub train_eag: TrainConfig,
    pub metrics: MetricsOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: LorenzDatasetConfig::default(),
            autoencoder: AEConfig::default(),
            energy_transformer: ETConfig::default(),
            guidance: GuidanceConfig::default(),
            train_ae: default_train_ae(),
            train_eag: default_train_eag(),
            metrics: MetricsOptions::default(),
        }
    }
}

impl RunConfig {
    /// Parse a TOML file; missing sections take defaults, unknown keys are
    /// errors with field paths. EAG_SEED, when set, overrides the seed.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env_seed()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| EagError::config(format!("config parse error: {e}")))
    }

    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("EAG_SEED") {
            self.seed = v
                .trim()
                .parse::<u64>()
                .map_err(|_| EagError::config(format!("EAG_SEED must be a u64, got `{v}`")))?;
        }
        Ok(())
    }

    /// Canonical serialized form; parse(dump(x)) == x.
    pub fn dump(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_full_scale_setup() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.dataset.n_trials, 7000);
        assert_eq!(cfg.dataset.n_neurons, 128);
        assert_eq!(cfg.dataset.t_bins, 256);
        assert_eq!(cfg.autoencoder.encoder_blocks, 4);
        assert_eq!(cfg.autoencoder.embed_dim, 256);
        assert_eq!(cfg.autoencoder.num_latents, 8);
        assert_eq!(cfg.energy_transformer.embed_dim, 256);
        assert_eq!(cfg.energy_transformer.encoder_depth, 4);
        assert_eq!(cfg.energy_transformer.num_heads, 4);
        assert_eq!(cfg.energy_transformer.mlp_depth, 6);
        assert_eq!(cfg.energy_transformer.mlp_width, 768);
        assert_eq!(cfg.energy_transformer.noise_dim, 64);
        assert_eq!(cfg.energy_transformer.alpha, 1.0);
        assert_eq!(cfg.energy_transformer.mask_ratio_min, 0.7);
        assert_eq!(cfg.energy_transformer.mask_ratio_max, 1.0);
        assert_eq!(cfg.energy_transformer.infer_temperature, 0.7);
        assert_eq!(cfg.guidance.gamma, 4.0);
        assert_eq!(cfg.guidance.null_dropout_prob, 0.1);
        assert_eq!(cfg.train_eag.learning_rate, 1e-4);
        assert_eq!(cfg.train_eag.epochs, 4000);
        assert_eq!(cfg.train_eag.warmup_epochs, 100);
        assert_eq!(cfg.train_eag.batch_size, 512);
    }

    #[test]
    fn unknown_keys_are_rejected_with_paths() {
        let err = RunConfig::parse("zzz_not_a_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("zzz_not_a_key"), "{err}");
        let err = RunConfig::parse("[dataset]\nn_trails = 5\n").unwrap_err();
        assert!(err.to_string().contains("n_trails"), "{err}");
    }

    #[test]
    fn parse_dump_roundtrip_is_canonical() {
        let text = "seed = 9\n[dataset]\nn_trials = 12\nn_neurons = 8\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.dataset.n_trials, 12);
        let canon = cfg.dump();
        let cfg2 = RunConfig::parse(&canon).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(canon, cfg2.dump());
    }

    #[test]
    fn env_seed_overrides() {
        let mut cfg = RunConfig::default();
        std::env::set_var("EAG_SEED", "12345");
        cfg.apply_env_seed().unwrap();
        assert_eq!(cfg.seed, 12345);
        std::env::set_var("EAG_SEED", "not-a-number");
        assert!(cfg.apply_env_seed().is_err());
        std::env::remove_var("EAG_SEED");
    }
}
