use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discriminator::DiscriminatorConfig;
use crate::error::{DclError, Result};
use crate::generator::GeneratorConfig;
use crate::inference::InferenceConfig;
use crate::mask::MaskGeneratorConfig;
use crate::nn::AdamConfig;
use crate::objective::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

/// Everything that determines a training run. Parsed from TOML; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// `(beta1, beta2)` for the generator and the mask generator.
    pub betas_g: [f64; 2],
    pub betas_d: [f64; 2],
    pub betas_i: [f64; 2],
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Discriminator updates per iteration.
    pub d_steps: usize,
    /// Joint minimization updates per iteration.
    pub g_steps: usize,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    /// Evaluation period in steps; 0 evaluates once per epoch.
    pub eval_every: u64,
    /// Validation samples used per evaluation; 0 means the whole split.
    pub eval_samples: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub image_size: usize,
    pub max_instances: usize,
    pub precision: Precision,
    /// Width of the fixed perceptual feature extractor.
    pub feature_channels: usize,
    pub generator: GeneratorSection,
    pub mask: MaskGeneratorConfig,
    pub inference: InferenceConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub ch: usize,
    pub z_dim: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self { ch: 8, z_dim: 64 }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            betas_g: [0.0, 0.999],
            betas_d: [0.0, 0.999],
            betas_i: [0.9, 0.999],
            batch_size: 16,
            epochs: 30,
            seed: 0,
            d_steps: 1,
            g_steps: 1,
            checkpoint_every: 1000,
            eval_every: 0,
            eval_samples: 0,
            grad_clip: 0.0,
            image_size: 64,
            max_instances: 8,
            precision: Precision::F32,
            feature_channels: 16,
            generator: GeneratorSection::default(),
            mask: MaskGeneratorConfig::default(),
            inference: InferenceConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| DclError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DclError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn generator_config(&self) -> Result<GeneratorConfig> {
        GeneratorConfig::for_lattice(self.image_size, self.generator.ch, self.generator.z_dim)
    }

    pub fn adam_g(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate, self.betas_g[0], self.betas_g[1])
    }

    pub fn adam_d(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate, self.betas_d[0], self.betas_d[1])
    }

    pub fn adam_i(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate, self.betas_i[0], self.betas_i[1])
    }

    pub fn clip(&self) -> Option<f64> {
        (self.grad_clip > 0.0).then_some(self.grad_clip)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(DclError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("betas_g", self.betas_g), ("betas_d", self.betas_d), ("betas_i", self.betas_i)] {
            if !b.iter().all(|v| (0.0..1.0).contains(v)) {
                return bad(format!("{name} must lie in [0, 1)"));
            }
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for batch statistics".into());
        }
        if self.epochs == 0 || self.d_steps == 0 || self.g_steps == 0 {
            return bad("epochs, d_steps and g_steps must be positive".into());
        }
        if self.max_instances == 0 || self.feature_channels == 0 {
            return bad("max_instances and feature_channels must be positive".into());
        }
        if self.grad_clip < 0.0 {
            return bad("grad_clip must be non-negative".into());
        }
        let pow = self.inference.depth.saturating_sub(1);
        if !self.image_size.is_multiple_of(1 << pow) {
            return bad(format!("image_size {} not divisible by 2^{pow}", self.image_size));
        }
        self.generator_config()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.hash().unwrap(), TrainConfig::from_toml(&text).unwrap().hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_errors_and_missing_keys_take_defaults() {
        let text = TrainConfig::default().to_toml().unwrap();
        let extra = format!("bogus = 1\n{text}");
        assert!(matches!(TrainConfig::from_toml(&extra), Err(DclError::Config(_))));
        let nested = text.replace("[loss]\n", "[loss]\nsharpness = 2.0\n");
        assert!(matches!(TrainConfig::from_toml(&nested), Err(DclError::Config(_))));
        let missing = text.replace("epochs = 30\n", "").replace("ch = 8\n", "");
        assert_eq!(TrainConfig::from_toml(&missing).unwrap(), TrainConfig::default());
        let partial = TrainConfig::from_toml("seed = 7\n[inference]\ndepth = 2\n").unwrap();
        assert_eq!((partial.seed, partial.inference.depth, partial.inference.base_channels), (7, 2, 32));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = TrainConfig { batch_size: 1, ..Default::default() };
        assert!(cfg.check().is_err());
        cfg.batch_size = 4;
        cfg.image_size = 48;
        assert!(cfg.check().is_err());
        cfg.image_size = 32;
        cfg.check().unwrap();
        cfg.learning_rate = 0.0;
        assert!(cfg.check().is_err());
    }
}
