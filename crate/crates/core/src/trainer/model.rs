use candle_core::{DType, Device, Tensor};

use crate::batch::LayoutBatch;
use crate::discriminator::Discriminator;
use crate::error::Result;
use crate::generator::{Generator, Mode};
use crate::inference::InferenceNet;
use crate::layout::{CategorySet, Image, Layout};
use crate::mask::{sample_latents, LatentBatch, LatentBundle, MaskGenerator};
use crate::nn::Init;
use crate::objective::FixedFeatureExtractor;

use super::config::TrainConfig;

/// The four players plus the frozen feature extractor.
#[derive(Debug, Clone)]
pub struct DclModel {
    pub config: TrainConfig,
    pub categories: CategorySet,
    pub mask: MaskGenerator,
    pub generator: Generator,
    pub inference: InferenceNet,
    pub discriminator: Discriminator,
    pub features: FixedFeatureExtractor,
    pub device: Device,
}

/// Outputs of the layout-to-mask-to-image-to-mask chain.
#[derive(Debug, Clone)]
pub struct LatentConsensus {
    /// Initial map from the mask generator, `(B, d, s, s)`.
    pub h_init: Tensor,
    /// Generator-refined map at the image lattice, `(B, d, L, L)`.
    pub h_y: Tensor,
    pub x_syn: Tensor,
    pub h_syn_hat: Tensor,
}

/// Outputs of the image-to-mask-to-image chain.
#[derive(Debug, Clone)]
pub struct DataConsensus {
    pub h_real_hat: Tensor,
    pub x_recon: Tensor,
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the latents of batch element `index` at `step`.
pub fn latent_seed(seed: u64, step: u64, index: usize) -> u64 {
    mix64(mix64(mix64(seed) ^ step) ^ index as u64)
}

impl DclModel {
    pub fn new(config: &TrainConfig, categories: CategorySet, device: &Device) -> Result<Self> {
        config.check()?;
        let dtype = config.precision.dtype();
        let d = categories.len();
        let init = |k: u64| Init::new(mix64(config.seed ^ mix64(k)), dtype, device);
        let mask = MaskGenerator::new(config.mask, d, &mut init(1))?;
        let generator = Generator::new(config.generator_config()?, d, config.mask.instance_width(), &mut init(2))?;
        let inference = InferenceNet::new(config.inference, d, &mut init(3))?;
        let discriminator = Discriminator::new(config.discriminator, d, config.image_size, &mut init(4))?;
        let features = FixedFeatureExtractor::new(mix64(config.seed ^ mix64(5)), config.feature_channels, dtype, device)?;
        Ok(Self {
            config: config.clone(),
            categories,
            mask,
            generator,
            inference,
            discriminator,
            features,
            device: device.clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    /// Dense encoding of validated layouts.
    pub fn layout_batch(&self, layouts: &[Layout]) -> Result<LayoutBatch> {
        LayoutBatch::new(layouts, self.categories.len(), self.config.image_size, self.dtype(), &self.device)
    }

    pub fn image_batch(&self, images: &[&Image]) -> Result<Tensor> {
        let ts: Vec<Tensor> = images.iter().map(|i| i.to_tensor(self.dtype(), &self.device)).collect::<Result<_>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    }

    pub fn latents(&self, layouts: &[Layout], seeds: &[u64]) -> Vec<LatentBundle> {
        layouts
            .iter()
            .zip(seeds)
            .map(|(l, &s)| sample_latents(l, s, self.config.generator.z_dim, self.config.mask.style_dim))
            .collect()
    }

    pub fn stack_latents(&self, bundles: &[LatentBundle], batch: &LayoutBatch) -> Result<LatentBatch> {
        LatentBatch::stack(bundles, batch.slots(), self.dtype(), &self.device)
    }

    /// Instance style matrix shared by both chains.
    pub fn styles(&self, batch: &LayoutBatch, latents: &LatentBatch) -> Result<Tensor> {
        self.mask.style_matrix(batch, latents)
    }

    /// Layout -> initial map -> image and refined map -> inferred map.
    pub fn latent_consensus_pass(
        &mut self,
        batch: &LayoutBatch,
        latents: &LatentBatch,
        styles: &Tensor,
        mode: Mode,
    ) -> Result<LatentConsensus> {
        let h_init = self.mask.initial_map(styles, batch)?;
        let syn = self.generator.synthesize(&latents.z_x, &h_init, styles, batch, mode)?;
        let h_syn_hat = self.inference.infer(&syn.image)?;
        Ok(LatentConsensus { h_init, h_y: syn.label_map, x_syn: syn.image, h_syn_hat })
    }

    /// Real image -> inferred map -> reconstruction. The inferred map stays
    /// on the graph unless `detach_inferred` is set.
    pub fn data_consensus_pass(
        &mut self,
        x_real: &Tensor,
        batch: &LayoutBatch,
        latents: &LatentBatch,
        styles: &Tensor,
        mode: Mode,
        detach_inferred: bool,
    ) -> Result<DataConsensus> {
        let h_real_hat = self.inference.infer(x_real)?;
        let h_in = if detach_inferred { h_real_hat.detach() } else { h_real_hat.clone() };
        let recon = self.generator.synthesize(&latents.z_x, &h_in, styles, batch, mode)?;
        Ok(DataConsensus { h_real_hat, x_recon: recon.image })
    }
}
