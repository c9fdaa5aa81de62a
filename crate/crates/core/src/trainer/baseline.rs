//! Fully supervised twin of the inference network: same architecture,
//! optimizer and schedule, trained with per-pixel cross-entropy on
//! ground-truth masks. Used only as a reference point.

use candle_core::{Device, Tensor};

use crate::dataset::{epoch_order, LayoutDataset, Sample};
use crate::error::{DclError, Result};
use crate::inference::InferenceNet;
use crate::layout::{HardLabelMap, Image};
use crate::nn::{log_softmax, scalar, Adam, Init};

use super::config::TrainConfig;
use super::model::mix64;

/// Mean per-pixel cross-entropy of `(B, d, h, w)` logits against labels.
pub fn cross_entropy(logits: &Tensor, labels: &[&HardLabelMap]) -> Result<Tensor> {
    let (b, d, h, w) = logits.dims4()?;
    let mut one_hot = vec![0.0; b * d * h * w];
    for (i, m) in labels.iter().enumerate() {
        for (p, &l) in m.labels.iter().enumerate() {
            one_hot[(i * d + l as usize) * h * w + p] = 1.0;
        }
    }
    let target = crate::nn::tensor_from(one_hot, &[b, d, h, w], logits.dtype(), logits.device())?;
    Ok((log_softmax(logits, 1)? * target)?.sum(1)?.mean_all()?.neg()?)
}

/// Trains a fresh inference network on the masks of `train`. Its initial
/// weights equal those of the weakly supervised run with the same seed.
pub fn train_supervised(config: &TrainConfig, train: &LayoutDataset, device: &Device) -> Result<InferenceNet> {
    config.check()?;
    let dtype = config.precision.dtype();
    let mut init = Init::new(mix64(config.seed ^ mix64(3)), dtype, device);
    let net = InferenceNet::new(config.inference, train.categories.len(), &mut init)?;
    let samples: Vec<Sample> = train.iter().collect::<Result<_>>()?;
    if samples.iter().any(|s| s.mask.is_none()) {
        return Err(DclError::Config("supervised training needs masks for every sample".into()));
    }
    let mut opt = Adam::new(config.adam_i());
    let per_epoch = samples.len() / config.batch_size;
    for epoch in 0..config.epochs as u64 {
        let order = epoch_order(samples.len(), config.seed, epoch);
        for k in 0..per_epoch {
            let batch: Vec<&Sample> = order[k * config.batch_size..(k + 1) * config.batch_size].iter().map(|&i| &samples[i]).collect();
            let images: Vec<Tensor> = batch.iter().map(|s| s.image.to_tensor(dtype, device)).collect::<Result<_>>()?;
            let labels: Vec<&HardLabelMap> = batch.iter().filter_map(|s| s.mask.as_ref()).collect();
            let loss = cross_entropy(&net.logits(&Tensor::stack(&images, 0)?)?, &labels)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(DclError::NonFiniteLoss { step: epoch * per_epoch as u64 + k as u64, components: format!("cross_entropy={value}") });
            }
            opt.step(&net.params, &loss.backward()?, config.clip())?;
        }
        log::info!("supervised epoch {epoch} done");
    }
    Ok(net)
}

/// Images of a split, without masks.
pub fn split_images(ds: &LayoutDataset) -> Result<Vec<Image>> {
    (0..ds.len()).map(|i| ds.training_sample(i).map(|s| s.image)).collect()
}
