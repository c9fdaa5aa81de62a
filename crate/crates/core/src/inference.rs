//! The inference network: a normalization-free U-Net predicting a soft label
//! map for an image.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};
use crate::layout::{HardLabelMap, Lattice, SoftLabelMap};
use crate::nn::{avg_pool2x, conv2d, softmax, upsample2x, Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Encoder stages; the input side must be divisible by `2^(depth-1)`.
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { depth: 3, base_channels: 32 }
    }
}

#[derive(Debug, Clone)]
pub struct InferenceNet {
    pub config: InferenceConfig,
    pub categories: usize,
    pub params: ParamStore,
}

impl InferenceNet {
    pub fn new(config: InferenceConfig, categories: usize, init: &mut Init) -> Result<Self> {
        if config.depth == 0 || config.base_channels == 0 {
            return Err(DclError::ConfigMismatch("inference net needs depth and width".into()));
        }
        let mut params = ParamStore::new();
        let width = |k: usize| config.base_channels << k;
        let mut conv = |name: String, co: usize, ci: usize, k: usize| -> Result<()> {
            params.insert(format!("{name}.w"), init.kaiming(&[co, ci, k, k])?)?;
            params.insert(format!("{name}.b"), init.zeros(&[co])?)?;
            Ok(())
        };
        let mut input = 3;
        for k in 0..config.depth {
            conv(format!("enc{k}.conv1"), width(k), input, 3)?;
            conv(format!("enc{k}.conv2"), width(k), width(k), 3)?;
            input = width(k);
        }
        for k in (0..config.depth - 1).rev() {
            conv(format!("dec{k}.conv1"), width(k), width(k + 1) + width(k), 3)?;
            conv(format!("dec{k}.conv2"), width(k), width(k), 3)?;
        }
        conv("head".into(), categories, width(0), 1)?;
        Ok(Self { config, categories, params })
    }

    pub fn dtype_device(&self) -> Result<(candle_core::DType, candle_core::Device)> {
        let w = self.params.get("head.w")?;
        Ok((w.dtype(), w.device().clone()))
    }

    fn conv(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        conv2d(x, self.params.get(&format!("{name}.w"))?, Some(self.params.get(&format!("{name}.b"))?))
    }

    /// Per-pixel label logits `(B, d, h, w)` for images `(B, 3, h, w)`.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        let factor = 1 << (self.config.depth - 1);
        if c != 3 || h % factor != 0 || w % factor != 0 {
            return Err(DclError::ShapeMismatch(format!(
                "inference net with depth {} cannot take input {:?}",
                self.config.depth,
                images.dims()
            )));
        }
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = images.clone();
        for k in 0..self.config.depth {
            if k > 0 {
                x = avg_pool2x(&x)?;
            }
            x = self.conv(&format!("enc{k}.conv1"), &x)?.relu()?;
            x = self.conv(&format!("enc{k}.conv2"), &x)?.relu()?;
            skips.push(x.clone());
        }
        for k in (0..self.config.depth - 1).rev() {
            x = Tensor::cat(&[&upsample2x(&x)?, &skips[k]], 1)?;
            x = self.conv(&format!("dec{k}.conv1"), &x)?.relu()?;
            x = self.conv(&format!("dec{k}.conv2"), &x)?.relu()?;
        }
        self.conv("head", &x)
    }

    /// Soft label maps `(B, d, h, w)`.
    pub fn infer(&self, images: &Tensor) -> Result<Tensor> {
        softmax(&self.logits(images)?, 1)
    }
}

/// Per-pixel argmax; ties go to the smallest category index.
pub fn hard_predict(map: &SoftLabelMap) -> Result<HardLabelMap> {
    let lattice = map.lattice();
    let labels = argmax_channels(map.tensor(), lattice)?;
    HardLabelMap::new(lattice, labels)
}

/// Argmax over the leading channel axis of a `(d, h, w)` tensor.
pub fn argmax_channels(probs: &Tensor, lattice: Lattice) -> Result<Vec<u32>> {
    let d = probs.dims3()?.0;
    let values = crate::nn::to_f64_vec(probs)?;
    let n = lattice.pixels();
    Ok((0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..d {
                if values[c * n + p] > values[best * n + p] {
                    best = c;
                }
            }
            best as u32
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scalar, to_f64_vec};
    use candle_core::{DType, Device};

    fn net() -> InferenceNet {
        let mut init = Init::new(3, DType::F64, &Device::Cpu);
        InferenceNet::new(InferenceConfig { depth: 3, base_channels: 4 }, 5, &mut init).unwrap()
    }

    #[test]
    fn output_shape_and_normalization() {
        let n = net();
        let mut init = Init::new(4, DType::F64, &Device::Cpu);
        let x = init.uniform(&[2, 3, 16, 16], 1.0).unwrap();
        let out = n.infer(&x).unwrap();
        assert_eq!(out.dims(), &[2, 5, 16, 16]);
        for s in to_f64_vec(&out.sum(1).unwrap()).unwrap() {
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_shift_changes_output() {
        let n = net();
        let mut init = Init::new(4, DType::F64, &Device::Cpu);
        let x = init.uniform(&[1, 3, 16, 16], 0.8).unwrap();
        let a = n.infer(&x).unwrap();
        let b = n.infer(&(&x + 0.1).unwrap()).unwrap();
        let diff = scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(diff > 0.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        let n = net();
        let x = Tensor::zeros((1, 3, 10, 10), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(n.infer(&x), Err(DclError::ShapeMismatch(_))));
        let x = Tensor::zeros((1, 1, 16, 16), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(n.infer(&x), Err(DclError::ShapeMismatch(_))));
    }

    #[test]
    fn hard_predict_rules() {
        let dev = Device::Cpu;
        let one_hot = Tensor::new(&[[[0.0f64, 1.0]], [[1.0, 0.0]], [[0.0, 0.0]]], &dev).unwrap();
        let m = SoftLabelMap::new(one_hot).unwrap();
        assert_eq!(hard_predict(&m).unwrap().labels, vec![1, 0]);
        let uniform = Tensor::full(0.25f64, (4, 2, 2), &dev).unwrap();
        assert_eq!(hard_predict(&SoftLabelMap::new(uniform).unwrap()).unwrap().labels, vec![0; 4]);
        let p = Tensor::new(&[[[0.2f64]], [[0.5]], [[0.3]]], &dev).unwrap();
        assert_eq!(hard_predict(&SoftLabelMap::new(p).unwrap()).unwrap().labels, vec![1]);
    }
}
