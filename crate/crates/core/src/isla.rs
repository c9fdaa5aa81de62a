//! Instance-sensitive, layout-aware normalization.
//!
//! A normalization layer standardizes features with batch statistics, then
//! recalibrates them with per-pixel affine maps assembled from per-instance
//! parameters. Each instance's parameters are spread over its box, weighted by
//! the label map's probability for the instance's category, and averaged where
//! boxes overlap.

use candle_core::{Tensor, D};

use crate::error::{DclError, Result};
use crate::nn::{conv2d, resample_label_map, softmax};

/// Stability term added to the variance.
pub const NORM_EPS: f64 = 1e-5;
/// Floor on the summed assembly weights.
pub const ASSEMBLY_EPS: f64 = 1e-8;
/// Probability clamp used when mapping a label map back to logits.
pub const LOGIT_EPS: f64 = 1e-8;
const RUNNING_MOMENTUM: f64 = 0.1;

/// Result of standardizing with batch statistics.
#[derive(Debug, Clone)]
pub struct Standardized {
    pub output: Tensor,
    /// `(C,)` channel means.
    pub mean: Tensor,
    /// `(C,)` population variances.
    pub var: Tensor,
}

/// `(f - mu_c) / sqrt(var_c + eps)` with statistics pooled over batch and space.
pub fn standardize(f: &Tensor) -> Result<Standardized> {
    let (b, c, h, w) = f.dims4()?;
    if b * h * w < 2 {
        return Err(DclError::DegenerateBatch(b * h * w));
    }
    let per_channel = f.transpose(0, 1)?.reshape((c, b * h * w))?;
    let mean = per_channel.mean_keepdim(1)?;
    let centered = per_channel.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    let normed = centered.broadcast_div(&(&var + NORM_EPS)?.sqrt()?)?;
    let output = normed.reshape((c, b, h, w))?.transpose(0, 1)?.contiguous()?;
    Ok(Standardized { output, mean: mean.squeeze(1)?, var: var.squeeze(1)? })
}

/// Running statistics for evaluation-mode standardization.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize, dtype: candle_core::DType, device: &candle_core::Device) -> Result<Self> {
        Ok(Self {
            mean: Tensor::zeros(channels, dtype, device)?,
            var: Tensor::ones(channels, dtype, device)?,
        })
    }

    /// Training mode: batch statistics, with the running averages updated.
    pub fn standardize_train(&mut self, f: &Tensor) -> Result<Tensor> {
        let s = standardize(f)?;
        let keep = 1.0 - RUNNING_MOMENTUM;
        self.mean = ((&self.mean * keep)? + (s.mean.detach() * RUNNING_MOMENTUM)?)?;
        self.var = ((&self.var * keep)? + (s.var.detach() * RUNNING_MOMENTUM)?)?;
        Ok(s.output)
    }

    /// Evaluation mode: the stored running statistics.
    pub fn standardize_eval(&self, f: &Tensor) -> Result<Tensor> {
        let c = f.dims4()?.1;
        let mean = self.mean.reshape((1, c, 1, 1))?;
        let std = (&self.var + NORM_EPS)?.sqrt()?.reshape((1, c, 1, 1))?;
        Ok(f.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }
}

/// Per-instance channel-wise shift and scale, each `(B, N, C)`.
#[derive(Debug, Clone)]
pub struct InstanceAffine {
    pub beta: Tensor,
    pub gamma: Tensor,
}

/// `(beta, gamma_raw) = S · W`, split along channels, with `gamma = 1 + gamma_raw`.
/// `styles` is `(B, N, K)` and `projection` is `(K, 2C)`.
pub fn instance_affine(styles: &Tensor, projection: &Tensor) -> Result<InstanceAffine> {
    let two_c = projection.dims2()?.1;
    if two_c % 2 != 0 {
        return Err(DclError::ShapeMismatch(format!("projection width {two_c} is odd")));
    }
    let c = two_c / 2;
    let out = styles.broadcast_matmul(projection)?;
    let beta = out.narrow(D::Minus1, 0, c)?;
    let gamma = (out.narrow(D::Minus1, c, c)? + 1.0)?;
    Ok(InstanceAffine { beta, gamma })
}

/// Per-pixel shift and scale maps, each `(B, C, h, w)`.
#[derive(Debug, Clone)]
pub struct SpatialAffine {
    pub beta: Tensor,
    pub gamma: Tensor,
}

/// Assembly weights `w_i(p) = raster_i(p) · h_{l_i}(p)`, shape `(B, N, h*w)`.
///
/// `label_map` is `(B, d, h, w)`, `one_hot` is `(B, N, d)` and `raster` is
/// `(B, N, h*w)` at the label map's resolution.
pub fn assembly_weights(label_map: &Tensor, one_hot: &Tensor, raster: &Tensor) -> Result<Tensor> {
    let (b, d, h, w) = label_map.dims4()?;
    let flat = label_map.reshape((b, d, h * w))?;
    let per_instance = one_hot.matmul(&flat)?;
    Ok((per_instance * raster)?)
}

/// Spreads instance parameters over their boxes as a probability-weighted average.
pub fn assemble_spatial_affine(
    affine: &InstanceAffine,
    label_map: &Tensor,
    one_hot: &Tensor,
    raster: &Tensor,
) -> Result<SpatialAffine> {
    let (b, _, h, w) = label_map.dims4()?;
    let weights = assembly_weights(label_map, one_hot, raster)?;
    let norm = weights.sum_keepdim(1)?.maximum(ASSEMBLY_EPS)?;
    let spread = |params: &Tensor| -> Result<Tensor> {
        let c = params.dims3()?.2;
        let summed = params.transpose(1, 2)?.contiguous()?.matmul(&weights)?;
        Ok(summed.broadcast_div(&norm)?.reshape((b, c, h, w))?)
    };
    Ok(SpatialAffine { beta: spread(&affine.beta)?, gamma: spread(&affine.gamma)? })
}

/// `gamma · f + beta`.
pub fn recalibrate(standardized: &Tensor, affine: &SpatialAffine) -> Result<Tensor> {
    if standardized.dims() != affine.beta.dims() || standardized.dims() != affine.gamma.dims() {
        return Err(DclError::ShapeMismatch(format!(
            "features {:?} vs affine {:?}",
            standardized.dims(),
            affine.beta.dims()
        )));
    }
    Ok(((standardized * &affine.gamma)? + &affine.beta)?)
}

/// Parameters of one ToMask refinement: a 1x1 projection from
/// `[features, label map]` to label logits and the skip weight `alpha`.
#[derive(Debug, Clone)]
pub struct ToMask<'a> {
    pub weight: &'a Tensor,
    pub bias: &'a Tensor,
    pub alpha: &'a Tensor,
}

/// Predicts a refined label map from block features and the incoming map,
/// blending in the initial map through a logit-space skip.
pub fn update_label_map(features: &Tensor, current: &Tensor, initial: &Tensor, to_mask: &ToMask) -> Result<Tensor> {
    let (_, _, h, w) = features.dims4()?;
    let current = resample_label_map(current, h, w)?;
    let initial = resample_label_map(initial, h, w)?;
    let input = Tensor::cat(&[features, &current], 1)?;
    let logits = conv2d(&input, to_mask.weight, Some(to_mask.bias))?;
    let skip = initial.clamp(LOGIT_EPS, 1.0)?.log()?.broadcast_mul(to_mask.alpha)?;
    softmax(&(logits + skip)?, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scalar, to_f64_vec, Init};
    use candle_core::{DType, Device};

    #[test]
    fn standardize_constant_input_is_zero() {
        let f = Tensor::full(3.0f64, (2, 2, 3, 3), &Device::Cpu).unwrap();
        let out = standardize(&f).unwrap().output;
        assert!(to_f64_vec(&out).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardize_two_values() {
        let f = Tensor::new(&[1.0f64, 3.0], &Device::Cpu).unwrap().reshape((1, 1, 1, 2)).unwrap();
        let out = to_f64_vec(&standardize(&f).unwrap().output).unwrap();
        let s = (1.0f64 + NORM_EPS).sqrt();
        assert!((out[0] + 1.0 / s).abs() < 1e-12 && (out[1] - 1.0 / s).abs() < 1e-12);
        assert!((out[0] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn standardize_rejects_single_value() {
        let f = Tensor::ones((1, 3, 1, 1), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(standardize(&f), Err(DclError::DegenerateBatch(1))));
    }

    #[test]
    fn zero_projection_is_identity_affine() {
        let dev = Device::Cpu;
        let s = Tensor::new(&[[[1.0f64, 2.0], [3.0, -1.0]]], &dev).unwrap();
        let w = Tensor::zeros((2, 6), DType::F64, &dev).unwrap();
        let a = instance_affine(&s, &w).unwrap();
        assert!(to_f64_vec(&a.beta).unwrap().iter().all(|&v| v == 0.0));
        assert!(to_f64_vec(&a.gamma).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identity_projection_example() {
        let dev = Device::Cpu;
        let s = Tensor::new(&[[[1.0f64, 2.0]]], &dev).unwrap();
        let w = Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0]], &dev).unwrap();
        let a = instance_affine(&s, &w).unwrap();
        assert_eq!(to_f64_vec(&a.beta).unwrap(), vec![1.0]);
        assert_eq!(to_f64_vec(&(a.gamma - 1.0).unwrap()).unwrap(), vec![2.0]);
    }

    #[test]
    fn identical_rows_give_identical_affine() {
        let dev = Device::Cpu;
        let mut init = Init::new(1, DType::F64, &dev);
        let row = init.normal(&[1, 1, 5], 1.0).unwrap();
        let s = Tensor::cat(&[&row, &row], 1).unwrap();
        let w = init.normal(&[5, 8], 1.0).unwrap();
        let a = instance_affine(&s, &w).unwrap();
        let g: Vec<Vec<f64>> = a.gamma.squeeze(0).unwrap().to_vec2().unwrap();
        assert_eq!(g[0], g[1]);
    }

    #[test]
    fn single_contributor_spreads_constant() {
        let dev = Device::Cpu;
        let label = Tensor::ones((1, 1, 2, 2), DType::F64, &dev).unwrap();
        let one_hot = Tensor::ones((1, 1, 1), DType::F64, &dev).unwrap();
        let raster = Tensor::ones((1, 1, 4), DType::F64, &dev).unwrap();
        let aff = InstanceAffine {
            beta: Tensor::full(5.0f64, (1, 1, 1), &dev).unwrap(),
            gamma: Tensor::full(1.0f64, (1, 1, 1), &dev).unwrap(),
        };
        let sp = assemble_spatial_affine(&aff, &label, &one_hot, &raster).unwrap();
        assert_eq!(to_f64_vec(&sp.beta).unwrap(), vec![5.0; 4]);
    }

    #[test]
    fn left_column_example() {
        // Instance 0 (category 1) covers the left column with beta 5; the
        // background instance (category 0) covers everything with beta 0.
        // Both categories have probability 1 wherever they are evaluated.
        let dev = Device::Cpu;
        let label = Tensor::ones((1, 2, 2, 2), DType::F64, &dev).unwrap();
        let one_hot = Tensor::new(&[[[0.0f64, 1.0], [1.0, 0.0]]], &dev).unwrap();
        let raster = Tensor::new(&[[[1.0f64, 0.0, 1.0, 0.0], [1.0, 1.0, 1.0, 1.0]]], &dev).unwrap();
        let aff = InstanceAffine {
            beta: Tensor::new(&[[[5.0f64], [0.0]]], &dev).unwrap(),
            gamma: Tensor::new(&[[[1.0f64], [1.0]]], &dev).unwrap(),
        };
        let sp = assemble_spatial_affine(&aff, &label, &one_hot, &raster).unwrap();
        assert_eq!(to_f64_vec(&sp.beta).unwrap(), vec![2.5, 0.0, 2.5, 0.0]);
    }

    #[test]
    fn duplicate_instances_do_not_change_result() {
        let dev = Device::Cpu;
        let mut init = Init::new(8, DType::F64, &dev);
        let label = crate::nn::softmax(&init.normal(&[1, 3, 4, 4], 1.0).unwrap(), 1).unwrap();
        let one_hot = Tensor::new(&[[[0.0f64, 1.0, 0.0]]], &dev).unwrap();
        let raster = Tensor::new(&[[[1.0f64, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]]], &dev).unwrap();
        let beta = init.normal(&[1, 1, 2], 1.0).unwrap();
        let gamma = init.normal(&[1, 1, 2], 1.0).unwrap();
        let single = assemble_spatial_affine(&InstanceAffine { beta: beta.clone(), gamma: gamma.clone() }, &label, &one_hot, &raster).unwrap();
        let dup = |t: &Tensor| Tensor::cat(&[t, t], 1).unwrap();
        let double = assemble_spatial_affine(
            &InstanceAffine { beta: dup(&beta), gamma: dup(&gamma) },
            &label,
            &dup(&one_hot),
            &dup(&raster),
        )
        .unwrap();
        let d = (single.beta - double.beta).unwrap().abs().unwrap().max_all().unwrap();
        assert!(scalar(&d).unwrap() < 1e-12);
    }

    #[test]
    fn recalibrate_examples() {
        let dev = Device::Cpu;
        let f = Tensor::ones((1, 1, 2, 2), DType::F64, &dev).unwrap();
        let aff = SpatialAffine {
            beta: Tensor::full(3.0f64, (1, 1, 2, 2), &dev).unwrap(),
            gamma: Tensor::full(2.0f64, (1, 1, 2, 2), &dev).unwrap(),
        };
        assert_eq!(to_f64_vec(&recalibrate(&f, &aff).unwrap()).unwrap(), vec![5.0; 4]);
        let zero = Tensor::zeros((1, 1, 2, 2), DType::F64, &dev).unwrap();
        assert_eq!(to_f64_vec(&recalibrate(&zero, &aff).unwrap()).unwrap(), vec![3.0; 4]);
        let ident = SpatialAffine { beta: zero.clone(), gamma: f.clone() };
        let g = Tensor::new(&[[[[0.3f64, -1.2], [7.0, 0.0]]]], &dev).unwrap();
        assert_eq!(to_f64_vec(&recalibrate(&g, &ident).unwrap()).unwrap(), to_f64_vec(&g).unwrap());
    }

    #[test]
    fn to_mask_zero_everything_is_uniform() {
        let dev = Device::Cpu;
        let mut init = Init::new(2, DType::F64, &dev);
        let feats = init.normal(&[2, 4, 4, 4], 1.0).unwrap();
        let h = crate::nn::softmax(&init.normal(&[2, 3, 8, 8], 1.0).unwrap(), 1).unwrap();
        let w = Tensor::zeros((3, 7, 1, 1), DType::F64, &dev).unwrap();
        let b = Tensor::zeros(3, DType::F64, &dev).unwrap();
        let alpha = Tensor::zeros(1, DType::F64, &dev).unwrap();
        let out = update_label_map(&feats, &h, &h, &ToMask { weight: &w, bias: &b, alpha: &alpha }).unwrap();
        assert_eq!(out.dims(), &[2, 3, 4, 4]);
        assert!(to_f64_vec(&out).unwrap().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn to_mask_large_alpha_follows_initial_map() {
        let dev = Device::Cpu;
        let mut init = Init::new(3, DType::F64, &dev);
        let feats = init.normal(&[1, 4, 8, 8], 1.0).unwrap();
        let current = crate::nn::softmax(&init.normal(&[1, 5, 8, 8], 1.0).unwrap(), 1).unwrap();
        let initial = crate::nn::softmax(&init.normal(&[1, 5, 8, 8], 2.0).unwrap(), 1).unwrap();
        let w = Tensor::zeros((5, 9, 1, 1), DType::F64, &dev).unwrap();
        let b = Tensor::zeros(5, DType::F64, &dev).unwrap();
        let alpha = Tensor::new(&[20.0f64], &dev).unwrap();
        let out = update_label_map(&feats, &current, &initial, &ToMask { weight: &w, bias: &b, alpha: &alpha }).unwrap();
        let a: Vec<u32> = out.argmax(1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let e: Vec<u32> = initial.argmax(1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, e);
        for s in to_f64_vec(&out.sum(1).unwrap()).unwrap() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
