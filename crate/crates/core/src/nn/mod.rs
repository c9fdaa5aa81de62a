//! Small tensor toolkit shared by the networks: parameter stores, seeded
//! initialization, im2col convolutions, resampling, Adam and spectral norm.

mod adam;
mod conv;
mod resample;
mod spectral;

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DclError, Result};

pub use adam::{Adam, AdamConfig};
pub use resample::{resample_label_map, resize_bilinear};
pub use spectral::SpectralNorm;

/// Named, ordered collection of trainable variables for one network.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&value)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.into(), var);
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| DclError::Checkpoint(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Overwrites a parameter value in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| DclError::Checkpoint(format!("unknown parameter {name}")))?;
        var.set(&value.to_dtype(var.dtype())?.contiguous()?)?;
        Ok(())
    }

    /// Deep copy of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars.iter().map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?))).collect()
    }

    pub fn export(&self, prefix: &str, out: &mut HashMap<String, Tensor>) -> Result<()> {
        for (k, v) in &self.vars {
            out.insert(format!("{prefix}{k}"), v.as_tensor().copy()?);
        }
        Ok(())
    }

    pub fn import(&self, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (k, v) in &self.vars {
            let key = format!("{prefix}{k}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| DclError::Checkpoint(format!("checkpoint lacks {key}")))?;
            if t.dims() != v.dims() {
                return Err(DclError::Checkpoint(format!(
                    "{key}: checkpoint shape {:?}, model shape {:?}",
                    t.dims(),
                    v.dims()
                )));
            }
            v.set(&t.to_dtype(v.dtype())?)?;
        }
        Ok(())
    }
}

/// Seeded weight initializer. Draws happen on the host so that values do not
/// depend on the tensor backend's own generator.
pub struct Init {
    rng: ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
}

impl Init {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), dtype, device: device.clone() }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.sample::<f64, _>(StandardNormal) * std).collect();
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?.to_device(&self.device)?)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?.to_device(&self.device)?)
    }

    /// Uniform He initialization for a weight whose trailing dims form the fan-in.
    pub fn kaiming(&mut self, shape: &[usize]) -> Result<Tensor> {
        let fan_in: usize = shape[1..].iter().product();
        self.uniform(shape, (6.0 / fan_in as f64).sqrt())
    }

    /// Glorot-uniform initialization.
    pub fn xavier(&mut self, shape: &[usize]) -> Result<Tensor> {
        let receptive: usize = shape[2..].iter().product();
        let fan_in = shape[1] * receptive;
        let fan_out = shape[0] * receptive;
        self.uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, self.dtype, &self.device)?)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Stride-1 "same" convolution for odd square kernels, computed as an
/// im2col matrix product. `weight` is `(c_out, c_in, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let c = x.dims4()?.1;
    let (c_out, c_in, kh, kw) = weight.dims4()?;
    if c != c_in || kh != kw || kh % 2 == 0 {
        return Err(DclError::ShapeMismatch(format!(
            "conv input {:?} vs weight {:?}",
            x.dims(),
            weight.dims()
        )));
    }
    let y = conv::conv2d_op(x, weight)?;
    match bias {
        Some(bias) => Ok(y.broadcast_add(&bias.reshape((1, c_out, 1, 1))?)?),
        None => Ok(y),
    }
}

/// `x @ weight^T + bias` over the last dimension. `weight` is `(out, in)`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = x.broadcast_matmul(&weight.t()?)?;
    match bias {
        Some(bias) => Ok(y.broadcast_add(bias)?),
        None => Ok(y),
    }
}

/// Nearest-neighbour 2x upsampling of `(b, c, h, w)`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// 2x2 average pooling of `(b, c, h, w)` with even `h`, `w`.
pub fn avg_pool2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(DclError::ShapeMismatch(format!("cannot pool odd map {h}x{w}")));
    }
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?.mean(5)?.mean(3)?)
}

/// Numerically stable softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Sum over the two trailing spatial dimensions.
pub fn sum_spatial(x: &Tensor) -> Result<Tensor> {
    Ok(x.sum(D::Minus1)?.sum(D::Minus1)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
}

/// Builds a tensor from host `f64` values in the requested dtype.
pub fn tensor_from(data: Vec<f64>, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?.to_device(device)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &[f64], c: usize, h: usize, w: usize, wt: &[f64], co: usize, k: usize) -> Vec<f64> {
        let p = (k / 2) as isize;
        let mut out = vec![0.0; co * h * w];
        for o in 0..co {
            for r in 0..h {
                for col in 0..w {
                    let mut acc = 0.0;
                    for i in 0..c {
                        for dy in 0..k {
                            for dx in 0..k {
                                let rr = r as isize + dy as isize - p;
                                let cc = col as isize + dx as isize - p;
                                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                    continue;
                                }
                                acc += x[i * h * w + rr as usize * w + cc as usize]
                                    * wt[((o * c + i) * k + dy) * k + dx];
                            }
                        }
                    }
                    out[o * h * w + r * w + col] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let dev = Device::Cpu;
        let mut init = Init::new(3, DType::F64, &dev);
        for k in [1, 3] {
            let x = init.normal(&[1, 2, 5, 4], 1.0).unwrap();
            let wt = init.normal(&[3, 2, k, k], 1.0).unwrap();
            let y = conv2d(&x, &wt, None).unwrap();
            let expected = direct_conv(&to_f64_vec(&x).unwrap(), 2, 5, 4, &to_f64_vec(&wt).unwrap(), 3, k);
            for (a, b) in to_f64_vec(&y).unwrap().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let dev = Device::Cpu;
        let mut init = Init::new(1, DType::F64, &dev);
        let x = init.normal(&[2, 3, 4, 4], 1.0).unwrap();
        let back = avg_pool2x(&upsample2x(&x).unwrap()).unwrap();
        let d = (back - &x).unwrap().abs().unwrap().max_all().unwrap();
        assert!(scalar(&d).unwrap() < 1e-15);
    }

    #[test]
    fn softmax_sums_to_one() {
        let dev = Device::Cpu;
        let mut init = Init::new(2, DType::F64, &dev);
        let x = init.normal(&[2, 5, 3, 3], 4.0).unwrap();
        let s = softmax(&x, 1).unwrap().sum(1).unwrap();
        for v in to_f64_vec(&s).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let ls = log_softmax(&x, 1).unwrap().exp().unwrap();
        let d = (ls - softmax(&x, 1).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(scalar(&d).unwrap() < 1e-12);
    }

    #[test]
    fn init_is_seeded() {
        let dev = Device::Cpu;
        let a = Init::new(9, DType::F32, &dev).normal(&[4, 4], 1.0).unwrap();
        let b = Init::new(9, DType::F32, &dev).normal(&[4, 4], 1.0).unwrap();
        assert_eq!(to_f64_vec(&a).unwrap(), to_f64_vec(&b).unwrap());
    }
}
