use candle_core::{DType, Device, Tensor};

use crate::error::Result;
use crate::nn::Init;

const SIGMA_FLOOR: f64 = 1e-12;

/// Power-iteration spectral normalization state for one weight tensor.
///
/// The weight is viewed as a `(rows, rest)` matrix. The singular vectors are
/// treated as constants; the gradient flows through `sigma = u^T W v`.
#[derive(Debug, Clone)]
pub struct SpectralNorm {
    pub u: Tensor,
    pub v: Tensor,
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_all()?.sqrt()?.maximum(SIGMA_FLOOR)?;
    Ok(x.broadcast_div(&norm)?)
}

impl SpectralNorm {
    pub fn new(weight_shape: &[usize], init: &mut Init) -> Result<Self> {
        let rows = weight_shape[0];
        let cols: usize = weight_shape[1..].iter().product();
        let u = l2_normalize(&init.normal(&[rows, 1], 1.0)?)?;
        let v = l2_normalize(&init.normal(&[cols, 1], 1.0)?)?;
        Ok(Self { u, v })
    }

    /// Returns `weight / sigma`. With `update` one power iteration refreshes
    /// the stored singular vectors first.
    pub fn apply(&mut self, weight: &Tensor, update: bool) -> Result<Tensor> {
        let rows = weight.dims()[0];
        let mat = weight.reshape((rows, ()))?;
        if update {
            let w = mat.detach();
            let v = l2_normalize(&w.t()?.matmul(&self.u)?)?;
            let u = l2_normalize(&w.matmul(&v)?)?;
            self.u = u;
            self.v = v;
        }
        let sigma = self.u.t()?.matmul(&mat.matmul(&self.v)?)?.reshape(())?;
        let sigma = sigma.maximum(SIGMA_FLOOR)?;
        Ok(weight.broadcast_div(&sigma)?)
    }

    pub fn to_dtype(&self, dtype: DType, _device: &Device) -> Result<Self> {
        Ok(Self { u: self.u.to_dtype(dtype)?, v: self.v.to_dtype(dtype)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scalar, Init};

    #[test]
    fn converges_to_unit_spectral_norm() {
        let dev = Device::Cpu;
        let mut init = Init::new(4, DType::F64, &dev);
        let w = init.normal(&[6, 3, 3, 3], 1.0).unwrap();
        let mut sn = SpectralNorm::new(w.dims(), &mut init).unwrap();
        let mut normalized = w.clone();
        for _ in 0..200 {
            normalized = sn.apply(&w, true).unwrap();
        }
        // Largest singular value of the normalized matrix via power iteration.
        let m = normalized.reshape((6, 27)).unwrap();
        let mut v = Tensor::ones((27, 1), DType::F64, &dev).unwrap();
        for _ in 0..500 {
            let u = m.matmul(&v).unwrap();
            v = m.t().unwrap().matmul(&u).unwrap();
            let n = v.sqr().unwrap().sum_all().unwrap().sqrt().unwrap();
            v = v.broadcast_div(&n).unwrap();
        }
        let s = scalar(&m.matmul(&v).unwrap().sqr().unwrap().sum_all().unwrap().sqrt().unwrap()).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "sigma {s}");
    }

    #[test]
    fn zero_weight_stays_zero() {
        let dev = Device::Cpu;
        let mut init = Init::new(4, DType::F64, &dev);
        let w = Tensor::zeros((2, 3), DType::F64, &dev).unwrap();
        let mut sn = SpectralNorm::new(w.dims(), &mut init).unwrap();
        let out = sn.apply(&w, true).unwrap();
        assert_eq!(scalar(&out.abs().unwrap().sum_all().unwrap()).unwrap(), 0.0);
    }
}
