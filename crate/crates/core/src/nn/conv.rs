//! Stride-1 "same" convolution as an autodiff op that keeps only its inputs
//! alive between the forward and backward pass; the im2col matrix is rebuilt
//! in the backward pass instead of being stored.

use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor};

/// `(b, c*k*k, h*w)` patch matrix of a zero-padded input.
fn im2col(x: &Tensor, k: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if k == 1 {
        return x.reshape((b, c, h * w));
    }
    let pad = k / 2;
    let xp = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
    let mut taps = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            taps.push(xp.narrow(2, dy, h)?.narrow(3, dx, w)?);
        }
    }
    Tensor::stack(&taps, 2)?.reshape((b, c * k * k, h * w))
}

/// Adjoint of [`im2col`]: scatters `(b, c*k*k, h*w)` columns back onto `(b, c, h, w)`.
fn col2im(cols: &Tensor, c: usize, h: usize, w: usize, k: usize) -> candle_core::Result<Tensor> {
    let b = cols.dims3()?.0;
    if k == 1 {
        return cols.reshape((b, c, h, w));
    }
    let pad = k / 2;
    let cols = cols.reshape((b, c, k * k, h, w))?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..k {
        for dx in 0..k {
            let tap = cols.narrow(2, dy * k + dx, 1)?.squeeze(2)?;
            let placed = tap.pad_with_zeros(2, dy, 2 * pad - dy)?.pad_with_zeros(3, dx, 2 * pad - dx)?;
            acc = Some(match acc {
                Some(a) => (a + placed)?,
                None => placed,
            });
        }
    }
    let full = acc.expect("kernel has at least one tap");
    full.narrow(2, pad, h)?.narrow(3, pad, w)
}

fn forward(x: &Tensor, weight: &Tensor) -> candle_core::Result<Tensor> {
    let (b, _, h, w) = x.dims4()?;
    let (co, ci, k, _) = weight.dims4()?;
    let y = weight.reshape((co, ci * k * k))?.broadcast_matmul(&im2col(x, k)?)?;
    y.reshape((b, co, h, w))
}

fn to_tensor(s: &CpuStorage, l: &Layout) -> candle_core::Result<Tensor> {
    let Some((start, end)) = l.contiguous_offsets() else {
        candle_core::bail!("conv2d expects contiguous inputs")
    };
    match s {
        CpuStorage::F32(v) => Tensor::from_slice(&v[start..end], l.shape(), &Device::Cpu),
        CpuStorage::F64(v) => Tensor::from_slice(&v[start..end], l.shape(), &Device::Cpu),
        _ => candle_core::bail!("conv2d supports f32 and f64 only"),
    }
}

struct Conv2dOp;

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-im2col"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let y = forward(&to_tensor(s1, l1)?, &to_tensor(s2, l2)?)?;
        let shape = y.shape().clone();
        let flat = y.flatten_all()?;
        let storage = match flat.dtype() {
            DType::F32 => CpuStorage::F32(flat.to_vec1()?),
            _ => CpuStorage::F64(flat.to_vec1()?),
        };
        Ok((storage, shape))
    }

    fn bwd(&self, x: &Tensor, weight: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (x, weight) = (x.detach(), weight.detach());
        let (b, c, h, w) = x.dims4()?;
        let (co, ci, k, _) = weight.dims4()?;
        let g = grad.reshape((b, co, h * w))?;
        let cols = im2col(&x, k)?;
        let grad_w = g.matmul(&cols.transpose(1, 2)?)?.sum(0)?.reshape((co, ci, k, k))?;
        drop(cols);
        let gcols = weight.reshape((co, ci * k * k))?.t()?.broadcast_matmul(&g)?;
        let grad_x = col2im(&gcols, c, h, w, k)?;
        Ok((Some(grad_x), Some(grad_w)))
    }
}

/// Convolution without bias; inputs are made contiguous first.
pub(crate) fn conv2d_op(x: &Tensor, weight: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&weight.contiguous()?, Conv2dOp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{to_f64_vec, Init};
    use candle_core::Var;

    #[test]
    fn gradients_match_plain_im2col() {
        let dev = Device::Cpu;
        let mut init = Init::new(7, DType::F64, &dev);
        for k in [1, 3, 5] {
            let x = Var::from_tensor(&init.normal(&[2, 3, 5, 6], 1.0).unwrap()).unwrap();
            let w = Var::from_tensor(&init.normal(&[4, 3, k, k], 1.0).unwrap()).unwrap();
            let probe = init.normal(&[2, 4, 5, 6], 1.0).unwrap();
            let a = (conv2d_op(x.as_tensor(), w.as_tensor()).unwrap() * &probe).unwrap().sum_all().unwrap();
            let b = (forward(x.as_tensor(), w.as_tensor()).unwrap() * &probe).unwrap().sum_all().unwrap();
            assert!((crate::nn::scalar(&a).unwrap() - crate::nn::scalar(&b).unwrap()).abs() < 1e-10);
            let native = x.as_tensor().conv2d(w.as_tensor(), k / 2, 1, 1, 1).unwrap();
            let ours = conv2d_op(x.as_tensor(), w.as_tensor()).unwrap();
            let err = crate::nn::scalar(&(native - ours).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
            assert!(err < 1e-10, "k={k}: native conv differs by {err}");
            let ga = a.backward().unwrap();
            let gb = b.backward().unwrap();
            for v in [&x, &w] {
                let da = to_f64_vec(ga.get(v.as_tensor()).unwrap()).unwrap();
                let db = to_f64_vec(gb.get(v.as_tensor()).unwrap()).unwrap();
                for (p, q) in da.iter().zip(&db) {
                    assert!((p - q).abs() < 1e-10, "k={k}: {p} vs {q}");
                }
            }
        }
    }
}
