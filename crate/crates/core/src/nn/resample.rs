use candle_core::Tensor;

use crate::error::Result;
use crate::nn::tensor_from;

/// 1-D bilinear interpolation weights `(n_out, n_in)`, half-pixel centres,
/// edge-clamped.
pub(crate) fn interpolation_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        let frac = src - lo as f64;
        m[i * n_in + lo] += 1.0 - frac;
        m[i * n_in + hi] += frac;
    }
    m
}

/// Bilinear resize of a `(b, c, h, w)` tensor.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let ry = tensor_from(interpolation_matrix(h, out_h), &[out_h, h], x.dtype(), x.device())?;
    let rx = tensor_from(interpolation_matrix(w, out_w), &[out_w, w], x.dtype(), x.device())?;
    let y = ry.broadcast_matmul(x)?;
    Ok(y.broadcast_matmul(&rx.t()?)?)
}

/// Bilinear resize of a `(b, d, h, w)` probability map followed by per-pixel
/// renormalization over `d`.
pub fn resample_label_map(h: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, ih, iw) = h.dims4()?;
    if ih == out_h && iw == out_w {
        return Ok(h.clone());
    }
    let r = resize_bilinear(h, out_h, out_w)?;
    Ok(r.broadcast_div(&r.sum_keepdim(1)?)?)
}
