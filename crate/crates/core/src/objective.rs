//! Loss terms: reconstruction and perceptual consensus, the mean KL between
//! label maps, and the hinge adversarial pair.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::discriminator::ScoreBatch;
use crate::error::{DclError, Result};
use crate::nn::{avg_pool2x, conv2d, scalar, tensor_from, Init};

/// Guard inside every logarithm.
pub const KL_EPS: f64 = 1e-8;
const LEAK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f64,
    pub perc: f64,
    pub kl: f64,
    pub adv_img: f64,
    pub adv_obj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rec: 1.0, perc: 1.0, kl: 1.0, adv_img: 1.0, adv_obj: 1.0 }
    }
}

/// Frozen random convolutional features at strides 1, 2 and 4.
#[derive(Debug, Clone)]
pub struct FixedFeatureExtractor {
    weights: Vec<Tensor>,
}

/// Rows (or columns, whichever are fewer) of the result are orthonormal.
fn orthogonal(rows: usize, cols: usize, init: &mut Init) -> Result<Tensor> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let rng = init.rng();
    let g = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    // sign convention makes the draw uniform over orthogonal matrices
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if rows >= cols { q } else { q.transpose() };
    let data: Vec<f64> = (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|(i, j)| q[(i, j)]).collect();
    tensor_from(data, &[rows, cols], init.dtype, &init.device)
}

fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * LEAK)?)?)
}

impl FixedFeatureExtractor {
    pub fn new(seed: u64, channels: usize, dtype: DType, device: &Device) -> Result<Self> {
        let mut init = Init::new(seed, dtype, device);
        let mut weights = Vec::new();
        let mut input = 3;
        for _ in 0..3 {
            let w = orthogonal(channels, input * 9, &mut init)?.reshape((channels, input, 3, 3))?;
            weights.push(w);
            input = channels;
        }
        Ok(Self { weights })
    }

    /// Feature maps at strides 1, 2 and 4.
    pub fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.weights.len());
        let mut x = images.clone();
        for (k, w) in self.weights.iter().enumerate() {
            if k > 0 {
                x = avg_pool2x(&x)?;
            }
            x = leaky_relu(&conv2d(&x, w, None)?)?;
            out.push(x.clone());
        }
        Ok(out)
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(DclError::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean absolute difference over every element.
pub fn recon_l1(x_real: &Tensor, x_recon: &Tensor) -> Result<Tensor> {
    same_shape(x_real, x_recon, "recon_l1")?;
    Ok((x_real - x_recon)?.abs()?.mean_all()?)
}

/// Sum over scales of the mean absolute feature difference.
pub fn perceptual_l1(f: &FixedFeatureExtractor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "perceptual_l1")?;
    let fa = f.features(a)?;
    let fb = f.features(b)?;
    let mut total: Option<Tensor> = None;
    for (x, y) in fa.iter().zip(&fb) {
        let term = (x - y)?.abs()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or(DclError::EmptyMatrix)
}

/// KL(target || pred) summed over categories and averaged over pixels and
/// batch, for `(B, d, h, w)` probability maps.
pub fn mean_kl(target: &Tensor, pred: &Tensor) -> Result<Tensor> {
    same_shape(target, pred, "mean_kl")?;
    let lt = (target + KL_EPS)?.log()?;
    let lp = (pred + KL_EPS)?.log()?;
    Ok((target * (lt - lp)?)?.sum(1)?.mean_all()?)
}

/// Which side of the hinge a score batch sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Realness {
    Real,
    Fake,
}

fn hinge_terms(p: &Tensor, realness: Realness) -> Result<Tensor> {
    let margin = match realness {
        Realness::Real => p.affine(-1.0, 1.0)?,
        Realness::Fake => p.affine(1.0, 1.0)?,
    };
    Ok(margin.relu()?)
}

/// Weighted average of the mean image hinge and the mean object hinge. With
/// no objects the image group stands alone.
pub fn hinge_d(scores: &ScoreBatch, realness: Realness, weights: &LossWeights) -> Result<Tensor> {
    let img = hinge_terms(&scores.p_img, realness)?.mean_all()?;
    if scores.owners.is_empty() {
        return Ok(img);
    }
    let obj = hinge_terms(&scores.p_obj, realness)?.mean_all()?;
    let norm = weights.adv_img + weights.adv_obj;
    Ok(((img * (weights.adv_img / norm))? + (obj * (weights.adv_obj / norm))?)?)
}

/// `-(mean p_img + mean p_obj) / 2`; just `-mean p_img` without objects.
pub fn adv_g(scores: &ScoreBatch) -> Result<Tensor> {
    let img = scores.p_img.mean_all()?;
    if scores.owners.is_empty() {
        return Ok(img.neg()?);
    }
    let obj = scores.p_obj.mean_all()?;
    Ok(((img + obj)? * -0.5)?)
}

/// Forward results of one batch. Discriminator-phase scores are computed on
/// detached fakes; generator-phase scores keep the graph into the fakes.
#[derive(Debug, Default, Clone)]
pub struct BatchOutputs {
    pub x_real: Option<Tensor>,
    pub x_syn: Option<Tensor>,
    pub x_recon: Option<Tensor>,
    /// Generator-refined label map of the synthesis chain.
    pub h_y: Option<Tensor>,
    /// Inferred label map of the synthesized image.
    pub h_syn_hat: Option<Tensor>,
    /// Inferred label map of the real image.
    pub h_real_hat: Option<Tensor>,
    pub d_real: Option<ScoreBatch>,
    pub d_syn: Option<ScoreBatch>,
    pub d_recon: Option<ScoreBatch>,
    pub g_syn: Option<ScoreBatch>,
    pub g_recon: Option<ScoreBatch>,
}

/// Scalar losses for each player plus their named components.
#[derive(Debug, Clone)]
pub struct PlayerLosses {
    pub loss_g: Tensor,
    pub loss_d: Tensor,
    pub loss_i: Tensor,
    pub components: BTreeMap<String, f64>,
}

fn need<'a, T>(v: &'a Option<T>, name: &'static str) -> Result<&'a T> {
    v.as_ref().ok_or(DclError::MissingBranch(name))
}

/// Discriminator loss and its components.
pub fn discriminator_loss(
    real: &ScoreBatch,
    syn: &ScoreBatch,
    recon: &ScoreBatch,
    weights: &LossWeights,
) -> Result<(Tensor, BTreeMap<String, f64>)> {
    let d_real = hinge_d(real, Realness::Real, weights)?;
    let d_syn = hinge_d(syn, Realness::Fake, weights)?;
    let d_recon = hinge_d(recon, Realness::Fake, weights)?;
    let mut c = BTreeMap::new();
    c.insert("d_real".into(), scalar(&d_real)?);
    c.insert("d_syn".into(), scalar(&d_syn)?);
    c.insert("d_recon".into(), scalar(&d_recon)?);
    let loss = ((d_real + d_syn)? + d_recon)?;
    c.insert("loss_d".into(), scalar(&loss)?);
    Ok((loss, c))
}

/// Generator-side and inference-side losses and their components.
pub fn consensus_losses(
    out: &BatchOutputs,
    f: &FixedFeatureExtractor,
    weights: &LossWeights,
) -> Result<(Tensor, Tensor, BTreeMap<String, f64>)> {
    let x_real = need(&out.x_real, "x_real")?;
    let x_syn = need(&out.x_syn, "x_syn")?;
    let x_recon = need(&out.x_recon, "x_recon")?;
    let h_y = need(&out.h_y, "h_y")?;
    let h_syn_hat = need(&out.h_syn_hat, "h_syn_hat")?;
    need(&out.h_real_hat, "h_real_hat")?;
    let g_syn = need(&out.g_syn, "g_syn")?;
    let g_recon = need(&out.g_recon, "g_recon")?;

    let rec = recon_l1(x_real, x_recon)?;
    let perc_recon = perceptual_l1(f, x_real, x_recon)?;
    let perc_syn = perceptual_l1(f, x_real, x_syn)?;
    let kl = mean_kl(h_y, h_syn_hat)?;
    let adv_syn = adv_g(g_syn)?;
    let adv_recon = adv_g(g_recon)?;

    let rec_w = (&rec * weights.rec)?;
    let kl_w = (&kl * weights.kl)?;
    let loss_i = ((&rec_w + (&perc_recon * weights.perc)?)? + &kl_w)?;
    let perc_both = ((&perc_recon + &perc_syn)? * weights.perc)?;
    let loss_g = ((((rec_w + perc_both)? + kl_w)? + &adv_syn)? + &adv_recon)?;

    let mut c = BTreeMap::new();
    c.insert("recon_l1".into(), scalar(&rec)?);
    c.insert("perc_recon".into(), scalar(&perc_recon)?);
    c.insert("perc_syn".into(), scalar(&perc_syn)?);
    c.insert("latent_kl".into(), scalar(&kl)?);
    c.insert("adv_syn".into(), scalar(&adv_syn)?);
    c.insert("adv_recon".into(), scalar(&adv_recon)?);
    c.insert("loss_g".into(), scalar(&loss_g)?);
    c.insert("loss_i".into(), scalar(&loss_i)?);
    Ok((loss_g, loss_i, c))
}

/// All three player losses from one batch's outputs.
pub fn assemble_losses(out: &BatchOutputs, f: &FixedFeatureExtractor, weights: &LossWeights) -> Result<PlayerLosses> {
    let (loss_g, loss_i, mut components) = consensus_losses(out, f, weights)?;
    let (loss_d, dc) = discriminator_loss(
        need(&out.d_real, "d_real")?,
        need(&out.d_syn, "d_syn")?,
        need(&out.d_recon, "d_recon")?,
        weights,
    )?;
    components.extend(dc);
    Ok(PlayerLosses { loss_g, loss_d, loss_i, components })
}
