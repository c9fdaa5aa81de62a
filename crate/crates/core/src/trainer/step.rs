use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::batch::LayoutBatch;
use crate::dataset::TrainingSample;
use crate::error::{DclError, Result};
use crate::generator::Mode;
use crate::layout::Layout;
use crate::nn::Adam;
use crate::objective::{consensus_losses, discriminator_loss, BatchOutputs, PlayerLosses};

use super::config::TrainConfig;
use super::model::{latent_seed, DclModel, DataConsensus, LatentConsensus};

/// Parameters, optimizer moments and the step counter. The counter also
/// fixes every random draw of the following steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: DclModel,
    pub opt_g: Adam,
    pub opt_h: Adam,
    pub opt_i: Adam,
    pub opt_d: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: DclModel) -> Self {
        let c: &TrainConfig = &model.config;
        Self {
            opt_g: Adam::new(c.adam_g()),
            opt_h: Adam::new(c.adam_g()),
            opt_i: Adam::new(c.adam_i()),
            opt_d: Adam::new(c.adam_d()),
            model,
            step: 0,
        }
    }
}

/// One forward pass of both chains with shared latents.
pub struct Forward {
    pub batch: LayoutBatch,
    pub x_real: Tensor,
    pub latent: LatentConsensus,
    pub data: DataConsensus,
}

/// Runs both chains on a batch with the latents of `(seed, step)`.
pub fn forward(model: &mut DclModel, layouts: &[Layout], x_real: Tensor, step: u64, mode: Mode) -> Result<Forward> {
    let batch = model.layout_batch(layouts)?;
    let seeds: Vec<u64> = (0..layouts.len()).map(|i| latent_seed(model.config.seed, step, i)).collect();
    let bundles = model.latents(layouts, &seeds);
    let latents = model.stack_latents(&bundles, &batch)?;
    let styles = model.styles(&batch, &latents)?;
    let latent = model.latent_consensus_pass(&batch, &latents, &styles, mode)?;
    let data = model.data_consensus_pass(&x_real, &batch, &latents, &styles, mode, false)?;
    Ok(Forward { batch, x_real, latent, data })
}

fn check_finite(step: u64, components: &BTreeMap<String, f64>) -> Result<()> {
    if components.values().all(|v| v.is_finite()) {
        return Ok(());
    }
    let dump = components.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ");
    Err(DclError::NonFiniteLoss { step, components: dump })
}

/// Discriminator update on detached fakes. Returns the loss and components.
fn discriminator_phase(state: &mut TrainState, fwd: &Forward) -> Result<(Tensor, BTreeMap<String, f64>)> {
    let weights_cfg = state.model.config.loss;
    let clip = state.model.config.clip();
    let (loss, components, grads) = {
        let d = state.model.discriminator.weights(true, false)?;
        let real = d.score(&fwd.x_real, &fwd.batch)?;
        let syn = d.score(&fwd.latent.x_syn.detach(), &fwd.batch)?;
        let recon = d.score(&fwd.data.x_recon.detach(), &fwd.batch)?;
        let (loss, components) = discriminator_loss(&real, &syn, &recon, &weights_cfg)?;
        check_finite(state.step, &components)?;
        let grads = loss.backward()?;
        (loss, components, grads)
    };
    state.opt_d.step(&state.model.discriminator.params, &grads, clip)?;
    Ok((loss.detach(), components))
}

/// Joint update of the generator, mask generator and inference network on
/// the generator-side loss, which contains every inference-side term.
fn minimization_phase(state: &mut TrainState, fwd: &Forward) -> Result<(Tensor, Tensor, BTreeMap<String, f64>)> {
    let cfg = state.model.config.clone();
    let (g_syn, g_recon) = {
        let d = state.model.discriminator.weights(false, true)?;
        (d.score(&fwd.latent.x_syn, &fwd.batch)?, d.score(&fwd.data.x_recon, &fwd.batch)?)
    };
    let outputs = BatchOutputs {
        x_real: Some(fwd.x_real.clone()),
        x_syn: Some(fwd.latent.x_syn.clone()),
        x_recon: Some(fwd.data.x_recon.clone()),
        h_y: Some(fwd.latent.h_y.clone()),
        h_syn_hat: Some(fwd.latent.h_syn_hat.clone()),
        h_real_hat: Some(fwd.data.h_real_hat.clone()),
        g_syn: Some(g_syn),
        g_recon: Some(g_recon),
        ..Default::default()
    };
    let (loss_g, loss_i, components) = consensus_losses(&outputs, &state.model.features, &cfg.loss)?;
    check_finite(state.step, &components)?;
    let grads = loss_g.backward()?;
    let clip = cfg.clip();
    state.opt_g.step(&state.model.generator.params, &grads, clip)?;
    state.opt_h.step(&state.model.mask.params, &grads, clip)?;
    state.opt_i.step(&state.model.inference.params, &grads, clip)?;
    Ok((loss_g.detach(), loss_i.detach(), components))
}

/// One training iteration: `d_steps` discriminator updates against the
/// current fakes, then `g_steps` joint updates, each after a fresh forward
/// pass except the first.
pub fn train_step(state: &mut TrainState, samples: &[&TrainingSample]) -> Result<PlayerLosses> {
    let layouts: Vec<Layout> = samples.iter().map(|s| s.layout.clone()).collect();
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let x_real = state.model.image_batch(&images)?;
    let step = state.step;
    let mut fwd = forward(&mut state.model, &layouts, x_real.clone(), step, Mode::Train)?;

    let mut d_out = None;
    for _ in 0..state.model.config.d_steps {
        d_out = Some(discriminator_phase(state, &fwd)?);
    }
    let mut g_out = None;
    for k in 0..state.model.config.g_steps {
        if k > 0 {
            // extra descent steps draw latents from a disjoint seed range
            let sub = step ^ ((k as u64) << 48);
            fwd = forward(&mut state.model, &layouts, x_real.clone(), sub, Mode::Train)?;
        }
        g_out = Some(minimization_phase(state, &fwd)?);
    }
    state.step += 1;

    let (loss_d, mut components) = d_out.ok_or(DclError::MissingBranch("discriminator phase"))?;
    let (loss_g, loss_i, g_components) = g_out.ok_or(DclError::MissingBranch("minimization phase"))?;
    components.extend(g_components);
    Ok(PlayerLosses { loss_g, loss_d, loss_i, components })
}
