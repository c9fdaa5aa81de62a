mod common;

use candle_core::Device;
use common::*;
use dcl_core::generator::Mode;
use dcl_core::nn::scalar;
use dcl_core::objective::{consensus_losses, discriminator_loss, recon_l1, BatchOutputs};
use dcl_core::trainer::{forward, load_checkpoint, run, save_checkpoint, train_step, TrainOptions, METRICS_FILE};

fn run_steps(seed: u64, steps: usize) -> Vec<String> {
    let samples = tiny_samples(16, seed);
    let mut state = tiny_state(seed);
    (0..steps)
        .map(|k| {
            let losses = train_step(&mut state, &batch_refs(&samples, k, 4)).unwrap();
            serde_json::to_string(&losses.components).unwrap()
        })
        .collect()
}

#[test]
fn identical_seeds_give_identical_logs() {
    let a = run_steps(3, 100);
    let b = run_steps(3, 100);
    assert_eq!(a, b);
    assert_ne!(a, run_steps(4, 100));
}

#[test]
fn resumed_training_matches_uninterrupted_bitwise() {
    let samples = tiny_samples(16, 1);
    let dir = tempfile::tempdir().unwrap();

    let mut straight = tiny_state(1);
    for k in 0..3 {
        train_step(&mut straight, &batch_refs(&samples, k, 4)).unwrap();
    }

    let mut first = tiny_state(1);
    train_step(&mut first, &batch_refs(&samples, 0, 4)).unwrap();
    save_checkpoint(&first, dir.path()).unwrap();
    drop(first);
    let mut resumed = load_checkpoint(dir.path(), &Device::Cpu).unwrap();
    assert_eq!(resumed.step, 1);
    for k in 1..3 {
        train_step(&mut resumed, &batch_refs(&samples, k, 4)).unwrap();
    }

    let a = all_params(&straight.model);
    let b = all_params(&resumed.model);
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, t) in &a {
        assert_eq!(bits(t), bits(&b[name]), "{name} differs after resume");
    }
}

#[test]
fn loaded_checkpoint_reproduces_forward_outputs() {
    let samples = tiny_samples(8, 2);
    let dir = tempfile::tempdir().unwrap();
    let mut state = tiny_state(2);
    train_step(&mut state, &batch_refs(&samples, 0, 4)).unwrap();
    save_checkpoint(&state, dir.path()).unwrap();
    let mut loaded = load_checkpoint(dir.path(), &Device::Cpu).unwrap();

    let batch = batch_refs(&samples, 1, 4);
    let layouts: Vec<_> = batch.iter().map(|s| s.layout.clone()).collect();
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    for mode in [Mode::Eval, Mode::Train] {
        let xa = state.model.image_batch(&images).unwrap();
        let xb = loaded.model.image_batch(&images).unwrap();
        let fa = forward(&mut state.model, &layouts, xa, 9, mode).unwrap();
        let fb = forward(&mut loaded.model, &layouts, xb, 9, mode).unwrap();
        assert_eq!(bits(&fa.latent.x_syn), bits(&fb.latent.x_syn));
        assert_eq!(bits(&fa.latent.h_y), bits(&fb.latent.h_y));
        assert_eq!(bits(&fa.data.x_recon), bits(&fb.data.x_recon));
        assert_eq!(bits(&fa.data.h_real_hat), bits(&fb.data.h_real_hat));
    }
}

#[test]
fn every_parameter_tensor_moves_in_one_step() {
    let samples = tiny_samples(8, 5);
    let mut state = smoke_state(5);
    let before = all_params(&state.model);
    let features: Vec<_> = state.model.features.weights().iter().map(bits).collect();
    train_step(&mut state, &batch_refs(&samples, 0, 8)).unwrap();
    let after = all_params(&state.model);
    for (name, t) in &before {
        let delta = scalar(&(t - &after[name]).unwrap().abs().unwrap().sum_all().unwrap()).unwrap();
        assert!(delta > 0.0, "{name} did not change");
    }
    let features_after: Vec<_> = state.model.features.weights().iter().map(bits).collect();
    assert_eq!(features, features_after, "the feature extractor must stay frozen");
}

#[test]
fn player_losses_reach_their_parameters() {
    let samples = tiny_samples(4, 6);
    let mut state = tiny_state(6);
    let batch = batch_refs(&samples, 0, 4);
    let layouts: Vec<_> = batch.iter().map(|s| s.layout.clone()).collect();
    let x = state.model.image_batch(&batch.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    let fwd = forward(&mut state.model, &layouts, x, 0, Mode::Train).unwrap();
    let m = &mut state.model;

    // discriminator loss on detached fakes
    let d = m.discriminator.weights(false, false).unwrap();
    let real = d.score(&fwd.x_real, &fwd.batch).unwrap();
    let syn = d.score(&fwd.latent.x_syn.detach(), &fwd.batch).unwrap();
    let recon = d.score(&fwd.data.x_recon.detach(), &fwd.batch).unwrap();
    let (loss_d, _) = discriminator_loss(&real, &syn, &recon, &m.config.loss).unwrap();
    let grads = loss_d.backward().unwrap();
    let (norm, missing) = grad_report(&m.discriminator.params, &grads);
    assert!(norm > 0.0 && missing.is_empty(), "loss_d misses {missing:?}");
    for store in [&m.generator.params, &m.mask.params, &m.inference.params] {
        assert_eq!(grad_report(store, &grads).0, 0.0, "detached fakes leak into the minimizers");
    }

    // minimizer losses against a frozen discriminator
    let d = m.discriminator.weights(false, true).unwrap();
    let outputs = BatchOutputs {
        x_real: Some(fwd.x_real.clone()),
        x_syn: Some(fwd.latent.x_syn.clone()),
        x_recon: Some(fwd.data.x_recon.clone()),
        h_y: Some(fwd.latent.h_y.clone()),
        h_syn_hat: Some(fwd.latent.h_syn_hat.clone()),
        h_real_hat: Some(fwd.data.h_real_hat.clone()),
        g_syn: Some(d.score(&fwd.latent.x_syn, &fwd.batch).unwrap()),
        g_recon: Some(d.score(&fwd.data.x_recon, &fwd.batch).unwrap()),
        ..Default::default()
    };
    let (loss_g, loss_i, _) = consensus_losses(&outputs, &m.features, &m.config.loss).unwrap();
    let grads = loss_g.backward().unwrap();
    for (player, store) in [("generator", &m.generator.params), ("mask", &m.mask.params)] {
        let (norm, missing) = grad_report(store, &grads);
        assert!(norm > 0.0 && missing.is_empty(), "loss_g misses {player} {missing:?}");
    }
    assert_eq!(grad_report(&m.discriminator.params, &grads).0, 0.0, "frozen discriminator received gradient");
    let grads = loss_i.backward().unwrap();
    let (norm, missing) = grad_report(&m.inference.params, &grads);
    assert!(norm > 0.0 && missing.is_empty(), "loss_i misses {missing:?}");
}

#[test]
fn reconstruction_reaches_inference_net_only_through_inferred_map() {
    let samples = tiny_samples(4, 7);
    let mut state = tiny_state(7);
    let batch = batch_refs(&samples, 0, 4);
    let layouts: Vec<_> = batch.iter().map(|s| s.layout.clone()).collect();
    let m = &mut state.model;
    let x = m.image_batch(&batch.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    let lb = m.layout_batch(&layouts).unwrap();
    let seeds: Vec<u64> = (0..4).collect();
    let bundles = m.latents(&layouts, &seeds);
    let latents = m.stack_latents(&bundles, &lb).unwrap();
    let styles = m.styles(&lb, &latents).unwrap();

    let live = m.data_consensus_pass(&x, &lb, &latents, &styles, Mode::Train, false).unwrap();
    let grads = recon_l1(&x, &live.x_recon).unwrap().backward().unwrap();
    assert!(grad_report(&m.inference.params, &grads).0 > 0.0);

    let cut = m.data_consensus_pass(&x, &lb, &latents, &styles, Mode::Train, true).unwrap();
    let grads = recon_l1(&x, &cut.x_recon).unwrap().backward().unwrap();
    assert_eq!(grad_report(&m.inference.params, &grads).0, 0.0);
    assert!(grad_report(&m.generator.params, &grads).0 > 0.0);
}

#[test]
fn fresh_model_has_positive_latent_disagreement() {
    let samples = tiny_samples(4, 8);
    let mut state = tiny_state(8);
    let batch = batch_refs(&samples, 0, 4);
    let layouts: Vec<_> = batch.iter().map(|s| s.layout.clone()).collect();
    let x = state.model.image_batch(&batch.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    let fwd = forward(&mut state.model, &layouts, x.clone(), 0, Mode::Train).unwrap();
    let kl = dcl_core::objective::mean_kl(&fwd.latent.h_y, &fwd.latent.h_syn_hat).unwrap();
    assert!(scalar(&kl).unwrap() > 0.0);
    assert_eq!(fwd.latent.h_syn_hat.dims()[2..], fwd.latent.x_syn.dims()[2..]);
    assert_eq!(fwd.data.x_recon.dims(), x.dims());
}

#[test]
fn discriminator_loss_falls_early_in_most_runs() {
    let mut falls = 0;
    let mut report = Vec::new();
    for seed in 0..5 {
        let samples = tiny_samples(64, 100 + seed);
        let mut state = smoke_state(100 + seed);
        let d: Vec<f64> =
            (0..50).map(|k| train_step(&mut state, &batch_refs(&samples, k, 8)).unwrap().components["loss_d"]).collect();
        let head = d[..10].iter().sum::<f64>() / 10.0;
        let tail = d[40..].iter().sum::<f64>() / 10.0;
        report.push((head, tail));
        if tail < head {
            falls += 1;
        }
    }
    assert!(falls >= 4, "loss_d fell in {falls}/5 runs: {report:?}");
}

#[test]
fn resume_drops_log_records_past_the_checkpoint() {
    let samples = tiny_samples(8, 9);
    let dir = tempfile::tempdir().unwrap();
    let mut state = tiny_state(9);
    run(&mut state, &samples, None, dir.path(), &TrainOptions { resume: None, stop_after: Some(2) }).unwrap();
    save_checkpoint(&state, &dir.path().join("ck2")).unwrap();
    run(&mut state, &samples, None, dir.path(), &TrainOptions { resume: None, stop_after: Some(4) }).unwrap();

    let mut resumed = load_checkpoint(&dir.path().join("ck2"), &Device::Cpu).unwrap();
    run(&mut resumed, &samples, None, dir.path(), &TrainOptions { resume: None, stop_after: Some(3) }).unwrap();
    let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let steps: Vec<u64> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![1, 2, 3]);
}
