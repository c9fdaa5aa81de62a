use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Device;
use serde_json::{json, Map, Value};

use crate::dataset::{epoch_order, manifest_path, LayoutDataset, TrainingSample};
use crate::error::{DclError, Result};
use crate::eval::{evaluate_segmentation, SegmentationMetrics};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::TrainConfig;
use super::model::DclModel;
use super::step::{train_step, TrainState};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final";

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Stop once this many steps have completed, before the configured end.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub last_eval: Option<SegmentationMetrics>,
}

struct MetricsLog {
    file: fs::File,
}

impl MetricsLog {
    /// Opens the log for appending after dropping any record newer than
    /// `step`, so a resumed run never repeats or contradicts a step.
    fn open(path: &Path, step: u64) -> Result<Self> {
        if path.exists() {
            let text = fs::read_to_string(path)?;
            let kept: String = text
                .lines()
                .filter(|line| {
                    serde_json::from_str::<Value>(line)
                        .ok()
                        .and_then(|v| v.get("step").and_then(Value::as_u64))
                        .is_some_and(|s| s <= step)
                })
                .flat_map(|line| [line, "\n"])
                .collect();
            fs::write(path, kept)?;
        }
        Ok(Self { file: OpenOptions::new().create(true).append(true).open(path)? })
    }

    fn write(&mut self, record: &Value) -> Result<()> {
        serde_json::to_writer(&mut self.file, record)?;
        self.file.write_all(b"\n")?;
        self.file.flush()?;
        Ok(())
    }
}

fn eval_record(step: u64, epoch: u64, m: &SegmentationMetrics) -> Value {
    json!({
        "kind": "eval",
        "step": step,
        "epoch": epoch,
        "split": "val",
        "class_acc": m.class_acc,
        "pixel_acc": m.pixel_acc,
        "mean_iou": m.mean_iou,
        "fw_iou": m.fw_iou,
    })
}

/// Trains on `data/train.jsonl`, evaluating on `data/val.jsonl` when present.
/// Ground-truth masks are opened only by the evaluation routine.
pub fn train(config: &TrainConfig, data: &Path, out: &Path, options: &TrainOptions, device: &Device) -> Result<TrainSummary> {
    config.check()?;
    let train_set = LayoutDataset::open(data, "train", config.max_instances)?;
    let samples: Vec<TrainingSample> = train_set.training_samples()?;
    if let Some(s) = samples.iter().find(|s| s.image.lattice.width != config.image_size || s.image.lattice.height != config.image_size) {
        return Err(DclError::ConfigMismatch(format!(
            "dataset images are {}x{}, image_size is {}",
            s.image.lattice.height, s.image.lattice.width, config.image_size
        )));
    }
    let val = if manifest_path(data, "val").exists() {
        Some(LayoutDataset::open(data, "val", config.max_instances)?)
    } else {
        None
    };
    let mut state = match &options.resume {
        Some(dir) => {
            let state = load_checkpoint(dir, device)?;
            if state.model.config != *config {
                return Err(DclError::ConfigMismatch("resume checkpoint was trained with a different configuration".into()));
            }
            if state.model.categories != train_set.categories {
                return Err(DclError::ConfigMismatch("resume checkpoint has different categories".into()));
            }
            state
        }
        None => TrainState::new(DclModel::new(config, train_set.categories.clone(), device)?),
    };
    run(&mut state, &samples, val.as_ref(), out, options)
}

/// The training loop proper over in-memory samples.
pub fn run(
    state: &mut TrainState,
    samples: &[TrainingSample],
    val: Option<&LayoutDataset>,
    out: &Path,
    options: &TrainOptions,
) -> Result<TrainSummary> {
    let config = state.model.config.clone();
    fs::create_dir_all(out)?;
    let metrics_path = out.join(METRICS_FILE);
    let mut log = MetricsLog::open(&metrics_path, state.step)?;
    let per_epoch = (samples.len() / config.batch_size) as u64;
    if per_epoch == 0 {
        return Err(DclError::Config(format!(
            "{} training samples cannot fill one batch of {}",
            samples.len(),
            config.batch_size
        )));
    }
    let total = per_epoch * config.epochs as u64;
    let end = options.stop_after.map_or(total, |s| s.min(total));
    let mut last_eval = None;
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    while state.step < end {
        let epoch = state.step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(samples.len(), config.seed, epoch);
            order_epoch = epoch;
        }
        let pos = (state.step % per_epoch) as usize * config.batch_size;
        let batch: Vec<&TrainingSample> = order[pos..pos + config.batch_size].iter().map(|&i| &samples[i]).collect();
        let losses = train_step(state, &batch)?;
        let step = state.step;

        let mut record = Map::new();
        record.insert("kind".into(), json!("step"));
        record.insert("step".into(), json!(step));
        record.insert("epoch".into(), json!(epoch));
        for (k, v) in &losses.components {
            record.insert(k.clone(), json!(v));
        }
        log.write(&Value::Object(record))?;
        if step.is_multiple_of(10) || step == end {
            log::info!(
                "step {step}/{total} epoch {epoch} loss_d {:.4} loss_g {:.4} loss_i {:.4}",
                losses.components["loss_d"],
                losses.components["loss_g"],
                losses.components["loss_i"]
            );
        }

        let eval_due = if config.eval_every > 0 { step.is_multiple_of(config.eval_every) } else { step.is_multiple_of(per_epoch) };
        if let (true, Some(val)) = (eval_due, val) {
            let cm = evaluate_segmentation(&state.model.inference, val, config.eval_samples, config.batch_size)?;
            if cm.total() > 0 {
                let m = cm.metrics()?;
                log.write(&eval_record(step, epoch, &m))?;
                log::info!("eval step {step}: pixel_acc {:.4} mean_iou {:.4}", m.pixel_acc, m.mean_iou);
                last_eval = Some(m);
            }
        }
        if config.checkpoint_every > 0 && step.is_multiple_of(config.checkpoint_every) {
            save_checkpoint(state, &out.join("checkpoints").join(format!("step_{step:08}")))?;
        }
    }
    let checkpoint = out.join(FINAL_CHECKPOINT);
    save_checkpoint(state, &checkpoint)?;
    Ok(TrainSummary { steps: state.step, checkpoint, metrics_log: metrics_path, last_eval })
}
