//! Training loop: two augmented views per image, contrastive losses, Adam
//! with decoupled weight decay, linear-warmup + cosine-decay learning rate,
//! global-norm gradient clipping, epoch-boundary checkpoints, JSONL metrics.

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Result, SlotError};
use crate::graph::{El, Graph};
use crate::losses::{self, LossConfig};
use crate::model::{self, ForwardRequest, ModelConfig};
use crate::nn::{clip_global_norm, Adam, ParamStore, ParamVars};
use crate::scenegen::{augment, AugmentConfig, Dataset, Split};
use ndarray::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Save a checkpoint every this many epochs (besides `last`/`best`).
    pub checkpoint_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            lr_peak: 7e-4,
            lr_final: 3e-4,
            warmup_epochs: 2.0,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            checkpoint_every: 1,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(SlotError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_peak > 0.0 && self.lr_final >= 0.0 && self.lr_final <= self.lr_peak) {
            return Err(SlotError::Config(format!(
                "need 0 <= lr_final <= lr_peak, got peak={} final={}",
                self.lr_peak, self.lr_final
            )));
        }
        if self.warmup_epochs < 0.0 || self.warmup_epochs >= self.epochs as f64 {
            return Err(SlotError::Config(format!(
                "warmup_epochs {} must lie inside the {} training epochs",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.grad_clip <= 0.0 {
            return Err(SlotError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based): linear 0 → `lr_peak` over
/// `warmup_steps`, then cosine `lr_peak` → `lr_final` over the remainder.
/// Exact at the three anchors: lr(0) = 0, lr(warmup) = peak,
/// lr(total) = final.
pub fn lr_schedule(
    step: u64,
    total_steps: u64,
    warmup_steps: u64,
    lr_peak: f64,
    lr_final: f64,
) -> f64 {
    assert!(warmup_steps <= total_steps);
    if warmup_steps > 0 && step < warmup_steps {
        return lr_peak * step as f64 / warmup_steps as f64;
    }
    if total_steps == warmup_steps {
        return lr_peak;
    }
    let t = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    lr_final + (lr_peak - lr_final) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// One metrics record, written as a JSON line per optimizer step and per
/// epoch (epoch records carry `val_loss`).
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    /// Wall-clock seconds since training start; excluded from any
    /// determinism comparison.
    pub elapsed_s: f64,
}

pub struct TrainSetup<'a> {
    pub model: &'a ModelConfig,
    pub loss: &'a LossConfig,
    pub train: &'a TrainConfig,
    pub augment: &'a AugmentConfig,
    pub image_size: usize,
    pub seed: u64,
    /// Stable hash of the full experiment config, stored in checkpoints.
    pub config_hash: String,
}

pub struct TrainOutcome {
    pub steps: u64,
    pub final_train_loss: f64,
    pub best_val_loss: Option<f64>,
    pub params: ParamStore,
    pub last_checkpoint: Option<PathBuf>,
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    // splitmix64-style mixing of (seed, epoch, index) into one stream seed
    let mut z = a
        .wrapping_add(b.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(c.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Forward + loss for one batch of images (two views each, pair-adjacent).
fn batch_loss<F: El>(
    setup: &TrainSetup,
    params: &ParamStore,
    views: &[Array3<f64>],
    query_rng: &mut ChaCha8Rng,
    backward: bool,
) -> Result<(f64, Option<f64>, Option<f64>, Option<std::collections::BTreeMap<String, ndarray::ArrayD<f64>>>)> {
    let images = views.len() / 2;
    let k = setup.model.grouping.num_queries;
    let req = ForwardRequest {
        objects: setup.loss.objective.is_some(),
        global: setup.loss.use_global,
    };
    let mut g: Graph<F> = Graph::new();
    let pvars = ParamVars::bind(&mut g, params);
    let out = model::forward(&mut g, &pvars, setup.model, views, query_rng, req)?;
    let breakdown = losses::total_loss(
        &mut g,
        setup.loss,
        out.p_global,
        out.p_obj,
        out.slot_values.as_ref(),
        images,
        k,
    )?;
    let loss = El::to_f64(*g.value(breakdown.total).first().unwrap());
    let grads = if backward {
        let grads = g.backward(breakdown.total);
        Some(pvars.grads(&grads))
    } else {
        None
    };
    Ok((loss, breakdown.global_value, breakdown.object_value, grads))
}

fn make_views(
    dataset: &Dataset,
    indices: &[usize],
    cfg: &AugmentConfig,
    seed_base: impl Fn(usize) -> u64,
) -> Result<Vec<Array3<f64>>> {
    let mut views = Vec::with_capacity(indices.len() * 2);
    for &i in indices {
        let scene = dataset.samples[i].to_scene();
        let pair = augment(&scene, cfg, seed_base(i))?;
        views.push(pair.view0);
        views.push(pair.view1);
    }
    Ok(views)
}

/// Run training. `resume` loads a checkpoint (written by this function) and
/// continues from the epoch after the one it recorded; the result is
/// bit-identical to an uninterrupted run because shuffling and augmentation
/// draws are keyed on (seed, epoch, sample) and the query RNG state travels
/// inside the checkpoint.
pub fn train(
    setup: &TrainSetup,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    train_until(setup, dataset, out_dir, resume, None)
}

/// Like [`train`] but stops after `stop_after` epochs while keeping the
/// learning-rate schedule of the full run, so a later resume continues it
/// bit-identically.
pub fn train_until(
    setup: &TrainSetup,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    match setup.train.precision {
        Precision::F32 => train_impl::<f32>(setup, dataset, out_dir, resume, stop_after),
        Precision::F64 => train_impl::<f64>(setup, dataset, out_dir, resume, stop_after),
    }
}

fn train_impl<F: El>(
    setup: &TrainSetup,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    setup.train.validate()?;
    setup.loss.validate()?;
    setup.model.validate(setup.image_size)?;
    let train_idx = dataset.split_indices(Split::Train);
    let val_idx = dataset.split_indices(Split::Val);
    if train_idx.len() < setup.train.batch_size {
        return Err(SlotError::Validation(format!(
            "train split has {} samples, need at least one batch of {}",
            train_idx.len(),
            setup.train.batch_size
        )));
    }
    let tc = setup.train;
    let steps_per_epoch = (train_idx.len() / tc.batch_size) as u64;
    let total_steps = steps_per_epoch * tc.epochs as u64;
    let warmup_steps = (tc.warmup_epochs * steps_per_epoch as f64).round() as u64;

    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");

    let (mut params, mut adam, mut query_rng, start_epoch, mut step) = match resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            if ckpt.config_hash != setup.config_hash {
                return Err(SlotError::Checkpoint(format!(
                    "checkpoint {} was written by a different config (hash {} vs {})",
                    path.display(),
                    ckpt.config_hash,
                    setup.config_hash
                )));
            }
            let adam = ckpt.optimizer(tc.weight_decay);
            let rng = ckpt
                .rng
                .clone()
                .unwrap_or_else(|| ChaCha8Rng::seed_from_u64(setup.seed ^ 0x51a7));
            (ckpt.params, adam, rng, ckpt.epoch as usize + 1, ckpt.step)
        }
        None => (
            model::init_params(setup.model, setup.image_size, setup.seed)?,
            Adam::new(tc.weight_decay),
            ChaCha8Rng::seed_from_u64(setup.seed ^ 0x51a7),
            0,
            0,
        ),
    };

    let mut metrics = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)?,
    );
    let t0 = std::time::Instant::now();
    let mut last_ckpt: Option<PathBuf> = None;
    let mut best_val: Option<f64> = None;
    let mut final_train_loss = f64::NAN;

    let end_epoch = stop_after.map_or(tc.epochs, |e| e.min(tc.epochs));
    for epoch in start_epoch..end_epoch {
        let mut order = train_idx.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(setup.seed, epoch as u64, 0));
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks_exact(tc.batch_size) {
            let views = make_views(dataset, batch, setup.augment, |i| {
                mix_seed(setup.seed, epoch as u64 + 1, i as u64)
            })?;
            let lr = lr_schedule(step, total_steps, warmup_steps, tc.lr_peak, tc.lr_final);
            let (loss, gl, ol, grads) =
                batch_loss::<F>(setup, &params, &views, &mut query_rng, true).map_err(|e| {
                    match e {
                        SlotError::NonFinite(msg) => SlotError::TrainAbort {
                            step: step as usize,
                            msg,
                            last_checkpoint: last_ckpt
                                .as_ref()
                                .map(|p| p.display().to_string()),
                        },
                        other => other,
                    }
                })?;
            let mut grads = grads.unwrap();
            clip_global_norm(&mut grads, tc.grad_clip);
            adam.step(&mut params, &grads, lr);
            step += 1;
            final_train_loss = loss;
            let rec = MetricsRecord {
                step,
                epoch: epoch as u64,
                lr,
                loss,
                global_loss: gl,
                object_loss: ol,
                val_loss: None,
                elapsed_s: t0.elapsed().as_secs_f64(),
            };
            writeln!(metrics, "{}", serde_json::to_string(&rec).unwrap())?;
        }

        // validation: deterministic augmentation keyed on the sample only
        let val_loss = if val_idx.is_empty() {
            None
        } else {
            let mut acc = 0.0;
            let mut batches = 0usize;
            for batch in val_idx.chunks(tc.batch_size) {
                if batch.len() < 2 {
                    continue;
                }
                let views = make_views(dataset, batch, setup.augment, |i| {
                    mix_seed(setup.seed ^ 0x7a11, 0, i as u64)
                })?;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(setup.seed, 7, epoch as u64));
                let (loss, _, _, _) = batch_loss::<F>(setup, &params, &views, &mut rng, false)?;
                acc += loss;
                batches += 1;
            }
            (batches > 0).then(|| acc / batches as f64)
        };
        let rec = MetricsRecord {
            step,
            epoch: epoch as u64,
            lr: lr_schedule(step, total_steps, warmup_steps, tc.lr_peak, tc.lr_final),
            loss: final_train_loss,
            global_loss: None,
            object_loss: None,
            val_loss,
            elapsed_s: t0.elapsed().as_secs_f64(),
        };
        writeln!(metrics, "{}", serde_json::to_string(&rec).unwrap())?;
        metrics.flush()?;

        // checkpoints
        let write_ckpt = |name: &str, params: &ParamStore, adam: &Adam, rng: &ChaCha8Rng| {
            let ckpt = Checkpoint {
                step,
                epoch: epoch as u64,
                config_hash: setup.config_hash.clone(),
                rng: Some(rng.clone()),
                params: params.clone(),
                optim_t: adam.t as u64,
                optim_m: adam.m.clone(),
                optim_v: adam.v.clone(),
            };
            let path = ckpt_dir.join(name);
            checkpoint::save(&ckpt, &path).map(|_| path)
        };
        if tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0 {
            write_ckpt(&format!("epoch_{epoch}.bin"), &params, &adam, &query_rng)?;
        }
        last_ckpt = Some(write_ckpt("last.bin", &params, &adam, &query_rng)?);
        if let Some(v) = val_loss {
            if best_val.map_or(true, |b| v < b) {
                best_val = Some(v);
                write_ckpt("best.bin", &params, &adam, &query_rng)?;
            }
        }
    }

    Ok(TrainOutcome {
        steps: step,
        final_train_loss,
        best_val_loss: best_val,
        params,
        last_checkpoint: last_ckpt,
    })
}
