//! Run-level evaluation: runs a trained model over the test split, scores
//! attention-map segmentation by IoU, and trains/scores a linear probe on
//! the per-image attribute questions.

use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use crate::config::ExperimentConfig;
use crate::evalsuite::{
    average_precision, extract_masks, probe_predictions, segmentation_iou, train_probe,
};
use crate::graph::Graph;
use crate::model::{self, ForwardRequest, GlobalInput};
use crate::nn::{ParamStore, ParamVars};
use crate::scenegen::{eval_view, replay_label_map, vqa_labels, CropBox, Dataset, Split};
use crate::{Result, SlotError};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EvalSummary {
    /// Mean IoU over test images with at least one object; absent for
    /// models without an object pathway.
    pub iou: Option<f64>,
    /// Micro-averaged AP of the attribute probe on held-out test images.
    pub ap: f64,
    pub images_scored_iou: usize,
    pub images_probe_train: usize,
    pub images_probe_test: usize,
    pub config_hash: String,
    pub run_id: String,
    pub seed: u64,
}

struct PerImage {
    features: Array2<f64>,
    labels: Vec<bool>,
    iou: Option<f64>,
}

/// Whether this configuration has slots to evaluate (IoU + slot probe) or
/// only a global representation.
fn uses_slots(cfg: &ExperimentConfig) -> bool {
    cfg.loss.objective.is_some() || cfg.model.global_input == GlobalInput::Slots
}

fn eval_image(
    cfg: &ExperimentConfig,
    params: &ParamStore,
    sample: &crate::scenegen::StoredSample,
) -> Result<PerImage> {
    let scene = sample.to_scene();
    let view = eval_view(&scene.image, &cfg.augment);
    let slots_mode = uses_slots(cfg);
    let req = ForwardRequest {
        objects: slots_mode,
        global: !slots_mode,
    };
    let mut g: Graph<f32> = Graph::new();
    let pvars = ParamVars::bind(&mut g, params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ sample.id);
    let out = model::forward(&mut g, &pvars, &cfg.model, std::slice::from_ref(&view), &mut rng, req)?;

    let labels = vqa_labels(&sample.attributes);
    if slots_mode {
        let slots = out.slot_values.expect("objects requested");
        let attention = &out.attention[0];
        let side = cfg.augment.output_size;
        let masks = extract_masks(attention, out.grid, side)?;
        // ground truth at eval resolution (identity crop, no flip)
        let (h, w) = sample.label_map.dim();
        let gt = replay_label_map(
            &sample.label_map,
            false,
            CropBox { x: 0, y: 0, w, h },
            side,
        );
        let iou = segmentation_iou(&masks, &gt);
        Ok(PerImage {
            features: slots,
            labels,
            iou,
        })
    } else {
        let repr = g
            .value(out.repr.expect("global requested"))
            .mapv(|v| v as f64)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        Ok(PerImage {
            features: repr,
            labels,
            iou: None,
        })
    }
}

/// Evaluate `params` on the dataset's test split. The first
/// `probe_train_frac` of the split (by stored order) trains the attribute
/// probe; the remainder is scored. IoU is averaged over the whole split.
pub fn evaluate(
    cfg: &ExperimentConfig,
    params: &ParamStore,
    dataset: &Dataset,
) -> Result<EvalSummary> {
    let test_idx = dataset.split_indices(Split::Test);
    if test_idx.len() < 3 {
        return Err(SlotError::Validation(format!(
            "test split has {} samples; need at least 3",
            test_idx.len()
        )));
    }
    let mut per_image = Vec::with_capacity(test_idx.len());
    for &i in &test_idx {
        per_image.push(eval_image(cfg, params, &dataset.samples[i])?);
    }

    let ious: Vec<f64> = per_image.iter().filter_map(|p| p.iou).collect();
    let iou = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);

    let split = (test_idx.len() * 2) / 3;
    let features: Vec<Array2<f64>> = per_image.iter().map(|p| p.features.clone()).collect();
    let labels: Vec<Vec<bool>> = per_image.iter().map(|p| p.labels.clone()).collect();
    let mut probe_cfg = cfg.probe.clone();
    probe_cfg.seed = cfg.seed;
    let probe = train_probe(&features[..split], &labels[..split], &probe_cfg)?;
    let (scores, flat) = probe_predictions(&probe, &features[split..], &labels[split..]);
    let ap = average_precision(&scores, &flat)?;

    Ok(EvalSummary {
        iou,
        ap,
        images_scored_iou: ious.len(),
        images_probe_train: split,
        images_probe_test: test_idx.len() - split,
        config_hash: cfg.hash(),
        run_id: cfg.run_id.clone(),
        seed: cfg.seed,
    })
}
