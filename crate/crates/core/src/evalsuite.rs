//! Evaluation: attention-map segmentation scored by IoU, and a linear probe
//! answering per-image attribute questions, scored by average precision.

use crate::assignment::{hungarian, CostMatrix};
use crate::backbone::bilinear_resample_matrix;
use crate::error::{Result, SlotError};
use crate::nn::{Adam, ParamStore};
use ndarray::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Otsu's threshold over `values`, using a 256-bin histogram spanning the
/// value range. Returns `None` for a constant input (no threshold exists).
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    const BINS: usize = 256;
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || !(hi > lo) {
        return None;
    }
    let scale = BINS as f64 / (hi - lo);
    let mut hist = [0f64; BINS];
    for &v in values {
        let bin = (((v - lo) * scale) as usize).min(BINS - 1);
        hist[bin] += 1.0;
    }
    let total: f64 = values.len() as f64;
    let bin_center = |b: usize| lo + (b as f64 + 0.5) / scale;
    let total_mean: f64 = (0..BINS).map(|b| hist[b] * bin_center(b)).sum::<f64>() / total;
    let mut best = (f64::NEG_INFINITY, 0usize);
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for b in 0..BINS - 1 {
        w0 += hist[b];
        sum0 += hist[b] * bin_center(b);
        if w0 == 0.0 || w0 == total {
            continue;
        }
        let w1 = total - w0;
        let m0 = sum0 / w0;
        let m1 = (total_mean * total - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, b);
        }
    }
    if best.0 <= 0.0 {
        return None;
    }
    // threshold at the upper edge of the chosen bin
    Some(lo + (best.1 as f64 + 1.0) / scale)
}

/// Binarize a map at its Otsu threshold; constant maps become all-false.
pub fn binarize_otsu(map: &Array2<f64>) -> Array2<bool> {
    match otsu_threshold(map.as_slice().unwrap()) {
        Some(t) => map.mapv(|v| v >= t),
        None => Array2::from_elem(map.dim(), false),
    }
}

/// Turn a [K, N] slot-to-patch attention matrix into K binary masks at image
/// resolution: reshape each row to the patch grid, bilinearly upsample, then
/// Otsu-binarize per map.
pub fn extract_masks(
    attention: &Array2<f64>,
    grid: (usize, usize),
    out_side: usize,
) -> Result<Vec<Array2<bool>>> {
    let (gh, gw) = grid;
    if gh != gw {
        return Err(SlotError::Validation("non-square patch grid".into()));
    }
    if attention.ncols() != gh * gw {
        return Err(SlotError::Validation(format!(
            "attention has {} columns, expected {}x{} grid",
            attention.ncols(),
            gh,
            gw
        )));
    }
    let r = bilinear_resample_matrix(gh, out_side);
    let mut masks = Vec::with_capacity(attention.nrows());
    for row in attention.rows() {
        let up = r.dot(&row);
        let map = Array2::from_shape_vec((out_side, out_side), up.to_vec()).unwrap();
        masks.push(binarize_otsu(&map));
    }
    Ok(masks)
}

pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean IoU between predicted masks and ground-truth object masks under the
/// best one-to-one matching (Hungarian on negated IoU). Averaged over the
/// ground-truth objects; returns `None` when the image has no objects.
pub fn segmentation_iou(pred: &[Array2<bool>], label_map: &Array2<u16>) -> Option<f64> {
    let num_objects = label_map.iter().map(|&v| v as usize).max().unwrap_or(0);
    if num_objects == 0 {
        return None;
    }
    let gt: Vec<Array2<bool>> = (1..=num_objects)
        .map(|i| label_map.mapv(|v| v as usize == i))
        .collect();
    let n = pred.len().max(gt.len());
    // pad to square with zero-IoU entries so unmatched slots cost nothing
    let mut cost = Array2::<f64>::zeros((n, n));
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            cost[[i, j]] = -mask_iou(p, g);
        }
    }
    let assignment = hungarian(&CostMatrix::new(cost.clone()).unwrap());
    let mut total = 0.0;
    for (i, &j) in assignment.sigma.iter().enumerate() {
        if i < pred.len() && j < gt.len() {
            total += -cost[[i, j]];
        }
    }
    Some(total / gt.len() as f64)
}

/// Micro-averaged average precision over flattened (sample, question) pairs.
/// Ranking is by descending score with stable index tie-breaking.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(SlotError::Validation(
            "scores and labels must be equal-length and non-empty".into(),
        ));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(SlotError::Validation(
            "average precision undefined without positives".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 10_000,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// Linear probe: a per-question affine map applied to every slot, max-pooled
/// over slots, squashed by a sigmoid. For single-vector features (global
/// baselines) the pool is a no-op.
pub struct Probe {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Probe {
    /// Per-question logits for one sample's feature rows ([K, D]).
    pub fn logits(&self, features: &Array2<f64>) -> Array1<f64> {
        let z = features.dot(&self.w.t()); // [K, Q]
        z.map_axis(Axis(0), |col| col.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            + &self.b
    }

    /// Sigmoid scores in [0, 1].
    pub fn scores(&self, features: &Array2<f64>) -> Array1<f64> {
        self.logits(features).mapv(|z| 1.0 / (1.0 + (-z).exp()))
    }
}

/// Train the probe with weighted binary cross-entropy: positives of question
/// q are up-weighted by the negative/positive count ratio of the training
/// labels, so rare attributes still contribute. The backbone features are
/// frozen; only `w` and `b` move (Adam, decoupled weight decay on `w`).
pub fn train_probe(
    features: &[Array2<f64>],
    labels: &[Vec<bool>],
    cfg: &ProbeConfig,
) -> Result<Probe> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(SlotError::Validation(
            "need matching non-empty features and labels".into(),
        ));
    }
    let q = labels[0].len();
    let d = features[0].ncols();
    for (f, l) in features.iter().zip(labels) {
        if f.ncols() != d || l.len() != q {
            return Err(SlotError::Validation("ragged probe inputs".into()));
        }
    }
    let n = features.len();
    // inverse-class-frequency weights for positive examples, per question
    let mut pos_weight = vec![1.0f64; q];
    for (qi, w) in pos_weight.iter_mut().enumerate() {
        let n_pos = labels.iter().filter(|l| l[qi]).count();
        if n_pos > 0 {
            *w = (n - n_pos) as f64 / n_pos as f64;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::new();
    params.insert("probe.w", ArrayD::zeros(ndarray::IxDyn(&[q, d])));
    params.insert("probe.b", ArrayD::zeros(ndarray::IxDyn(&[q])));
    let mut adam = Adam::new(cfg.weight_decay);

    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // trigger reshuffle on first use
    let batch = cfg.batch_size.min(n).max(1);
    for _ in 0..cfg.steps {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;

        let w = params
            .get("probe.w")
            .clone()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let b = params
            .get("probe.b")
            .clone()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let mut gw = Array2::<f64>::zeros((q, d));
        let mut gb = Array1::<f64>::zeros(q);
        for &i in idx {
            let f = &features[i];
            let z = f.dot(&w.t()); // [K, Q]
            for qi in 0..q {
                let col = z.column(qi);
                let (arg, &zmax) = col
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap();
                let logit = zmax + b[qi];
                let p = 1.0 / (1.0 + (-logit).exp());
                let y = labels[i][qi];
                // d(weighted BCE)/d(logit)
                let dz = if y {
                    pos_weight[qi] * (p - 1.0)
                } else {
                    p
                };
                let dz = dz / (batch * q) as f64;
                gb[qi] += dz;
                gw.row_mut(qi).scaled_add(dz, &f.row(arg));
            }
        }
        let mut grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
        grads.insert("probe.w".into(), gw.into_dyn());
        grads.insert("probe.b".into(), gb.into_dyn());
        adam.step(&mut params, &grads, cfg.lr);
    }
    Ok(Probe {
        w: params
            .get("probe.w")
            .clone()
            .into_dimensionality::<Ix2>()
            .unwrap(),
        b: params
            .get("probe.b")
            .clone()
            .into_dimensionality::<Ix1>()
            .unwrap(),
    })
}

/// Score a feature set with a trained probe and collect flattened
/// (sample, question) scores and labels for average precision.
pub fn probe_predictions(
    probe: &Probe,
    features: &[Array2<f64>],
    labels: &[Vec<bool>],
) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut flat = Vec::new();
    for (f, l) in features.iter().zip(labels) {
        let s = probe.scores(f);
        scores.extend(s.iter().cloned());
        flat.extend(l.iter().cloned());
    }
    (scores, flat)
}
