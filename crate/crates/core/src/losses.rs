//! Contrastive training objectives.
//!
//! Views are laid out pair-adjacent: row `2b + a` belongs to image `b`,
//! augmentation `a` ∈ {0, 1}. The global loss is an InfoNCE over per-view
//! projections where the denominator ranges over every other projection in
//! the batch (positive included). The object losses act on per-slot
//! projections after Hungarian-matching the two views' raw slots by cosine
//! similarity:
//!
//! * `ctr_all`: InfoNCE whose negatives are all other slot tokens in the
//!   batch;
//! * `ctr_img`: InfoNCE whose negatives are only the tokens of the same
//!   image pair (denominator size 2K − 1);
//! * `cos_sim`: negative cosine between each projected slot and the
//!   gradient-stopped raw slot it was matched to in the other view.

use crate::assignment::{match_slots, SlotMatch};
use crate::error::{Result, SlotError};
use crate::graph::{El, Graph, Var};
use ndarray::prelude::*;

/// Additive logit mask for excluded entries; large enough that the masked
/// softmax terms vanish, small enough to stay finite in f32.
pub const NEG_MASK: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectObjective {
    CtrAll,
    CtrImg,
    CosSim,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub global_weight: f64,
    pub object_weight: f64,
    pub use_global: bool,
    /// Object-branch loss; serialized as "none" when disabled so that
    /// config files and overrides can switch the branch off.
    #[serde(with = "objective_repr")]
    pub objective: Option<ObjectObjective>,
}

mod objective_repr {
    use super::ObjectObjective;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(
        v: &Option<ObjectObjective>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        match v {
            Some(o) => o.serialize(s),
            None => "none".serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<Option<ObjectObjective>, D::Error> {
        let text = String::deserialize(d)?;
        match text.as_str() {
            "none" => Ok(None),
            "ctr_all" => Ok(Some(ObjectObjective::CtrAll)),
            "ctr_img" => Ok(Some(ObjectObjective::CtrImg)),
            "cos_sim" => Ok(Some(ObjectObjective::CosSim)),
            other => Err(serde::de::Error::custom(format!(
                "unknown objective {other:?} (expected ctr_all, ctr_img, cos_sim, or none)"
            ))),
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.1,
            global_weight: 1.0,
            object_weight: 1.0,
            use_global: true,
            objective: Some(ObjectObjective::CtrImg),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(SlotError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !self.use_global && self.objective.is_none() {
            return Err(SlotError::Config(
                "at least one loss branch must be enabled".into(),
            ));
        }
        for (name, w) in [("global", self.global_weight), ("object", self.object_weight)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(SlotError::Config(format!("{name} weight must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Row-normalize to unit L2 norm (eps-guarded for near-zero rows).
pub fn normalize_rows<F: El>(g: &mut Graph<F>, x: Var) -> Var {
    let sq = g.mul(x, x);
    let s = g.sum_axis(sq, 1);
    let s = g.add_scalar(s, 1e-12);
    let n = g.sqrt(s);
    g.div_colvec(x, n)
}

fn partner_view(i: usize) -> usize {
    i ^ 1
}

/// InfoNCE over per-view global projections `p` ([2B, D_p]). Anchored at
/// every view; the positive is the sibling view of the same image; the
/// denominator spans all 2B − 1 other projections.
pub fn global_loss<F: El>(g: &mut Graph<F>, p: Var, temperature: f64) -> Result<Var> {
    let m = g.value(p).shape()[0];
    if m < 2 || m % 2 != 0 {
        return Err(SlotError::Validation(format!(
            "global loss needs an even number >= 2 of views, got {m}"
        )));
    }
    let pn = normalize_rows(g, p);
    let pt = g.transpose(pn);
    let c = g.matmul(pn, pt);
    let c = g.scale(c, 1.0 / temperature);
    let mut mask = Array2::<f64>::zeros((m, m));
    let mut onehot = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        mask[[i, i]] = NEG_MASK;
        onehot[[i, partner_view(i)]] = 1.0;
    }
    let masked = g.add_const(c, mask.mapv(F::cast_f64).into_dyn());
    let lse = g.logsumexp_rows(masked);
    let posmat = g.mul_const(c, onehot.mapv(F::cast_f64).into_dyn());
    let pos = g.sum_axis(posmat, 1);
    let li = g.sub(lse, pos);
    Ok(g.mean_all(li))
}

/// Per-anchor positive indices from Hungarian matching of raw slots.
/// `raw_slots` is [(2B·K), D] with the pair-adjacent view layout. Returns
/// the positive row index for every anchor row plus the per-image matches.
pub fn match_positives(
    raw_slots: &Array2<f64>,
    images: usize,
    k: usize,
) -> Result<(Vec<usize>, Vec<SlotMatch>)> {
    if raw_slots.nrows() != 2 * images * k {
        return Err(SlotError::Validation(format!(
            "raw slot matrix has {} rows, expected {}",
            raw_slots.nrows(),
            2 * images * k
        )));
    }
    let mut positives = vec![0usize; 2 * images * k];
    let mut matches = Vec::with_capacity(images);
    for b in 0..images {
        let v0 = 2 * b * k;
        let v1 = (2 * b + 1) * k;
        let m = match_slots(
            raw_slots.slice(s![v0..v0 + k, ..]),
            raw_slots.slice(s![v1..v1 + k, ..]),
        )?;
        let sigma = &m.assignment.sigma;
        let inv = m.assignment.inverse();
        for i in 0..k {
            positives[v0 + i] = v1 + sigma[i];
            positives[v1 + i] = v0 + inv[i];
        }
        matches.push(m);
    }
    Ok((positives, matches))
}

/// Contrastive object loss over slot projections `p` ([(2B·K), D_p]).
pub fn object_loss_contrastive<F: El>(
    g: &mut Graph<F>,
    p: Var,
    positives: &[usize],
    images: usize,
    k: usize,
    temperature: f64,
    same_pair_only: bool,
) -> Result<Var> {
    let m = g.value(p).shape()[0];
    if m != 2 * images * k || positives.len() != m {
        return Err(SlotError::Validation(format!(
            "object loss got {m} rows for {images} images x {k} slots"
        )));
    }
    if m < 2 {
        return Err(SlotError::Validation("need at least 2 slot tokens".into()));
    }
    let pn = normalize_rows(g, p);
    let pt = g.transpose(pn);
    let c = g.matmul(pn, pt);
    let c = g.scale(c, 1.0 / temperature);
    let mut mask = Array2::<f64>::zeros((m, m));
    let mut onehot = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        mask[[i, i]] = NEG_MASK;
        onehot[[i, positives[i]]] = 1.0;
        if same_pair_only {
            let img_i = i / (2 * k);
            for j in 0..m {
                if j / (2 * k) != img_i {
                    mask[[i, j]] = NEG_MASK;
                }
            }
        }
    }
    let masked = g.add_const(c, mask.mapv(F::cast_f64).into_dyn());
    let lse = g.logsumexp_rows(masked);
    let posmat = g.mul_const(c, onehot.mapv(F::cast_f64).into_dyn());
    let pos = g.sum_axis(posmat, 1);
    let li = g.sub(lse, pos);
    Ok(g.mean_all(li))
}

/// Row-normalized copy of a plain matrix; zero rows stay zero.
fn normalize_rows_plain(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

/// Negative-cosine object loss: each projected slot is pulled toward the
/// (gradient-stopped) raw slot it was matched to in the sibling view.
pub fn object_loss_cossim<F: El>(
    g: &mut Graph<F>,
    p: Var,
    raw_slots: &Array2<f64>,
    positives: &[usize],
) -> Result<Var> {
    let shape = g.value(p).shape().to_vec();
    let (m, d) = (shape[0], shape[1]);
    if raw_slots.nrows() != m || positives.len() != m {
        return Err(SlotError::Validation("cosine loss shape mismatch".into()));
    }
    if raw_slots.ncols() != d {
        return Err(SlotError::Config(format!(
            "cosine objective needs proj_dim == slot dim ({} vs {})",
            d,
            raw_slots.ncols()
        )));
    }
    // targets are raw slot values: constants in the graph, i.e. stop-gradient
    let mut targets = Array2::<f64>::zeros((m, d));
    for i in 0..m {
        targets.row_mut(i).assign(&raw_slots.row(positives[i]));
    }
    let targets = normalize_rows_plain(&targets);
    let pn = normalize_rows(g, p);
    let prod = g.mul_const(pn, targets.mapv(F::cast_f64).into_dyn());
    let s = g.sum_all(prod);
    Ok(g.scale(s, -1.0 / m as f64))
}

/// Combined training loss and its components.
pub struct LossBreakdown {
    pub total: Var,
    pub global_value: Option<f64>,
    pub object_value: Option<f64>,
    pub matches: Vec<SlotMatch>,
}

/// Assemble the weighted total loss. `p_obj`/`raw_slots` are required when
/// an object objective is configured; `p_global` when the global branch is
/// enabled.
pub fn total_loss<F: El>(
    g: &mut Graph<F>,
    cfg: &LossConfig,
    p_global: Option<Var>,
    p_obj: Option<Var>,
    raw_slots: Option<&Array2<f64>>,
    images: usize,
    k: usize,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let mut total: Option<Var> = None;
    let mut global_value = None;
    let mut object_value = None;
    let mut matches = Vec::new();

    if cfg.use_global {
        let p = p_global.ok_or_else(|| {
            SlotError::Validation("global branch enabled but no global projections given".into())
        })?;
        let l = global_loss(g, p, cfg.temperature)?;
        global_value = Some(El::to_f64(*g.value(l).first().unwrap()));
        let w = g.scale(l, cfg.global_weight);
        total = Some(w);
    }
    if let Some(obj) = cfg.objective {
        let p = p_obj.ok_or_else(|| {
            SlotError::Validation("object objective set but no slot projections given".into())
        })?;
        let slots = raw_slots.ok_or_else(|| {
            SlotError::Validation("object objective set but no raw slots given".into())
        })?;
        let (positives, m) = match_positives(slots, images, k)?;
        matches = m;
        let l = match obj {
            ObjectObjective::CtrAll => {
                object_loss_contrastive(g, p, &positives, images, k, cfg.temperature, false)?
            }
            ObjectObjective::CtrImg => {
                object_loss_contrastive(g, p, &positives, images, k, cfg.temperature, true)?
            }
            ObjectObjective::CosSim => object_loss_cossim(g, p, slots, &positives)?,
        };
        object_value = Some(El::to_f64(*g.value(l).first().unwrap()));
        let w = g.scale(l, cfg.object_weight);
        total = Some(match total {
            Some(t) => g.add(t, w),
            None => w,
        });
    }
    let total = total.expect("validate() guarantees at least one branch");
    let tv = El::to_f64(*g.value(total).first().unwrap());
    if !tv.is_finite() {
        return Err(SlotError::NonFinite(format!("training loss = {tv}")));
    }
    Ok(LossBreakdown {
        total,
        global_value,
        object_value,
        matches,
    })
}

// ---------------------------------------------------------------------------
// Plain per-anchor reference implementations. Quadratic and slow, but written
// directly from the definitions; the graph versions are tested against these.
// ---------------------------------------------------------------------------

fn cos_rows(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

pub fn naive_global_loss(p: &Array2<f64>, temperature: f64) -> f64 {
    let m = p.nrows();
    let mut acc = 0.0;
    for i in 0..m {
        let pos = (cos_rows(p.row(i), p.row(partner_view(i))) / temperature).exp();
        let denom: f64 = (0..m)
            .filter(|&j| j != i)
            .map(|j| (cos_rows(p.row(i), p.row(j)) / temperature).exp())
            .sum();
        acc += -(pos / denom).ln();
    }
    acc / m as f64
}

pub fn naive_object_contrastive(
    p: &Array2<f64>,
    positives: &[usize],
    k: usize,
    temperature: f64,
    same_pair_only: bool,
) -> f64 {
    let m = p.nrows();
    let mut acc = 0.0;
    for i in 0..m {
        let pos = (cos_rows(p.row(i), p.row(positives[i])) / temperature).exp();
        let denom: f64 = (0..m)
            .filter(|&j| j != i && (!same_pair_only || j / (2 * k) == i / (2 * k)))
            .map(|j| (cos_rows(p.row(i), p.row(j)) / temperature).exp())
            .sum();
        acc += -(pos / denom).ln();
    }
    acc / m as f64
}

pub fn naive_cossim(p: &Array2<f64>, raw_slots: &Array2<f64>, positives: &[usize]) -> f64 {
    let m = p.nrows();
    let acc: f64 = (0..m)
        .map(|i| -cos_rows(p.row(i), raw_slots.row(positives[i])))
        .sum();
    acc / m as f64
}
