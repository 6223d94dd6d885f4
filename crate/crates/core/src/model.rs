//! Full model: backbone encoder, grouping into slots, projection heads.
//! One `forward` call processes a whole batch of views inside a single
//! autograd graph.

use crate::backbone::{self, BackboneConfig, TokenBatch};
use crate::error::{Result, SlotError};
use crate::graph::{El, Graph, Var};
use crate::grouping::{self, GroupingConfig};
use crate::heads::{self, HeadsConfig};
use crate::nn::{ParamStore, ParamVars};
use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Where the global branch takes its per-view input from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalInput {
    /// Mean of the view's slot vectors.
    Slots,
    /// The backbone's CLS token (requires `use_cls_token`).
    Cls,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub grouping: GroupingConfig,
    pub heads: HeadsConfig,
    pub global_input: GlobalInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            grouping: GroupingConfig::default(),
            heads: HeadsConfig::default(),
            global_input: GlobalInput::Slots,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        self.backbone.validate(image_size)?;
        self.grouping.validate(self.backbone.embed_dim)?;
        if self.global_input == GlobalInput::Cls && !self.backbone.use_cls_token {
            return Err(SlotError::Config(
                "global_input = cls requires backbone.use_cls_token".into(),
            ));
        }
        Ok(())
    }
}

/// Initialize every parameter of the model from one seed.
pub fn init_params(cfg: &ModelConfig, image_size: usize, seed: u64) -> Result<ParamStore> {
    cfg.validate(image_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    backbone::init_params(&mut store, &cfg.backbone, image_size, &mut rng);
    grouping::init_params(&mut store, &cfg.grouping, cfg.backbone.embed_dim, &mut rng);
    heads::init_params(&mut store, &cfg.heads, cfg.backbone.embed_dim, &mut rng);
    Ok(store)
}

/// Which outputs a forward pass must produce.
#[derive(Clone, Copy, Debug)]
pub struct ForwardRequest {
    pub objects: bool,
    pub global: bool,
}

impl Default for ForwardRequest {
    fn default() -> Self {
        ForwardRequest {
            objects: true,
            global: true,
        }
    }
}

pub struct ForwardOut {
    /// Slot vectors [(V*K), D] (pair-adjacent view layout), when requested.
    pub slots: Option<Var>,
    /// Plain copy of the slot values, used for matching and probes.
    pub slot_values: Option<Array2<f64>>,
    /// Projected slots [(V*K), D_p].
    pub p_obj: Option<Var>,
    /// Global projection [V, D_p].
    pub p_global: Option<Var>,
    /// Global representation [V, D_r] (probe feature for global baselines).
    pub repr: Option<Var>,
    /// Per-view slot-to-patch attention [K, N] from the first layer /
    /// iteration of the grouping module.
    pub attention: Vec<Array2<f64>>,
    /// Patch grid of the encoded views.
    pub grid: (usize, usize),
}

/// Run backbone, grouping, and heads over a batch of views.
///
/// `rng` drives stochastic query initialization only; with the learned
/// strategy the forward pass is deterministic.
pub fn forward<F: El>(
    g: &mut Graph<F>,
    pvars: &ParamVars,
    cfg: &ModelConfig,
    images: &[Array3<f64>],
    rng: &mut ChaCha8Rng,
    req: ForwardRequest,
) -> Result<ForwardOut> {
    let tokens: TokenBatch = backbone::encode(g, pvars, &cfg.backbone, images)?;
    let views = tokens.views;
    let k = cfg.grouping.num_queries;

    let need_slots = req.objects || (req.global && cfg.global_input == GlobalInput::Slots);
    let (slots, slot_values, attention) = if need_slots {
        let mut per_view = Vec::with_capacity(views);
        let mut attention = Vec::with_capacity(views);
        for v in 0..views {
            let patches = g.slice_rows(tokens.var, tokens.view_patch_range(v));
            let patch_values = match cfg.grouping.query_strategy {
                grouping::QueryStrategy::KmeansInit { .. } => Some(
                    g.value(patches)
                        .mapv(El::to_f64)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap(),
                ),
                _ => None,
            };
            let queries =
                grouping::make_queries(g, pvars, &cfg.grouping, patch_values.as_ref(), rng)?;
            let out = grouping::group_view(g, pvars, &cfg.grouping, queries, patches);
            per_view.push(out.slots);
            attention.push(out.attention);
        }
        let slots = g.concat_rows(&per_view);
        let values = g
            .value(slots)
            .mapv(El::to_f64)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        (Some(slots), Some(values), attention)
    } else {
        (None, None, Vec::new())
    };

    let p_obj = if req.objects {
        Some(heads::project_objects(g, pvars, slots.unwrap()))
    } else {
        None
    };

    let (repr, p_global) = if req.global {
        let pooled = match cfg.global_input {
            GlobalInput::Slots => heads::mean_pool_slots(g, slots.unwrap(), views, k),
            GlobalInput::Cls => {
                let rows: Vec<usize> = (0..views).map(|v| tokens.view_cls_row(v)).collect();
                g.select_rows(tokens.var, &rows)
            }
        };
        let out = heads::global_branch(g, pvars, pooled);
        (Some(out.repr), Some(out.proj))
    } else {
        (None, None)
    };

    Ok(ForwardOut {
        slots,
        slot_values,
        p_obj,
        p_global,
        repr,
        attention,
        grid: tokens.grid,
    })
}
