//! Grouping module: turns a view's patch tokens into K slot vectors plus a
//! slot-to-patch attention map. Two interchangeable mechanisms:
//!
//! * `cross`: transformer-style cross-attention decoder (multi-head, a small
//!   stack of layers with per-layer weights, softmax over the patch axis);
//! * `slot`: iterative single-head attention with softmax over the *slot*
//!   axis followed by per-slot renormalization and a GRU state update;
//!   weights are shared across iterations.
//!
//! Evaluation reads the attention of the first layer / first iteration.

use crate::error::{Result, SlotError};
use crate::graph::{El, Graph, Var};
use crate::nn::{init_matrix, ones, zeros, ParamStore, ParamVars};
use ndarray::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const RENORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Cross,
    Slot,
}

/// How the K initial queries/slots are produced.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum QueryStrategy {
    /// K learned embeddings, trained like any other parameter.
    Learned,
    /// Sampled from a learned diagonal Gaussian (reparameterized).
    Gaussian,
    /// Sampled from a learned mixture of diagonal Gaussians; the component
    /// choice is uniform and non-differentiable.
    GaussianMixture { components: usize },
    /// k-means centroids of the view's patch tokens (non-differentiable,
    /// recomputed every forward pass).
    KmeansInit { iters: usize },
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingConfig {
    pub variant: AttentionVariant,
    pub num_queries: usize,
    /// Cross-attention layer count (per-layer weights).
    pub layers: usize,
    /// Slot-attention iteration count (shared weights).
    pub iterations: usize,
    /// Heads for the cross variant; the slot variant is single-head.
    pub num_heads: usize,
    pub query_strategy: QueryStrategy,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            variant: AttentionVariant::Slot,
            num_queries: 11,
            layers: 1,
            iterations: 1,
            num_heads: 4,
            query_strategy: QueryStrategy::Learned,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.num_queries == 0 {
            return Err(SlotError::Config("num_queries must be positive".into()));
        }
        match self.variant {
            AttentionVariant::Cross => {
                if self.layers == 0 {
                    return Err(SlotError::Config("cross variant needs layers >= 1".into()));
                }
                if self.num_heads == 0 || embed_dim % self.num_heads != 0 {
                    return Err(SlotError::Config(format!(
                        "embed_dim {} must be divisible by num_heads {}",
                        embed_dim, self.num_heads
                    )));
                }
            }
            AttentionVariant::Slot => {
                if self.iterations == 0 {
                    return Err(SlotError::Config("slot variant needs iterations >= 1".into()));
                }
            }
        }
        match self.query_strategy {
            QueryStrategy::GaussianMixture { components } if components == 0 => {
                return Err(SlotError::Config("mixture needs components >= 1".into()))
            }
            QueryStrategy::KmeansInit { iters } if iters == 0 => {
                return Err(SlotError::Config("kmeans init needs iters >= 1".into()))
            }
            _ => {}
        }
        Ok(())
    }
}

pub fn init_params(
    store: &mut ParamStore,
    cfg: &GroupingConfig,
    embed_dim: usize,
    rng: &mut ChaCha8Rng,
) {
    let d = embed_dim;
    let std = 0.02;
    match cfg.query_strategy {
        QueryStrategy::Learned => {
            // Queries need spread at init: with near-identical queries the
            // slot-axis softmax starts uniform and slots never break symmetry.
            store.insert("grouping.queries", init_matrix(rng, cfg.num_queries, d, 1.0));
        }
        QueryStrategy::Gaussian => {
            store.insert("grouping.q_mean", init_matrix(rng, 1, d, std));
            store.insert("grouping.q_logstd", zeros(&[1, d]));
        }
        QueryStrategy::GaussianMixture { components } => {
            store.insert("grouping.q_means", init_matrix(rng, components, d, std));
            store.insert("grouping.q_logstds", zeros(&[components, d]));
        }
        QueryStrategy::KmeansInit { .. } => {}
    }
    match cfg.variant {
        AttentionVariant::Cross => {
            for l in 0..cfg.layers {
                let p = format!("grouping.layer{l}");
                for ln in ["ln_q", "ln_kv", "ln2"] {
                    store.insert(&format!("{p}.{ln}.gamma"), ones(&[d]));
                    store.insert(&format!("{p}.{ln}.beta"), zeros(&[d]));
                }
                for nm in ["wq", "wk", "wv", "wo"] {
                    store.insert(&format!("{p}.attn.{nm}"), init_matrix(rng, d, d, std));
                }
                for nm in ["bq", "bk", "bv", "bo"] {
                    store.insert(&format!("{p}.attn.{nm}"), zeros(&[d]));
                }
                store.insert(&format!("{p}.mlp.w1"), init_matrix(rng, d, 2 * d, std));
                store.insert(&format!("{p}.mlp.b1"), zeros(&[2 * d]));
                store.insert(&format!("{p}.mlp.w2"), init_matrix(rng, 2 * d, d, std));
                store.insert(&format!("{p}.mlp.b2"), zeros(&[d]));
            }
        }
        AttentionVariant::Slot => {
            let p = "grouping.slot";
            for ln in ["ln_q", "ln_kv"] {
                store.insert(&format!("{p}.{ln}.gamma"), ones(&[d]));
                store.insert(&format!("{p}.{ln}.beta"), zeros(&[d]));
            }
            for nm in ["wq", "wk", "wv"] {
                store.insert(&format!("{p}.{nm}"), init_matrix(rng, d, d, std));
            }
            for gate in ["z", "r", "h"] {
                store.insert(&format!("{p}.gru.w{gate}"), init_matrix(rng, d, d, std));
                store.insert(&format!("{p}.gru.u{gate}"), init_matrix(rng, d, d, std));
                store.insert(&format!("{p}.gru.b{gate}"), zeros(&[d]));
            }
        }
    }
}

/// Plain k-means on rows of `points`, with farthest-point reseeding of empty
/// clusters. Used by the `kmeans_init` query strategy and directly testable.
pub fn kmeans(points: &Array2<f64>, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, d) = points.dim();
    assert!(n > 0 && k > 0);
    let mut centroids = Array2::zeros((k, d));
    for i in 0..k {
        let idx = rng.gen_range(0..n);
        centroids.row_mut(i).assign(&points.row(idx));
    }
    for _ in 0..iters {
        let mut assign = vec![0usize; n];
        for (i, p) in points.rows().into_iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for (c, cen) in centroids.rows().into_iter().enumerate() {
                let dist: f64 = p.iter().zip(cen.iter()).map(|(a, b)| (a - b).powi(2)).sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            assign[i] = best.1;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            let mut row = sums.row_mut(c);
            row += &points.row(i);
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // reseed with the point farthest from every current centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = min_dist(&points.row(a), &centroids);
                        let db = min_dist(&points.row(b), &centroids);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids.row_mut(c).assign(&points.row(far));
            }
        }
    }
    centroids
}

fn min_dist(p: &ArrayView1<f64>, centroids: &Array2<f64>) -> f64 {
    centroids
        .rows()
        .into_iter()
        .map(|c| p.iter().zip(c.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Build the K initial queries as a graph node. Learned and Gaussian flavors
/// are differentiable; mixture component choice and k-means centroids are
/// treated as constants.
pub fn make_queries<F: El>(
    g: &mut Graph<F>,
    pvars: &ParamVars,
    cfg: &GroupingConfig,
    patch_values: Option<&Array2<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let k = cfg.num_queries;
    match cfg.query_strategy {
        QueryStrategy::Learned => Ok(pvars.get("grouping.queries")),
        QueryStrategy::Gaussian => {
            let mean = pvars.get("grouping.q_mean");
            let logstd = pvars.get("grouping.q_logstd");
            let d = g.value(mean).shape()[1];
            let eps: Array2<f64> =
                Array2::from_shape_fn((k, d), |_| crate::nn::normal(rng));
            let eps = g.constant(eps.mapv(F::cast_f64).into_dyn());
            let std = g.exp(logstd);
            // broadcast the single-row mean/std to K rows via tiling
            let scaled = {
                let prod = g.mul_tile_rows(eps, std);
                g.add_tile_rows(prod, mean)
            };
            Ok(scaled)
        }
        QueryStrategy::GaussianMixture { components } => {
            let means = pvars.get("grouping.q_means");
            let logstds = pvars.get("grouping.q_logstds");
            let d = g.value(means).shape()[1];
            let mut rows = Vec::with_capacity(k);
            for _ in 0..k {
                let c = rng.gen_range(0..components);
                let mean = g.slice_rows(means, c..c + 1);
                let logstd = g.slice_rows(logstds, c..c + 1);
                let std = g.exp(logstd);
                let eps: Array2<f64> = Array2::from_shape_fn((1, d), |_| {
                    crate::nn::normal(rng)
                });
                let eps = g.constant(eps.mapv(F::cast_f64).into_dyn());
                let scaled = g.mul(eps, std);
                rows.push(g.add(scaled, mean));
            }
            Ok(g.concat_rows(&rows))
        }
        QueryStrategy::KmeansInit { iters } => {
            let pts = patch_values.ok_or_else(|| {
                SlotError::Config("kmeans query strategy requires patch tokens".into())
            })?;
            let centroids = kmeans(pts, k, iters, rng);
            Ok(g.constant(centroids.mapv(F::cast_f64).into_dyn()))
        }
    }
}

/// Output of grouping one view.
pub struct GroupedView {
    /// Slot vectors [K, D] (graph node).
    pub slots: Var,
    /// Attention of the first layer / first iteration, [K, N], plain values.
    /// For the slot variant these are the renormalized per-slot weights.
    pub attention: Array2<f64>,
}

/// Cross-attention decoder over one view's patch tokens [N, D].
fn cross_forward<F: El>(
    g: &mut Graph<F>,
    pvars: &ParamVars,
    cfg: &GroupingConfig,
    queries: Var,
    patches: Var,
) -> GroupedView {
    let d = g.value(patches).shape()[1];
    let heads = cfg.num_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut slots = queries;
    let mut attention: Option<Array2<f64>> = None;
    for l in 0..cfg.layers {
        let p = format!("grouping.layer{l}");
        let hq = {
            let gamma = pvars.get(&format!("{p}.ln_q.gamma"));
            let beta = pvars.get(&format!("{p}.ln_q.beta"));
            g.layernorm_rows(slots, gamma, beta, 1e-5)
        };
        let hkv = {
            let gamma = pvars.get(&format!("{p}.ln_kv.gamma"));
            let beta = pvars.get(&format!("{p}.ln_kv.beta"));
            g.layernorm_rows(patches, gamma, beta, 1e-5)
        };
        let q = {
            let w = pvars.get(&format!("{p}.attn.wq"));
            let b = pvars.get(&format!("{p}.attn.bq"));
            g.linear(hq, w, b)
        };
        let kk = {
            let w = pvars.get(&format!("{p}.attn.wk"));
            let b = pvars.get(&format!("{p}.attn.bk"));
            g.linear(hkv, w, b)
        };
        let vv = {
            let w = pvars.get(&format!("{p}.attn.wv"));
            let b = pvars.get(&format!("{p}.attn.bv"));
            g.linear(hkv, w, b)
        };
        let mut head_outs = Vec::with_capacity(heads);
        let mut attn_avg: Option<Array2<f64>> = None;
        for hd in 0..heads {
            let c = hd * dh..(hd + 1) * dh;
            let qh = g.slice_cols(q, c.clone());
            let kh = g.slice_cols(kk, c.clone());
            let vh = g.slice_cols(vv, c.clone());
            let (out, attn) = g.sdpa(qh, kh, vh, scale);
            head_outs.push(out);
            if l == 0 {
                let a64 = attn.mapv(El::to_f64) / heads as f64;
                match &mut attn_avg {
                    Some(acc) => *acc += &a64,
                    slot => *slot = Some(a64),
                }
            }
        }
        if l == 0 {
            attention = attn_avg;
        }
        let concat = g.concat_cols(&head_outs);
        let wo = pvars.get(&format!("{p}.attn.wo"));
        let bo = pvars.get(&format!("{p}.attn.bo"));
        let proj = g.linear(concat, wo, bo);
        slots = g.add(slots, proj);
        let gamma = pvars.get(&format!("{p}.ln2.gamma"));
        let beta = pvars.get(&format!("{p}.ln2.beta"));
        let h = g.layernorm_rows(slots, gamma, beta, 1e-5);
        let w1 = pvars.get(&format!("{p}.mlp.w1"));
        let b1 = pvars.get(&format!("{p}.mlp.b1"));
        let h = g.linear(h, w1, b1);
        let h = g.gelu(h);
        let w2 = pvars.get(&format!("{p}.mlp.w2"));
        let b2 = pvars.get(&format!("{p}.mlp.b2"));
        let h = g.linear(h, w2, b2);
        slots = g.add(slots, h);
    }
    GroupedView {
        slots,
        attention: attention.unwrap(),
    }
}

/// Iterative slot attention over one view's patch tokens [N, D].
///
/// Logits are softmaxed over the *slot* axis (each patch distributes one unit
/// of attention across slots) and the resulting rows are renormalized per
/// slot before the weighted readout. Slot states are updated by a GRU; all
/// weights are shared across iterations.
fn slot_forward<F: El>(
    g: &mut Graph<F>,
    pvars: &ParamVars,
    cfg: &GroupingConfig,
    queries: Var,
    patches: Var,
) -> GroupedView {
    let d = g.value(patches).shape()[1];
    let scale = 1.0 / (d as f64).sqrt();
    let p = "grouping.slot";
    // keys/values depend only on the patches: compute once
    let hkv = {
        let gamma = pvars.get(&format!("{p}.ln_kv.gamma"));
        let beta = pvars.get(&format!("{p}.ln_kv.beta"));
        g.layernorm_rows(patches, gamma, beta, 1e-5)
    };
    let wk = pvars.get(&format!("{p}.wk"));
    let wv = pvars.get(&format!("{p}.wv"));
    let k = g.matmul(hkv, wk);
    let v = g.matmul(hkv, wv);
    let kt = g.transpose(k);
    let wq = pvars.get(&format!("{p}.wq"));

    let mut slots = queries;
    let mut attention: Option<Array2<f64>> = None;
    for it in 0..cfg.iterations {
        let hq = {
            let gamma = pvars.get(&format!("{p}.ln_q.gamma"));
            let beta = pvars.get(&format!("{p}.ln_q.beta"));
            g.layernorm_rows(slots, gamma, beta, 1e-5)
        };
        let q = g.matmul(hq, wq);
        let logits = {
            let raw = g.matmul(q, kt);
            g.scale(raw, scale)
        };
        // softmax over slots: each column of the [K, N] logit matrix sums to 1
        let a = g.softmax_axis(logits, 0);
        // renormalize each slot's weights to sum to 1 for the readout
        let row_mass = g.sum_axis(a, 1);
        let row_mass = g.add_scalar(row_mass, RENORM_EPS);
        let a_norm = g.div_colvec(a, row_mass);
        if it == 0 {
            attention = Some(
                g.value(a_norm)
                    .mapv(El::to_f64)
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap(),
            );
        }
        let u = g.matmul(a_norm, v);
        slots = gru_update(g, pvars, p, u, slots);
    }
    GroupedView {
        slots,
        attention: attention.unwrap(),
    }
}

/// GRU cell: update/reset gates plus candidate state, new state
/// s' = (1 - z) * candidate + z * s.
fn gru_update<F: El>(g: &mut Graph<F>, pvars: &ParamVars, p: &str, u: Var, s: Var) -> Var {
    let gate = |g: &mut Graph<F>, name: &str, x: Var, h: Var| {
        let w = pvars.get(&format!("{p}.gru.w{name}"));
        let uu = pvars.get(&format!("{p}.gru.u{name}"));
        let b = pvars.get(&format!("{p}.gru.b{name}"));
        let a = g.linear(x, w, b);
        let c = g.matmul(h, uu);
        g.add(a, c)
    };
    let z = {
        let pre = gate(g, "z", u, s);
        g.sigmoid(pre)
    };
    let r = {
        let pre = gate(g, "r", u, s);
        g.sigmoid(pre)
    };
    let cand = {
        let rs = g.mul(r, s);
        let pre = gate(g, "h", u, rs);
        g.tanh(pre)
    };
    let one_minus_z = {
        let nz = g.neg(z);
        g.add_scalar(nz, 1.0)
    };
    let a = g.mul(one_minus_z, cand);
    let b = g.mul(z, s);
    g.add(a, b)
}

/// Group one view's patch tokens into slots.
pub fn group_view<F: El>(
    g: &mut Graph<F>,
    pvars: &ParamVars,
    cfg: &GroupingConfig,
    queries: Var,
    patches: Var,
) -> GroupedView {
    match cfg.variant {
        AttentionVariant::Cross => cross_forward(g, pvars, cfg, queries, patches),
        AttentionVariant::Slot => slot_forward(g, pvars, cfg, queries, patches),
    }
}
