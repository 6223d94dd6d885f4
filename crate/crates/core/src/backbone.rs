//! Vision Transformer backbone: maps an augmented image to a set of patch
//! tokens. Pre-norm blocks, GeLU MLPs, learned positional embeddings added
//! at the entry of every layer.

use crate::error::{Result, SlotError};
use crate::graph::{El, Graph, Var};
use crate::nn::{init_matrix, ones, zeros, ParamStore, ParamVars};
use ndarray::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub use_cls_token: bool,
    /// Side of the learned positional-embedding grid; bilinearly resampled
    /// when the actual token grid differs. 0 means "match the token grid".
    pub pos_grid: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            patch_size: 4,
            embed_dim: 256,
            num_layers: 2,
            num_heads: 4,
            mlp_hidden: 512,
            use_cls_token: false,
            pos_grid: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(SlotError::Config(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.patch_size == 0 || image_size % self.patch_size != 0 {
            return Err(SlotError::Config(format!(
                "image side {} not divisible by patch size {}",
                image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self, image_size: usize) -> usize {
        image_size / self.patch_size
    }

    pub fn num_patches(&self, image_size: usize) -> usize {
        self.grid_side(image_size).pow(2)
    }

    fn effective_pos_grid(&self, image_size: usize) -> usize {
        if self.pos_grid == 0 {
            self.grid_side(image_size)
        } else {
            self.pos_grid
        }
    }

    pub fn tokens_per_view(&self, image_size: usize) -> usize {
        self.num_patches(image_size) + usize::from(self.use_cls_token)
    }
}

/// Split one image into N = HW/P^2 flattened patches, row-major patch order;
/// each row is the pixel block flattened as (y, x, channel).
pub fn patchify(image: &Array3<f64>, p: usize) -> Result<Array2<f64>> {
    let (h, w, c) = image.dim();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(SlotError::Config(format!(
            "image {h}x{w} not divisible into {p}x{p} patches"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Array2::zeros((gh * gw, p * p * c));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            let mut col = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        out[[row, col]] = image[[gy * p + dy, gx * p + dx, ch]];
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Stack patchified views into one [(V*N), 3P^2] matrix.
pub fn patchify_batch(images: &[Array3<f64>], p: usize) -> Result<Array2<f64>> {
    let mats = images
        .iter()
        .map(|img| patchify(img, p))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<ArrayView2<f64>> = mats.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views)
        .map_err(|e| SlotError::Config(format!("patch stack: {e}")))
}

/// Bilinear resampling matrix mapping a src_side^2 grid onto dst_side^2.
pub fn bilinear_resample_matrix(src_side: usize, dst_side: usize) -> Array2<f64> {
    let mut r = Array2::zeros((dst_side * dst_side, src_side * src_side));
    let scale = src_side as f64 / dst_side as f64;
    for dy in 0..dst_side {
        for dx in 0..dst_side {
            let fy = (dy as f64 + 0.5) * scale - 0.5;
            let fx = (dx as f64 + 0.5) * scale - 0.5;
            let y0 = fy.floor();
            let x0 = fx.floor();
            let ty = fy - y0;
            let tx = fx - x0;
            let cl = |v: f64| (v.max(0.0) as usize).min(src_side - 1);
            let (y0i, y1i) = (cl(y0), cl(y0 + 1.0));
            let (x0i, x1i) = (cl(x0), cl(x0 + 1.0));
            let row = dy * dst_side + dx;
            r[[row, y0i * src_side + x0i]] += (1.0 - ty) * (1.0 - tx);
            r[[row, y0i * src_side + x1i]] += (1.0 - ty) * tx;
            r[[row, y1i * src_side + x0i]] += ty * (1.0 - tx);
            r[[row, y1i * src_side + x1i]] += ty * tx;
        }
    }
    r
}

pub fn init_params(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    image_size: usize,
    rng: &mut ChaCha8Rng,
) {
    let d = cfg.embed_dim;
    let pdim = cfg.patch_size * cfg.patch_size * 3;
    let g = cfg.effective_pos_grid(image_size);
    let std = 0.02;
    store.insert("backbone.patch_embed.w", init_matrix(rng, pdim, d, std));
    store.insert("backbone.patch_embed.b", zeros(&[d]));
    store.insert("backbone.pos", init_matrix(rng, g * g, d, std));
    if cfg.use_cls_token {
        store.insert("backbone.cls", init_matrix(rng, 1, d, std));
        store.insert("backbone.cls_pos", init_matrix(rng, 1, d, std));
    }
    for l in 0..cfg.num_layers {
        let p = format!("backbone.layer{l}");
        store.insert(&format!("{p}.ln1.gamma"), ones(&[d]));
        store.insert(&format!("{p}.ln1.beta"), zeros(&[d]));
        for nm in ["wq", "wk", "wv", "wo"] {
            store.insert(&format!("{p}.attn.{nm}"), init_matrix(rng, d, d, std));
        }
        for nm in ["bq", "bk", "bv", "bo"] {
            store.insert(&format!("{p}.attn.{nm}"), zeros(&[d]));
        }
        store.insert(&format!("{p}.ln2.gamma"), ones(&[d]));
        store.insert(&format!("{p}.ln2.beta"), zeros(&[d]));
        store.insert(&format!("{p}.mlp.w1"), init_matrix(rng, d, cfg.mlp_hidden, std));
        store.insert(&format!("{p}.mlp.b1"), zeros(&[cfg.mlp_hidden]));
        store.insert(&format!("{p}.mlp.w2"), init_matrix(rng, cfg.mlp_hidden, d, std));
        store.insert(&format!("{p}.mlp.b2"), zeros(&[d]));
    }
}

/// Batched patch tokens: `var` holds a [(V*Nt), D] matrix where Nt includes
/// the CLS slot when enabled (CLS first within each view block).
pub struct TokenBatch {
    pub var: Var,
    pub views: usize,
    pub tokens_per_view: usize,
    pub grid: (usize, usize),
    pub has_cls: bool,
    /// First-layer self-attention per view, head-averaged, rows sum to 1.
    pub attn_layer1: Vec<Array2<f64>>,
}

impl TokenBatch {
    pub fn num_patches(&self) -> usize {
        self.tokens_per_view - usize::from(self.has_cls)
    }

    pub fn view_patch_range(&self, v: usize) -> std::ops::Range<usize> {
        let start = v * self.tokens_per_view + usize::from(self.has_cls);
        start..start + self.num_patches()
    }

    pub fn view_cls_row(&self, v: usize) -> usize {
        assert!(self.has_cls);
        v * self.tokens_per_view
    }
}

/// Multi-head self-attention over each view block of `x`.
fn self_attention_layer<F: El>(
    g: &mut Graph<F>,
    pvars: &ParamVars,
    prefix: &str,
    x: Var,
    views: usize,
    nt: usize,
    heads: usize,
    record_attn: Option<&mut Vec<Array2<f64>>>,
) -> Var {
    let d = g.value(x).shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let h = {
        let gamma = pvars.get(&format!("{prefix}.ln1.gamma"));
        let beta = pvars.get(&format!("{prefix}.ln1.beta"));
        g.layernorm_rows(x, gamma, beta, 1e-5)
    };
    let q = {
        let w = pvars.get(&format!("{prefix}.attn.wq"));
        let b = pvars.get(&format!("{prefix}.attn.bq"));
        g.linear(h, w, b)
    };
    let k = {
        let w = pvars.get(&format!("{prefix}.attn.wk"));
        let b = pvars.get(&format!("{prefix}.attn.bk"));
        g.linear(h, w, b)
    };
    let v = {
        let w = pvars.get(&format!("{prefix}.attn.wv"));
        let b = pvars.get(&format!("{prefix}.attn.bv"));
        g.linear(h, w, b)
    };
    let mut view_outs = Vec::with_capacity(views);
    let mut attn_store = record_attn;
    for view in 0..views {
        let r = view * nt..(view + 1) * nt;
        let qv = g.slice_rows(q, r.clone());
        let kv = g.slice_rows(k, r.clone());
        let vv = g.slice_rows(v, r.clone());
        let mut head_outs = Vec::with_capacity(heads);
        let mut attn_avg: Option<Array2<f64>> = None;
        for hd in 0..heads {
            let c = hd * dh..(hd + 1) * dh;
            let qh = g.slice_cols(qv, c.clone());
            let kh = g.slice_cols(kv, c.clone());
            let vh = g.slice_cols(vv, c.clone());
            let (out, attn) = g.sdpa(qh, kh, vh, scale);
            head_outs.push(out);
            if attn_store.is_some() {
                let a64 = attn.mapv(El::to_f64) / heads as f64;
                match &mut attn_avg {
                    Some(acc) => *acc += &a64,
                    slot => *slot = Some(a64),
                }
            }
        }
        if let Some(store) = attn_store.as_deref_mut() {
            store.push(attn_avg.take().unwrap());
        }
        view_outs.push(g.concat_cols(&head_outs));
    }
    let concat = g.concat_rows(&view_outs);
    let wo = pvars.get(&format!("{prefix}.attn.wo"));
    let bo = pvars.get(&format!("{prefix}.attn.bo"));
    let proj = g.linear(concat, wo, bo);
    g.add(x, proj)
}

fn mlp_layer<F: El>(g: &mut Graph<F>, pvars: &ParamVars, prefix: &str, x: Var) -> Var {
    let gamma = pvars.get(&format!("{prefix}.ln2.gamma"));
    let beta = pvars.get(&format!("{prefix}.ln2.beta"));
    let h = g.layernorm_rows(x, gamma, beta, 1e-5);
    let w1 = pvars.get(&format!("{prefix}.mlp.w1"));
    let b1 = pvars.get(&format!("{prefix}.mlp.b1"));
    let h = g.linear(h, w1, b1);
    let h = g.gelu(h);
    let w2 = pvars.get(&format!("{prefix}.mlp.w2"));
    let b2 = pvars.get(&format!("{prefix}.mlp.b2"));
    let h = g.linear(h, w2, b2);
    g.add(x, h)
}

/// Encode a batch of augmented views into patch tokens.
pub fn encode<F: El>(
    g: &mut Graph<F>,
    pvars: &ParamVars,
    cfg: &BackboneConfig,
    images: &[Array3<f64>],
) -> Result<TokenBatch> {
    let image_size = images
        .first()
        .map(|i| i.dim().0)
        .ok_or_else(|| SlotError::Config("empty image batch".into()))?;
    cfg.validate(image_size)?;
    let views = images.len();
    let grid = cfg.grid_side(image_size);
    let n = grid * grid;
    let nt = cfg.tokens_per_view(image_size);

    let patches = patchify_batch(images, cfg.patch_size)?;
    let patches = g.constant(patches.mapv(F::cast_f64).into_dyn());
    let we = pvars.get("backbone.patch_embed.w");
    let be = pvars.get("backbone.patch_embed.b");
    let embedded = g.linear(patches, we, be);

    // per-layer positional block: CLS position first when present, then the
    // (possibly resampled) learned grid
    let pos_param = pvars.get("backbone.pos");
    let pos_side = cfg.effective_pos_grid(image_size);
    let pos_grid = if pos_side == grid {
        pos_param
    } else {
        let r = bilinear_resample_matrix(pos_side, grid).mapv(F::cast_f64);
        g.matmul_const_left(r, pos_param)
    };
    let pos_block = if cfg.use_cls_token {
        let cls_pos = pvars.get("backbone.cls_pos");
        g.concat_rows(&[cls_pos, pos_grid])
    } else {
        pos_grid
    };

    let mut x = if cfg.use_cls_token {
        let cls = pvars.get("backbone.cls");
        let mut blocks = Vec::with_capacity(views * 2);
        for v in 0..views {
            blocks.push(cls);
            blocks.push(g.slice_rows(embedded, v * n..(v + 1) * n));
        }
        g.concat_rows(&blocks)
    } else {
        embedded
    };

    let mut attn_layer1: Vec<Array2<f64>> = Vec::new();
    for l in 0..cfg.num_layers {
        let prefix = format!("backbone.layer{l}");
        x = g.add_tile_rows(x, pos_block);
        let record = if l == 0 { Some(&mut attn_layer1) } else { None };
        x = self_attention_layer(g, pvars, &prefix, x, views, nt, cfg.num_heads, record);
        x = mlp_layer(g, pvars, &prefix, x);
        if g.value(x).iter().any(|v| !v.is_finite()) {
            return Err(SlotError::NonFinite(format!("backbone layer {l}")));
        }
    }

    Ok(TokenBatch {
        var: x,
        views,
        tokens_per_view: nt,
        grid: (grid, grid),
        has_cls: cfg.use_cls_token,
        attn_layer1,
    })
}
