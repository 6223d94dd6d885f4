//! Projection heads. The object head maps each slot independently through a
//! small MLP into the contrastive space. The global branch pools a view's
//! slots (or takes the CLS token), computes a representation `r`, then
//! projects it into the same kind of space.

use crate::graph::{El, Graph, Var};
use crate::nn::{init_matrix, zeros, ParamStore, ParamVars};
use ndarray::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct HeadsConfig {
    /// Dimension of projected vectors (object and global alike).
    pub proj_dim: usize,
    /// Dimension of the pooled global representation `r`.
    pub repr_dim: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            proj_dim: 128,
            repr_dim: 256,
        }
    }
}

pub fn init_params(
    store: &mut ParamStore,
    cfg: &HeadsConfig,
    embed_dim: usize,
    rng: &mut ChaCha8Rng,
) {
    let d = embed_dim;
    let std = 0.02;
    // object head: 2-layer MLP, hidden width = D, GeLU, no output norm
    store.insert("heads.obj.w1", init_matrix(rng, d, d, std));
    store.insert("heads.obj.b1", zeros(&[d]));
    store.insert("heads.obj.w2", init_matrix(rng, d, cfg.proj_dim, std));
    store.insert("heads.obj.b2", zeros(&[cfg.proj_dim]));
    // global branch: pooled slots -> r, then r -> projected global vector
    store.insert("heads.glob.w1", init_matrix(rng, d, d, std));
    store.insert("heads.glob.b1", zeros(&[d]));
    store.insert("heads.glob.w2", init_matrix(rng, d, cfg.repr_dim, std));
    store.insert("heads.glob.b2", zeros(&[cfg.repr_dim]));
    store.insert("heads.ghead.w1", init_matrix(rng, cfg.repr_dim, cfg.repr_dim, std));
    store.insert("heads.ghead.b1", zeros(&[cfg.repr_dim]));
    store.insert("heads.ghead.w2", init_matrix(rng, cfg.repr_dim, cfg.proj_dim, std));
    store.insert("heads.ghead.b2", zeros(&[cfg.proj_dim]));
}

fn mlp2<F: El>(g: &mut Graph<F>, pvars: &ParamVars, prefix: &str, x: Var) -> Var {
    let w1 = pvars.get(&format!("{prefix}.w1"));
    let b1 = pvars.get(&format!("{prefix}.b1"));
    let h = g.linear(x, w1, b1);
    let h = g.gelu(h);
    let w2 = pvars.get(&format!("{prefix}.w2"));
    let b2 = pvars.get(&format!("{prefix}.b2"));
    g.linear(h, w2, b2)
}

/// Project each slot row of `slots` ([M, D], any batching of views) into the
/// contrastive space, [M, proj_dim].
pub fn project_objects<F: El>(g: &mut Graph<F>, pvars: &ParamVars, slots: Var) -> Var {
    mlp2(g, pvars, "heads.obj", slots)
}

/// Mean-pool each view's K slot rows of a [(V*K), D] matrix into [V, D].
pub fn mean_pool_slots<F: El>(g: &mut Graph<F>, slots: Var, views: usize, k: usize) -> Var {
    let mut m = Array2::<f64>::zeros((views, views * k));
    for v in 0..views {
        for i in 0..k {
            m[[v, v * k + i]] = 1.0 / k as f64;
        }
    }
    g.matmul_const_left(m.mapv(F::cast_f64), slots)
}

/// Output of the global branch: representation and projection, per view.
pub struct GlobalOut {
    /// [V, repr_dim], the pooled representation used by downstream probes.
    pub repr: Var,
    /// [V, proj_dim], the projection entering the contrastive loss.
    pub proj: Var,
}

/// Global branch on per-view pooled inputs ([V, D]: slot means or CLS rows).
pub fn global_branch<F: El>(g: &mut Graph<F>, pvars: &ParamVars, pooled: Var) -> GlobalOut {
    let repr = mlp2(g, pvars, "heads.glob", pooled);
    let proj = mlp2(g, pvars, "heads.ghead", repr);
    GlobalOut { repr, proj }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    const D: usize = 16;

    fn setup() -> (ParamStore, HeadsConfig) {
        let cfg = HeadsConfig {
            proj_dim: 8,
            repr_dim: 12,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, D, &mut rng);
        (store, cfg)
    }

    #[test]
    fn object_head_shapes_and_row_independence() {
        let (store, cfg) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let slots = Array2::from_shape_fn((6, D), |_| rng.gen_range(-1.0..1.0));
        let project = |s: &Array2<f64>| -> Array2<f64> {
            let mut g: Graph<f64> = Graph::new();
            let pvars = ParamVars::bind(&mut g, &store);
            let v = g.constant(s.clone().into_dyn());
            let p = project_objects(&mut g, &pvars, v);
            g.value(p)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
        };
        let full = project(&slots);
        assert_eq!(full.dim(), (6, cfg.proj_dim));
        // the head acts on each row independently: projecting a single row
        // matches the corresponding row of the batched projection
        for i in 0..6 {
            let single = project(&slots.slice(s![i..i + 1, ..]).to_owned());
            for (a, b) in single.row(0).iter().zip(full.row(i).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn global_branch_shapes() {
        let (store, cfg) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pooled = Array2::from_shape_fn((4, D), |_| rng.gen_range(-1.0..1.0));
        let mut g: Graph<f64> = Graph::new();
        let pvars = ParamVars::bind(&mut g, &store);
        let v = g.constant(pooled.into_dyn());
        let out = global_branch(&mut g, &pvars, v);
        assert_eq!(g.value(out.repr).shape(), &[4, cfg.repr_dim]);
        assert_eq!(g.value(out.proj).shape(), &[4, cfg.proj_dim]);
    }

    #[test]
    fn mean_pool_matches_plain_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (views, k) = (3, 5);
        let slots = Array2::from_shape_fn((views * k, D), |_| rng.gen_range(-1.0..1.0));
        let mut g: Graph<f64> = Graph::new();
        let v = g.constant(slots.clone().into_dyn());
        let pooled = mean_pool_slots(&mut g, v, views, k);
        let got = g.value(pooled);
        for vi in 0..views {
            let mean = slots
                .slice(s![vi * k..(vi + 1) * k, ..])
                .mean_axis(Axis(0))
                .unwrap();
            for d in 0..D {
                assert!((got[[vi, d]] - mean[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooled_global_is_slot_permutation_invariant() {
        let (store, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = 5;
        let slots = Array2::from_shape_fn((k, D), |_| rng.gen_range(-1.0..1.0));
        let run = |s: &Array2<f64>| -> ndarray::ArrayD<f64> {
            let mut g: Graph<f64> = Graph::new();
            let pvars = ParamVars::bind(&mut g, &store);
            let v = g.constant(s.clone().into_dyn());
            let pooled = mean_pool_slots(&mut g, v, 1, k);
            let out = global_branch(&mut g, &pvars, pooled);
            g.value(out.proj).clone()
        };
        let base = run(&slots);
        let mut shuffled = slots.clone();
        for (dst, src) in [(0, 4), (4, 0), (1, 3), (3, 1), (2, 2)] {
            shuffled.row_mut(dst).assign(&slots.row(src));
        }
        let permuted = run(&shuffled);
        for (a, b) in base.iter().zip(permuted.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_difference_gradients() {
        let (store, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let slots = Array2::from_shape_fn((4, D), |_| rng.gen_range(-1.0..1.0));
        let eval = |s: &ParamStore| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let pvars = ParamVars::bind(&mut g, s);
            let v = g.constant(slots.clone().into_dyn());
            let p = project_objects(&mut g, &pvars, v);
            let pooled = mean_pool_slots(&mut g, v, 2, 2);
            let out = global_branch(&mut g, &pvars, pooled);
            let a = g.mean_all(p);
            let b = g.mean_all(out.proj);
            let sum = g.add(a, b);
            *g.value(sum).first().unwrap()
        };
        let analytic = {
            let mut g: Graph<f64> = Graph::new();
            let pvars = ParamVars::bind(&mut g, &store);
            let v = g.constant(slots.clone().into_dyn());
            let p = project_objects(&mut g, &pvars, v);
            let pooled = mean_pool_slots(&mut g, v, 2, 2);
            let out = global_branch(&mut g, &pvars, pooled);
            let a = g.mean_all(p);
            let b = g.mean_all(out.proj);
            let sum = g.add(a, b);
            let grads = g.backward(sum);
            pvars.grads(&grads)
        };
        let mut probe = ChaCha8Rng::seed_from_u64(6);
        for name in store.names() {
            let numel = store.get(name).len();
            for _ in 0..3.min(numel) {
                let idx = probe.gen_range(0..numel);
                let eps = 1e-5;
                let mut sp = store.clone();
                sp.get_mut(name).as_slice_mut().unwrap()[idx] += eps;
                let mut sm = store.clone();
                sm.get_mut(name).as_slice_mut().unwrap()[idx] -= eps;
                let fd = (eval(&sp) - eval(&sm)) / (2.0 * eps);
                let an = analytic[name].as_slice().unwrap()[idx];
                let denom = fd.abs().max(an.abs()).max(1e-2);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "{name}[{idx}]: fd={fd} analytic={an}"
                );
            }
        }
    }
}
