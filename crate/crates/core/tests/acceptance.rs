//! Acceptance suite. Each test covers one release criterion and prints a
//! single PASS line (visible with `--nocapture`); a failed assertion marks
//! the criterion FAIL.

use ndarray::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slotkit::assignment::{brute_force_min_cost, hungarian, CostMatrix};
use slotkit::config::ExperimentConfig;
use slotkit::evalsuite::{average_precision, mask_iou, otsu_threshold, segmentation_iou};
use slotkit::graph::Graph;
use slotkit::grouping::{self, AttentionVariant, GroupingConfig, QueryStrategy};
use slotkit::losses::{
    self, match_positives, naive_cossim, naive_global_loss, naive_object_contrastive,
    LossConfig, ObjectObjective,
};
use slotkit::model::{self, ForwardRequest, ModelConfig};
use slotkit::nn::{ParamStore, ParamVars};
use slotkit::trainer::lr_schedule;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(r: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |_| r.gen_range(-1.0..1.0))
}

#[test]
fn criterion_1_hungarian_matches_exhaustive_search() {
    let start = std::time::Instant::now();
    let mut r = rng(11);
    for k in 2..=7 {
        for _ in 0..1000 {
            let c = random_matrix(&mut r, k, k);
            let h = hungarian(&CostMatrix::new(c.clone()).unwrap());
            let (_, oracle) = brute_force_min_cost(&c);
            assert!(
                (h.total_cost - oracle).abs() <= 1e-9,
                "K={k}: hungarian {} vs exhaustive {}",
                h.total_cost,
                oracle
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}, budget 1 s");
    println!(
        "PASS criterion 1: Hungarian equals exhaustive minimum on 1000 matrices per K in 2..=7 ({elapsed:?})"
    );
}

/// Identical unit-norm projections for `rows` anchors.
fn identical_rows(rows: usize, d: usize) -> Array2<f64> {
    let mut v = Array1::<f64>::zeros(d);
    v[0] = 0.6;
    v[1] = 0.8;
    let mut out = Array2::zeros((rows, d));
    for mut row in out.rows_mut() {
        row.assign(&v);
    }
    out
}

#[test]
fn criterion_2_loss_closed_forms() {
    // global InfoNCE with B=2 image pairs, all projections identical: every
    // anchor sees 3 equal-similarity candidates, loss = ln 3
    let p = identical_rows(4, 8);
    let mut g: Graph<f64> = Graph::new();
    let pv = g.leaf(p.clone().into_dyn());
    let l = losses::global_loss(&mut g, pv, 0.1).unwrap();
    let got = *g.value(l).first().unwrap();
    assert!((got - 3.0f64.ln()).abs() <= 1e-9, "global: {got}");

    // CtrImg with a single image pair, K=11, all identical: 2K-1 = 21
    // candidates per anchor, loss = ln 21
    let k = 11;
    let p = identical_rows(2 * k, 8);
    let (positives, _) = match_positives(&p, 1, k).unwrap();
    let mut g: Graph<f64> = Graph::new();
    let pv = g.leaf(p.clone().into_dyn());
    let l = losses::object_loss_contrastive(&mut g, pv, &positives, 1, k, 0.1, true).unwrap();
    let got = *g.value(l).first().unwrap();
    assert!((got - 21.0f64.ln()).abs() <= 1e-9, "ctr_img: {got}");

    // CosSim on identical unit vectors: -cos = -1
    let mut g: Graph<f64> = Graph::new();
    let pv = g.leaf(p.clone().into_dyn());
    let l = losses::object_loss_cossim(&mut g, pv, &p, &positives).unwrap();
    let got = *g.value(l).first().unwrap();
    assert!((got + 1.0).abs() <= 1e-9, "cos_sim: {got}");

    println!("PASS criterion 2: closed-form losses (ln 3, ln 21, -1) within 1e-9");
}

#[test]
fn criterion_3_batched_losses_match_per_anchor_references() {
    let mut r = rng(3);
    let k = 11;
    let tau = 0.1;
    for b in [2usize, 4, 8] {
        let p_global = random_matrix(&mut r, 2 * b, 16);
        let naive = naive_global_loss(&p_global, tau);
        let mut g: Graph<f64> = Graph::new();
        let pv = g.leaf(p_global.into_dyn());
        let l = losses::global_loss(&mut g, pv, tau).unwrap();
        assert!((*g.value(l).first().unwrap() - naive).abs() <= 1e-6, "global B={b}");

        let slots = random_matrix(&mut r, 2 * b * k, 16);
        let p_obj = random_matrix(&mut r, 2 * b * k, 16);
        let (positives, _) = match_positives(&slots, b, k).unwrap();
        for same_pair in [false, true] {
            let naive = naive_object_contrastive(&p_obj, &positives, k, tau, same_pair);
            let mut g: Graph<f64> = Graph::new();
            let pv = g.leaf(p_obj.clone().into_dyn());
            let l = losses::object_loss_contrastive(&mut g, pv, &positives, b, k, tau, same_pair)
                .unwrap();
            let got = *g.value(l).first().unwrap();
            assert!((got - naive).abs() <= 1e-6, "contrastive B={b} same_pair={same_pair}");
        }
        let naive = naive_cossim(&p_obj, &slots, &positives);
        let mut g: Graph<f64> = Graph::new();
        let pv = g.leaf(p_obj.clone().into_dyn());
        let l = losses::object_loss_cossim(&mut g, pv, &slots, &positives).unwrap();
        assert!((*g.value(l).first().unwrap() - naive).abs() <= 1e-6, "cossim B={b}");
    }
    println!("PASS criterion 3: batched losses match per-anchor references (B in {{2,4,8}}, K=11) within 1e-6");
}

/// A deliberately tiny model so finite differences over every parameter
/// tensor stay cheap: 8x8 images, 2x2 patch grid, 8-dim embeddings.
fn tiny_model() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.backbone.patch_size = 4;
    cfg.backbone.embed_dim = 8;
    cfg.backbone.num_layers = 1;
    cfg.backbone.num_heads = 2;
    cfg.backbone.mlp_hidden = 16;
    cfg.grouping.num_queries = 3;
    // two iterations so the shared-weight GRU recurrence is in the backward path
    cfg.grouping.iterations = 2;
    cfg.heads.proj_dim = 8;
    cfg.heads.repr_dim = 8;
    cfg
}

fn end_to_end_loss(store: &ParamStore, cfg: &ModelConfig, loss_cfg: &LossConfig, views: &[Array3<f64>]) -> f64 {
    let mut g: Graph<f64> = Graph::new();
    let pvars = ParamVars::bind(&mut g, store);
    let mut r = rng(5);
    let out = model::forward(&mut g, &pvars, cfg, views, &mut r, ForwardRequest { objects: true, global: true }).unwrap();
    let breakdown = losses::total_loss(
        &mut g,
        loss_cfg,
        out.p_global,
        out.p_obj,
        out.slot_values.as_ref(),
        views.len() / 2,
        cfg.grouping.num_queries,
    )
    .unwrap();
    *g.value(breakdown.total).first().unwrap()
}

#[test]
fn criterion_4_finite_difference_gradients() {
    // Loss-level checks for all three objectives: gradient w.r.t. the
    // projections with matching (and the CosSim stop-gradient target) held
    // fixed, exactly as the analytic gradient defines them.
    let mut r = rng(4);
    let (b, k, d) = (2usize, 3usize, 6usize);
    let slots = random_matrix(&mut r, 2 * b * k, d);
    let (positives, _) = match_positives(&slots, b, k).unwrap();
    let p0 = random_matrix(&mut r, 2 * b * k, d);
    for objective in [ObjectObjective::CtrAll, ObjectObjective::CtrImg, ObjectObjective::CosSim] {
        let eval = |p: &Array2<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let pv = g.leaf(p.clone().into_dyn());
            let l = match objective {
                ObjectObjective::CtrAll => {
                    losses::object_loss_contrastive(&mut g, pv, &positives, b, k, 0.1, false)
                }
                ObjectObjective::CtrImg => {
                    losses::object_loss_contrastive(&mut g, pv, &positives, b, k, 0.1, true)
                }
                ObjectObjective::CosSim => losses::object_loss_cossim(&mut g, pv, &slots, &positives),
            }
            .unwrap();
            (*g.value(l).first().unwrap(), g, pv)
        };
        let (_, mut g, pv) = eval(&p0);
        let l = match objective {
            ObjectObjective::CtrAll => losses::object_loss_contrastive(&mut g, pv, &positives, b, k, 0.1, false),
            ObjectObjective::CtrImg => losses::object_loss_contrastive(&mut g, pv, &positives, b, k, 0.1, true),
            ObjectObjective::CosSim => losses::object_loss_cossim(&mut g, pv, &slots, &positives),
        }
        .unwrap();
        let grads = g.backward(l);
        let analytic = grads.get(pv).unwrap().clone();
        let eps = 1e-5;
        for flat in 0..p0.len() {
            let mut pp = p0.clone();
            let mut pm = p0.clone();
            pp.as_slice_mut().unwrap()[flat] += eps;
            pm.as_slice_mut().unwrap()[flat] -= eps;
            let fd = (eval(&pp).0 - eval(&pm).0) / (2.0 * eps);
            let an = analytic.as_slice().unwrap()[flat];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(rel < 1e-4, "{objective:?} entry {flat}: fd {fd} vs analytic {an}");
        }
    }

    // End-to-end check through backbone, slot attention (GRU + double
    // normalization), and both heads with the joint global + CtrImg loss.
    // Parameters are redrawn at O(1) scale: the tiny trained-style init
    // yields near-zero-norm projections whose normalized directions have
    // enormous higher derivatives, which drowns central differences in
    // truncation error without saying anything about the gradients.
    let cfg = tiny_model();
    let mut store = model::init_params(&cfg, 8, 4).unwrap();
    let mut pr = rng(9);
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        for v in store.get_mut(&name).iter_mut() {
            *v = pr.gen_range(-0.3..0.3);
        }
    }
    let mut r = rng(44);
    let views: Vec<Array3<f64>> = (0..4)
        .map(|_| Array3::from_shape_fn((8, 8, 3), |_| r.gen_range(-1.0..1.0)))
        .collect();
    let loss_cfg = LossConfig::default();

    let mut g: Graph<f64> = Graph::new();
    let pvars = ParamVars::bind(&mut g, &store);
    let mut qr = rng(5);
    let out = model::forward(&mut g, &pvars, &cfg, &views, &mut qr, ForwardRequest { objects: true, global: true }).unwrap();
    let breakdown = losses::total_loss(&mut g, &loss_cfg, out.p_global, out.p_obj, out.slot_values.as_ref(), 2, cfg.grouping.num_queries).unwrap();
    let grads = g.backward(breakdown.total);
    let by_name = pvars.grads(&grads);

    let eps = 1e-5;
    let mut checked = 0usize;
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        let tensor = store.get(&name).clone();
        let analytic = by_name
            .get(&name)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(tensor.raw_dim()));
        // every tensor participates; cap per-tensor entries to bound runtime
        for flat in (0..tensor.len()).take(12) {
            let mut plus = store.clone();
            let mut minus = store.clone();
            plus.get_mut(&name).as_slice_mut().unwrap()[flat] += eps;
            minus.get_mut(&name).as_slice_mut().unwrap()[flat] -= eps;
            let fd = (end_to_end_loss(&plus, &cfg, &loss_cfg, &views)
                - end_to_end_loss(&minus, &cfg, &loss_cfg, &views))
                / (2.0 * eps);
            let an = analytic.as_slice().unwrap()[flat];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(rel < 1e-4, "{name}[{flat}]: fd {fd} vs analytic {an}");
            checked += 1;
        }
    }
    println!("PASS criterion 4: finite-difference gradients (3 loss objectives; {checked} end-to-end parameter entries) within 1e-4");
}

#[test]
fn criterion_5_slot_attention_normalization_and_equivariance() {
    // the two normalizations, on the ops the grouping module runs
    let mut r = rng(55);
    for _ in 0..100 {
        let k = r.gen_range(2..8);
        let n = r.gen_range(4..32);
        let logits = random_matrix(&mut r, k, n);
        let mut g: Graph<f64> = Graph::new();
        let lv = g.leaf(logits.into_dyn());
        let a = g.softmax_axis(lv, 0);
        let attn = g.value(a).clone().into_dimensionality::<Ix2>().unwrap();
        for col in attn.columns() {
            assert!((col.sum() - 1.0).abs() <= 1e-6, "post-softmax column sum");
        }
        let mass = g.sum_axis(a, 1);
        let mass = g.add_scalar(mass, grouping::RENORM_EPS);
        let an = g.div_colvec(a, mass);
        let renorm = g.value(an).clone().into_dimensionality::<Ix2>().unwrap();
        for row in renorm.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-6, "post-renorm row sum");
        }
    }

    // the recorded attention of the real module obeys the row normalization
    let gcfg = GroupingConfig {
        variant: AttentionVariant::Slot,
        num_queries: 5,
        layers: 1,
        iterations: 3,
        num_heads: 1,
        query_strategy: QueryStrategy::Learned,
    };
    let d = 8;
    let mut store = ParamStore::new();
    let mut r2 = rng(56);
    grouping::init_params(&mut store, &gcfg, d, &mut r2);
    let patches = random_matrix(&mut r2, 16, d);
    let mut g: Graph<f64> = Graph::new();
    let pvars = ParamVars::bind(&mut g, &store);
    let pv = g.leaf(patches.clone().into_dyn());
    let q = grouping::make_queries(&mut g, &pvars, &gcfg, Some(&patches), &mut r2).unwrap();
    let out = grouping::group_view(&mut g, &pvars, &gcfg, q, pv);
    for row in out.attention.rows() {
        assert!((row.sum() - 1.0).abs() <= 1e-6, "module attention row sum");
    }

    // permuting the learned queries permutes the slots exactly
    let perm = [3usize, 0, 4, 1, 2];
    let mut permuted_store = store.clone();
    {
        let qs = store.get("grouping.queries").clone();
        let dst = permuted_store.get_mut("grouping.queries");
        for (i, &j) in perm.iter().enumerate() {
            dst.index_axis_mut(Axis(0), i)
                .assign(&qs.index_axis(Axis(0), j));
        }
    }
    let slots_of = |st: &ParamStore| -> Array2<f64> {
        let mut g: Graph<f64> = Graph::new();
        let pvars = ParamVars::bind(&mut g, st);
        let pv = g.leaf(patches.clone().into_dyn());
        let mut qr = rng(57);
        let q = grouping::make_queries(&mut g, &pvars, &gcfg, Some(&patches), &mut qr).unwrap();
        let out = grouping::group_view(&mut g, &pvars, &gcfg, q, pv);
        g.value(out.slots).clone().into_dimensionality::<Ix2>().unwrap()
    };
    let base = slots_of(&store);
    let permuted = slots_of(&permuted_store);
    // equivariance is exact up to floating-point summation order: the
    // slot-axis softmax sums the permuted rows in a different order, which
    // can move single ulps
    for (i, &j) in perm.iter().enumerate() {
        for (a, b) in permuted.row(i).iter().zip(base.row(j).iter()) {
            assert!(
                (a - b).abs() <= 1e-15,
                "slot {i} vs original slot {j}: {a} != {b}"
            );
        }
    }
    println!("PASS criterion 5: slot-attention double normalization (100 inputs) and exact permutation equivariance");
}

#[test]
fn criterion_6_evaluation_oracles() {
    // Otsu vs exhaustive between-class-variance scan over the same 256 bins
    let mut r = rng(66);
    for _ in 0..100 {
        let n = r.gen_range(16..300);
        let values: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let got = otsu_threshold(&values).unwrap();
        let oracle = exhaustive_otsu(&values);
        assert!(
            (got - oracle).abs() <= 1e-12,
            "otsu threshold differs: {got} vs {oracle}"
        );
    }

    // IoU assignment vs brute-force permutation maximum for up to 6 objects
    for trial in 0..30 {
        let objects = 1 + trial % 6;
        let side = 16;
        let label_map = random_label_map(&mut r, side, objects);
        let masks: Vec<Array2<bool>> = (0..objects + 1)
            .map(|_| {
                let m = Array2::from_shape_fn((side, side), |_| r.gen_bool(0.3));
                m
            })
            .collect();
        let got = segmentation_iou(&masks, &label_map).unwrap();
        let oracle = brute_force_segmentation_iou(&masks, &label_map, objects);
        assert!((got - oracle).abs() <= 1e-12, "IoU {got} vs brute force {oracle}");
    }

    // AP under uniform-random scores converges to prevalence
    let m = 50_000;
    let prevalence = 0.17;
    let labels: Vec<bool> = (0..m).map(|_| r.gen_bool(prevalence)).collect();
    let scores: Vec<f64> = (0..m).map(|_| r.gen_range(0.0..1.0)).collect();
    let ap = average_precision(&scores, &labels).unwrap();
    assert!(
        (ap - prevalence).abs() <= 0.02,
        "AP {ap} vs prevalence {prevalence}"
    );
    println!("PASS criterion 6: Otsu scan oracle (100 arrays), IoU brute force (<=6 objects), AP {ap:.4} vs prevalence {prevalence}");
}

/// Between-class-variance scan written directly from the definition: for
/// each candidate bin edge, split the 256-bin histogram in two classes and
/// compute w0*w1*(mu0-mu1)^2 from scratch over bin centers.
fn exhaustive_otsu(values: &[f64]) -> f64 {
    const BINS: usize = 256;
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / BINS as f64;
    let bin_of = |v: f64| (((v - lo) / width) as usize).min(BINS - 1);
    let mut best = (f64::NEG_INFINITY, lo);
    for split in 1..BINS {
        // classes: bins [0, split) vs [split, 256)
        let (mut w0, mut w1, mut s0, mut s1) = (0.0, 0.0, 0.0, 0.0);
        for &v in values {
            let center = lo + (bin_of(v) as f64 + 0.5) * width;
            if bin_of(v) < split {
                w0 += 1.0;
                s0 += center;
            } else {
                w1 += 1.0;
                s1 += center;
            }
        }
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (s0 / w0, s1 / w1);
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best.0 {
            best = (var, lo + split as f64 * width);
        }
    }
    best.1
}

fn random_label_map(r: &mut ChaCha8Rng, side: usize, objects: usize) -> Array2<u16> {
    Array2::from_shape_fn((side, side), |_| r.gen_range(0..=objects) as u16)
}

fn brute_force_segmentation_iou(
    masks: &[Array2<bool>],
    label_map: &Array2<u16>,
    objects: usize,
) -> f64 {
    let gt: Vec<Array2<bool>> = (1..=objects as u16)
        .map(|id| label_map.mapv(|v| v == id))
        .collect();
    // maximize the summed IoU over injective object -> mask assignments
    let mut best = 0.0f64;
    let mut chosen = vec![false; masks.len()];
    fn rec(
        obj: usize,
        gt: &[Array2<bool>],
        masks: &[Array2<bool>],
        chosen: &mut Vec<bool>,
        acc: f64,
        best: &mut f64,
    ) {
        if obj == gt.len() {
            *best = best.max(acc);
            return;
        }
        for (m, mask) in masks.iter().enumerate() {
            if chosen[m] {
                continue;
            }
            chosen[m] = true;
            rec(obj + 1, gt, masks, chosen, acc + mask_iou(&gt[obj], mask), best);
            chosen[m] = false;
        }
    }
    rec(0, &gt, masks, &mut chosen, 0.0, &mut best);
    best / objects as f64
}

/// Small model trainable on one CPU core: 8x8 patches over 64x64 images,
/// 32-dim embeddings, 7 slots.
fn desk_config(run_id: &str, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.run_id = run_id.into();
    cfg.seed = seed;
    cfg.model.backbone.patch_size = 8;
    cfg.model.backbone.embed_dim = 32;
    cfg.model.backbone.mlp_hidden = 64;
    cfg.model.grouping.num_queries = 7;
    cfg.model.heads.proj_dim = 32;
    cfg.model.heads.repr_dim = 64;
    cfg.train.epochs = 7;
    cfg.train.warmup_epochs = 1.0;
    cfg.train.lr_peak = 2e-3;
    cfg.train.lr_final = 5e-4;
    cfg.train.checkpoint_every = 100; // keep only last/best, save disk
    cfg.probe.steps = 3000;
    cfg
}

#[test]
fn criterion_7_directional_training() {
    use slotkit::scenegen::{generate_split_dataset, Dataset, GeneratorSpec};
    use slotkit::trainer::{self, TrainSetup};

    let start = std::time::Instant::now();
    // 5000 train / 1500 test; evaluate() uses the first 1000 test images for
    // probe training and the remaining 500 for scoring
    let spec = GeneratorSpec::default();
    let dataset = Dataset {
        samples: generate_split_dataset(&spec, 6500, 5000.0 / 6500.0, 0.0, 7).unwrap(),
    };

    type Tweak = fn(&mut ExperimentConfig);
    let variants: [(&str, Tweak); 6] = [
        ("slot_cossim", |c| c.loss.objective = Some(ObjectObjective::CosSim)),
        ("cross_cossim", |c| {
            c.loss.objective = Some(ObjectObjective::CosSim);
            c.model.grouping.variant = AttentionVariant::Cross;
        }),
        ("slot_ctrimg", |c| c.loss.objective = Some(ObjectObjective::CtrImg)),
        ("slot_ctrall", |c| c.loss.objective = Some(ObjectObjective::CtrAll)),
        ("objects_only", |c| {
            c.loss.objective = Some(ObjectObjective::CtrImg);
            c.loss.use_global = false;
        }),
        ("global_only", |c| {
            c.loss.objective = None;
            c.model.global_input = slotkit::model::GlobalInput::Cls;
            c.model.backbone.use_cls_token = true;
        }),
    ];

    let tmp = tempfile::tempdir().unwrap();
    let mut iou_means = std::collections::BTreeMap::new();
    let mut ap_means = std::collections::BTreeMap::new();
    for (name, tweak) in variants {
        let (mut ious, mut aps) = (Vec::new(), Vec::new());
        for seed in 0..3u64 {
            let mut cfg = desk_config(name, seed);
            tweak(&mut cfg);
            cfg.validate().unwrap();
            let dir = tmp.path().join(format!("{name}-{seed}"));
            let setup = TrainSetup {
                model: &cfg.model,
                loss: &cfg.loss,
                train: &cfg.train,
                augment: &cfg.augment,
                image_size: cfg.image_size,
                seed: cfg.seed,
                config_hash: cfg.hash(),
            };
            let outcome = trainer::train(&setup, &dataset, &dir, None).unwrap();
            let summary = slotkit::evals::evaluate(&cfg, &outcome.params, &dataset).unwrap();
            if let Some(iou) = summary.iou {
                ious.push(iou);
            }
            aps.push(summary.ap);
            println!(
                "  {name} seed {seed}: iou {:?} ap {:.4} ({:.0?} elapsed)",
                summary.iou,
                summary.ap,
                start.elapsed()
            );
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        if !ious.is_empty() {
            iou_means.insert(name, mean(&ious));
        }
        ap_means.insert(name, mean(&aps));
    }

    let iou = |n: &str| iou_means[n];
    let ap = |n: &str| ap_means[n];
    assert!(
        iou("slot_cossim") >= iou("cross_cossim") + 0.05,
        "(a) slot+CosSim IoU {:.3} vs cross+CosSim {:.3}",
        iou("slot_cossim"),
        iou("cross_cossim")
    );
    assert!(
        ap("slot_ctrimg") >= ap("global_only") + 0.05,
        "(b) slot+CtrImg AP {:.3} vs global-only {:.3}",
        ap("slot_ctrimg"),
        ap("global_only")
    );
    assert!(
        iou("objects_only") <= iou("slot_ctrimg") - 0.10,
        "(c) objects-only IoU {:.3} vs joint {:.3}",
        iou("objects_only"),
        iou("slot_ctrimg")
    );
    assert!(
        iou("slot_ctrall") < iou("slot_ctrimg"),
        "(d) slot+CtrAll IoU {:.3} vs slot+CtrImg {:.3}",
        iou("slot_ctrall"),
        iou("slot_ctrimg")
    );
    println!(
        "PASS criterion 7: directional effects over 6 configs x 3 seeds \
         (slot/cross CosSim IoU {:.3}/{:.3}; CtrImg/global AP {:.3}/{:.3}; \
         objects-only/joint IoU {:.3}/{:.3}; CtrAll/CtrImg IoU {:.3}/{:.3}) in {:.0?}",
        iou("slot_cossim"),
        iou("cross_cossim"),
        ap("slot_ctrimg"),
        ap("global_only"),
        iou("objects_only"),
        iou("slot_ctrimg"),
        iou("slot_ctrall"),
        iou("slot_ctrimg"),
        start.elapsed()
    );
}

#[test]
fn criterion_8_learning_rate_schedule_anchors() {
    let (total, warmup) = (1000u64, 200u64);
    let (peak, fin) = (7e-4, 3e-4);
    assert_eq!(lr_schedule(0, total, warmup, peak, fin), 0.0);
    assert_eq!(lr_schedule(warmup, total, warmup, peak, fin), peak);
    assert!((lr_schedule(total, total, warmup, peak, fin) - fin).abs() <= 1e-18);
    // continuity across the warmup boundary
    let before = lr_schedule(warmup - 1, total, warmup, peak, fin);
    let linear_step = peak / warmup as f64;
    assert!((lr_schedule(warmup, total, warmup, peak, fin) - (before + linear_step)).abs() <= 1e-12);
    // sanity on a config-derived schedule as the trainer uses it
    let cfg = ExperimentConfig::default();
    let steps_per_epoch = 10u64;
    let total = cfg.train.epochs as u64 * steps_per_epoch;
    let warmup = (cfg.train.warmup_epochs * steps_per_epoch as f64) as u64;
    assert_eq!(lr_schedule(warmup, total, warmup, cfg.train.lr_peak, cfg.train.lr_final), cfg.train.lr_peak);
    println!("PASS criterion 8: lr schedule anchors exact (0, peak, final) and continuous at the warmup boundary");
}
