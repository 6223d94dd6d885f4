//! PNG plot output: per-slot attention overlays for qualitative inspection
//! and a bar chart for the aggregate report. No text is rendered; numeric
//! values live in report.md next to the chart.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slotkit::config::ExperimentConfig;
use slotkit::evalsuite::extract_masks;
use slotkit::graph::Graph;
use slotkit::model::{self, ForwardRequest};
use slotkit::nn::{ParamStore, ParamVars};
use slotkit::scenegen::{eval_view, Dataset, Split};
use std::path::Path;

/// Distinct overlay colors, one per slot (cycled if there are more slots).
const SLOT_COLORS: [[u8; 3]; 8] = [
    [230, 40, 40],
    [40, 120, 230],
    [40, 200, 80],
    [240, 200, 30],
    [180, 60, 220],
    [30, 210, 210],
    [250, 130, 30],
    [240, 90, 160],
];

const OVERLAY_IMAGES: usize = 4;
const OVERLAY_ALPHA: f64 = 0.55;

/// Render attention-mask overlays for a few test images into
/// `<dir>/plots/attention_<id>.png`. Skips silently for models without an
/// object pathway.
pub fn attention_overlays(
    cfg: &ExperimentConfig,
    params: &ParamStore,
    dataset: &Dataset,
    dir: &Path,
) -> anyhow::Result<()> {
    if cfg.loss.objective.is_none()
        && cfg.model.global_input != slotkit::model::GlobalInput::Slots
    {
        return Ok(());
    }
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots)?;
    let side = cfg.augment.output_size;
    for &i in dataset.split_indices(Split::Test).iter().take(OVERLAY_IMAGES) {
        let sample = &dataset.samples[i];
        let scene = sample.to_scene();
        let view = eval_view(&scene.image, &cfg.augment);
        let mut g: Graph<f32> = Graph::new();
        let pvars = ParamVars::bind(&mut g, params);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ sample.id);
        let out = model::forward(
            &mut g,
            &pvars,
            &cfg.model,
            std::slice::from_ref(&view),
            &mut rng,
            ForwardRequest { objects: true, global: false },
        )?;
        let masks = extract_masks(&out.attention[0], out.grid, side)?;

        // un-normalized base image at eval resolution, before augmentation
        // statistics are applied
        let crop = slotkit::scenegen::CropBox {
            x: 0,
            y: 0,
            w: scene.image.dim().1,
            h: scene.image.dim().0,
        };
        let base = slotkit::scenegen::resize_bilinear(&scene.image, crop, side);
        let mut img = image::RgbImage::new(side as u32, side as u32);
        for y in 0..side {
            for x in 0..side {
                let mut px = [
                    base[[y, x, 0]].clamp(0.0, 1.0) * 255.0,
                    base[[y, x, 1]].clamp(0.0, 1.0) * 255.0,
                    base[[y, x, 2]].clamp(0.0, 1.0) * 255.0,
                ];
                for (k, mask) in masks.iter().enumerate() {
                    if mask[[y, x]] {
                        let c = SLOT_COLORS[k % SLOT_COLORS.len()];
                        for ch in 0..3 {
                            px[ch] = px[ch] * (1.0 - OVERLAY_ALPHA)
                                + c[ch] as f64 * OVERLAY_ALPHA;
                        }
                    }
                }
                img.put_pixel(x as u32, y as u32, image::Rgb(px.map(|v| v as u8)));
            }
        }
        img.save(plots.join(format!("attention_{}.png", sample.id)))?;
    }
    Ok(())
}

/// One bar per group. `err` draws a symmetric whisker; bars are identified
/// by position (the report lists labels and values in the same order).
pub struct Bar {
    pub value: f64,
    pub err: f64,
}

const CHART_W: u32 = 640;
const CHART_H: u32 = 360;
const MARGIN: u32 = 30;

pub fn bar_chart(bars: &[Bar], path: &Path) -> anyhow::Result<()> {
    let mut img = image::RgbImage::from_pixel(CHART_W, CHART_H, image::Rgb([255, 255, 255]));
    if bars.is_empty() {
        img.save(path)?;
        return Ok(());
    }
    let max = bars
        .iter()
        .map(|b| b.value + b.err)
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let plot_w = CHART_W - 2 * MARGIN;
    let plot_h = (CHART_H - 2 * MARGIN) as f64;
    let slot_w = plot_w / bars.len() as u32;
    let bar_w = (slot_w * 3 / 5).max(2);

    // axes
    for x in MARGIN..CHART_W - MARGIN {
        img.put_pixel(x, CHART_H - MARGIN, image::Rgb([0, 0, 0]));
    }
    for y in MARGIN..=CHART_H - MARGIN {
        img.put_pixel(MARGIN, y, image::Rgb([0, 0, 0]));
    }

    for (i, bar) in bars.iter().enumerate() {
        let color = SLOT_COLORS[i % SLOT_COLORS.len()];
        let x0 = MARGIN + i as u32 * slot_w + (slot_w - bar_w) / 2;
        let h = ((bar.value / max).clamp(0.0, 1.0) * plot_h) as u32;
        let top = CHART_H - MARGIN - h;
        for x in x0..x0 + bar_w {
            for y in top..CHART_H - MARGIN {
                img.put_pixel(x, y, image::Rgb(color));
            }
        }
        if bar.err > 0.0 {
            let spread = ((bar.err / max) * plot_h) as i64;
            let cx = x0 + bar_w / 2;
            let center = top as i64;
            for dy in -spread..=spread {
                let y = (center + dy).clamp(MARGIN as i64, (CHART_H - MARGIN) as i64) as u32;
                img.put_pixel(cx, y, image::Rgb([0, 0, 0]));
            }
        }
    }
    img.save(path)?;
    Ok(())
}
