//! Augmentation pipeline: horizontal flip, area/aspect-constrained random
//! crop, bilinear resize, color jitter, channel normalization.

use super::SceneSample;
use crate::error::{Result, SlotError};
use ndarray::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct JitterConfig {
    pub brightness: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        // the paper names the jitter kinds but not their magnitudes
        JitterConfig {
            brightness: 0.2,
            saturation: 0.2,
            hue: 0.05,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the source area, inclusive bounds.
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub aspect_ratio_range: (f64, f64),
    pub output_size: usize,
    pub flip_prob: f64,
    pub jitter: JitterConfig,
    pub normalize_mean: [f64; 3],
    pub normalize_std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale_min: 0.3,
            crop_scale_max: 1.0,
            aspect_ratio_range: (3.0 / 4.0, 4.0 / 3.0),
            output_size: 64,
            flip_prob: 0.5,
            jitter: JitterConfig::default(),
            normalize_mean: [0.485, 0.456, 0.406],
            normalize_std: [0.229, 0.224, 0.225],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_scale_min > 0.0
            && self.crop_scale_min <= self.crop_scale_max
            && self.crop_scale_max <= 1.0)
        {
            return Err(SlotError::Config(format!(
                "invalid crop scale range ({}, {})",
                self.crop_scale_min, self.crop_scale_max
            )));
        }
        if self.output_size == 0 {
            return Err(SlotError::Config("output_size must be positive".into()));
        }
        if self.aspect_ratio_range.0 <= 0.0 || self.aspect_ratio_range.0 > self.aspect_ratio_range.1
        {
            return Err(SlotError::Config("invalid aspect ratio range".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(SlotError::Config("flip_prob must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Crop rectangle in (possibly flipped) source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl CropBox {
    pub fn area_fraction(&self, src_w: usize, src_h: usize) -> f64 {
        (self.w * self.h) as f64 / (src_w * src_h) as f64
    }
}

/// Two augmented views of the same source image plus replay information.
/// `crop_boxes` are expressed in the coordinates of the flipped source (the
/// flip is applied first), so replaying flip-then-crop aligns ground truth
/// with the view.
#[derive(Clone, Debug)]
pub struct AugmentedPair {
    pub view0: Array3<f64>,
    pub view1: Array3<f64>,
    pub source_id: u64,
    pub crop_boxes: [CropBox; 2],
    pub flip_flags: [bool; 2],
}

fn sample_crop(rng: &mut ChaCha8Rng, cfg: &AugmentConfig, w: usize, h: usize) -> CropBox {
    let area = (w * h) as f64;
    let (lo, hi) = (cfg.crop_scale_min, cfg.crop_scale_max);
    for _ in 0..20 {
        let frac = rng.gen_range(lo..=hi);
        let (a0, a1) = cfg.aspect_ratio_range;
        let ar = (rng.gen_range(a0.ln()..=a1.ln())).exp();
        let target = frac * area;
        let cw = (target * ar).sqrt().round() as usize;
        let ch = (target / ar).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let actual = (cw * ch) as f64 / area;
            if actual >= lo && actual <= hi {
                let x = rng.gen_range(0..=w - cw);
                let y = rng.gen_range(0..=h - ch);
                return CropBox { x, y, w: cw, h: ch };
            }
        }
    }
    // deterministic fallback: widest crop whose integer area stays in bounds
    for cw in (1..=w).rev() {
        let ch_max = ((hi * area) / cw as f64).floor() as usize;
        let ch_min = ((lo * area) / cw as f64).ceil() as usize;
        let ch = ch_max.min(h);
        if ch >= 1 && ch >= ch_min {
            let x = (w - cw) / 2;
            let y = (h - ch) / 2;
            return CropBox { x, y, w: cw, h: ch };
        }
    }
    CropBox { x: 0, y: 0, w, h }
}

/// Bilinear resize of an H x W x 3 image to `out` x `out`, restricted to a
/// crop window. Same-size identity crops reproduce the input exactly.
pub fn resize_bilinear(img: &Array3<f64>, crop: CropBox, out: usize) -> Array3<f64> {
    let (h, w, _) = img.dim();
    let sx = crop.w as f64 / out as f64;
    let sy = crop.h as f64 / out as f64;
    Array3::from_shape_fn((out, out, 3), |(oy, ox, c)| {
        let fx = (ox as f64 + 0.5) * sx - 0.5 + crop.x as f64;
        let fy = (oy as f64 + 0.5) * sy - 0.5 + crop.y as f64;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        let xi = |v: f64| (v.max(0.0) as usize).min(w - 1);
        let yi = |v: f64| (v.max(0.0) as usize).min(h - 1);
        let (x0i, x1i) = (xi(x0), xi(x0 + 1.0));
        let (y0i, y1i) = (yi(y0), yi(y0 + 1.0));
        let v00 = img[[y0i, x0i, c]];
        let v01 = img[[y0i, x1i, c]];
        let v10 = img[[y1i, x0i, c]];
        let v11 = img[[y1i, x1i, c]];
        (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01) + ty * ((1.0 - tx) * v10 + tx * v11)
    })
}

fn flip_lr(img: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| img[[y, w - 1 - x, ch]])
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

fn jitter_inplace(img: &mut Array3<f64>, brightness: f64, saturation: f64, hue: f64) {
    let (h, w, _) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let mut r = img[[y, x, 0]] * brightness;
            let mut g = img[[y, x, 1]] * brightness;
            let mut b = img[[y, x, 2]] * brightness;
            if saturation != 1.0 {
                let gray = 0.299 * r + 0.587 * g + 0.114 * b;
                r = gray + saturation * (r - gray);
                g = gray + saturation * (g - gray);
                b = gray + saturation * (b - gray);
            }
            if hue != 0.0 {
                let (hh, ss, vv) = rgb_to_hsv(
                    r.clamp(0.0, 1.0),
                    g.clamp(0.0, 1.0),
                    b.clamp(0.0, 1.0),
                );
                let (nr, ng, nb) = hsv_to_rgb(hh + hue, ss, vv);
                r = nr;
                g = ng;
                b = nb;
            }
            img[[y, x, 0]] = r.clamp(0.0, 1.0);
            img[[y, x, 1]] = g.clamp(0.0, 1.0);
            img[[y, x, 2]] = b.clamp(0.0, 1.0);
        }
    }
}

pub fn normalize_inplace(img: &mut Array3<f64>, mean: &[f64; 3], std: &[f64; 3]) {
    let (h, w, _) = img.dim();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img[[y, x, c]] = (img[[y, x, c]] - mean[c]) / std[c];
            }
        }
    }
}

fn make_view(
    rng: &mut ChaCha8Rng,
    image: &Array3<f64>,
    cfg: &AugmentConfig,
) -> (Array3<f64>, CropBox, bool) {
    let (h, w, _) = image.dim();
    let flip = cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob);
    let flipped;
    let src = if flip {
        flipped = flip_lr(image);
        &flipped
    } else {
        image
    };
    let crop = sample_crop(rng, cfg, w, h);
    let mut out = resize_bilinear(src, crop, cfg.output_size);
    // jitter draws always consume randomness so seeds stay comparable
    // across jitter settings
    let b = 1.0 + rng.gen_range(-cfg.jitter.brightness..=cfg.jitter.brightness);
    let s = 1.0 + rng.gen_range(-cfg.jitter.saturation..=cfg.jitter.saturation);
    let hshift = rng.gen_range(-cfg.jitter.hue..=cfg.jitter.hue);
    jitter_inplace(&mut out, b, s, hshift);
    normalize_inplace(&mut out, &cfg.normalize_mean, &cfg.normalize_std);
    (out, crop, flip)
}

/// Produce two independently augmented views of a sample. Deterministic for
/// a fixed (sample, cfg, seed).
pub fn augment(sample: &SceneSample, cfg: &AugmentConfig, rng_seed: u64) -> Result<AugmentedPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (view0, crop0, flip0) = make_view(&mut rng, &sample.image, cfg);
    let (view1, crop1, flip1) = make_view(&mut rng, &sample.image, cfg);
    Ok(AugmentedPair {
        view0,
        view1,
        source_id: sample.id,
        crop_boxes: [crop0, crop1],
        flip_flags: [flip0, flip1],
    })
}

/// Replay a recorded flip + crop on a ground-truth label map with
/// nearest-neighbor resampling, aligning masks with the augmented view.
pub fn replay_label_map(
    label_map: &Array2<u16>,
    flip: bool,
    crop: CropBox,
    output_size: usize,
) -> Array2<u16> {
    let (h, w) = label_map.dim();
    let src = if flip {
        Array2::from_shape_fn((h, w), |(y, x)| label_map[[y, w - 1 - x]])
    } else {
        label_map.clone()
    };
    let sx = crop.w as f64 / output_size as f64;
    let sy = crop.h as f64 / output_size as f64;
    Array2::from_shape_fn((output_size, output_size), |(oy, ox)| {
        let fx = ((ox as f64 + 0.5) * sx - 0.5 + crop.x as f64).round();
        let fy = ((oy as f64 + 0.5) * sy - 0.5 + crop.y as f64).round();
        let xi = (fx.max(0.0) as usize).min(w - 1);
        let yi = (fy.max(0.0) as usize).min(h - 1);
        src[[yi, xi]]
    })
}

/// Identity transform used at evaluation time: resize to `output_size` and
/// normalize with the configured statistics, no randomness.
pub fn eval_view(image: &Array3<f64>, cfg: &AugmentConfig) -> Array3<f64> {
    let (h, w, _) = image.dim();
    let crop = CropBox { x: 0, y: 0, w, h };
    let mut out = resize_bilinear(image, crop, cfg.output_size);
    normalize_inplace(&mut out, &cfg.normalize_mean, &cfg.normalize_std);
    out
}
