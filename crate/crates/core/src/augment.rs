//! Stochastic augmentation chain (random resized crop, flip, color jitter,
//! grayscale, blur) and the controlled view modes that decide which file each
//! branch of an exemplar pair sees.

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::ImageF32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitterCfg {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift as a fraction of the full circle.
    pub hue: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub crop_scale_range: (f64, f64),
    pub crop_aspect_range: (f64, f64),
    pub horizontal_flip_prob: f64,
    pub color_jitter: ColorJitterCfg,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_range: (f64, f64),
    pub output_size: usize,
    pub normalize_mean: [f32; 3],
    pub normalize_std: [f32; 3],
}

impl AugmentationPolicy {
    /// The usual contrastive-learning augmentation set, scaled to small
    /// inputs: crop 0.2-1.0, jitter (0.4, 0.4, 0.4, 0.1) at p=0.8, grayscale
    /// p=0.2, blur p=0.5, flip p=0.5.
    pub fn contrastive_default(output_size: usize) -> Self {
        AugmentationPolicy {
            crop_scale_range: (0.2, 1.0),
            crop_aspect_range: (0.75, 4.0 / 3.0),
            horizontal_flip_prob: 0.5,
            color_jitter: ColorJitterCfg {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
                hue: 0.1,
                prob: 0.8,
            },
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma_range: (0.1, 2.0),
            output_size,
            normalize_mean: [0.5, 0.5, 0.5],
            normalize_std: [0.25, 0.25, 0.25],
        }
    }

    /// Contrastive chain tuned for very small (16px) inputs: gentler crops,
    /// color jitter, and blur so class-identifying structure survives.
    pub fn contrastive_micro(output_size: usize) -> Self {
        AugmentationPolicy {
            crop_scale_range: (0.35, 1.0),
            crop_aspect_range: (0.75, 4.0 / 3.0),
            horizontal_flip_prob: 0.5,
            color_jitter: ColorJitterCfg {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.2,
                hue: 0.02,
                prob: 0.8,
            },
            grayscale_prob: 0.1,
            blur_prob: 0.2,
            blur_sigma_range: (0.1, 0.6),
            output_size,
            normalize_mean: [0.5, 0.5, 0.5],
            normalize_std: [0.25, 0.25, 0.25],
        }
    }

    /// Milder chain for pretext-task methods (crop + flip only).
    pub fn pretext_default(output_size: usize) -> Self {
        AugmentationPolicy {
            crop_scale_range: (0.6, 1.0),
            crop_aspect_range: (1.0, 1.0),
            horizontal_flip_prob: 0.5,
            color_jitter: ColorJitterCfg {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
                hue: 0.0,
                prob: 0.0,
            },
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma_range: (0.1, 2.0),
            output_size,
            normalize_mean: [0.5, 0.5, 0.5],
            normalize_std: [0.25, 0.25, 0.25],
        }
    }

    /// No-op policy: full crop, no flip/jitter, identity normalization.
    pub fn identity(output_size: usize) -> Self {
        AugmentationPolicy {
            crop_scale_range: (1.0, 1.0),
            crop_aspect_range: (1.0, 1.0),
            horizontal_flip_prob: 0.0,
            color_jitter: ColorJitterCfg {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
                hue: 0.0,
                prob: 0.0,
            },
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma_range: (0.1, 2.0),
            output_size,
            normalize_mean: [0.0, 0.0, 0.0],
            normalize_std: [1.0, 1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.horizontal_flip_prob,
            self.color_jitter.prob,
            self.grayscale_prob,
            self.blur_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probability outside [0, 1]".into()));
        }
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale range ({lo}, {hi}) must satisfy 0 < min <= max <= 1"
            )));
        }
        if self.output_size == 0 {
            return Err(Error::Config("output size must be positive".into()));
        }
        Ok(())
    }
}

/// How an entry's two branches source their pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    /// Both views augment the same (possibly poisoned) file.
    Standard,
    /// A fair coin decides which branch sees the poisoned file; the other
    /// augments the clean twin.
    OneViewPoisoned,
    /// Composed experiment: target-class poisons get the one-view treatment
    /// while class-agnostic poisons appear in both views.
    RandomPoisonBothViews,
}

/// Parameters actually drawn for one augmented view, for the crop-box
/// intersection analysis.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugRecord {
    /// Crop rectangle (x, y, w, h) in source pixels.
    pub crop: (usize, usize, usize, usize),
    pub flipped: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PairRecord {
    pub view1: AugRecord,
    pub view2: AugRecord,
    /// Which branch saw the poisoned file (one-view mode only).
    pub poisoned_branch: Option<u8>,
}

fn sample_crop(
    w: usize,
    h: usize,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha12Rng,
) -> (usize, usize, usize, usize) {
    let area = (w * h) as f64;
    let (s_lo, s_hi) = policy.crop_scale_range;
    let (a_lo, a_hi) = policy.crop_aspect_range;
    for _ in 0..10 {
        let target = area * rng.random_range(s_lo..=s_hi);
        let aspect = (rng.random_range(a_lo.ln()..=a_hi.ln())).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let x = rng.random_range(0..=w - cw);
            let y = rng.random_range(0..=h - ch);
            return (x, y, cw, ch);
        }
    }
    // Center fallback with clamped aspect.
    let cw = w.min(h);
    (w.saturating_sub(cw) / 2, h.saturating_sub(cw) / 2, cw, cw)
}

fn luma(px: [f32; 3]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn apply_brightness(img: &mut ImageF32, factor: f32) {
    for v in img.data.iter_mut() {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
}

fn apply_contrast(img: &mut ImageF32, factor: f32) {
    let mut mean = 0.0f32;
    for y in 0..img.height {
        for x in 0..img.width {
            mean += luma(img.pixel(x, y));
        }
    }
    mean /= (img.width * img.height) as f32;
    for v in img.data.iter_mut() {
        *v = (factor * *v + (1.0 - factor) * mean).clamp(0.0, 1.0);
    }
}

fn apply_saturation(img: &mut ImageF32, factor: f32) {
    for y in 0..img.height {
        for x in 0..img.width {
            let px = img.pixel(x, y);
            let g = luma(px);
            img.set_pixel(
                x,
                y,
                [
                    (factor * px[0] + (1.0 - factor) * g).clamp(0.0, 1.0),
                    (factor * px[1] + (1.0 - factor) * g).clamp(0.0, 1.0),
                    (factor * px[2] + (1.0 - factor) * g).clamp(0.0, 1.0),
                ],
            );
        }
    }
}

fn rgb_to_hsv(px: [f32; 3]) -> (f32, f32, f32) {
    let (r, g, b) = (px[0], px[1], px[2]);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [
        (r + m).clamp(0.0, 1.0),
        (g + m).clamp(0.0, 1.0),
        (b + m).clamp(0.0, 1.0),
    ]
}

fn apply_hue(img: &mut ImageF32, shift: f32) {
    for y in 0..img.height {
        for x in 0..img.width {
            let (h, s, v) = rgb_to_hsv(img.pixel(x, y));
            img.set_pixel(x, y, hsv_to_rgb(h + shift, s, v));
        }
    }
}

fn apply_grayscale(img: &mut ImageF32) {
    for y in 0..img.height {
        for x in 0..img.width {
            let g = luma(img.pixel(x, y));
            img.set_pixel(x, y, [g, g, g]);
        }
    }
}

fn apply_blur(img: &mut ImageF32, sigma: f32) {
    let radius = ((2.0 * sigma).ceil() as usize).clamp(1, 3);
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let denom = 2.0 * sigma * sigma;
    for i in 0..=2 * radius {
        let d = i as f32 - radius as f32;
        kernel.push((-d * d / denom).exp());
    }
    let sum: f32 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= sum;
    }
    let (w, h) = (img.width, img.height);
    // Horizontal then vertical pass, clamp-to-edge.
    let mut tmp = ImageF32::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (i, k) in kernel.iter().enumerate() {
                let sx = (x as isize + i as isize - radius as isize).clamp(0, w as isize - 1);
                let px = img.pixel(sx as usize, y);
                for c in 0..3 {
                    acc[c] += k * px[c];
                }
            }
            tmp.set_pixel(x, y, acc);
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (i, k) in kernel.iter().enumerate() {
                let sy = (y as isize + i as isize - radius as isize).clamp(0, h as isize - 1);
                let px = tmp.pixel(x, sy as usize);
                for c in 0..3 {
                    acc[c] += k * px[c];
                }
            }
            img.set_pixel(x, y, acc);
        }
    }
}

/// One augmented view of `src` under the policy, plus the drawn parameters.
pub fn augment_view(
    src: &ImageF32,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha12Rng,
) -> (ImageF32, AugRecord) {
    let (cx, cy, cw, ch) = sample_crop(src.width, src.height, policy, rng);
    let mut img = src.crop_resize(cx, cy, cw, ch, policy.output_size);
    let mut flipped = false;
    if rng.random_bool(policy.horizontal_flip_prob) {
        img.flip_horizontal();
        flipped = true;
    }
    let cj = policy.color_jitter;
    if cj.prob > 0.0 && rng.random_bool(cj.prob) {
        let mut order = [0usize, 1, 2, 3];
        order.shuffle(rng);
        for op in order {
            match op {
                0 if cj.brightness > 0.0 => {
                    let f = rng.random_range(
                        (1.0 - cj.brightness).max(0.0)..=1.0 + cj.brightness,
                    ) as f32;
                    apply_brightness(&mut img, f);
                }
                1 if cj.contrast > 0.0 => {
                    let f =
                        rng.random_range((1.0 - cj.contrast).max(0.0)..=1.0 + cj.contrast) as f32;
                    apply_contrast(&mut img, f);
                }
                2 if cj.saturation > 0.0 => {
                    let f = rng
                        .random_range((1.0 - cj.saturation).max(0.0)..=1.0 + cj.saturation)
                        as f32;
                    apply_saturation(&mut img, f);
                }
                3 if cj.hue > 0.0 => {
                    let f = rng.random_range(-cj.hue..=cj.hue) as f32;
                    apply_hue(&mut img, f);
                }
                _ => {}
            }
        }
    }
    if policy.grayscale_prob > 0.0 && rng.random_bool(policy.grayscale_prob) {
        apply_grayscale(&mut img);
    }
    if policy.blur_prob > 0.0 && rng.random_bool(policy.blur_prob) {
        let (lo, hi) = policy.blur_sigma_range;
        let sigma = rng.random_range(lo..=hi) as f32;
        apply_blur(&mut img, sigma);
    }
    for v in img.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    (
        img,
        AugRecord {
            crop: (cx, cy, cw, ch),
            flipped,
        },
    )
}

/// Two augmented views of an entry under the given per-entry treatment.
///
/// `one_view` requires the clean twin; a fair coin decides which branch sees
/// the poisoned pixels.
pub fn augment_pair(
    image: &ImageF32,
    clean_twin: Option<&ImageF32>,
    policy: &AugmentationPolicy,
    one_view: bool,
    rng: &mut ChaCha12Rng,
) -> Result<(ImageF32, ImageF32, PairRecord)> {
    if !one_view {
        let (v1, r1) = augment_view(image, policy, rng);
        let (v2, r2) = augment_view(image, policy, rng);
        return Ok((
            v1,
            v2,
            PairRecord {
                view1: r1,
                view2: r2,
                poisoned_branch: None,
            },
        ));
    }
    let twin = clean_twin.ok_or_else(|| {
        Error::Data("one-view treatment requires the clean twin of the poisoned image".into())
    })?;
    let poisoned_first: bool = rng.random_bool(0.5);
    let (a, b) = if poisoned_first {
        (image, twin)
    } else {
        (twin, image)
    };
    let (v1, r1) = augment_view(a, policy, rng);
    let (v2, r2) = augment_view(b, policy, rng);
    Ok((
        v1,
        v2,
        PairRecord {
            view1: r1,
            view2: r2,
            poisoned_branch: Some(if poisoned_first { 1 } else { 2 }),
        },
    ))
}

/// Copy a normalized CHW tensor of `img` into `dst` (a `3 * s * s` slice).
pub fn write_normalized_chw(img: &ImageF32, mean: [f32; 3], std: [f32; 3], dst: &mut [f32]) {
    let (w, h) = (img.width, img.height);
    debug_assert_eq!(dst.len(), 3 * w * h);
    for c in 0..3 {
        let inv = 1.0 / std[c];
        let plane = &mut dst[c * w * h..(c + 1) * w * h];
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = (img.data[(y * w + x) * 3 + c] - mean[c]) * inv;
            }
        }
    }
}

/// Convert a stored 8-bit image for the augmentation chain.
pub fn to_f32(img: &RgbImage) -> ImageF32 {
    ImageF32::from_rgb8(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn gradient_image(side: u32) -> ImageF32 {
        let img = RgbImage::from_fn(side, side, |x, y| {
            image::Rgb([(x * 16) as u8, (y * 16) as u8, 128])
        });
        ImageF32::from_rgb8(&img)
    }

    #[test]
    fn identity_policy_reproduces_input() {
        let src = gradient_image(16);
        let policy = AugmentationPolicy::identity(16);
        let mut rng = derive_rng(1, "aug", &[]);
        let (v1, v2, rec) = augment_pair(&src, None, &policy, false, &mut rng).unwrap();
        for (a, b) in src.data.iter().zip(v1.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in src.data.iter().zip(v2.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(rec.view1.crop, (0, 0, 16, 16));
    }

    #[test]
    fn one_view_mode_needs_a_twin_and_flips_a_fair_coin() {
        let src = gradient_image(16);
        let policy = AugmentationPolicy::identity(16);
        let mut rng = derive_rng(2, "aug", &[]);
        assert!(augment_pair(&src, None, &policy, true, &mut rng).is_err());

        // Binomial check over 2000 draws: branch 1 frequency within 4 sigma
        // of 0.5 (sigma = 0.0112).
        let twin = gradient_image(16);
        let mut ones = 0u32;
        let n = 2000;
        for i in 0..n {
            let mut rng = derive_rng(3, "coin", &[&(i as u64).to_le_bytes()]);
            let (_, _, rec) = augment_pair(&src, Some(&twin), &policy, true, &mut rng).unwrap();
            if rec.poisoned_branch == Some(1) {
                ones += 1;
            }
        }
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.5).abs() < 4.0 * 0.0112, "freq = {freq}");
    }

    #[test]
    fn crops_stay_inside_bounds_and_seeds_reproduce() {
        let src = gradient_image(16);
        let policy = AugmentationPolicy::contrastive_default(16);
        for i in 0..200u64 {
            let mut rng = derive_rng(4, "c", &[&i.to_le_bytes()]);
            let (v, rec) = augment_view(&src, &policy, &mut rng);
            let (x, y, w, h) = rec.crop;
            assert!(w >= 1 && h >= 1 && x + w <= 16 && y + h <= 16);
            assert_eq!(v.width, 16);
            assert!(v.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let mut r1 = derive_rng(5, "c", &[]);
        let mut r2 = derive_rng(5, "c", &[]);
        let (a, _) = augment_view(&src, &policy, &mut r1);
        let (b, _) = augment_view(&src, &policy, &mut r2);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn view_differs_from_twin_iff_crop_hits_patch() {
        // Paste a fake 4px patch at (6, 6); with jitter disabled, a view of
        // the poisoned image differs from the same-seed view of the clean
        // twin exactly when the crop rectangle intersects the patch.
        let clean = gradient_image(16);
        let mut poisoned = clean.clone();
        for y in 6..10 {
            for x in 6..10 {
                poisoned.set_pixel(x, y, [1.0, 0.0, 1.0]);
            }
        }
        let mut policy = AugmentationPolicy::contrastive_default(16);
        policy.color_jitter.prob = 0.0;
        policy.grayscale_prob = 0.0;
        policy.blur_prob = 0.0;
        let mut hits = 0;
        for i in 0..300u64 {
            let mut r1 = derive_rng(6, "p", &[&i.to_le_bytes()]);
            let mut r2 = derive_rng(6, "p", &[&i.to_le_bytes()]);
            let (vp, rec) = augment_view(&poisoned, &policy, &mut r1);
            let (vc, _) = augment_view(&clean, &policy, &mut r2);
            let (x, y, w, h) = rec.crop;
            let intersects = x < 10 && x + w > 6 && y < 10 && y + h > 6;
            let differs = vp.data.iter().zip(vc.data.iter()).any(|(a, b)| (a - b).abs() > 1e-6);
            assert_eq!(differs, intersects, "iter {i}, crop {:?}", rec.crop);
            if intersects {
                hits += 1;
            }
        }
        assert!(hits > 50, "patch should be hit regularly, got {hits}");
    }

    #[test]
    fn hue_roundtrip_is_stable() {
        let src = gradient_image(8);
        let mut img = src.clone();
        apply_hue(&mut img, 0.25);
        apply_hue(&mut img, -0.25);
        for (a, b) in src.data.iter().zip(img.data.iter()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }
}
