//! Square patch triggers: seeded generation, placement sampling, and
//! bit-exact pasting.
//!
//! A trigger is a random 4x4 RGB image upscaled to the requested patch size
//! with the pinned bilinear resampler. The same `(trigger_id, seed,
//! patch_size)` always yields byte-identical pixels, so golden PNG files stay
//! stable across runs and machines. Externally supplied patch files can be
//! loaded verbatim instead.

use std::path::Path;

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{bilinear_resize_rgb8, load_rgb8, save_png};
use crate::rng::derive_rng;

/// Side length of the random base image every trigger is upscaled from.
pub const BASE_RESOLUTION: u32 = 4;

/// Identity of a trigger patch. Ids 10..=19 follow the published indexing
/// convention; any id is accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub trigger_id: u32,
    pub seed: u64,
    /// Side length of the final square patch in pixels.
    pub patch_size: u32,
}

impl TriggerSpec {
    pub fn new(trigger_id: u32, seed: u64, patch_size: u32) -> Self {
        TriggerSpec {
            trigger_id,
            seed,
            patch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < BASE_RESOLUTION {
            return Err(Error::Config(format!(
                "trigger patch_size {} is below the {}px base resolution",
                self.patch_size, BASE_RESOLUTION
            )));
        }
        Ok(())
    }
}

/// A rendered trigger patch.
#[derive(Debug, Clone)]
pub struct TriggerImage {
    pub spec: TriggerSpec,
    /// `patch_size` x `patch_size` RGB pixels.
    pub pixels: RgbImage,
}

impl TriggerImage {
    pub fn patch_size(&self) -> u32 {
        self.spec.patch_size
    }
}

/// Top-left corner of a trigger paste. The patch must lie fully inside the
/// image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementRecord {
    pub x: u32,
    pub y: u32,
}

/// The seeded 4x4 base image for a trigger identity. Channel values are
/// drawn uniformly from 0..=255.
pub fn generate_base(trigger_id: u32, seed: u64) -> RgbImage {
    let mut rng = derive_rng(seed, "trigger-base", &[&trigger_id.to_le_bytes()]);
    let mut data = vec![0u8; (BASE_RESOLUTION * BASE_RESOLUTION * 3) as usize];
    for v in data.iter_mut() {
        *v = rng.random_range(0..=255u32) as u8;
    }
    RgbImage::from_raw(BASE_RESOLUTION, BASE_RESOLUTION, data).expect("sized buffer")
}

/// Deterministically render the trigger for `spec`: seeded 4x4 base,
/// bilinearly upscaled to `patch_size`.
pub fn generate_trigger(spec: &TriggerSpec) -> Result<TriggerImage> {
    spec.validate()?;
    let base = generate_base(spec.trigger_id, spec.seed);
    let pixels = if spec.patch_size == BASE_RESOLUTION {
        base
    } else {
        bilinear_resize_rgb8(&base, spec.patch_size, spec.patch_size)
    };
    Ok(TriggerImage { spec: *spec, pixels })
}

/// Load an externally supplied square patch file verbatim.
pub fn load_trigger_file(path: &Path, trigger_id: u32) -> Result<TriggerImage> {
    let pixels = load_rgb8(path)?;
    if pixels.width() != pixels.height() {
        return Err(Error::Data(format!(
            "trigger file {} is {}x{}, expected a square patch",
            path.display(),
            pixels.width(),
            pixels.height()
        )));
    }
    let spec = TriggerSpec::new(trigger_id, 0, pixels.width());
    Ok(TriggerImage { spec, pixels })
}

/// Write `trigger_<id>_<patch_size>.png` and `trigger_<id>_base.png` under
/// `dir`; returns the patch path.
pub fn write_trigger_files(spec: &TriggerSpec, dir: &Path) -> Result<std::path::PathBuf> {
    let trig = generate_trigger(spec)?;
    let base = generate_base(spec.trigger_id, spec.seed);
    let patch_path = dir.join(format!("trigger_{}_{}.png", spec.trigger_id, spec.patch_size));
    save_png(&trig.pixels, &patch_path)?;
    save_png(
        &base,
        &dir.join(format!("trigger_{}_base.png", spec.trigger_id)),
    )?;
    Ok(patch_path)
}

/// Uniform placement over the grid of fully-inside positions.
pub fn sample_location(
    image_w: u32,
    image_h: u32,
    patch_size: u32,
    rng: &mut impl Rng,
) -> Result<PlacementRecord> {
    if image_w < patch_size || image_h < patch_size {
        return Err(Error::Data(format!(
            "image {image_w}x{image_h} cannot hold a {patch_size}px patch"
        )));
    }
    Ok(PlacementRecord {
        x: rng.random_range(0..=image_w - patch_size),
        y: rng.random_range(0..=image_h - patch_size),
    })
}

fn check_bounds(image: &RgbImage, patch_size: u32, placement: PlacementRecord) -> Result<()> {
    let ok = placement.x + patch_size <= image.width() && placement.y + patch_size <= image.height();
    if !ok {
        return Err(Error::Placement {
            image_id: String::new(),
            x: placement.x,
            y: placement.y,
            width: image.width(),
            height: image.height(),
            patch_size,
        });
    }
    Ok(())
}

/// Opaque paste of `trigger` at `placement`. The input is not mutated; the
/// returned image differs from it only inside the patch rectangle.
pub fn paste_trigger(
    image: &RgbImage,
    trigger: &TriggerImage,
    placement: PlacementRecord,
) -> Result<RgbImage> {
    let p = trigger.patch_size();
    check_bounds(image, p, placement)?;
    let mut out = image.clone();
    for ty in 0..p {
        for tx in 0..p {
            let px = *trigger.pixels.get_pixel(tx, ty);
            out.put_pixel(placement.x + tx, placement.y + ty, px);
        }
    }
    Ok(out)
}

/// The patch-sized rectangle of `image` at `placement`, e.g. the content a
/// paste would overwrite.
pub fn extract_rect(
    image: &RgbImage,
    patch_size: u32,
    placement: PlacementRecord,
) -> Result<RgbImage> {
    check_bounds(image, patch_size, placement)?;
    let mut out = RgbImage::new(patch_size, patch_size);
    for ty in 0..patch_size {
        for tx in 0..patch_size {
            out.put_pixel(
                tx,
                ty,
                *image.get_pixel(placement.x + tx, placement.y + ty),
            );
        }
    }
    Ok(out)
}

/// Restore a previously saved rectangle, undoing a paste at the same
/// placement.
pub fn restore_rect(
    image: &RgbImage,
    saved: &RgbImage,
    placement: PlacementRecord,
) -> Result<RgbImage> {
    assert_eq!(saved.width(), saved.height(), "saved rect must be square");
    check_bounds(image, saved.width(), placement)?;
    let mut out = image.clone();
    for ty in 0..saved.height() {
        for tx in 0..saved.width() {
            out.put_pixel(placement.x + tx, placement.y + ty, *saved.get_pixel(tx, ty));
        }
    }
    Ok(out)
}

/// Default patch side for a given image side: the published 50px-on-224px
/// footprint scaled linearly, never below the base resolution.
pub fn default_patch_size(min_image_side: u32) -> u32 {
    ((0.22 * min_image_side as f64).round() as u32).max(BASE_RESOLUTION)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng_for_id;

    fn test_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) % 256) as u8])
        })
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = TriggerSpec::new(10, 42, 50);
        let a = generate_trigger(&spec).unwrap();
        let b = generate_trigger(&spec).unwrap();
        assert_eq!(a.pixels.as_raw(), b.pixels.as_raw());
        let c = generate_trigger(&TriggerSpec::new(11, 42, 50)).unwrap();
        assert_ne!(a.pixels.as_raw(), c.pixels.as_raw());
    }

    #[test]
    fn patch_size_four_is_the_raw_base() {
        let spec = TriggerSpec::new(10, 42, 4);
        let trig = generate_trigger(&spec).unwrap();
        let base = generate_base(10, 42);
        assert_eq!(trig.pixels.as_raw(), base.as_raw());
    }

    #[test]
    fn undersized_patch_is_rejected() {
        let err = generate_trigger(&TriggerSpec::new(10, 42, 3)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn single_placement_grid() {
        let mut rng = derive_rng_for_id(0, "t", "a");
        let p = sample_location(50, 50, 50, &mut rng).unwrap();
        assert_eq!((p.x, p.y), (0, 0));
    }

    #[test]
    fn placement_impossible_when_patch_exceeds_image() {
        let mut rng = derive_rng_for_id(0, "t", "a");
        assert!(sample_location(32, 32, 50, &mut rng).is_err());
    }

    #[test]
    fn placement_uniform_over_small_grid() {
        // 52x52 image, 50px patch: 9 valid positions. Chi-squared against
        // uniform over 10^4 draws; dof 8, 0.99 quantile = 20.09.
        let mut rng = derive_rng_for_id(7, "chi", "uniform");
        let mut counts = [[0u32; 3]; 3];
        let draws = 10_000;
        for _ in 0..draws {
            let p = sample_location(52, 52, 50, &mut rng).unwrap();
            counts[p.y as usize][p.x as usize] += 1;
        }
        let expected = draws as f64 / 9.0;
        let chi2: f64 = counts
            .iter()
            .flatten()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 20.09, "chi2 = {chi2}");
    }

    #[test]
    fn paste_at_origin_matches_trigger_and_leaves_rest() {
        let img = test_image(16, 16);
        let trig = generate_trigger(&TriggerSpec::new(10, 42, 5)).unwrap();
        let out = paste_trigger(&img, &trig, PlacementRecord { x: 0, y: 0 }).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if x < 5 && y < 5 {
                    assert_eq!(out.get_pixel(x, y), trig.pixels.get_pixel(x, y));
                } else {
                    assert_eq!(out.get_pixel(x, y), img.get_pixel(x, y));
                }
            }
        }
    }

    #[test]
    fn paste_is_idempotent() {
        let img = test_image(20, 20);
        let trig = generate_trigger(&TriggerSpec::new(12, 1, 6)).unwrap();
        let place = PlacementRecord { x: 3, y: 9 };
        let once = paste_trigger(&img, &trig, place).unwrap();
        let twice = paste_trigger(&once, &trig, place).unwrap();
        assert_eq!(once.as_raw(), twice.as_raw());
    }

    #[test]
    fn paste_touches_at_most_patch_area() {
        let img = test_image(24, 18);
        let trig = generate_trigger(&TriggerSpec::new(13, 5, 7)).unwrap();
        let place = PlacementRecord { x: 10, y: 4 };
        let out = paste_trigger(&img, &trig, place).unwrap();
        let mut diff = 0usize;
        for y in 0..18 {
            for x in 0..24 {
                if out.get_pixel(x, y) != img.get_pixel(x, y) {
                    diff += 1;
                }
            }
        }
        assert!(diff <= 49, "{diff} pixels changed");
    }

    #[test]
    fn unpaste_restores_original_exactly() {
        let img = test_image(30, 30);
        let trig = generate_trigger(&TriggerSpec::new(14, 9, 8)).unwrap();
        let place = PlacementRecord { x: 11, y: 22 };
        let saved = extract_rect(&img, 8, place).unwrap();
        let pasted = paste_trigger(&img, &trig, place).unwrap();
        let rect = extract_rect(&pasted, 8, place).unwrap();
        assert_eq!(rect.as_raw(), trig.pixels.as_raw());
        let restored = restore_rect(&pasted, &saved, place).unwrap();
        assert_eq!(restored.as_raw(), img.as_raw());
    }

    #[test]
    fn out_of_bounds_paste_is_rejected() {
        let img = test_image(16, 16);
        let trig = generate_trigger(&TriggerSpec::new(10, 42, 8)).unwrap();
        assert!(paste_trigger(&img, &trig, PlacementRecord { x: 9, y: 0 }).is_err());
        assert!(paste_trigger(&img, &trig, PlacementRecord { x: 0, y: 12 }).is_err());
    }

    #[test]
    fn default_patch_size_tracks_image_side() {
        assert_eq!(default_patch_size(224), 49);
        assert_eq!(default_patch_size(32), 7);
        assert_eq!(default_patch_size(16), 4);
        assert_eq!(default_patch_size(8), 4);
    }
}
