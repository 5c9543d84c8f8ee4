//! C ABI over the core primitives: trigger forging and pasting, placement
//! sampling, and the loss/distribution evaluators. Handles are opaque,
//! buffers are caller-owned, and every entry point returns a status code.
//!
//! The generated header lands in `include/sslbd.h` at build time.

use std::ffi::{c_char, CStr};

use ndarray::Array2;

use sslbd::defense::{compress_loss, similarity_distribution, AnchorBank};
use sslbd::rng::derive_rng_for_id;
use sslbd::ssl::losses::info_nce_loss;
use sslbd::trigger::{
    generate_trigger, paste_trigger, sample_location, PlacementRecord, TriggerImage, TriggerSpec,
};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SslbdStatus {
    Ok = 0,
    /// Invalid configuration or argument values.
    ConfigError = 2,
    /// Data or bounds problem (e.g. placement outside the image).
    DataError = 3,
    /// A required pointer was null.
    NullPointer = 10,
    /// A caller-provided buffer is too small.
    BufferTooSmall = 11,
}

fn status_of(err: &sslbd::Error) -> SslbdStatus {
    match err.exit_code() {
        2 => SslbdStatus::ConfigError,
        _ => SslbdStatus::DataError,
    }
}

/// Opaque trigger patch handle.
pub struct SslbdTrigger {
    inner: TriggerImage,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sslbd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Deterministically generate a trigger patch. The returned handle must be
/// released with `sslbd_trigger_free`.
#[no_mangle]
pub extern "C" fn sslbd_trigger_generate(
    trigger_id: u32,
    seed: u64,
    patch_size: u32,
    out: *mut *mut SslbdTrigger,
) -> SslbdStatus {
    if out.is_null() {
        return SslbdStatus::NullPointer;
    }
    match generate_trigger(&TriggerSpec::new(trigger_id, seed, patch_size)) {
        Ok(inner) => {
            let handle = Box::new(SslbdTrigger { inner });
            unsafe { *out = Box::into_raw(handle) };
            SslbdStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Side length in pixels of the trigger behind `handle`.
#[no_mangle]
pub extern "C" fn sslbd_trigger_patch_size(
    handle: *const SslbdTrigger,
    out: *mut u32,
) -> SslbdStatus {
    if handle.is_null() || out.is_null() {
        return SslbdStatus::NullPointer;
    }
    let t = unsafe { &*handle };
    unsafe { *out = t.inner.patch_size() };
    SslbdStatus::Ok
}

/// Copy the trigger's RGB pixels (row-major, 3 bytes per pixel) into `buf`.
/// `len` must be at least `patch_size * patch_size * 3`.
#[no_mangle]
pub extern "C" fn sslbd_trigger_copy_pixels(
    handle: *const SslbdTrigger,
    buf: *mut u8,
    len: usize,
) -> SslbdStatus {
    if handle.is_null() || buf.is_null() {
        return SslbdStatus::NullPointer;
    }
    let t = unsafe { &*handle };
    let raw = t.inner.pixels.as_raw();
    if len < raw.len() {
        return SslbdStatus::BufferTooSmall;
    }
    unsafe { std::ptr::copy_nonoverlapping(raw.as_ptr(), buf, raw.len()) };
    SslbdStatus::Ok
}

/// Release a trigger handle. Null is ignored.
#[no_mangle]
pub extern "C" fn sslbd_trigger_free(handle: *mut SslbdTrigger) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Sample the deterministic placement for `(seed, image_id)` on an image of
/// the given size: uniform over fully-inside positions.
#[no_mangle]
pub extern "C" fn sslbd_sample_location(
    image_w: u32,
    image_h: u32,
    patch_size: u32,
    seed: u64,
    image_id: *const c_char,
    out_x: *mut u32,
    out_y: *mut u32,
) -> SslbdStatus {
    if image_id.is_null() || out_x.is_null() || out_y.is_null() {
        return SslbdStatus::NullPointer;
    }
    let id = match unsafe { CStr::from_ptr(image_id) }.to_str() {
        Ok(s) => s,
        Err(_) => return SslbdStatus::ConfigError,
    };
    let mut rng = derive_rng_for_id(seed, "placement", id);
    match sample_location(image_w, image_h, patch_size, &mut rng) {
        Ok(p) => {
            unsafe {
                *out_x = p.x;
                *out_y = p.y;
            }
            SslbdStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Paste the trigger into a caller-owned RGB image buffer (row-major HWC,
/// `image_w * image_h * 3` bytes) at `(x, y)`, in place.
#[no_mangle]
pub extern "C" fn sslbd_paste_trigger(
    image: *mut u8,
    image_w: u32,
    image_h: u32,
    handle: *const SslbdTrigger,
    x: u32,
    y: u32,
) -> SslbdStatus {
    if image.is_null() || handle.is_null() {
        return SslbdStatus::NullPointer;
    }
    let t = unsafe { &*handle };
    let len = (image_w * image_h * 3) as usize;
    let slice = unsafe { std::slice::from_raw_parts_mut(image, len) };
    let img = match image::RgbImage::from_raw(image_w, image_h, slice.to_vec()) {
        Some(img) => img,
        None => return SslbdStatus::DataError,
    };
    match paste_trigger(&img, &t.inner, PlacementRecord { x, y }) {
        Ok(out) => {
            slice.copy_from_slice(out.as_raw());
            SslbdStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Contrastive loss of a unit query against a unit positive key and
/// `negative_count` unit negatives (row-major `negative_count * dim`).
#[no_mangle]
pub extern "C" fn sslbd_info_nce_loss(
    q: *const f32,
    k_pos: *const f32,
    negatives: *const f32,
    negative_count: usize,
    dim: usize,
    tau: f64,
    out: *mut f64,
) -> SslbdStatus {
    if q.is_null() || k_pos.is_null() || out.is_null() || (negatives.is_null() && negative_count > 0)
    {
        return SslbdStatus::NullPointer;
    }
    if dim == 0 {
        return SslbdStatus::ConfigError;
    }
    let qs = unsafe { std::slice::from_raw_parts(q, dim) };
    let ks = unsafe { std::slice::from_raw_parts(k_pos, dim) };
    let negs = if negative_count > 0 {
        let flat = unsafe { std::slice::from_raw_parts(negatives, negative_count * dim) };
        Array2::from_shape_vec((negative_count, dim), flat.to_vec()).expect("sized")
    } else {
        Array2::zeros((0, dim))
    };
    match info_nce_loss(qs, ks, &negs, tau) {
        Ok(v) => {
            unsafe { *out = v };
            SslbdStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// KL(p || q) with the documented 1e-12 floor on `q`.
#[no_mangle]
pub extern "C" fn sslbd_kl_divergence(
    p: *const f64,
    q: *const f64,
    len: usize,
    out: *mut f64,
) -> SslbdStatus {
    if p.is_null() || q.is_null() || out.is_null() {
        return SslbdStatus::NullPointer;
    }
    let ps = unsafe { std::slice::from_raw_parts(p, len) };
    let qs = unsafe { std::slice::from_raw_parts(q, len) };
    match compress_loss(ps, qs) {
        Ok(v) => {
            unsafe { *out = v };
            SslbdStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Softmax distribution of a unit embedding's cosine similarities to
/// `anchor_count` unit anchors (row-major `anchor_count * dim`), divided by
/// `temperature`. Writes `anchor_count` probabilities.
#[no_mangle]
pub extern "C" fn sslbd_similarity_distribution(
    embedding: *const f32,
    dim: usize,
    anchors: *const f32,
    anchor_count: usize,
    temperature: f64,
    out_probs: *mut f64,
) -> SslbdStatus {
    if embedding.is_null() || anchors.is_null() || out_probs.is_null() {
        return SslbdStatus::NullPointer;
    }
    if dim == 0 || temperature <= 0.0 {
        return SslbdStatus::ConfigError;
    }
    let emb = unsafe { std::slice::from_raw_parts(embedding, dim) };
    let flat = unsafe { std::slice::from_raw_parts(anchors, anchor_count * dim) };
    let bank = AnchorBank {
        anchors: Array2::from_shape_vec((anchor_count, dim), flat.to_vec()).expect("sized"),
        anchor_ids: Vec::new(),
        temperature,
    };
    match similarity_distribution(emb, &bank) {
        Ok(probs) => {
            unsafe {
                std::ptr::copy_nonoverlapping(probs.as_ptr(), out_probs, probs.len());
            }
            SslbdStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(sslbd_version()) };
        assert!(!v.to_str().unwrap().is_empty());
    }

    #[test]
    fn trigger_roundtrip_through_the_c_surface() {
        let mut handle: *mut SslbdTrigger = std::ptr::null_mut();
        assert_eq!(
            sslbd_trigger_generate(10, 42, 8, &mut handle),
            SslbdStatus::Ok
        );
        let mut size = 0u32;
        assert_eq!(sslbd_trigger_patch_size(handle, &mut size), SslbdStatus::Ok);
        assert_eq!(size, 8);
        let mut buf = vec![0u8; (size * size * 3) as usize];
        assert_eq!(
            sslbd_trigger_copy_pixels(handle, buf.as_mut_ptr(), buf.len()),
            SslbdStatus::Ok
        );
        // Deterministic: matches the library path.
        let reference = generate_trigger(&TriggerSpec::new(10, 42, 8)).unwrap();
        assert_eq!(&buf, reference.pixels.as_raw());

        // Paste into a flat image and verify the rectangle.
        let mut img = vec![7u8; 16 * 16 * 3];
        assert_eq!(
            sslbd_paste_trigger(img.as_mut_ptr(), 16, 16, handle, 4, 5),
            SslbdStatus::Ok
        );
        for ty in 0..8usize {
            for tx in 0..8usize {
                for c in 0..3 {
                    assert_eq!(
                        img[((5 + ty) * 16 + 4 + tx) * 3 + c],
                        buf[(ty * 8 + tx) * 3 + c]
                    );
                }
            }
        }
        // Out-of-bounds placement is a data error.
        assert_eq!(
            sslbd_paste_trigger(img.as_mut_ptr(), 16, 16, handle, 12, 0),
            SslbdStatus::DataError
        );
        sslbd_trigger_free(handle);
    }

    #[test]
    fn small_buffers_and_nulls_are_rejected() {
        let mut handle: *mut SslbdTrigger = std::ptr::null_mut();
        assert_eq!(
            sslbd_trigger_generate(11, 1, 4, &mut handle),
            SslbdStatus::Ok
        );
        let mut tiny = [0u8; 3];
        assert_eq!(
            sslbd_trigger_copy_pixels(handle, tiny.as_mut_ptr(), tiny.len()),
            SslbdStatus::BufferTooSmall
        );
        let mut handle2: *mut SslbdTrigger = std::ptr::null_mut();
        assert_eq!(
            sslbd_trigger_generate(11, 1, 2, &mut handle2),
            SslbdStatus::ConfigError,
            "patch below base resolution"
        );
        assert_eq!(
            sslbd_trigger_copy_pixels(std::ptr::null(), tiny.as_mut_ptr(), 3),
            SslbdStatus::NullPointer
        );
        sslbd_trigger_free(handle);
    }

    #[test]
    fn placement_is_deterministic_per_id() {
        let id = std::ffi::CString::new("train/class_00/img_00001").unwrap();
        let (mut x1, mut y1, mut x2, mut y2) = (0u32, 0u32, 0u32, 0u32);
        assert_eq!(
            sslbd_sample_location(16, 16, 4, 42, id.as_ptr(), &mut x1, &mut y1),
            SslbdStatus::Ok
        );
        assert_eq!(
            sslbd_sample_location(16, 16, 4, 42, id.as_ptr(), &mut x2, &mut y2),
            SslbdStatus::Ok
        );
        assert_eq!((x1, y1), (x2, y2));
        assert!(x1 <= 12 && y1 <= 12);
        // Too-small image: data error.
        assert_eq!(
            sslbd_sample_location(3, 3, 4, 42, id.as_ptr(), &mut x1, &mut y1),
            SslbdStatus::DataError
        );
    }

    #[test]
    fn loss_evaluators_match_the_library() {
        let q = [1.0f32, 0.0, 0.0];
        let negs = [0.0f32, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut loss = 0.0f64;
        assert_eq!(
            sslbd_info_nce_loss(q.as_ptr(), q.as_ptr(), negs.as_ptr(), 2, 3, 1.0, &mut loss),
            SslbdStatus::Ok
        );
        let expected = (1.0f64 + 2.0 / std::f64::consts::E).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert_eq!(
            sslbd_info_nce_loss(q.as_ptr(), q.as_ptr(), negs.as_ptr(), 2, 3, 0.0, &mut loss),
            SslbdStatus::ConfigError
        );

        let p = [0.75f64, 0.25];
        let qd = [0.5f64, 0.5];
        let mut kl = 0.0f64;
        assert_eq!(
            sslbd_kl_divergence(p.as_ptr(), qd.as_ptr(), 2, &mut kl),
            SslbdStatus::Ok
        );
        assert!((kl - (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln())).abs() < 1e-12);

        let anchors = [1.0f32, 0.0, 0.0, 1.0];
        let emb = [1.0f32, 0.0];
        let mut probs = [0.0f64; 2];
        assert_eq!(
            sslbd_similarity_distribution(
                emb.as_ptr(),
                2,
                anchors.as_ptr(),
                2,
                1.0,
                probs.as_mut_ptr()
            ),
            SslbdStatus::Ok
        );
        let e = std::f64::consts::E;
        assert!((probs[0] - e / (e + 1.0)).abs() < 1e-9);
    }
}
