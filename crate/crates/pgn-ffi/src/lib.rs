//! C ABI for the perceptual-gradient-network pipeline.
//!
//! Handles are opaque pointers created and destroyed by this library; every
//! function returns a [`PgnStatus`] and writes results through caller-owned
//! buffers. Image tensors are contiguous little-endian `f32` in NCHW order
//! with 3 channels. On any failure the per-thread message from
//! `pgn_last_error_message` describes what went wrong.
//!
//! The header `include/pgn.h` is generated with cbindgen
//! (`cbindgen --crate pgn-ffi --output include/pgn.h`) and committed.

use pgn::networks::PgnModel;
use pgn::teacher::{Teacher, TeacherSpec};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgnStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Arguments were structurally invalid (shapes, sizes, modes).
    InvalidArgument = 2,
    /// The operation itself failed (I/O, malformed checkpoint).
    Failed = 3,
    /// A panic was caught at the boundary.
    Internal = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pgn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn pgn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Opaque teacher handle.
pub struct PgnTeacher(Teacher<f32>);

/// Opaque model handle (backbone + head).
pub struct PgnModelHandle(PgnModel<f32>);

fn guard<T>(f: impl FnOnce() -> PgnStatus + std::panic::UnwindSafe, _marker: T) -> PgnStatus {
    match catch_unwind(f) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic caught at the FFI boundary");
            PgnStatus::Internal
        }
    }
}

unsafe fn slice_from<'a>(ptr: *const f32, len: usize) -> Option<&'a [f32]> {
    if ptr.is_null() {
        None
    } else {
        Some(unsafe { std::slice::from_raw_parts(ptr, len) })
    }
}

fn tensor_from(data: &[f32], b: usize, h: usize, w: usize) -> pgn::nn::Tensor<f32> {
    ndarray::Array4::from_shape_vec((b, 3, h, w), data.to_vec()).expect("length checked by caller")
}

/// Builds the desk-scale teacher with seeded frozen weights.
///
/// # Safety
/// `out` must be a valid pointer; the handle must be released with
/// `pgn_teacher_destroy`.
#[no_mangle]
pub unsafe extern "C" fn pgn_teacher_create_tiny(
    seed: u64,
    out: *mut *mut PgnTeacher,
) -> PgnStatus {
    guard(
        AssertUnwindSafe(|| {
            if out.is_null() {
                set_error("out handle is null");
                return PgnStatus::NullArgument;
            }
            match Teacher::<f32>::build(TeacherSpec::tiny(), seed) {
                Ok(t) => {
                    unsafe { *out = Box::into_raw(Box::new(PgnTeacher(t))) };
                    PgnStatus::Ok
                }
                Err(e) => {
                    set_error(&e.to_string());
                    PgnStatus::Failed
                }
            }
        }),
        (),
    )
}

/// Releases a teacher handle; a null pointer is ignored.
///
/// # Safety
/// `teacher` must have come from `pgn_teacher_create_tiny` and must not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pgn_teacher_destroy(teacher: *mut PgnTeacher) {
    if !teacher.is_null() {
        drop(unsafe { Box::from_raw(teacher) });
    }
}

/// Per-image perceptual loss of `batch` image pairs of size `3 x h x w`.
/// `out_loss` receives `batch` values.
///
/// # Safety
/// `yhat` and `y` must hold `batch*3*h*w` floats; `out_loss` must hold
/// `batch` floats.
#[no_mangle]
pub unsafe extern "C" fn pgn_teacher_loss(
    teacher: *const PgnTeacher,
    yhat: *const f32,
    y: *const f32,
    batch: usize,
    h: usize,
    w: usize,
    out_loss: *mut f32,
) -> PgnStatus {
    guard(
        AssertUnwindSafe(|| {
            if teacher.is_null() || out_loss.is_null() {
                set_error("teacher or output pointer is null");
                return PgnStatus::NullArgument;
            }
            if batch == 0 || h == 0 || w == 0 {
                set_error("batch and spatial sizes must be positive");
                return PgnStatus::InvalidArgument;
            }
            let n = batch * 3 * h * w;
            let (Some(a), Some(b)) = (unsafe { slice_from(yhat, n) }, unsafe { slice_from(y, n) })
            else {
                set_error("image buffer is null");
                return PgnStatus::NullArgument;
            };
            let teacher = unsafe { &(*teacher).0 };
            match teacher.perceptual_loss(&tensor_from(a, batch, h, w), &tensor_from(b, batch, h, w))
            {
                Ok(losses) => {
                    let out = unsafe { std::slice::from_raw_parts_mut(out_loss, batch) };
                    for (dst, v) in out.iter_mut().zip(losses.iter()) {
                        *dst = *v;
                    }
                    PgnStatus::Ok
                }
                Err(e) => {
                    set_error(&e.to_string());
                    PgnStatus::InvalidArgument
                }
            }
        }),
        (),
    )
}

/// Exact gradient of the summed per-image perceptual loss with respect to
/// `yhat`; `out_grad` receives `batch*3*h*w` values.
///
/// # Safety
/// Buffer sizes as in `pgn_teacher_loss`; `out_grad` must hold
/// `batch*3*h*w` floats.
#[no_mangle]
pub unsafe extern "C" fn pgn_teacher_grad(
    teacher: *const PgnTeacher,
    yhat: *const f32,
    y: *const f32,
    batch: usize,
    h: usize,
    w: usize,
    out_grad: *mut f32,
) -> PgnStatus {
    guard(
        AssertUnwindSafe(|| {
            if teacher.is_null() || out_grad.is_null() {
                set_error("teacher or output pointer is null");
                return PgnStatus::NullArgument;
            }
            let n = batch * 3 * h * w;
            if n == 0 {
                set_error("batch and spatial sizes must be positive");
                return PgnStatus::InvalidArgument;
            }
            let (Some(a), Some(b)) = (unsafe { slice_from(yhat, n) }, unsafe { slice_from(y, n) })
            else {
                set_error("image buffer is null");
                return PgnStatus::NullArgument;
            };
            let teacher = unsafe { &(*teacher).0 };
            match teacher.perceptual_grad(&tensor_from(a, batch, h, w), &tensor_from(b, batch, h, w))
            {
                Ok(g) => {
                    let out = unsafe { std::slice::from_raw_parts_mut(out_grad, n) };
                    out.copy_from_slice(g.as_slice().expect("contiguous"));
                    PgnStatus::Ok
                }
                Err(e) => {
                    set_error(&e.to_string());
                    PgnStatus::InvalidArgument
                }
            }
        }),
        (),
    )
}

/// Loads a PGN checkpoint written by the trainer.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; the handle must be released
/// with `pgn_model_destroy`.
#[no_mangle]
pub unsafe extern "C" fn pgn_model_load(
    path: *const c_char,
    out: *mut *mut PgnModelHandle,
) -> PgnStatus {
    guard(
        AssertUnwindSafe(|| {
            if path.is_null() || out.is_null() {
                set_error("path or out handle is null");
                return PgnStatus::NullArgument;
            }
            let Ok(path) = unsafe { CStr::from_ptr(path) }.to_str() else {
                set_error("path is not valid UTF-8");
                return PgnStatus::InvalidArgument;
            };
            match PgnModel::<f32>::load(std::path::Path::new(path)) {
                Ok(m) => {
                    unsafe { *out = Box::into_raw(Box::new(PgnModelHandle(m))) };
                    PgnStatus::Ok
                }
                Err(e) => {
                    set_error(&e.to_string());
                    PgnStatus::Failed
                }
            }
        }),
        (),
    )
}

/// Releases a model handle; a null pointer is ignored.
///
/// # Safety
/// `model` must have come from `pgn_model_load` and must not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn pgn_model_destroy(model: *mut PgnModelHandle) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// One forward pass: writes the synthetic gradient to `out_grad`
/// (`batch*3*h*w` floats) and, when `out_proxy` is non-null and the head
/// produces one, the proxy target too. For the direct head `out_proxy` is
/// left untouched and `has_proxy` (when non-null) is set to 0.
///
/// # Safety
/// All buffers must hold `batch*3*h*w` floats; `h` and `w` must be
/// divisible by the backbone's spatial divisor (stored in the checkpoint).
#[no_mangle]
pub unsafe extern "C" fn pgn_model_synthesize(
    model: *const PgnModelHandle,
    yhat: *const f32,
    y: *const f32,
    batch: usize,
    h: usize,
    w: usize,
    out_grad: *mut f32,
    out_proxy: *mut f32,
    has_proxy: *mut i32,
) -> PgnStatus {
    guard(
        AssertUnwindSafe(|| {
            if model.is_null() || out_grad.is_null() {
                set_error("model or output pointer is null");
                return PgnStatus::NullArgument;
            }
            let n = batch * 3 * h * w;
            if n == 0 {
                set_error("batch and spatial sizes must be positive");
                return PgnStatus::InvalidArgument;
            }
            let (Some(a), Some(b)) = (unsafe { slice_from(yhat, n) }, unsafe { slice_from(y, n) })
            else {
                set_error("image buffer is null");
                return PgnStatus::NullArgument;
            };
            let model = unsafe { &(*model).0 };
            let d = model.spec.spatial_divisor();
            if h % d != 0 || w % d != 0 {
                set_error(&format!("image {h}x{w} not divisible by the backbone's {d}"));
                return PgnStatus::InvalidArgument;
            }
            match model.synthesize(&tensor_from(a, batch, h, w), &tensor_from(b, batch, h, w)) {
                Ok((g, proxy)) => {
                    unsafe { std::slice::from_raw_parts_mut(out_grad, n) }
                        .copy_from_slice(g.as_slice().expect("contiguous"));
                    if !has_proxy.is_null() {
                        unsafe { *has_proxy = proxy.is_some() as i32 };
                    }
                    if let (Some(p), false) = (proxy, out_proxy.is_null()) {
                        unsafe { std::slice::from_raw_parts_mut(out_proxy, n) }
                            .copy_from_slice(p.as_slice().expect("contiguous"));
                    }
                    PgnStatus::Ok
                }
                Err(e) => {
                    set_error(&e.to_string());
                    PgnStatus::InvalidArgument
                }
            }
        }),
        (),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use pgn::heads::HeadVariant;
    use pgn::networks::BackboneSpec;
    use pgn::teacher::IMAGENET_NORMALIZATION;
    use std::ptr;

    #[test]
    fn teacher_roundtrip_through_the_c_abi() {
        let mut handle: *mut PgnTeacher = ptr::null_mut();
        assert_eq!(
            unsafe { pgn_teacher_create_tiny(7, &mut handle) },
            PgnStatus::Ok
        );
        assert!(!handle.is_null());

        let (b, h, w) = (2usize, 16usize, 16usize);
        let n = b * 3 * h * w;
        let yhat: Vec<f32> = (0..n).map(|i| (i % 17) as f32 / 17.0 - 0.5).collect();
        let y: Vec<f32> = (0..n).map(|i| (i % 13) as f32 / 13.0 - 0.5).collect();
        let mut loss = vec![0f32; b];
        assert_eq!(
            unsafe {
                pgn_teacher_loss(handle, yhat.as_ptr(), y.as_ptr(), b, h, w, loss.as_mut_ptr())
            },
            PgnStatus::Ok
        );
        assert!(loss.iter().all(|&v| v > 0.0));

        // identical inputs: zero loss and zero gradient
        let mut zero_loss = vec![1f32; b];
        unsafe {
            pgn_teacher_loss(handle, y.as_ptr(), y.as_ptr(), b, h, w, zero_loss.as_mut_ptr())
        };
        assert!(zero_loss.iter().all(|&v| v == 0.0));

        let mut grad = vec![0f32; n];
        assert_eq!(
            unsafe {
                pgn_teacher_grad(handle, yhat.as_ptr(), y.as_ptr(), b, h, w, grad.as_mut_ptr())
            },
            PgnStatus::Ok
        );
        assert!(grad.iter().any(|&v| v != 0.0));

        // cross-check against the Rust API
        let teacher = Teacher::<f32>::build(TeacherSpec::tiny(), 7).unwrap();
        let expect = teacher
            .perceptual_loss(&tensor_from(&yhat, b, h, w), &tensor_from(&y, b, h, w))
            .unwrap();
        assert_eq!(loss[0], expect[0]);
        assert_eq!(loss[1], expect[1]);

        unsafe { pgn_teacher_destroy(handle) };
    }

    #[test]
    fn null_and_invalid_arguments_are_rejected() {
        let mut handle: *mut PgnTeacher = ptr::null_mut();
        assert_eq!(
            unsafe { pgn_teacher_create_tiny(0, ptr::null_mut()) },
            PgnStatus::NullArgument
        );
        unsafe { pgn_teacher_create_tiny(0, &mut handle) };
        let mut loss = vec![0f32; 1];
        assert_eq!(
            unsafe { pgn_teacher_loss(handle, ptr::null(), ptr::null(), 1, 8, 8, loss.as_mut_ptr()) },
            PgnStatus::NullArgument
        );
        assert_eq!(
            unsafe {
                pgn_teacher_loss(handle, ptr::null(), ptr::null(), 0, 8, 8, loss.as_mut_ptr())
            },
            PgnStatus::InvalidArgument
        );
        // odd size at a pooling stage: invalid, with a readable message
        let img = vec![0f32; 3 * 10 * 10];
        let st = unsafe {
            pgn_teacher_loss(handle, img.as_ptr(), img.as_ptr(), 1, 10, 10, loss.as_mut_ptr())
        };
        assert_eq!(st, PgnStatus::InvalidArgument);
        let msg = unsafe { CStr::from_ptr(pgn_last_error_message()) };
        assert!(msg.to_str().unwrap().contains("even spatial size"));
        unsafe { pgn_teacher_destroy(handle) };
    }

    #[test]
    fn model_load_and_synthesize_through_the_c_abi() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = PgnModel::<f32>::new(
            BackboneSpec::resnet_desk(4, 4),
            HeadVariant::constrained_proxy(),
            IMAGENET_NORMALIZATION,
            3,
        )
        .unwrap();
        model.save(&path).unwrap();

        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        let mut handle: *mut PgnModelHandle = ptr::null_mut();
        assert_eq!(
            unsafe { pgn_model_load(cpath.as_ptr(), &mut handle) },
            PgnStatus::Ok
        );

        let (b, h, w) = (1usize, 16usize, 16usize);
        let n = b * 3 * h * w;
        let yhat: Vec<f32> = (0..n).map(|i| (i % 11) as f32 / 11.0).collect();
        let y: Vec<f32> = (0..n).map(|i| (i % 7) as f32 / 7.0).collect();
        let mut grad = vec![0f32; n];
        let mut proxy = vec![0f32; n];
        let mut has_proxy = 0i32;
        assert_eq!(
            unsafe {
                pgn_model_synthesize(
                    handle,
                    yhat.as_ptr(),
                    y.as_ptr(),
                    b,
                    h,
                    w,
                    grad.as_mut_ptr(),
                    proxy.as_mut_ptr(),
                    &mut has_proxy,
                )
            },
            PgnStatus::Ok
        );
        assert_eq!(has_proxy, 1);

        let (eg, ep) = model
            .synthesize(&tensor_from(&yhat, b, h, w), &tensor_from(&y, b, h, w))
            .unwrap();
        assert_eq!(grad, eg.as_slice().unwrap());
        assert_eq!(proxy, ep.unwrap().as_slice().unwrap());

        // missing checkpoint: Failed with a message naming the path
        let missing = CString::new("/nonexistent/m.ckpt").unwrap();
        let mut h2: *mut PgnModelHandle = ptr::null_mut();
        assert_eq!(
            unsafe { pgn_model_load(missing.as_ptr(), &mut h2) },
            PgnStatus::Failed
        );

        unsafe { pgn_model_destroy(handle) };
    }
}
