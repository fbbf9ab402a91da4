//! C interface to the `nvc` codec.
//!
//! Every exported function is prefixed with `nvc_`, returns an [`NvcStatus`]
//! and never unwinds across the boundary. On failure a message is kept per
//! thread and can be read with [`nvc_last_error`].
//!
//! Ownership: handles and buffers returned through out-pointers belong to the
//! caller and must be released with the matching `*_free` function.

#![deny(unsafe_op_in_unsafe_fn)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nvc::io::checkpoint::CheckpointError;
use nvc::io::codec::{self, CodecError};
use nvc::io::image::{rgb8_to_tensor, tensor_to_rgb8};
use nvc::io::{Container, ModelCheckpoint};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NvcStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// Bad extents, buffer length or non-UTF-8 path.
    InvalidArgument = 2,
    /// File could not be read or written.
    Io = 3,
    /// Malformed checkpoint, container or image.
    Format = 4,
    /// The coded image was produced by a different model.
    ModelMismatch = 5,
    /// A Rust panic was caught; the handle should not be reused.
    Internal = 6,
}

/// Loaded checkpoint. Opaque to C.
pub struct NvcModel {
    checkpoint: ModelCheckpoint,
    id: [u8; 32],
}

/// Heap bytes owned by the library. Release with [`nvc_buffer_free`].
#[repr(C)]
pub struct NvcBuffer {
    pub data: *mut u8,
    pub len: usize,
}

/// Interleaved row-major RGB8 pixels, `3 * width * height` bytes. Release
/// with [`nvc_image_free`].
#[repr(C)]
pub struct NvcImage {
    pub data: *mut u8,
    pub len: usize,
    pub width: u32,
    pub height: u32,
}

struct Failure(NvcStatus, String);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NvcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NvcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            NvcStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(NvcStatus::NullArgument, format!("{what} is null"))
}

fn checkpoint_failure(e: CheckpointError) -> Failure {
    let status = match e {
        CheckpointError::Read { .. } | CheckpointError::Write { .. } => NvcStatus::Io,
        _ => NvcStatus::Format,
    };
    Failure(status, e.to_string())
}

fn codec_failure(e: CodecError) -> Failure {
    let status = match &e {
        CodecError::ModelKey { .. } => NvcStatus::ModelMismatch,
        CodecError::Io { .. } => NvcStatus::Io,
        CodecError::Shape(_) | CodecError::NoImages(_) => NvcStatus::InvalidArgument,
        CodecError::Checkpoint(CheckpointError::Read { .. } | CheckpointError::Write { .. }) => NvcStatus::Io,
        CodecError::Image(nvc::io::ImageIoError::Read { .. } | nvc::io::ImageIoError::Write { .. }) => NvcStatus::Io,
        _ => NvcStatus::Format,
    };
    Failure(status, e.to_string())
}

/// # Safety
/// `p` is null or a valid nul-terminated string.
unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure(NvcStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// # Safety
/// `data` is null or valid for `len` reads.
unsafe fn bytes_arg<'a>(data: *const u8, len: usize, what: &str) -> Result<&'a [u8], Failure> {
    if data.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts(data, len) })
}

fn model_ref<'a>(model: *const NvcModel) -> Result<&'a NvcModel, Failure> {
    // SAFETY: non-null handles only come from `nvc_model_*` constructors.
    unsafe { model.as_ref() }.ok_or_else(|| null("model"))
}

fn leak(bytes: Vec<u8>) -> (*mut u8, usize) {
    let boxed = bytes.into_boxed_slice();
    let len = boxed.len();
    (Box::into_raw(boxed) as *mut u8, len)
}

fn into_handle(checkpoint: ModelCheckpoint, out: *mut *mut NvcModel) {
    let id = checkpoint.model_id();
    // SAFETY: caller checked `out` for null.
    unsafe { *out = Box::into_raw(Box::new(NvcModel { checkpoint, id })) };
}

/// Static version string, e.g. `"0.1.0"`.
#[no_mangle]
pub extern "C" fn nvc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null after a
/// success. Valid until the next `nvc_` call on the same thread.
#[no_mangle]
pub extern "C" fn nvc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn nvc_model_load(path: *const c_char, out: *mut *mut NvcModel) -> NvcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { path_arg(path, "path") }?;
        into_handle(ModelCheckpoint::load(&path).map_err(checkpoint_failure)?, out);
        Ok(())
    })
}

/// Parses checkpoint bytes held in memory.
///
/// # Safety
/// `data` is valid for `len` reads; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn nvc_model_from_bytes(data: *const u8, len: usize, out: *mut *mut NvcModel) -> NvcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = unsafe { bytes_arg(data, len, "data") }?;
        into_handle(ModelCheckpoint::from_bytes(bytes).map_err(checkpoint_failure)?, out);
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` came from `nvc_model_load` / `nvc_model_from_bytes` and is not
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nvc_model_free(model: *mut NvcModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Copies the 32-byte model identifier into `out`.
///
/// # Safety
/// `out` is writable for 32 bytes.
#[no_mangle]
pub unsafe extern "C" fn nvc_model_id(model: *const NvcModel, out: *mut u8) -> NvcStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe { ptr::copy_nonoverlapping(m.id.as_ptr(), out, m.id.len()) };
        Ok(())
    })
}

/// Latent channel count of the model.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn nvc_model_latent_channels(model: *const NvcModel, out: *mut u32) -> NvcStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe { *out = m.checkpoint.model.spec().latent_channels as u32 };
        Ok(())
    })
}

/// Compresses interleaved RGB8 pixels into a coded container.
///
/// # Safety
/// `rgb` is valid for `3 * width * height` reads; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn nvc_compress_rgb8(
    model: *const NvcModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    out: *mut NvcBuffer,
) -> NvcStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (w, h) = (width as usize, height as usize);
        if w == 0 || h == 0 {
            return Err(Failure(NvcStatus::InvalidArgument, format!("empty extent {width}x{height}")));
        }
        let len = w
            .checked_mul(h)
            .and_then(|p| p.checked_mul(3))
            .ok_or_else(|| Failure(NvcStatus::InvalidArgument, "extent overflow".into()))?;
        let raw = unsafe { bytes_arg(rgb, len, "rgb") }?;
        let image = rgb8_to_tensor(raw, w, h).expect("length checked");
        let coded = codec::compress_image(&image, &m.checkpoint).map_err(codec_failure)?;
        let (data, len) = leak(coded.container.to_bytes());
        unsafe { *out = NvcBuffer { data, len } };
        Ok(())
    })
}

/// Decodes a coded container into interleaved RGB8 pixels.
///
/// # Safety
/// `data` is valid for `len` reads; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn nvc_decompress_rgb8(
    model: *const NvcModel,
    data: *const u8,
    len: usize,
    out: *mut NvcImage,
) -> NvcStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = unsafe { bytes_arg(data, len, "data") }?;
        let container = Container::from_bytes(bytes).map_err(|e| codec_failure(e.into()))?;
        let image = codec::decompress_image(&container, &m.checkpoint).map_err(codec_failure)?;
        let raw = tensor_to_rgb8(&image).map_err(|e| codec_failure(e.into()))?;
        let (data, len) = leak(raw);
        unsafe {
            *out = NvcImage {
                data,
                len,
                width: container.header.width,
                height: container.header.height,
            }
        };
        Ok(())
    })
}

/// File-to-file compression (PNG or binary PPM input).
///
/// # Safety
/// Paths are nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn nvc_compress_file(
    model: *const NvcModel,
    input: *const c_char,
    output: *const c_char,
) -> NvcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (input, output) = unsafe { (path_arg(input, "input")?, path_arg(output, "output")?) };
        codec::compress_file(&input, &m.checkpoint, &output).map_err(codec_failure)?;
        Ok(())
    })
}

/// File-to-file decompression; the output extension picks PNG or PPM.
///
/// # Safety
/// Paths are nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn nvc_decompress_file(
    model: *const NvcModel,
    input: *const c_char,
    output: *const c_char,
) -> NvcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (input, output) = unsafe { (path_arg(input, "input")?, path_arg(output, "output")?) };
        codec::decompress_file(&input, &m.checkpoint, &output).map_err(codec_failure)?;
        Ok(())
    })
}

/// Releases a buffer and resets it to empty. Null is ignored.
///
/// # Safety
/// `buffer` was filled by this library and not freed since.
#[no_mangle]
pub unsafe extern "C" fn nvc_buffer_free(buffer: *mut NvcBuffer) {
    if let Some(b) = unsafe { buffer.as_mut() } {
        if !b.data.is_null() {
            drop(unsafe { Box::from_raw(ptr::slice_from_raw_parts_mut(b.data, b.len)) });
        }
        b.data = ptr::null_mut();
        b.len = 0;
    }
}

/// Releases an image and resets it to empty. Null is ignored.
///
/// # Safety
/// `image` was filled by this library and not freed since.
#[no_mangle]
pub unsafe extern "C" fn nvc_image_free(image: *mut NvcImage) {
    if let Some(img) = unsafe { image.as_mut() } {
        if !img.data.is_null() {
            drop(unsafe { Box::from_raw(ptr::slice_from_raw_parts_mut(img.data, img.len)) });
        }
        img.data = ptr::null_mut();
        img.len = 0;
        img.width = 0;
        img.height = 0;
    }
}
