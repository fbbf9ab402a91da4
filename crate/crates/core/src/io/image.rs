//! 8-bit RGB image files (PNG, binary PPM) to and from `3 x H x W` tensors
//! with values in [0, 1].

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, ImageReader, RgbImage};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a decodable PNG/PPM image: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: unsupported pixel format {format}; only 8-bit RGB is accepted")]
    PixelFormat { path: PathBuf, format: String },
    #[error("{path}: unsupported output extension (use .png or .ppm)")]
    OutputFormat { path: PathBuf },
    #[error("expected a 3 x H x W tensor, got {0:?}")]
    Shape(Vec<usize>),
    #[error("{path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

/// `round(255 v)` clamped to `[0, 255]`; NaN maps to 0.
pub fn quantize_pixel(v: f32) -> u8 {
    let scaled = (v * 255.0).round();
    if scaled.is_nan() {
        0
    } else {
        scaled.clamp(0.0, 255.0) as u8
    }
}

/// Snaps every value onto the 8-bit output grid (`k / 255`).
pub fn quantize_to_8bit(image: &Tensor<f32>) -> Tensor<f32> {
    image.map(|v| quantize_pixel(v) as f32 / 255.0)
}

/// Interleaved row-major RGB8 to `3 x height x width`. `None` when the
/// buffer length does not match the extents.
pub fn rgb8_to_tensor(raw: &[u8], width: usize, height: usize) -> Option<Tensor<f32>> {
    let plane = width.checked_mul(height)?;
    if plane.checked_mul(3)? != raw.len() {
        return None;
    }
    Some(Tensor::from_fn(vec![3, height, width], |i| {
        let (c, p) = (i / plane, i % plane);
        raw[p * 3 + c] as f32 / 255.0
    }))
}

/// Interleaved row-major RGB8 of a `3 x H x W` tensor, rounded per pixel.
pub fn tensor_to_rgb8(image: &Tensor<f32>) -> Result<Vec<u8>, ImageIoError> {
    let [3, h, w] = *image.shape() else {
        return Err(ImageIoError::Shape(image.shape().to_vec()));
    };
    let plane = h * w;
    let data = image.data();
    let mut raw = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for c in 0..3 {
            raw.push(quantize_pixel(data[c * plane + p]));
        }
    }
    Ok(raw)
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    rgb8_to_tensor(img.as_raw(), img.width() as usize, img.height() as usize).expect("RgbImage buffer matches extents")
}

pub fn tensor_to_rgb(image: &Tensor<f32>) -> Result<RgbImage, ImageIoError> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let raw = tensor_to_rgb8(image)?;
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to extents"))
}

/// Decodes PNG or P6 bytes; `origin` only labels errors.
pub fn decode_image_bytes(bytes: &[u8], origin: &Path) -> Result<Tensor<f32>, ImageIoError> {
    let decoded = ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|source| ImageIoError::Read {
            path: origin.to_path_buf(),
            source,
        })?;
    match decoded.format() {
        Some(ImageFormat::Png | ImageFormat::Pnm) => {}
        _ => {
            return Err(ImageIoError::Decode {
                path: origin.to_path_buf(),
                source: image::ImageError::Unsupported(image::error::UnsupportedError::from(
                    image::error::ImageFormatHint::Unknown,
                )),
            })
        }
    }
    let dynamic = decoded.decode().map_err(|source| ImageIoError::Decode {
        path: origin.to_path_buf(),
        source,
    })?;
    match dynamic {
        DynamicImage::ImageRgb8(rgb) => Ok(rgb_to_tensor(&rgb)),
        other => Err(ImageIoError::PixelFormat {
            path: origin.to_path_buf(),
            format: format!("{:?}", other.color()),
        }),
    }
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>, ImageIoError> {
    let bytes = fs::read(path).map_err(|source| ImageIoError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    decode_image_bytes(&bytes, path)
}

fn write_ppm(out: impl Write, img: &RgbImage) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    write!(out, "P6\n{} {}\n255\n", img.width(), img.height())?;
    out.write_all(img.as_raw())?;
    out.flush()
}

/// Writes an 8-bit PNG or PPM chosen by the file extension.
pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<(), ImageIoError> {
    let rgb = tensor_to_rgb(image)?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let write_err = |source| ImageIoError::Write {
        path: path.to_path_buf(),
        source,
    };
    match ext.as_deref() {
        Some("png") => rgb
            .save_with_format(path, ImageFormat::Png)
            .map_err(|source| ImageIoError::Encode {
                path: path.to_path_buf(),
                source,
            }),
        Some("ppm") => {
            let file = fs::File::create(path).map_err(write_err)?;
            write_ppm(file, &rgb).map_err(write_err)
        }
        _ => Err(ImageIoError::OutputFormat {
            path: path.to_path_buf(),
        }),
    }
}

/// PNG/PPM files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, ImageIoError> {
    let read_err = |source| ImageIoError::Read {
        path: dir.to_path_buf(),
        source,
    };
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(read_err)? {
        let path = entry.map_err(read_err)?.path();
        let known = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"));
        if known && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}
