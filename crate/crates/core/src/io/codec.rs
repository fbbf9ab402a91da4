//! The compress / decompress pipeline and directory evaluation.
//!
//! compress: pad → encode → round → freeze tables → range-code → container.
//! decompress: check model id → range-decode → decode → 8-bit snap → crop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use thiserror::Error;

use super::checkpoint::{hex, CheckpointError, ModelCheckpoint};
use super::container::{Container, ContainerError, ContainerHeader};
use super::image::{self as img, ImageIoError};
use crate::coder::{self, Bitstream, ChannelMajor, CoderError};
use crate::entropy::{freeze_cmf, CmfTable, EntropyError, DEFAULT_TAIL_MASS};
use crate::metrics::{self, ImagePair, MetricError};
use crate::model::{quantize, LatentTensor, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("model key mismatch: file was coded with model {expected}, this checkpoint is {found}")]
    ModelKey { expected: String, found: String },
    #[error("container does not match the model: {0}")]
    Incompatible(String),
    #[error("expected a 3 x H x W image, got {0:?}")]
    Shape(Vec<usize>),
    #[error("no readable images in {0}")]
    NoImages(PathBuf),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error("corrupt payload: {0}")]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// An in-memory coded image and its rate.
#[derive(Clone, Debug)]
pub struct CodedImage {
    pub container: Container,
    /// Header plus payload bits over true-extent pixels.
    pub bpp: f64,
    pub symbols: usize,
    pub escapes: usize,
}

impl CodedImage {
    pub fn total_bits(&self) -> u64 {
        self.container.total_bits()
    }
}

fn chw(image: &Tensor<f32>) -> Result<(usize, usize, usize), CodecError> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(CodecError::Shape(image.shape().to_vec())),
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn padded_extent(extent: usize, factor: usize) -> usize {
    extent.div_ceil(factor) * factor
}

/// Mirror-pads the bottom and right edges of a `C x H x W` image up to the
/// next multiple of `factor` (edge pixel not repeated). Returns `1 x C x H' x W'`.
pub fn reflect_pad(image: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>, CodecError> {
    let (c, h, w) = chw(image)?;
    let (ph, pw) = (padded_extent(h, factor), padded_extent(w, factor));
    let data = image.data();
    Ok(Tensor::from_fn(vec![1, c, ph, pw], |i| {
        let (ch, r, col) = (i / (ph * pw), (i / pw) % ph, i % pw);
        data[(ch * h + reflect(r, h)) * w + reflect(col, w)]
    }))
}

/// Top-left `h x w` window of a `1 x C x H' x W'` tensor, as `C x h x w`.
pub fn crop(padded: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let (_, c, ph, pw) = padded.dims4().expect("NCHW");
    let data = padded.data();
    Tensor::from_fn(vec![c, h, w], |i| {
        let (ch, r, col) = (i / (h * w), (i / w) % h, i % w);
        data[(ch * ph + r) * pw + col]
    })
}

fn tables(checkpoint: &ModelCheckpoint) -> Result<Vec<CmfTable>, CodecError> {
    Ok(freeze_cmf(&checkpoint.model.prior(), DEFAULT_TAIL_MASS)?)
}

/// Rounded latent of a `3 x H x W` image, padded as for coding.
pub fn quantized_latent(image: &Tensor<f32>, checkpoint: &ModelCheckpoint) -> Result<LatentTensor<f32>, CodecError> {
    let padded = reflect_pad(image, checkpoint.model.spec().downsample_factor)?;
    Ok(quantize(&checkpoint.model.encode(&padded)?))
}

/// encode → round → decode → 8-bit snap → crop, with no entropy coding.
pub fn reconstruct_in_memory(image: &Tensor<f32>, checkpoint: &ModelCheckpoint) -> Result<Tensor<f32>, CodecError> {
    let (_, h, w) = chw(image)?;
    let latent = quantized_latent(image, checkpoint)?;
    let decoded = checkpoint.model.decode(&latent)?;
    Ok(img::quantize_to_8bit(&crop(&decoded, h, w)))
}

pub fn compress_image(image: &Tensor<f32>, checkpoint: &ModelCheckpoint) -> Result<CodedImage, CodecError> {
    let (c, h, w) = chw(image)?;
    let spec = checkpoint.model.spec();
    if c != spec.input_channels {
        return Err(CodecError::Shape(image.shape().to_vec()));
    }
    let (width, height) = match (u32::try_from(w), u32::try_from(h)) {
        (Ok(w), Ok(h)) => (w, h),
        _ => return Err(CodecError::Shape(image.shape().to_vec())),
    };
    let latent = quantized_latent(image, checkpoint)?;
    let (_, _, lh, lw) = latent.values.dims4().expect("NCHW latent");
    let symbols = latent.symbols();
    let tables = tables(checkpoint)?;
    let escapes = symbols
        .iter()
        .enumerate()
        .filter(|&(i, &s)| tables[i / (lh * lw)].index_of(s).is_none())
        .count();
    let stream = coder::encode_symbols(
        &symbols,
        &ChannelMajor {
            tables: &tables,
            plane: lh * lw,
        },
    )?;
    let container = Container {
        header: ContainerHeader {
            model_id: checkpoint.model_id(),
            width,
            height,
            channels: c as u8,
            latent_channels: spec.latent_channels as u16,
            payload_bit_length: stream.bit_length,
        },
        payload: stream.bytes,
    };
    let bpp = metrics::bits_per_pixel(container.total_bits(), width, height);
    Ok(CodedImage {
        container,
        bpp,
        symbols: symbols.len(),
        escapes,
    })
}

/// Reconstruction at true extents, snapped to the 8-bit output grid.
pub fn decompress_image(container: &Container, checkpoint: &ModelCheckpoint) -> Result<Tensor<f32>, CodecError> {
    let header = &container.header;
    let id = checkpoint.model_id();
    if header.model_id != id {
        return Err(CodecError::ModelKey {
            expected: hex(&header.model_id),
            found: hex(&id),
        });
    }
    let spec = checkpoint.model.spec();
    if header.latent_channels as usize != spec.latent_channels || header.channels as usize != spec.input_channels {
        return Err(CodecError::Incompatible(format!(
            "header has {} channels / {} latent channels, model has {} / {}",
            header.channels, header.latent_channels, spec.input_channels, spec.latent_channels
        )));
    }
    let (h, w) = (header.height as usize, header.width as usize);
    if h == 0 || w == 0 {
        return Err(CodecError::Incompatible(format!("empty image extent {w}x{h}")));
    }
    let f = spec.downsample_factor;
    let (lh, lw) = (padded_extent(h, f) / f, padded_extent(w, f) / f);
    let count = spec.latent_channels * lh * lw;
    let tables = tables(checkpoint)?;
    let stream = Bitstream {
        bytes: container.payload.clone(),
        bit_length: header.payload_bit_length,
    };
    let symbols = coder::decode_symbols(&stream, &ChannelMajor { tables: &tables, plane: lh * lw }, count)?;
    let latent = LatentTensor::from_symbols(vec![1, spec.latent_channels, lh, lw], &symbols)?;
    let decoded = checkpoint.model.decode(&latent)?;
    Ok(img::quantize_to_8bit(&crop(&decoded, h, w)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressSummary {
    pub width: u32,
    pub height: u32,
    pub payload_bits: u64,
    pub total_bits: u64,
    pub bpp: f64,
    pub symbols: usize,
    pub escapes: usize,
}

pub fn compress_file(input: &Path, checkpoint: &ModelCheckpoint, output: &Path) -> Result<CompressSummary, CodecError> {
    let image = img::read_image(input)?;
    let coded = compress_image(&image, checkpoint)?;
    fs::write(output, coded.container.to_bytes()).map_err(|source| CodecError::Io {
        path: output.to_path_buf(),
        source,
    })?;
    let h = &coded.container.header;
    Ok(CompressSummary {
        width: h.width,
        height: h.height,
        payload_bits: h.payload_bit_length,
        total_bits: coded.total_bits(),
        bpp: coded.bpp,
        symbols: coded.symbols,
        escapes: coded.escapes,
    })
}

pub fn read_container(path: &Path) -> Result<Container, CodecError> {
    let bytes = fs::read(path).map_err(|source| CodecError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Container::from_bytes(&bytes)?)
}

/// Returns the container header of the decoded file.
pub fn decompress_file(input: &Path, checkpoint: &ModelCheckpoint, output: &Path) -> Result<ContainerHeader, CodecError> {
    let container = read_container(input)?;
    let image = decompress_image(&container, checkpoint)?;
    img::write_image(output, &image)?;
    Ok(container.header)
}

/// One evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEvaluation {
    pub name: String,
    pub bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<ImageEvaluation>,
    pub mean: ImageEvaluation,
}

pub fn evaluate_image(name: &str, image: &Tensor<f32>, checkpoint: &ModelCheckpoint) -> Result<ImageEvaluation, CodecError> {
    let coded = compress_image(image, checkpoint)?;
    let recon = decompress_image(&coded.container, checkpoint)?;
    let pair = ImagePair::new(image, &recon)?;
    let mse = metrics::mse(&pair);
    Ok(ImageEvaluation {
        name: name.to_owned(),
        bpp: coded.bpp,
        mse,
        psnr: metrics::psnr_from_mse(mse, 1.0).as_f64(),
        ssim: metrics::ssim(&pair)?,
    })
}

/// Arithmetic mean of every column.
pub fn mean_row(rows: &[ImageEvaluation]) -> ImageEvaluation {
    let n = rows.len() as f64;
    let avg = |f: fn(&ImageEvaluation) -> f64| rows.iter().map(f).sum::<f64>() / n;
    ImageEvaluation {
        name: "mean".into(),
        bpp: avg(|r| r.bpp),
        mse: avg(|r| r.mse),
        psnr: avg(|r| r.psnr),
        ssim: avg(|r| r.ssim),
    }
}

/// Codes every PNG/PPM in `dir` in name order. Unreadable files are skipped
/// with a warning; it is an error if none can be read.
pub fn evaluate_dir(dir: &Path, checkpoint: &ModelCheckpoint) -> Result<Evaluation, CodecError> {
    let mut rows = Vec::new();
    for path in img::list_images(dir)? {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match img::read_image(&path) {
            Ok(image) => rows.push(evaluate_image(&name, &image, checkpoint)?),
            Err(e) => warn!("skipping {}: {e}", path.display()),
        }
    }
    if rows.is_empty() {
        return Err(CodecError::NoImages(dir.to_path_buf()));
    }
    let mean = mean_row(&rows);
    Ok(Evaluation { rows, mean })
}

pub const EVALUATION_HEADER: &str = "image,bpp,mse,psnr,ssim";

fn fmt_psnr(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "inf".into()
    }
}

impl Evaluation {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{EVALUATION_HEADER}")?;
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            writeln!(out, "{},{},{},{},{}", r.name, r.bpp, r.mse, fmt_psnr(r.psnr), r.ssim)?;
        }
        Ok(())
    }
}
