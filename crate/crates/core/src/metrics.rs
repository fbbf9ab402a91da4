//! MSE, PSNR, SSIM and bits-per-pixel.
//!
//! SSIM uses 8x8 uniform windows at stride 4, computed per channel and
//! averaged, with the usual `c1 = (0.01 L)^2`, `c2 = (0.03 L)^2`.

use std::fmt;

use thiserror::Error;

use crate::tensor::{Real, Tensor};

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("expected a CxHxW image, got {0:?}")]
    NotAnImage(Vec<usize>),
    #[error("image {height}x{width} is smaller than the {window}x{window} SSIM window")]
    TooSmall {
        height: usize,
        width: usize,
        window: usize,
    },
}

/// Reference and test image, `C x H x W` (a leading batch of 1 is accepted).
#[derive(Clone, Copy, Debug)]
pub struct ImagePair<'a, T> {
    pub reference: &'a Tensor<T>,
    pub test: &'a Tensor<T>,
    pub dynamic_range: f64,
}

impl<'a, T: Real> ImagePair<'a, T> {
    /// Pair of unit-range images.
    pub fn new(reference: &'a Tensor<T>, test: &'a Tensor<T>) -> Result<Self, MetricError> {
        Self::with_range(reference, test, 1.0)
    }

    pub fn with_range(reference: &'a Tensor<T>, test: &'a Tensor<T>, dynamic_range: f64) -> Result<Self, MetricError> {
        if reference.shape() != test.shape() {
            return Err(MetricError::ShapeMismatch(
                reference.shape().to_vec(),
                test.shape().to_vec(),
            ));
        }
        Ok(Self {
            reference,
            test,
            dynamic_range,
        })
    }

    fn chw(&self) -> Result<(usize, usize, usize), MetricError> {
        match *self.reference.shape() {
            [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
            _ => Err(MetricError::NotAnImage(self.reference.shape().to_vec())),
        }
    }
}

/// Peak signal-to-noise ratio, infinite for identical images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Db(f64),
    Infinite,
}

impl Psnr {
    /// Decibels, with `f64::INFINITY` for [`Psnr::Infinite`].
    pub fn as_f64(self) -> f64 {
        match self {
            Psnr::Db(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

pub fn mse<T: Real>(pair: &ImagePair<'_, T>) -> f64 {
    let n = pair.reference.len();
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = pair
        .reference
        .data()
        .iter()
        .zip(pair.test.data())
        .map(|(a, b)| {
            let d = a.to_f64().unwrap() - b.to_f64().unwrap();
            d * d
        })
        .sum();
    sum / n as f64
}

pub fn psnr_from_mse(mse: f64, dynamic_range: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Db(20.0 * (dynamic_range / mse.sqrt()).log10())
    }
}

pub fn psnr<T: Real>(pair: &ImagePair<'_, T>) -> Psnr {
    psnr_from_mse(mse(pair), pair.dynamic_range)
}

pub fn ssim<T: Real>(pair: &ImagePair<'_, T>) -> Result<f64, MetricError> {
    let (channels, height, width) = pair.chw()?;
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            height,
            width,
            window: SSIM_WINDOW,
        });
    }
    let l = pair.dynamic_range;
    let c1 = (0.01 * l) * (0.01 * l);
    let c2 = (0.03 * l) * (0.03 * l);
    let x = pair.reference.data();
    let y = pair.test.data();
    let count = (SSIM_WINDOW * SSIM_WINDOW) as f64;

    let mut per_channel = 0.0;
    for c in 0..channels {
        let base = c * height * width;
        let mut acc = 0.0;
        let mut windows = 0usize;
        for top in (0..=height - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            for left in (0..=width - SSIM_WINDOW).step_by(SSIM_STRIDE) {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for r in top..top + SSIM_WINDOW {
                    let row = base + r * width;
                    for i in row + left..row + left + SSIM_WINDOW {
                        let (a, b) = (x[i].to_f64().unwrap(), y[i].to_f64().unwrap());
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let (mx, my) = (sx / count, sy / count);
                let vx = (sxx / count - mx * mx).max(0.0);
                let vy = (syy / count - my * my).max(0.0);
                let cov = sxy / count - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                windows += 1;
            }
        }
        per_channel += acc / windows as f64;
    }
    Ok(per_channel / channels as f64)
}

/// `bits / (width * height)`.
pub fn bits_per_pixel(bits: u64, width: u32, height: u32) -> f64 {
    bits as f64 / (width as f64 * height as f64)
}
