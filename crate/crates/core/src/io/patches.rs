//! Random square patches from a set of RGB images.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::image::{list_images, read_image, ImageIoError};
use crate::tensor::Tensor;
use crate::training::BatchSampler;

#[derive(Clone, Debug)]
pub struct PatchSource {
    images: Vec<Tensor<f32>>,
    names: Vec<PathBuf>,
    patch_size: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum PatchError {
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("no images to sample patches from")]
    Empty,
    #[error("{name}: {height}x{width} is smaller than the {patch}x{patch} patch")]
    TooSmall {
        name: String,
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("expected 3 x H x W images, got {0:?}")]
    Shape(Vec<usize>),
}

impl PatchSource {
    /// Every PNG/PPM directly inside `dir`, in name order.
    pub fn from_dir(dir: &Path, patch_size: usize) -> Result<Self, PatchError> {
        let files = list_images(dir)?;
        Self::from_files(&files, patch_size)
    }

    pub fn from_files(files: &[PathBuf], patch_size: usize) -> Result<Self, PatchError> {
        let images = files
            .iter()
            .map(|f| read_image(f))
            .collect::<Result<Vec<_>, _>>()?;
        Self::build(images, files.to_vec(), patch_size)
    }

    pub fn from_images(images: Vec<Tensor<f32>>, patch_size: usize) -> Result<Self, PatchError> {
        let names = (0..images.len()).map(|i| PathBuf::from(format!("#{i}"))).collect();
        Self::build(images, names, patch_size)
    }

    fn build(images: Vec<Tensor<f32>>, names: Vec<PathBuf>, patch_size: usize) -> Result<Self, PatchError> {
        if images.is_empty() {
            return Err(PatchError::Empty);
        }
        for (img, name) in images.iter().zip(&names) {
            let [3, h, w] = *img.shape() else {
                return Err(PatchError::Shape(img.shape().to_vec()));
            };
            if h < patch_size || w < patch_size {
                return Err(PatchError::TooSmall {
                    name: name.display().to_string(),
                    height: h,
                    width: w,
                    patch: patch_size,
                });
            }
        }
        Ok(Self {
            images,
            names,
            patch_size,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn names(&self) -> &[PathBuf] {
        &self.names
    }

    pub fn images(&self) -> &[Tensor<f32>] {
        &self.images
    }

    /// The `3 x p x p` crop of image `index` at (`top`, `left`).
    pub fn crop(&self, index: usize, top: usize, left: usize) -> Tensor<f32> {
        let img = &self.images[index];
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let p = self.patch_size;
        assert!(top + p <= h && left + p <= w, "crop outside image");
        let data = img.data();
        Tensor::from_fn(vec![3, p, p], |i| {
            let (c, r, col) = (i / (p * p), (i / p) % p, i % p);
            data[(c * h + top + r) * w + left + col]
        })
    }

    /// Uniform image, uniform position.
    pub fn sample_patch(&self, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let index = rng.random_range(0..self.images.len());
        let (h, w) = (self.images[index].shape()[1], self.images[index].shape()[2]);
        let top = rng.random_range(0..=h - self.patch_size);
        let left = rng.random_range(0..=w - self.patch_size);
        self.crop(index, top, left)
    }
}

impl BatchSampler for PatchSource {
    fn sample_batch(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let p = self.patch_size;
        let mut data = Vec::with_capacity(batch_size * 3 * p * p);
        for _ in 0..batch_size {
            data.extend_from_slice(self.sample_patch(rng).data());
        }
        Tensor::new(vec![batch_size, 3, p, p], data).expect("sized above")
    }

    fn patch_size(&self) -> usize {
        self.patch_size
    }
}
