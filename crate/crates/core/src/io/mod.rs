//! File formats and ingestion: images, patches, the coded container, model
//! checkpoints, config files, and the compress/decompress pipeline.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod container;
pub mod image;
pub mod patches;

pub use checkpoint::{CheckpointError, ModelCheckpoint, TrainingMetadata};
pub use codec::{CodecError, CodedImage};
pub use container::{Container, ContainerError, ContainerHeader};
pub use image::ImageIoError;
pub use patches::PatchSource;
