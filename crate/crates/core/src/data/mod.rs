//! Synthetic shapes, augmentation, density dropout and dataset manifests.

mod augment;
mod dataset;
mod shapes;

pub use augment::{augment, density_dropout, input_dropout, AugmentationConfig};
pub use dataset::{generate_dataset, read_manifest, write_dataset, write_manifest, DatasetSpec, Split, MANIFEST_HEADER};
pub use shapes::{generate, Family, ShapeSpec};

#[cfg(test)]
mod tests;
