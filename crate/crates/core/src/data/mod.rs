//! Videos, binary file formats, dataset manifests and the synthetic
//! contracting-heart phantom.

pub mod format;
mod manifest;
mod phantom;
mod video;

pub use manifest::{Manifest, ManifestEntry, Sample, Split};
pub use phantom::{analytic_mask, generate_phantom, sample_params, Intensities, Phantom, PhantomParams, Population};
pub use video::{preprocess, Preprocessed, Video};

#[cfg(test)]
mod tests;
