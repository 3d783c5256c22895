//! File formats: PGM images, PPM overlays, dataset manifests, synthetic
//! data generation, and binary checkpoints.

pub mod checkpoint;
pub mod manifest;
pub mod overlay;
pub mod pgm;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use manifest::{load_manifest, Case, DatasetManifest, ManifestRow};
pub use overlay::render_overlay;
pub use pgm::{read_pgm_image, read_pgm_mask, write_pgm};
pub use synth::synth_dataset;
