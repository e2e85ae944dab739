//! Samples, templating, synthetic data, augmentation and on-disk formats.

pub mod augment;
pub mod blob;
pub mod dataset;
pub mod sample;
pub mod synth;
pub mod template;

pub use augment::{augment, augment_images, AugmentPolicy, EraseParams};
pub use blob::TensorBlob;
pub use dataset::{load_dataset, make_batches, DatasetManifest, ModalitySpec, SampleEntry};
pub use sample::{Image, MultimodalSample, TabularRecord};
pub use synth::{generate_synthetic_dataset, synthesize, SynthConfig};
pub use template::{render_template, standard_attributes, TemplateTable, FALLBACK_TEMPLATE};
