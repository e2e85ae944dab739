//! Multi-granularity image features and frozen tabular embeddings.

pub mod image;
pub mod shape;
pub mod tabular;

pub use image::{encode_image_multistage, image_to_tokens, GranularFeatureSet, ImageEncoder};
pub use shape::{stage_shape, SpatialMode, StageShape, StageShapeLaw, N_STAGES};
pub use tabular::{
    embed_tabular, HashEmbedder, PrecomputedEmbedder, SentenceEmbedder, TabularEmbedding,
    EMBED_DIM,
};
