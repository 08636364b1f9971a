//! Shape-prior memory: a mask autoencoder, per-category K-Means codebook
//! over its embeddings, nearest-prior retrieval and shape similarity.

mod autoencoder;
mod codebook;
pub mod kmeans;

pub use autoencoder::{train_autoencoder, AutoencoderConfig, AutoencoderReport, MaskAutoencoder};
pub use codebook::{
    amodal_shape_masks, build_codebook, mask_similarity, pca_2d, CategoryMeta, CodebookMeta, PriorMatch, ShapeCodebook,
    SimilarityNorm, CODEBOOK_MAGIC, CODEBOOK_VERSION,
};
