//! Feature extractors, classifiers and projection heads.

pub mod backbone;
pub mod classifier;
pub mod linear;

pub use backbone::{BackboneSpec, ConvBlock, Extractor, Features, NormMode};
pub use classifier::ExpandableClassifier;
pub use linear::{Linear, Mlp};
