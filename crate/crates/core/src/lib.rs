//! Writer retrieval on handwriting images: contour sampling, RootSIFT
//! descriptors, VLAD and NetVLAD encodings, PCA whitening, cosine ranking and
//! the experiment protocols built on them.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`, which is what the pipeline uses.

pub mod aggregation;
pub mod codebook;
pub mod config;
pub mod corpus;
pub mod descriptors;
pub mod encoding;
pub mod experiments;
pub mod error;
pub mod persist;
pub mod retrieval;
pub mod sampling;
pub mod scalar;
pub mod wrdesc;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Real = f64;
pub type Descriptors = descriptors::LocalDescriptorSet<Real>;
pub type Codebook = codebook::Codebook<Real>;
pub type Vlad = encoding::VladVector<Real>;
pub type NetVlad = encoding::NetVladParams<Real>;
pub type Whitening = aggregation::WhiteningTransform<Real>;
pub type Global = aggregation::GlobalDescriptor<Real>;
