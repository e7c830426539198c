//! Animatable Gaussian head avatars from a handful of unposed images.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`optim`], [`checkpoint`], [`nn`]: a small
//!   reverse-mode differentiable tensor layer and its training utilities.
//! - [`rig`]: a procedural parametric head with blendshapes, skinning and a UV layout.
//! - [`recon`]: the feed-forward reconstruction network (images to UV Gaussian maps).
//! - [`dynamic`]: the expression-conditioned UNet that deforms the static maps.
//! - [`render`]: a differentiable Gaussian splatting rasterizer.
//! - [`loss`]: photometric, structural and perceptual objectives.
//! - [`data`]: synthetic dataset generation, retrieval-based sampling and PCA.
//! - [`pipeline`]: training, refinement, animation and benchmarking drivers.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod dynamic;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod recon;
pub mod render;
pub mod rig;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("non-finite gradient flowing out of {op}")]
    NonFiniteGrad { op: String },
    #[error("backward requested for a value this record never evaluated")]
    BackwardBeforeForward,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("UV triangles {} and {} overlap at texel {texel:?}", faces.0, faces.1)]
    Overlap { faces: (usize, usize), texel: (usize, usize) },
    #[error("unknown region '{0}'")]
    UnknownRegion(String),
    #[error("skinning weights of vertex {vertex} are not convex (sum {sum})")]
    NonConvexWeights { vertex: usize, sum: f64 },
    #[error("optimization diverged: loss {loss} exceeds {limit}")]
    Diverged { loss: f64, limit: f64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {detail}")]
    Image { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { what, detail: detail.into() }
    }
}
