//! Dense-trajectory action recognition with stacked convolutional ISA features,
//! Fisher vector encoding, linear SVMs and iterative re-ranking.

use std::path::{Path, PathBuf};

pub mod bench;
pub mod classify;
pub mod config;
pub mod container;
pub mod convisa;
pub mod descriptors;
pub mod encoding;
pub mod flow;
pub mod isa;
pub mod manifest;
pub mod mir;
pub mod pca;
pub mod pipeline;
pub mod trajectory;
pub mod video;

use classify::ClassifyError;
use container::ContainerError;
use convisa::ConvIsaError;
use encoding::EncodingError;
use flow::FlowError;
use isa::IsaError;
use mir::MirError;
use pca::PcaError;
use video::VideoError;

/// Top-level error for orchestration code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("{0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Isa(#[from] IsaError),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    ConvIsa(#[from] ConvIsaError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Mir(#[from] MirError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status: 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Isa(e) => isa_code(e),
            Error::Pca(e) => pca_code(e),
            Error::ConvIsa(ConvIsaError::Isa(e)) => isa_code(e),
            Error::ConvIsa(ConvIsaError::Pca(e)) => pca_code(e),
            Error::ConvIsa(ConvIsaError::Geometry(_) | ConvIsaError::Chain(_)) => 1,
            Error::Encoding(EncodingError::Collapsed(_) | EncodingError::Numeric(_)) => 3,
            Error::Encoding(EncodingError::Pca(e)) => pca_code(e),
            Error::Classify(ClassifyError::NonFinite(_)) => 3,
            Error::Mir(MirError::NonFinite) => 3,
            Error::Mir(MirError::Params(_)) => 1,
            _ => 2,
        }
    }
}

fn isa_code(e: &IsaError) -> i32 {
    match e {
        IsaError::Diverged { .. } | IsaError::RankDeficient(_) | IsaError::Linalg(_) => 3,
        IsaError::InvalidOptions(_) => 1,
        _ => 2,
    }
}

fn pca_code(e: &PcaError) -> i32 {
    match e {
        PcaError::ZeroCovariance | PcaError::Linalg(_) => 3,
        _ => 2,
    }
}
