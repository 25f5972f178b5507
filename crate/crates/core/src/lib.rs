//! Patch descriptors trained with displacement-aware triplet sampling, and
//! the matching, densification and evaluation pipeline around them.

pub mod cli;
pub mod data;
pub mod densify;
pub mod eval;
pub mod loss;
pub mod mnist;
pub mod net;
pub mod nnf;
pub mod sampler;
pub mod train;
pub mod types;

use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Any failure surfaced by the library, tagged with the module it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("image: {0}")]
    Image(#[from] types::ImageError),
    #[error("net: {0}")]
    Net(#[from] net::NetError),
    #[error("loss: {0}")]
    Loss(#[from] loss::LossError),
    #[error("sampler: {0}")]
    Sampler(#[from] sampler::SamplerError),
    #[error("nnf: {0}")]
    Nnf(#[from] nnf::NnfError),
    #[error("densify: {0}")]
    Densify(#[from] densify::DensifyError),
    #[error("eval: {0}")]
    Eval(#[from] eval::EvalError),
    #[error("data: {0}")]
    Data(#[from] data::DataError),
    #[error("train: {0}")]
    Train(#[from] train::TrainError),
    #[error("mnist: {0}")]
    Mnist(#[from] mnist::MnistError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}
