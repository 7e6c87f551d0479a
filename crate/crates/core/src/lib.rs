//! Open-set classification with an intra-spread / inter-separation embedding
//! loss.
//!
//! A feed-forward network maps inputs to a low-dimensional embedding trained
//! so that instances of a class cluster tightly around their mean while the
//! closest pair of class means is pushed apart. At test time the distance to
//! the nearest class mean is an outlier score; scores above a threshold fitted
//! on the training data are labeled unknown.
//!
//! Everything numeric is generic over [`Scalar`] (`f64` or `f32`). The
//! aliases below fix the scalar type for common use.

pub mod data;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod openset;
pub mod rng;
pub mod scalar;
pub mod training;

pub use scalar::Scalar;

pub type Dataset = data::Dataset<f64>;
pub type Network = nn::Network<f64>;
pub type TrainedModel = training::TrainedModel<f64>;
pub type ClassMeans = losses::ClassMeans<f64>;
pub type OpenSetSplit = data::OpenSetSplit<f64>;
pub type OpenPrediction = openset::OpenPrediction<f64>;

pub type Dataset32 = data::Dataset<f32>;
pub type Network32 = nn::Network<f32>;
pub type TrainedModel32 = training::TrainedModel<f32>;
pub type ClassMeans32 = losses::ClassMeans<f32>;

/// Any error raised by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    ModelFile(#[from] training::ModelFileError),
    #[error(transparent)]
    OpenSet(#[from] openset::OpenSetError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}
