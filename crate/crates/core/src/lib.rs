//! Temporal forgery localization over fused video/audio feature sequences
//! with deformable selective state-space models.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dcssm;
pub mod deform;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod relay;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
