//! Multi-modal video classification with learnable VLAD pooling, a mixture
//! of experts head and context gating.

pub mod checkpoint;
pub mod config;
pub mod datastore;
pub mod error;
pub mod eval;
pub mod head;
pub mod introspect;
pub mod model;
pub mod netvlad;
pub mod preprocess;
pub mod rng;
pub mod sampling;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use config::RunConfig;
pub use datastore::{FeatureSequence, Manifest, ModalitySpec, VideoFeatures, VideoRecord};
pub use error::{Error, Result};
pub use eval::{MapReport, Prediction, PredictionSet};
pub use model::{AggregationModel, ModelShape};
pub use preprocess::{PreprocessModel, Quantizer};
pub use rng::SeededRng;
pub use tensor::{Matrix, Tensor};
