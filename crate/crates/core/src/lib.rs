//! Origin-destination flow forecasting over city graphs.

pub mod baseline;
pub mod config;
pub mod error;
pub mod flow;
pub mod gcn;
pub mod geo;
pub mod gravity;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod opt;
pub mod seq;
pub mod spectral;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;

pub use config::{FeatureMode, RunConfig, Variant};
pub use error::{Error, Result};
pub use flow::{FlowRecord, FlowSeries, NormalizeMode};
pub use geo::{City, CitySet, DistanceMatrix, GeographyGraph};
pub use gravity::CityVariables;
pub use metrics::Metrics;
pub use model::{ForecastOutput, ModelState};
pub use synth::{synthesize, SynthConfig, Synthesis};
pub use tensor::Tensor;
pub use train::{train, TrainResult};
