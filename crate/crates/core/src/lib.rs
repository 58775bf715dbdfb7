//! Discrete-event digital twin of an automated textile sorting line.
//!
//! Garments travel conveyor → hyperspectral camera (capture and
//! classification) → robotic arm → laser segmentation → material bin. The
//! crate provides the domain types, a deterministic event kernel, the station
//! models, classifier emulation, a metrics engine and an append-only run
//! store.

pub mod classification;
pub mod domain;
pub mod evalmetrics;
pub mod kernel;
pub mod repository;
pub mod rng;
pub mod stations;

pub use classification::{
    ClassificationResult, Classifier, OracleClassifier, StochasticClassifier,
};
pub use domain::{ClassifierProfile, Garment, MaterialClass, ScenarioConfig, SpectralCube};
pub use kernel::{EventTrace, SimEvent, Station};
pub use rng::{derive_stream, RandomStream};
pub use stations::{run_scenario, simulate, PipelineModel, RunReport};
