//! RIS-assisted joint communication and imaging: phase-schedule design,
//! iterative symbol and scene recovery, and a Monte-Carlo harness.

pub mod config;
pub mod decoder;
pub mod error;
pub mod io;
pub mod optimizer;
pub mod plot;
pub mod rng;
pub mod sbl;
pub mod sim;
pub mod scene;

pub use config::{ImagingGainNorm, NoiseRule, OrthoThreshold, PhaseResolution, SceneConfig};
pub use error::{Error, Result};
pub use optimizer::{optimize, optimize_continuous, optimize_discrete, OptimizerReport};
pub use scene::{
    cnr_inr, phase_matrix_apply, qpsk_index, steering_vector, synth_received, LinkModel,
    PhaseSchedule, ReceivedFrame, Scene, SceneTruth, SymbolFrame, C64, QPSK,
};
