pub mod assignment;
pub mod calibration;
pub mod density;
pub mod dynamics;
pub mod eikonal;
pub mod error;
pub mod forces;
pub mod harness;
pub mod initial;
pub mod measures;
pub mod neighbors;
pub mod params;
pub mod rng;
pub mod stats;

pub use dynamics::{FieldTrajectory, CoupledRun, CoupledState, Ensemble, FieldEnsemble, RunOptions};
pub use eikonal::{EikonalField, Rect, Scenario, Target};
pub use error::{Error, Result};
pub use initial::InitialSpec;
pub use measures::{DistanceBracket, EmpiricalMeasure};
pub use params::ModelParams;
pub use stats::{ExponentConfig, RateReport};
