//! Commutation-frame calibration, regulation and learned feedforward for a
//! simulated moving-magnet planar actuator.
//!
//! The crate is organized bottom-up: [`plant`] holds the mover and the
//! surrogate electromagnetic coupling, [`control`] the position loop and the
//! commutation regulator, [`trajectory`] the scan profile generator, [`sim`]
//! the closed-loop engine and experiment protocols. [`calibrate`] and
//! [`gpff`] build the static and learned corrections on top of it, and
//! [`metrics`] scores the resulting scans.

pub mod calibrate;
pub mod config;
pub mod control;
pub mod gpff;
pub mod io;
pub mod metrics;
pub mod plant;
pub mod sim;
pub mod trajectory;

pub use calibrate::{gd_calibrate, CalibrationError, ForceProbe, GdConfig, GdTrace};
pub use config::{Config, ConfigError};
pub use gpff::{GpError, GpModel, KernelParams};
pub use io::RunManifest;
pub use metrics::{MaConfig, ScenarioSummary};
pub use plant::{MismatchField, PlantParams, PlantState, Workspace};
pub use sim::{EtaDataset, EtaRecord, Mode, ScenarioConfig, SimError, SimLog, SystemConfig};
pub use trajectory::{ProfileParams, ScanAxis};

pub use nalgebra::{Vector2, Vector3};
