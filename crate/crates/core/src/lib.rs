//! Few-shot classification with prior-driven discrete calibration.
//!
//! Support features of a task are pulled toward prototypes of similar base
//! classes before nearest-prototype classification. The crate covers the
//! feature store format, the calibration math, prototype construction and
//! prediction, seeded episodic evaluation, the validation grid sweep, and a
//! synthetic data generator.

pub mod calib;
pub mod classifier;
pub mod episode;
pub mod error;
pub mod feature_store;
pub mod sweep;
pub mod synth;
pub mod vector;

pub use calib::{calibrate_support_set, CalibConfig, CalibratedSupport, CalibratedTask};
pub use classifier::{PredictMode, PrototypeMode, TaskModel, Transform};
pub use episode::{evaluate, EvalParams, EvalReport};
pub use error::{Error, Result};
pub use feature_store::{
    compute_base_prototypes, load_dataset, write_dataset, BasePrototypeSet, FeatureDataset,
    FeatureStore, Split,
};
pub use sweep::{grid_sweep, SweepGrid, SweepResult};
pub use synth::{generate, Preset, SynthConfig};
