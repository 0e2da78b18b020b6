//! Active object reconstruction with a radiance-field ensemble: uncertainty-driven
//! view planning, flip grasps, and pose re-acquisition after the object is moved.

pub mod error;
pub mod geometry;
pub mod grasping;
pub mod harness;
pub mod imaging;
pub mod metrics;
pub mod oracle;
pub mod planner;
pub mod radiance;
pub mod repose;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, Pose, Quat, Vec3};
pub use harness::{compare_runs, run, Mode, RunConfig, RunSummary};
pub use oracle::{Oracle, SceneSpec};
pub use radiance::{RadianceGrid, SampleSpec};
pub use repose::trials::{run_trials, TrialConfig};
pub use trainer::{Ensemble, TrainConfig, ViewSample};
