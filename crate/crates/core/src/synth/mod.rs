//! Procedural multi-face scenes with controlled anomalies, plus the
//! perturbations used for robustness sweeps.

mod color;
pub mod dataset;
pub mod perturb;
pub mod raster;
pub mod scene;

pub use color::{hsv_to_rgb, rgb_to_hsv, shift_hue};
pub use dataset::{audit, plan_dataset, DatasetPlan, PlannedClip, Split, SplitAudit, SplitRatios};
pub use perturb::{Perturbation, PerturbationKind, MAX_SEVERITY};
pub use scene::{AnomalyKind, Appearance, Canvas, FaceSpec, GazeLayout, GazeTarget, SceneSpec};
