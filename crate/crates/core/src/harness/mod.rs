//! Synthetic reaching benchmark, dataset I/O, evaluation and experiment
//! orchestration.

pub mod dataset;
pub mod eval;
pub mod kinematics;
pub mod pipeline;
pub mod ppm;
pub mod scene;
pub mod sweep;

pub use dataset::{Dataset, DatasetManifest, ManifestEntry};
pub use eval::{evaluate, EvalReport, Episode, DEFAULT_EPS};
pub use pipeline::{run_inference_pipeline, ExecutionTrace, PipelineInputs, SkillRegistry};
pub use scene::{generate_demo, DemoMeta, Demonstration};
pub use sweep::{run_sweep, SweepConfig, SweepRow};
