//! Experiment orchestration: configs, trajectories, sweeps, the 2-D demo
//! and SVG plots.

pub mod config;
pub mod demo;
pub mod plot;
pub mod sweep;
pub mod trajectory;

pub use config::{build_datasets, prepare, DataSource, DatasetSpec, DuplicateSpec, ExperimentConfig, ModelSpec, ScheduleSpec, TrainerSpec};
pub use demo::{demo_fig1, DemoConfig, DemoResult};
pub use plot::plot_csv;
pub use sweep::{run_sweep, Statistic, SweepPoint, SweepResult, SweepSpec};
pub use trajectory::{run_to_dir, run_trajectory, Measurement, Trajectory};
