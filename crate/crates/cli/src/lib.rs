//! Scenario handling and the retarget, optimize, track pipeline behind the
//! `legmimic` binary.

pub mod pipeline;
pub mod plot;
pub mod scenario;

pub use pipeline::{run_pipeline, RunReport, Stage, StageError};
pub use plot::{emit_plot_data, plot_channels};
pub use scenario::{load_scenario, validate_scenario, LoadedScenario, Scenario};
