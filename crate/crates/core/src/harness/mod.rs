//! Experiment plumbing: configuration files, initial-condition synthesis,
//! single runs, amplitude sweeps, refinement studies and file output.

mod config;
mod experiment;
mod initial;
mod output;

pub use config::{
    parse_config, GridConfig, IcConfig, MonitorConfig, OutputConfig, OutputFormat, Preset, RunConfig, TimeConfig,
    SCHEMA_VERSION,
};
pub use experiment::{
    audit_initial_condition, dt_refinement, refinement_study, richardson_order, run_experiment, simulate,
    state_distance, sweep_amplitude, DtRefinement, ExitStatus, LyapunovSummary, RefinementTable, ResolutionRow,
    RunOutcome, Summary, SweepRow, SweepTable,
};
pub use initial::{make_initial_condition, synthesize};
pub use output::{read_checkpoint, series_csv, write_checkpoint, write_outputs, Checkpoint, SERIES_HEADER};
