//! Cohort data: schema, actions, trajectories, state/history construction,
//! standardization, splitting and CSV I/O.

pub mod action;
pub mod csv_io;
pub mod features;
pub mod schema;
pub mod split;
pub mod standardize;
pub mod trajectory;

pub use action::{bin_dose, fit_action_bins, Action, ActionBins, Doses, N_ACTIONS, N_BINS};
pub use csv_io::{read_cohort_csv, read_doses, write_cohort_csv};
pub use features::{
    build_decision_input, build_history, build_state, history_dim, state_dim, EpisodeBuffer,
    HistoryVector, StateVector, N_LAGS,
};
pub use schema::FeatureSchema;
pub use split::{split_cohort, split_sizes};
pub use standardize::Standardizer;
pub use trajectory::{Observation, Step, Trajectory, SOFA_MAX};
