//! Calibration: streaming histograms, clip-range objectives, calibration
//! data sources and model-wide calibration plans.

pub mod histogram;
pub mod plan;
pub mod search;
pub mod source;

pub use histogram::RunningHistogram;
pub use plan::{calibrate_model, CalibrationPlan, PlanEntry, SiteKind};
pub use search::{
    entropy_calibrate, entropy_calibrate_symmetric, entropy_search, l2_calibrate, l2_calibrate_symmetric, l2_search,
    minmax_calibrate, Objective, SearchOptions, SearchResult,
};
pub use source::{random_normal_source, CalibrationSource};
