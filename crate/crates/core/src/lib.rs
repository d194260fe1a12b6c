//! Simulation of a dose-titration trial with treatment-confounder feedback
//! and three g-method estimators of week-8 exposure under full adherence:
//! sequential standardization, standardization over a fitted mixed-effects
//! model, and inverse probability weighting.

pub mod config;
pub mod error;
pub mod gformula;
pub mod ipw;
pub mod nlme;
pub mod optim;
pub mod pk;
pub mod report;
pub mod rng;
pub mod stats;
pub mod trial;

pub use error::{Error, Result};
pub use pk::{MMParams, PopulationParams};
pub use report::{run_scenario, AnalysisOptions, MethodId, Status, SummaryRow};
pub use trial::{Scenario, TrialDataset, Variant};
