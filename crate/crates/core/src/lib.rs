//! Proportional hazards estimation from error-prone self-reports augmented with a
//! gold-standard outcome at a validation visit.

pub mod analysis;
pub mod calibration;
pub mod cli;
pub mod comparator;
pub mod data;
pub mod estimation;
pub mod likelihood;
pub mod numeric;
pub mod optim;
pub mod simulation;
pub mod survey;
