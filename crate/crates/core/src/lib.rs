//! Deterministic federated-learning simulator for studying client dropouts
//! and update-correction algorithms (FedAvg, FedProx, MIFA, SCAFFOLD, MimiC).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod availability;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod federation;
pub mod harness;
pub mod local;
pub mod objectives;
pub mod param;
pub mod rng;
pub mod schedules;

pub use aggregation::{Algorithm, RoundResult, ServerState, Upload};
pub use availability::AvailabilitySchedule;
pub use data::{ClientDataset, Dataset, PartitionSpec};
pub use error::{Error, Result};
pub use federation::{BatchMode, Federation};
pub use local::LocalConfig;
pub use objectives::Objective;
pub use param::ParamVector;
pub use rng::RngContract;
