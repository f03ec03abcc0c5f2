//! Weakly supervised video moment retrieval with multi-proposal Gaussian
//! masks and mask-conditioned query reconstruction.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod trainer;
pub mod types;

pub use config::{FusionMode, Profile, Strategy, TrainConfig};
pub use error::{Error, Result};
pub use types::{iou, proposal_to_moment, MaskTriplet, Moment, Proposal, ProposalSet};
