//! Discrete-time simulator and analysis toolkit for resource-block
//! allocation in an IoT cell.
//!
//! An access point owns `N` resource blocks per slot and serves `K` nodes
//! that become active sporadically. The crate implements the conventional
//! random-access scheme, a deep-Q-aided hybrid scheme in which an agent at
//! the access point predicts the active set and pre-grants part of the
//! budget, closed-form rate analysis for both, and a transfer-learning
//! training pipeline driven by experiment configs.

pub mod activity;
pub mod agent;
pub mod error;
pub mod harness;
pub mod hybrid;
pub mod ra;
pub mod rng;
pub mod types;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use types::{
    average_packet_rate, genie_rate, ActivityTrace, NodeId, RateSeries, SlotAllocation,
    SlotOutcome,
};
