//! Executable models of state machine replication: abstract specifications
//! from a linearizable service down to multi-consensus, concrete Paxos, VSR
//! and Zab engines on a deterministic simulated network, and a refinement
//! checker relating the two.

pub mod app;
pub mod engines;
pub mod kernel;
pub mod metrics;
pub mod multiconsensus;
pub mod refinement;
pub mod specs;
