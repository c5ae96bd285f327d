//! Deterministic simulator for a peer-to-peer business ecosystem substrate:
//! dynamic virtual super-peer coordination, trust-based identity
//! provisioning, per-service distributed transactions and a replicated
//! service repository, with crash, churn and partition fault injection.

pub mod dvsp;
pub mod harness;
pub mod identity;
pub mod peers;
pub mod services;
pub mod simnet;
pub mod transactions;
