//! In-process three-party secret-sharing simulator with a byte ledger.

pub mod engine;
pub mod fixed;
pub mod ledger;
pub mod protocols;
pub mod ring;
pub mod shares;

pub use engine::{reconcile, sim_conv, sim_drelu, sim_grelu_layer, sim_linear, sim_network, FixedModel, Reconciliation, SimOutcome};
pub use fixed::FixedPoint;
pub use ledger::{MessageLog, MessageRecord, Party};
pub use protocols::{sim_mul, Session};
pub use ring::Ring;
pub use shares::{reconstruct, share, ShareTriple, SharedTensor};
