//! Victim-side network stack: IPID assignment policies, path-MTU discovery
//! state, the TCP endpoint with its challenge-ACK limits, and the simulation
//! hosts built from those pieces.

pub mod endpoint;
pub mod host;
pub mod ipid;
pub mod pmtud;
