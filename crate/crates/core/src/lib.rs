//! Federated gridbox nodes for a distributed mammogram database.
//!
//! Each site runs a [`node::Node`] that stores immutable MGD files, keeps a
//! replicated view of the shared file catalogue and metadata, answers
//! federated queries, exchanges datasets over an encrypted association
//! protocol, and runs analysis jobs next to the data.


pub mod analysis;
pub mod catalogue;
pub mod dataset;
pub mod federation;
pub mod ids;
pub mod jobs;
pub mod metastore;
pub mod node;

pub mod querylang;

pub mod simnet;
pub mod sync;
pub mod transfer;

