//! IO side of the harness: HTTP agents, the response cache, run artifacts,
//! the human-oracle bridge and the `qask` command line.

pub mod agents;
pub mod bridge;
pub mod cache;
pub mod files;
pub mod images;
pub mod remote;
pub mod run;
pub mod cli;
