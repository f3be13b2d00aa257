//! Protocol core for questioner/oracle evaluation of collaborative
//! instance-navigation agents.
//!
//! Everything in this crate is pure: agents are reached through the
//! [`agent::Questioner`] and [`agent::Oracle`] traits, images are opaque
//! [`model::ImageRef`]s, and time is whatever latency the agents report.
//! The `qask` crate supplies the IO-bound pieces (HTTP agents, caching,
//! file formats, the human bridge and the CLI).

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod agent;
pub mod controller;
pub mod dataset;
pub mod engine;
pub mod metrics;
pub mod model;
pub mod nav;
pub mod parse;
pub mod prompt;
pub mod validate;

pub use agent::{AgentError, Oracle, OracleRequest, Questioner, QuestionerRequest, Timed};
pub use engine::{run_episode, EngineConfig};
pub use model::{
    DescriptionLevel, DescriptionSet, EpisodeResult, EpisodeSpec, ImageRef, InteractionContext,
    QuestionerOutput, ScoredOutput, StepRecord, TraceSample, UncertaintyScore,
};
pub use parse::{parse_rsq, ParseError};
