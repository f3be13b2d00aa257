//! Human oracle: sessions that block the episode until a person answers
//! through the console, and the HTTP API the console talks to.

mod http;
mod session;

pub use http::{router, AnswerBody, BridgeServer};
pub use session::{
    BridgeError, HumanOracle, SessionState, SessionStore, SessionSummary, SessionView,
    DEFAULT_HUMAN_TIMEOUT,
};
