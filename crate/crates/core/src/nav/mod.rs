//! Desk-scale 2D surrogate for instance navigation with question asking.
//!
//! The agent moves in 0.25 m steps and 15 degree turns, detects objects of
//! the target category inside a view cone, and hands each detection to the
//! interaction controller.

mod episode;
mod policy;
mod world;

pub use episode::{
    run_nav_episode, NavConfig, FAIL_POLICY_EXHAUSTED, FAIL_STEP_LIMIT, FAIL_STOPPED_AWAY,
};
pub use policy::{steer_toward, ExplorationPolicy, GreedyFrontier, PolicyKind, RandomWalk, WaypointFollower};
pub use world::{
    apply_action, bearing, detect, heading_delta, heading_vector, normalize_heading, validate_world,
    Action, AgentState, Rect, World, WorldObject, FORWARD_STEP, TURN_STEP,
};
