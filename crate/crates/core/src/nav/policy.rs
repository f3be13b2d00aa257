use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use super::world::{
    bearing, heading_delta, heading_vector, Action, AgentState, World, FORWARD_STEP, TURN_STEP,
};
use crate::model::Point;

/// Proposes the next exploration action. `None` means the policy has nothing left to try.
pub trait ExplorationPolicy {
    fn name(&self) -> &str;

    fn next_action(&mut self, state: &AgentState, world: &World) -> Option<Action>;
}

impl<P: ExplorationPolicy + ?Sized> ExplorationPolicy for &mut P {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn next_action(&mut self, state: &AgentState, world: &World) -> Option<Action> {
        (**self).next_action(state, world)
    }
}

impl<P: ExplorationPolicy + ?Sized> ExplorationPolicy for alloc::boxed::Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn next_action(&mut self, state: &AgentState, world: &World) -> Option<Action> {
        (**self).next_action(state, world)
    }
}

/// Turn toward `goal` until within half a turn step, then move forward.
pub fn steer_toward(state: &AgentState, goal: Point) -> Action {
    let delta = heading_delta(state.pose.heading, bearing(state.pose.position(), goal));
    if delta > TURN_STEP / 2.0 {
        Action::TurnLeft
    } else if delta < -TURN_STEP / 2.0 {
        Action::TurnRight
    } else {
        Action::Forward
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointFollower {
    pub waypoints: Vec<Point>,
    #[serde(default)]
    next: usize,
}

impl WaypointFollower {
    pub fn new(waypoints: Vec<Point>) -> Self {
        WaypointFollower { waypoints, next: 0 }
    }
}

impl ExplorationPolicy for WaypointFollower {
    fn name(&self) -> &str {
        "waypoint"
    }

    fn next_action(&mut self, state: &AgentState, _world: &World) -> Option<Action> {
        let here = state.pose.position();
        while let Some(wp) = self.waypoints.get(self.next) {
            if here.distance(*wp) <= FORWARD_STEP / 2.0 {
                self.next += 1;
            } else {
                return Some(steer_toward(state, *wp));
            }
        }
        None
    }
}

/// Uniform choice among forward, left and right with forward weighted double.
#[derive(Debug, Clone)]
pub struct RandomWalk {
    rng: ChaCha8Rng,
}

impl RandomWalk {
    pub fn new(seed: u64) -> Self {
        RandomWalk {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl ExplorationPolicy for RandomWalk {
    fn name(&self) -> &str {
        "random"
    }

    fn next_action(&mut self, _state: &AgentState, _world: &World) -> Option<Action> {
        Some(match self.rng.next_u32() % 4 {
            0 => Action::TurnLeft,
            1 => Action::TurnRight,
            _ => Action::Forward,
        })
    }
}

/// Heads for the least-visited free neighbouring cell on a quarter-metre grid.
/// A stand-in for frontier exploration, not a map builder.
#[derive(Debug, Clone, Default)]
pub struct GreedyFrontier {
    visits: BTreeMap<(i64, i64), u32>,
    goal: Option<Point>,
}

impl GreedyFrontier {
    pub fn new() -> Self {
        Self::default()
    }

    fn cell(p: Point) -> (i64, i64) {
        (
            libm::round(p.x / FORWARD_STEP) as i64,
            libm::round(p.y / FORWARD_STEP) as i64,
        )
    }
}

impl ExplorationPolicy for GreedyFrontier {
    fn name(&self) -> &str {
        "frontier"
    }

    fn next_action(&mut self, state: &AgentState, world: &World) -> Option<Action> {
        let here = state.pose.position();
        if let Some(goal) = self.goal {
            if here.distance(goal) > FORWARD_STEP / 2.0 {
                let a = steer_toward(state, goal);
                // a blocked goal is abandoned on the next forward attempt
                if a != Action::Forward || world.segment_is_free(here, goal) {
                    return Some(a);
                }
            }
            self.goal = None;
        }
        *self.visits.entry(Self::cell(here)).or_default() += 1;
        let mut best: Option<(u32, u32, Point)> = None;
        for k in 0..24u32 {
            let h = state.pose.heading + TURN_STEP * k as f64;
            let (dx, dy) = heading_vector(h);
            let cand = Point::new(here.x + FORWARD_STEP * dx, here.y + FORWARD_STEP * dy);
            if !world.segment_is_free(here, cand) {
                continue;
            }
            let visits = self.visits.get(&Self::cell(cand)).copied().unwrap_or(0);
            let turn_cost = k.min(24 - k);
            if best.map_or(true, |(v, t, _)| (visits, turn_cost) < (v, t)) {
                best = Some((visits, turn_cost, cand));
            }
        }
        let (_, _, goal) = best?;
        self.goal = Some(goal);
        Some(steer_toward(state, goal))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Waypoint,
    Random,
    Frontier,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Pose;
    use crate::nav::world::{apply_action, Rect};
    use alloc::vec;

    fn world() -> World {
        World {
            bounds: Rect::new(-3.0, -3.0, 3.0, 3.0),
            obstacles: vec![],
            objects: vec![],
            detector_radius: 1.0,
            detector_fov: 90.0,
        }
    }

    #[test]
    fn waypoints_reached_then_exhausted() {
        let w = world();
        let mut p = WaypointFollower::new(vec![Point::new(1.0, 0.0), Point::new(1.0, 1.0)]);
        let mut s = AgentState::new(Pose::new(0.0, 0.0, 0.0));
        let mut n = 0;
        while let Some(a) = p.next_action(&s, &w) {
            s = apply_action(s, a, &w);
            n += 1;
            assert!(n < 100);
        }
        assert!(s.pose.position().distance(Point::new(1.0, 1.0)) < 1e-9);
        // 4 forward, 6 left turns, 4 forward
        assert_eq!(n, 14);
    }

    #[test]
    fn random_walk_is_seeded() {
        let w = world();
        let s = AgentState::new(Pose::new(0.0, 0.0, 0.0));
        let run = |seed| {
            let mut p = RandomWalk::new(seed);
            (0..50).map(|_| p.next_action(&s, &w).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn frontier_moves_and_stays_inside() {
        let w = world();
        let mut p = GreedyFrontier::new();
        let mut s = AgentState::new(Pose::new(0.0, 0.0, 0.0));
        for _ in 0..300 {
            let a = p.next_action(&s, &w).unwrap();
            s = apply_action(s, a, &w);
            assert!(w.is_free(s.pose.position()));
        }
        assert!(s.path_length > 5.0);
    }
}
