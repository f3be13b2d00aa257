use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{ImageRef, Point, Pose};

pub const FORWARD_STEP: f64 = 0.25;
pub const TURN_STEP: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
    Ask,
}

/// Axis-aligned rectangle in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub const fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Rect { min_x, min_y, max_x, max_y }
    }

    pub fn is_valid(&self) -> bool {
        self.min_x < self.max_x && self.min_y < self.max_y
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }

    /// Whether the segment `a`-`b` touches the rectangle (slab clipping).
    pub fn intersects_segment(&self, a: Point, b: Point) -> bool {
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        let d = [b.x - a.x, b.y - a.y];
        let lo = [self.min_x - a.x, self.min_y - a.y];
        let hi = [self.max_x - a.x, self.max_y - a.y];
        for i in 0..2 {
            if d[i] == 0.0 {
                if lo[i] > 0.0 || hi[i] < 0.0 {
                    return false;
                }
            } else {
                let (mut ta, mut tb) = (lo[i] / d[i], hi[i] / d[i]);
                if ta > tb {
                    core::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub position: Point,
    pub category: String,
    pub instance_id: u64,
    pub image: ImageRef,
    #[serde(default)]
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub bounds: Rect,
    #[serde(default)]
    pub obstacles: Vec<Rect>,
    pub objects: Vec<WorldObject>,
    pub detector_radius: f64,
    /// Full field of view in degrees.
    pub detector_fov: f64,
}

impl World {
    pub fn target(&self) -> Option<&WorldObject> {
        self.objects.iter().find(|o| o.is_target)
    }

    pub fn is_free(&self, p: Point) -> bool {
        self.bounds.contains(p) && !self.obstacles.iter().any(|o| o.contains(p))
    }

    pub fn segment_is_free(&self, a: Point, b: Point) -> bool {
        self.bounds.contains(a)
            && self.bounds.contains(b)
            && !self.obstacles.iter().any(|o| o.intersects_segment(a, b))
    }
}

pub fn validate_world(w: &World) -> Vec<String> {
    let mut out = Vec::new();
    if !w.bounds.is_valid() {
        out.push(String::from("bounds are empty"));
    }
    for (i, o) in w.obstacles.iter().enumerate() {
        if !o.is_valid() {
            out.push(format!("obstacle {i} is empty"));
        }
    }
    let targets = w.objects.iter().filter(|o| o.is_target).count();
    if targets != 1 {
        out.push(format!("expected exactly one target object, found {targets}"));
    }
    let mut ids = BTreeSet::new();
    for o in &w.objects {
        if !ids.insert(o.instance_id) {
            out.push(format!("duplicate instance id {}", o.instance_id));
        }
        if !w.is_free(o.position) {
            out.push(format!("object {} is outside free space", o.instance_id));
        }
        if o.category.trim().is_empty() {
            out.push(format!("object {} has no category", o.instance_id));
        }
    }
    if !(w.detector_radius > 0.0) {
        out.push(String::from("detector radius must be positive"));
    }
    if !(w.detector_fov > 0.0 && w.detector_fov <= 360.0) {
        out.push(String::from("detector fov must be in (0, 360]"));
    }
    out
}

pub fn normalize_heading(h: f64) -> f64 {
    let mut r = libm::fmod(h, 360.0);
    if r < 0.0 {
        r += 360.0;
    }
    if r >= 360.0 {
        r = 0.0;
    }
    r
}

/// Signed difference `to - from` in (-180, 180].
pub fn heading_delta(from: f64, to: f64) -> f64 {
    let d = normalize_heading(to - from);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// Unit vector for a heading; exact on multiples of 90 degrees.
pub fn heading_vector(h: f64) -> (f64, f64) {
    let h = normalize_heading(h);
    match h {
        0.0 => (1.0, 0.0),
        90.0 => (0.0, 1.0),
        180.0 => (-1.0, 0.0),
        270.0 => (0.0, -1.0),
        _ => {
            let r = h.to_radians();
            (libm::cos(r), libm::sin(r))
        }
    }
}

pub fn bearing(from: Point, to: Point) -> f64 {
    normalize_heading(libm::atan2(to.y - from.y, to.x - from.x).to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub pose: Pose,
    pub steps: u32,
    pub path_length: f64,
    pub asks: u32,
}

impl AgentState {
    pub fn new(pose: Pose) -> Self {
        AgentState {
            pose: Pose::new(pose.x, pose.y, normalize_heading(pose.heading)),
            steps: 0,
            path_length: 0.0,
            asks: 0,
        }
    }
}

/// Every action costs one step. A blocked forward move leaves the pose as it was.
pub fn apply_action(s: AgentState, a: Action, w: &World) -> AgentState {
    let mut next = s;
    next.steps += 1;
    match a {
        Action::Forward => {
            let (dx, dy) = heading_vector(s.pose.heading);
            let from = s.pose.position();
            let to = Point::new(from.x + FORWARD_STEP * dx, from.y + FORWARD_STEP * dy);
            if w.segment_is_free(from, to) {
                next.pose.x = to.x;
                next.pose.y = to.y;
                next.path_length += FORWARD_STEP;
            }
        }
        Action::TurnLeft => next.pose.heading = normalize_heading(s.pose.heading + TURN_STEP),
        Action::TurnRight => next.pose.heading = normalize_heading(s.pose.heading - TURN_STEP),
        Action::Ask => next.asks += 1,
        Action::Stop => {}
    }
    next
}

/// Nearest non-suppressed object of `category` inside the detector cone.
pub fn detect<'w>(
    s: &AgentState,
    w: &'w World,
    category: &str,
    suppressed: &BTreeSet<u64>,
) -> Option<&'w WorldObject> {
    let here = s.pose.position();
    w.objects
        .iter()
        .filter(|o| o.category == category && !suppressed.contains(&o.instance_id))
        .filter_map(|o| {
            let d = here.distance(o.position);
            if d > w.detector_radius {
                return None;
            }
            // an object under the agent is always in view
            let in_fov = d == 0.0
                || libm::fabs(heading_delta(s.pose.heading, bearing(here, o.position))) <= w.detector_fov / 2.0;
            in_fov.then_some((d, o))
        })
        .min_by(|(da, a), (db, b)| da.total_cmp(db).then(a.instance_id.cmp(&b.instance_id)))
        .map(|(_, o)| o)
}
