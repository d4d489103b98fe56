//! Deterministic 2D kinematic multi-agent driving world: scripted scenarios,
//! bicycle-model ego, exact infraction accounting, and line-delimited episode
//! logs. Everything downstream (training data, closed-loop metrics) derives
//! from the records produced here.

pub mod expert;
pub mod observe;
pub mod scenario;

use serde::{Deserialize, Serialize};

use crate::geometry::{obb_overlap, Obb};
use scenario::{AgentKind, ScenarioScript, TriggerKind};

/// Simulation step, one trajectory waypoint per step (2 Hz).
pub const DT: f64 = 0.5;
/// Bicycle-model wheelbase in meters.
pub const WHEELBASE: f64 = 2.8;
/// Ego bounding box dimensions.
pub const EGO_LENGTH: f64 = 4.6;
pub const EGO_WIDTH: f64 = 1.9;
/// Kinematic bounds shared by ego and scripted vehicles.
pub const V_MAX: f64 = 20.0;
pub const A_MAX: f64 = 6.0;
pub const STEER_MAX: f64 = 0.5;
/// Lateral distance from the route beyond which an episode counts as departed.
pub const DEPARTURE_LIMIT: f64 = 6.0;
/// Internal integration substeps per simulation step.
const SUBSTEPS: usize = 25;

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    } else if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    a
}

/// Physical state of the ego vehicle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub velocity: f64,
    pub acceleration: f64,
}

impl EgoState {
    pub fn bbox(&self) -> Obb {
        Obb::new(self.x, self.y, EGO_LENGTH, EGO_WIDTH, self.heading)
    }
}

/// Fixed-rate waypoint sequence in world coordinates (2 Hz).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<(f64, f64)>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<(f64, f64)>) -> Self {
        Trajectory { waypoints }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn max_spacing(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| {
                let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                (dx * dx + dy * dy).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// Physical state of one traffic participant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub kind: AgentKind,
    pub bbox: Obb,
    pub velocity: f64,
    pub acceleration: f64,
    /// Most recent past positions, newest last, capped at 8.
    pub history: Trajectory,
}

/// One agent's evolving position along its scripted path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentInstance {
    pub script_idx: usize,
    pub arc: f64,
    pub state: AgentState,
}

/// Complete world snapshot; a value type, freely copyable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub step: usize,
    pub ego: EgoState,
    pub agents: Vec<AgentInstance>,
}

impl WorldState {
    pub fn time(&self) -> f64 {
        self.step as f64 * DT
    }
}

/// Ego control input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub accel: f64,
    pub steer: f64,
}

impl Action {
    pub fn clamped(self) -> (Action, bool) {
        let a = self.accel.clamp(-A_MAX, A_MAX);
        let s = self.steer.clamp(-STEER_MAX, STEER_MAX);
        let clamped = a != self.accel || s != self.steer;
        (Action { accel: a, steer: s }, clamped)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InfractionKind {
    Collision,
    SignalViolation,
    RouteDeparture,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Infraction {
    pub step: usize,
    pub kind: InfractionKind,
}

/// Per-step record written to the episode log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub action: Action,
    pub action_clamped: bool,
    pub ego: EgoState,
    pub agents: Vec<AgentInstance>,
    pub completion: f64,
    pub jerk: f64,
    pub lat_accel: f64,
}

/// Closed-loop record of one simulated episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub category: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub infractions: Vec<Infraction>,
    pub completion: f64,
    /// Set when the episode ended before its horizon.
    pub terminal: Option<InfractionKind>,
    pub reached_goal: bool,
}

/// Outcome of a single call to [`Simulation::step`].
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub infractions: Vec<Infraction>,
    pub done: bool,
}

/// Owns one episode: script, world, and the growing log.
pub struct Simulation<'s> {
    pub script: &'s ScenarioScript,
    pub world: WorldState,
    pub log: EpisodeLog,
    done: bool,
    prev_accel: f64,
}

impl<'s> Simulation<'s> {
    pub fn new(script: &'s ScenarioScript) -> Self {
        let world = Self::initial_world(script);
        Simulation {
            script,
            world,
            log: EpisodeLog {
                category: script.category.to_string(),
                seed: script.seed,
                ..Default::default()
            },
            done: false,
            prev_accel: 0.0,
        }
    }

    /// Rebuild a simulation mid-episode from a snapshot (used by the expert
    /// planner to roll a private copy forward).
    pub fn from_snapshot(script: &'s ScenarioScript, world: WorldState) -> Self {
        let prev_accel = world.ego.acceleration;
        Simulation {
            script,
            world,
            log: EpisodeLog {
                category: script.category.to_string(),
                seed: script.seed,
                ..Default::default()
            },
            done: false,
            prev_accel,
        }
    }

    pub fn initial_world(script: &ScenarioScript) -> WorldState {
        let start = script.route.point_at(0.0);
        let heading = script.route.tangent_at(0.0);
        let agents = script
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let pos = path_point(&a.path, a.start_arc);
                let h = path_tangent(&a.path, a.start_arc);
                AgentInstance {
                    script_idx: i,
                    arc: a.start_arc,
                    state: AgentState {
                        kind: a.kind,
                        bbox: Obb::new(pos.0, pos.1, a.length, a.width, h),
                        velocity: a.initial_speed,
                        acceleration: 0.0,
                        history: Trajectory::new(vec![pos]),
                    },
                }
            })
            .collect();
        WorldState {
            step: 0,
            ego: EgoState {
                x: start.0,
                y: start.1,
                heading,
                velocity: script.ego_initial_speed,
                acceleration: 0.0,
            },
            agents,
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Advance one simulation step: clamp the action, integrate the ego
    /// bicycle and the scripted agents, then score infractions. Collisions,
    /// signal violations, and route departures are terminal.
    pub fn step(&mut self, action: Action) -> StepOutcome {
        assert!(!self.done, "step() on a finished episode");
        let (act, was_clamped) = action.clamped();

        let prev_v = self.world.ego.velocity;
        let ego = integrate_bicycle(&self.world.ego, act);
        self.world.ego = ego;

        let step = self.world.step;
        for agent in &mut self.world.agents {
            advance_agent(agent, self.script, step);
        }
        self.world.step += 1;

        // jerk from realized acceleration, lateral acceleration from yaw rate
        let realized_a = (self.world.ego.velocity - prev_v) / DT;
        self.world.ego.acceleration = realized_a;
        let jerk = (realized_a - self.prev_accel) / DT;
        self.prev_accel = realized_a;
        let yaw_rate = self.world.ego.velocity * act.steer.tan() / WHEELBASE;
        let lat_accel = self.world.ego.velocity * yaw_rate;

        // route progress, monotone by construction
        let (arc, lat) = self.script.route.project(self.world.ego.x, self.world.ego.y);
        let total = self.script.route.length();
        let completion = if arc >= total - 2.0 { 1.0 } else { (arc / total).clamp(0.0, 1.0) };
        let completion = completion.max(self.log.completion);
        self.log.completion = completion;

        // infractions: first match terminates the episode
        let mut infractions = Vec::new();
        let ego_box = self.world.ego.bbox();
        let collided = self.world.agents.iter().any(|a| obb_overlap(&ego_box, &a.state.bbox));
        if collided {
            infractions.push(Infraction { step: self.world.step, kind: InfractionKind::Collision });
        } else if self.crossed_red_line(arc) {
            infractions
                .push(Infraction { step: self.world.step, kind: InfractionKind::SignalViolation });
        } else if lat.abs() > DEPARTURE_LIMIT {
            infractions
                .push(Infraction { step: self.world.step, kind: InfractionKind::RouteDeparture });
        }

        self.log.steps.push(StepRecord {
            step: self.world.step,
            action: act,
            action_clamped: was_clamped,
            ego: self.world.ego,
            agents: self.world.agents.clone(),
            completion,
            jerk,
            lat_accel,
        });
        self.log.infractions.extend(infractions.iter().copied());

        let reached_goal = completion >= 1.0;
        if reached_goal {
            self.log.reached_goal = true;
        }
        let terminal_infraction = infractions.first().map(|i| i.kind);
        let done = terminal_infraction.is_some()
            || reached_goal
            || self.world.step >= self.script.horizon;
        if done {
            self.done = true;
            self.log.terminal = terminal_infraction;
        }
        StepOutcome { infractions, done }
    }

    fn crossed_red_line(&self, ego_arc: f64) -> bool {
        for trig in &self.script.triggers {
            if let TriggerKind::SignalPhase { red_from, red_until, line_arc } = trig.kind {
                let red = self.world.step >= red_from && self.world.step <= red_until;
                let prev = &self.log.steps;
                let prev_arc = prev
                    .last()
                    .map(|s| self.script.route.project(s.ego.x, s.ego.y).0)
                    .unwrap_or(0.0);
                if red && prev_arc < line_arc && ego_arc >= line_arc {
                    return true;
                }
            }
        }
        false
    }
}

/// Kinematic bicycle integration over one simulation step (RK4 substeps).
pub fn integrate_bicycle(ego: &EgoState, action: Action) -> EgoState {
    let mut s = [ego.x, ego.y, ego.heading, ego.velocity];
    let h = DT / SUBSTEPS as f64;
    let deriv = |s: &[f64; 4]| -> [f64; 4] {
        let v = s[3];
        // velocity bound enforced through the derivative to keep RK4 smooth
        let a = if (v <= 0.0 && action.accel < 0.0) || (v >= V_MAX && action.accel > 0.0) {
            0.0
        } else {
            action.accel
        };
        [v * s[2].cos(), v * s[2].sin(), v * action.steer.tan() / WHEELBASE, a]
    };
    for _ in 0..SUBSTEPS {
        let k1 = deriv(&s);
        let s2 = std::array::from_fn(|i| s[i] + 0.5 * h * k1[i]);
        let k2 = deriv(&s2);
        let s3 = std::array::from_fn(|i| s[i] + 0.5 * h * k2[i]);
        let k3 = deriv(&s3);
        let s4 = std::array::from_fn(|i| s[i] + h * k3[i]);
        let k4 = deriv(&s4);
        for i in 0..4 {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        s[3] = s[3].clamp(0.0, V_MAX);
    }
    EgoState {
        x: s[0],
        y: s[1],
        heading: wrap_angle(s[2]),
        velocity: s[3],
        acceleration: action.accel,
    }
}

/// Position on a dense polyline at a given arc length (clamped to the ends).
pub fn path_point(path: &[(f64, f64)], arc: f64) -> (f64, f64) {
    let mut remaining = arc.max(0.0);
    for w in path.windows(2) {
        let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
        let seg = (dx * dx + dy * dy).sqrt();
        if remaining <= seg {
            let f = if seg > 0.0 { remaining / seg } else { 0.0 };
            return (w[0].0 + f * dx, w[0].1 + f * dy);
        }
        remaining -= seg;
    }
    *path.last().unwrap()
}

/// Tangent heading on a dense polyline at a given arc length.
pub fn path_tangent(path: &[(f64, f64)], arc: f64) -> f64 {
    let mut remaining = arc.max(0.0);
    for w in path.windows(2) {
        let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
        let seg = (dx * dx + dy * dy).sqrt();
        if remaining <= seg && seg > 0.0 {
            return dy.atan2(dx);
        }
        remaining -= seg;
    }
    let n = path.len();
    let (dx, dy) = (path[n - 1].0 - path[n - 2].0, path[n - 1].1 - path[n - 2].1);
    dy.atan2(dx)
}

fn advance_agent(agent: &mut AgentInstance, script: &ScenarioScript, step: usize) {
    let spec = &script.agents[agent.script_idx];
    let target = spec.target_speed_at(step, &script.triggers);
    let v0 = agent.state.velocity;
    let mut v = v0;
    let mut arc = agent.arc;
    let h = DT / SUBSTEPS as f64;
    for _ in 0..SUBSTEPS {
        let a = ((target - v) / h).clamp(-spec.accel_limit, spec.accel_limit);
        v = (v + a * h).clamp(0.0, V_MAX);
        arc += v * h;
    }
    let pos = path_point(&spec.path, arc);
    let heading = path_tangent(&spec.path, arc);
    agent.arc = arc;
    agent.state.velocity = v;
    agent.state.acceleration = (v - v0) / DT;
    agent.state.bbox = Obb::new(pos.0, pos.1, spec.length, spec.width, heading);
    let hist = &mut agent.state.history.waypoints;
    hist.push(pos);
    if hist.len() > 8 {
        hist.remove(0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scenario::{build_scenario, Category};

    #[test]
    fn rest_state_stays_put() {
        let script = build_scenario(Category::EmergencyBrake, 0);
        let mut sim = Simulation::new(&script);
        sim.world.ego.velocity = 0.0;
        let (x0, y0) = (sim.world.ego.x, sim.world.ego.y);
        sim.step(Action { accel: 0.0, steer: 0.0 });
        assert!((sim.world.ego.x - x0).abs() < 1e-12);
        assert!((sim.world.ego.y - y0).abs() < 1e-12);
    }

    #[test]
    fn coasting_advances_v_dt() {
        let script = build_scenario(Category::EmergencyBrake, 0);
        let mut sim = Simulation::new(&script);
        sim.world.ego.velocity = 10.0;
        let (x0, y0) = (sim.world.ego.x, sim.world.ego.y);
        let h = sim.world.ego.heading;
        sim.step(Action { accel: 0.0, steer: 0.0 });
        let moved = ((sim.world.ego.x - x0).powi(2) + (sim.world.ego.y - y0).powi(2)).sqrt();
        assert!((moved - 5.0).abs() < 1e-9, "moved {moved}");
        assert!((sim.world.ego.heading - h).abs() < 1e-12);
    }

    #[test]
    fn full_lock_heading_matches_fine_integration() {
        let ego = EgoState { x: 0.0, y: 0.0, heading: 0.2, velocity: 8.0, acceleration: 0.0 };
        let act = Action { accel: 1.5, steer: STEER_MAX };
        let coarse = integrate_bicycle(&ego, act);

        // fine-timestep oracle at dt = 0.001
        let mut s = [ego.x, ego.y, ego.heading, ego.velocity];
        let n = (DT / 0.001) as usize;
        for _ in 0..n {
            let v = s[3];
            let a = if v >= V_MAX && act.accel > 0.0 { 0.0 } else { act.accel };
            s[0] += 0.001 * v * s[2].cos();
            s[1] += 0.001 * v * s[2].sin();
            s[2] += 0.001 * v * act.steer.tan() / WHEELBASE;
            s[3] = (v + 0.001 * a).clamp(0.0, V_MAX);
        }
        let d_coarse = wrap_angle(coarse.heading - ego.heading);
        let d_fine = wrap_angle(s[2] - ego.heading);
        assert!((d_coarse - d_fine).abs() < 1e-3, "{d_coarse} vs {d_fine}");
    }

    #[test]
    fn action_clamping_is_logged() {
        let script = build_scenario(Category::GiveWay, 1);
        let mut sim = Simulation::new(&script);
        let out = sim.step(Action { accel: 9.0, steer: 0.0 });
        assert!(sim.log.steps[0].action_clamped);
        assert_eq!(sim.log.steps[0].action.accel, A_MAX);
        assert!(out.infractions.is_empty());
    }

    #[test]
    fn angle_wrapping() {
        assert!((wrap_angle(std::f64::consts::PI + 0.1) + std::f64::consts::PI - 0.1).abs() < 1e-12);
        assert!((wrap_angle(-std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
    }
}
