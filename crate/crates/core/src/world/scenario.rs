//! Scripted scenario generation: five ability categories, each a seeded,
//! fully-determined script (route, agents, triggers, horizon).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Half-width of the corridor an agent must share with the ego to count as
/// in-lane for gap keeping and conflict checks.
pub const LANE_HALF_WIDTH: f64 = 1.75;
/// World extent agents must stay within.
pub const MAP_BOUND: f64 = 300.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Merging,
    Overtaking,
    EmergencyBrake,
    GiveWay,
    TrafficSign,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Merging,
        Category::Overtaking,
        Category::EmergencyBrake,
        Category::GiveWay,
        Category::TrafficSign,
    ];

    pub fn parse(s: &str) -> Option<Category> {
        match s {
            "Merging" => Some(Category::Merging),
            "Overtaking" => Some(Category::Overtaking),
            "EmergencyBrake" => Some(Category::EmergencyBrake),
            "GiveWay" => Some(Category::GiveWay),
            "TrafficSign" => Some(Category::TrafficSign),
            _ => None,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Merging => "Merging",
            Category::Overtaking => "Overtaking",
            Category::EmergencyBrake => "EmergencyBrake",
            Category::GiveWay => "GiveWay",
            Category::TrafficSign => "TrafficSign",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
    Static,
}

impl AgentKind {
    pub fn one_hot_index(self) -> usize {
        match self {
            AgentKind::Vehicle => 0,
            AgentKind::Pedestrian => 1,
            AgentKind::Cyclist => 2,
            AgentKind::Static => 3,
        }
    }
}

/// Lane polyline with a speed limit; densely sampled so projection and
/// curvature queries stay simple.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Route {
    pub points: Vec<(f64, f64)>,
    pub speed_limit: f64,
    #[serde(skip)]
    cum: std::sync::OnceLock<Vec<f64>>,
}

impl PartialEq for Route {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points && self.speed_limit == other.speed_limit
    }
}

impl Route {
    pub fn new(points: Vec<(f64, f64)>, speed_limit: f64) -> Self {
        assert!(points.len() >= 2, "route needs at least two points");
        Route { points, speed_limit, cum: std::sync::OnceLock::new() }
    }

    fn cum(&self) -> &[f64] {
        self.cum.get_or_init(|| {
            let mut acc = Vec::with_capacity(self.points.len());
            let mut total = 0.0;
            acc.push(0.0);
            for w in self.points.windows(2) {
                let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                total += (dx * dx + dy * dy).sqrt();
                acc.push(total);
            }
            acc
        })
    }

    pub fn length(&self) -> f64 {
        *self.cum().last().unwrap()
    }

    pub fn point_at(&self, arc: f64) -> (f64, f64) {
        super::path_point(&self.points, arc)
    }

    pub fn tangent_at(&self, arc: f64) -> f64 {
        super::path_tangent(&self.points, arc)
    }

    /// Signed curvature from tangent-angle change per unit arc.
    pub fn curvature_at(&self, arc: f64) -> f64 {
        let h = 2.0;
        let a = self.tangent_at((arc - h).max(0.0));
        let b = self.tangent_at((arc + h).min(self.length()));
        super::wrap_angle(b - a) / (2.0 * h)
    }

    /// Project a point onto the route: (arc length, signed lateral offset).
    /// Positive lateral is left of the travel direction. The first and last
    /// segments extend past the route ends so points beyond them still get a
    /// true perpendicular offset (arc < 0 or arc > length there).
    pub fn project(&self, x: f64, y: f64) -> (f64, f64) {
        let cum = self.cum();
        let n_seg = self.points.len() - 1;
        let mut best = (0.0, f64::INFINITY, 0.0f64);
        for (i, w) in self.points.windows(2).enumerate() {
            let (ax, ay) = w[0];
            let (bx, by) = w[1];
            let (ex, ey) = (bx - ax, by - ay);
            let seg2 = ex * ex + ey * ey;
            if seg2 == 0.0 {
                continue;
            }
            let t_raw = ((x - ax) * ex + (y - ay) * ey) / seg2;
            let lo = if i == 0 { f64::NEG_INFINITY } else { 0.0 };
            let hi = if i == n_seg - 1 { f64::INFINITY } else { 1.0 };
            let t = t_raw.clamp(lo, hi);
            let (px, py) = (ax + t * ex, ay + t * ey);
            let d2 = (x - px) * (x - px) + (y - py) * (y - py);
            if d2 < best.1 {
                let seg = seg2.sqrt();
                // cross product sign gives left/right of the segment direction
                let cross = ex * (y - ay) - ey * (x - ax);
                best = (cum[i] + t * seg, d2, cross.signum() * d2.sqrt());
            }
        }
        (best.0, best.2)
    }
}

/// Piecewise speed plan entry: from this step on, chase this target speed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedPhase {
    pub from_step: usize,
    pub target_speed: f64,
}

/// Time-indexed behavior of one scripted agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentScript {
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
    pub path: Vec<(f64, f64)>,
    pub start_arc: f64,
    pub initial_speed: f64,
    pub phases: Vec<SpeedPhase>,
    pub accel_limit: f64,
}

impl AgentScript {
    /// Target speed at a world step, honoring the latest applicable phase.
    pub fn target_speed_at(&self, step: usize, _triggers: &[Trigger]) -> f64 {
        let mut target = self.initial_speed;
        for p in &self.phases {
            if step >= p.from_step {
                target = p.target_speed;
            }
        }
        target
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TriggerKind {
    /// Lead vehicle brakes hard at `step`, holds, then resumes.
    LeadBrake { agent: usize, step: usize, hold_steps: usize },
    /// A crossing agent occupies the route conflict region between the steps.
    CrossingWindow { agent: usize, enter_step: usize, exit_step: usize, conflict_arc: f64 },
    /// Red-light phase guarding a stop line.
    SignalPhase { red_from: usize, red_until: usize, line_arc: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub kind: TriggerKind,
}

/// Deterministic script for one (category, seed) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub category: Category,
    pub seed: u64,
    pub route: Route,
    pub ego_initial_speed: f64,
    pub agents: Vec<AgentScript>,
    pub triggers: Vec<Trigger>,
    pub horizon: usize,
}

impl ScenarioScript {
    pub fn lead_brake(&self) -> Option<(usize, usize, usize)> {
        self.triggers.iter().find_map(|t| match t.kind {
            TriggerKind::LeadBrake { agent, step, hold_steps } => Some((agent, step, hold_steps)),
            _ => None,
        })
    }

    pub fn crossing_window(&self) -> Option<(usize, usize, usize, f64)> {
        self.triggers.iter().find_map(|t| match t.kind {
            TriggerKind::CrossingWindow { agent, enter_step, exit_step, conflict_arc } => {
                Some((agent, enter_step, exit_step, conflict_arc))
            }
            _ => None,
        })
    }

    pub fn signal_phase(&self) -> Option<(usize, usize, f64)> {
        self.triggers.iter().find_map(|t| match t.kind {
            TriggerKind::SignalPhase { red_from, red_until, line_arc } => {
                Some((red_from, red_until, line_arc))
            }
            _ => None,
        })
    }
}

fn straight(y: f64, x0: f64, x1: f64) -> Vec<(f64, f64)> {
    let n = ((x1 - x0).abs().ceil() as usize).max(2);
    (0..=n).map(|i| (x0 + (x1 - x0) * i as f64 / n as f64, y)).collect()
}

fn vehicle(path: Vec<(f64, f64)>, start_arc: f64, speed: f64) -> AgentScript {
    AgentScript {
        kind: AgentKind::Vehicle,
        length: 4.4,
        width: 1.8,
        path,
        start_arc,
        initial_speed: speed,
        phases: Vec::new(),
        accel_limit: 5.0,
    }
}

/// Deterministic per-(category, seed) script construction.
pub fn build_scenario(category: Category, seed: u64) -> ScenarioScript {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(category as u64),
    );
    match category {
        Category::EmergencyBrake => emergency_brake(seed, &mut rng),
        Category::GiveWay => give_way(seed, &mut rng),
        Category::TrafficSign => traffic_sign(seed, &mut rng),
        Category::Merging => merging(seed, &mut rng),
        Category::Overtaking => overtaking(seed, &mut rng),
    }
}

fn ambient_lane_traffic(
    rng: &mut ChaCha8Rng,
    count: usize,
    lane_y: f64,
    x_from: f64,
    speed: f64,
) -> Vec<AgentScript> {
    (0..count)
        .map(|i| {
            let x = x_from + i as f64 * rng.gen_range(28.0..40.0);
            vehicle(straight(lane_y, x, x + 300.0), 0.0, speed + rng.gen_range(-1.0..1.0))
        })
        .collect()
}

fn emergency_brake(seed: u64, rng: &mut ChaCha8Rng) -> ScenarioScript {
    let limit = rng.gen_range(9.0..11.0);
    let route = Route::new(straight(0.0, 0.0, 160.0), limit);
    let ego_v0 = rng.gen_range(6.0..8.0);

    // lead cruises below the limit so the ego is already following when the
    // brake trigger fires, even at the latest trigger step
    let lead_speed = limit * rng.gen_range(0.55..0.65);
    let gap0 = rng.gen_range(26.0..34.0);
    let brake_step = rng.gen_range(10..=30);
    let hold = rng.gen_range(8..=12);
    let mut lead = vehicle(straight(0.0, gap0, gap0 + 300.0), 0.0, lead_speed);
    lead.phases = vec![
        SpeedPhase { from_step: brake_step, target_speed: 0.0 },
        SpeedPhase { from_step: brake_step + hold, target_speed: limit },
    ];

    let mut agents = vec![lead];
    let n_ambient = rng.gen_range(1..=3);
    agents.extend(ambient_lane_traffic(rng, n_ambient, 5.5, -30.0, 7.0));
    let triggers =
        vec![Trigger { kind: TriggerKind::LeadBrake { agent: 0, step: brake_step, hold_steps: hold } }];
    ScenarioScript {
        category: Category::EmergencyBrake,
        seed,
        route,
        ego_initial_speed: ego_v0,
        agents,
        triggers,
        horizon: 72,
    }
}

fn give_way(seed: u64, rng: &mut ChaCha8Rng) -> ScenarioScript {
    let limit = rng.gen_range(7.0..9.0);
    let route = Route::new(straight(0.0, 0.0, 115.0), limit);
    let ego_v0 = rng.gen_range(5.0..7.0);

    let conflict_arc = rng.gen_range(50.0..75.0);
    let walk_speed = rng.gen_range(1.6..2.4);
    // crossing path: perpendicular, from 12 m left of the lane to 12 m right
    let path: Vec<(f64, f64)> = (0..=48).map(|i| (conflict_arc, 12.0 - i as f64 * 0.5)).collect();
    let start_wait = rng.gen_range(2..8usize);
    let kind = if rng.gen_bool(0.5) { AgentKind::Pedestrian } else { AgentKind::Cyclist };
    let (len, wid, acc) = match kind {
        AgentKind::Pedestrian => (0.6, 0.6, 1.5),
        _ => (1.8, 0.7, 2.0),
    };
    let mut crosser = AgentScript {
        kind,
        length: len,
        width: wid,
        path,
        start_arc: 0.0,
        initial_speed: 0.0,
        phases: vec![SpeedPhase { from_step: start_wait, target_speed: walk_speed }],
        accel_limit: acc,
    };
    // conflict window from an exact replay of the walker schedule
    let (enter_step, exit_step) = {
        let corridor = LANE_HALF_WIDTH + 0.5 * wid + 0.3;
        let (mut enter, mut exit) = (usize::MAX, 0);
        let (mut v, mut arc) = (0.0f64, 0.0f64);
        for step in 0..200usize {
            let y = 12.0 - arc;
            if y.abs() <= corridor {
                enter = enter.min(step);
                exit = step;
            }
            let target = if step >= start_wait { walk_speed } else { 0.0 };
            let h = super::DT / 25.0;
            for _ in 0..25 {
                let a = ((target - v) / h).clamp(-acc, acc);
                v = (v + a * h).max(0.0);
                arc += v * h;
            }
        }
        (enter, exit + 1)
    };
    crosser.phases.push(SpeedPhase { from_step: exit_step + 10, target_speed: 0.0 });

    let mut agents = vec![crosser];
    let n_ambient = rng.gen_range(1..=3);
    agents.extend(ambient_lane_traffic(rng, n_ambient, -5.5, -20.0, 6.0));
    let triggers = vec![Trigger {
        kind: TriggerKind::CrossingWindow { agent: 0, enter_step, exit_step, conflict_arc },
    }];
    ScenarioScript {
        category: Category::GiveWay,
        seed,
        route,
        ego_initial_speed: ego_v0,
        agents,
        triggers,
        horizon: 68,
    }
}

fn traffic_sign(seed: u64, rng: &mut ChaCha8Rng) -> ScenarioScript {
    let limit = rng.gen_range(9.0..11.0);
    let route = Route::new(straight(0.0, 0.0, 125.0), limit);
    let ego_v0 = rng.gen_range(6.0..8.0);

    let line_arc = rng.gen_range(55.0..75.0);
    let red_from = 0;
    let red_until = rng.gen_range(16..26);

    // cross traffic passes through the intersection while the light is red
    let cross_speed = rng.gen_range(6.0..8.0);
    let n_cross = rng.gen_range(1..=2);
    let mut agents = Vec::new();
    for i in 0..n_cross {
        // timed so the vehicle crosses the ego lane strictly inside the red window
        let pass_step: f64 = rng.gen_range(6.0..(red_until as f64 - 4.0));
        let y0 = -cross_speed * pass_step * super::DT;
        let path: Vec<(f64, f64)> =
            (0..=260).map(|k| (line_arc + 6.0 + 4.0 * i as f64, y0 + k as f64)).collect();
        agents.push(AgentScript {
            kind: AgentKind::Vehicle,
            length: 4.4,
            width: 1.8,
            path,
            start_arc: 0.0,
            initial_speed: cross_speed,
            phases: Vec::new(),
            accel_limit: 5.0,
        });
    }
    let n_ambient = rng.gen_range(1..=2);
    agents.extend(ambient_lane_traffic(rng, n_ambient, 5.5, -40.0, 7.0));
    let triggers =
        vec![Trigger { kind: TriggerKind::SignalPhase { red_from, red_until, line_arc } }];
    ScenarioScript {
        category: Category::TrafficSign,
        seed,
        route,
        ego_initial_speed: ego_v0,
        agents,
        triggers,
        horizon: 68,
    }
}

fn merging(seed: u64, rng: &mut ChaCha8Rng) -> ScenarioScript {
    let limit = rng.gen_range(8.0..10.0);
    // ramp at y = -7 easing onto the main lane y = 0 between x = 40 and x = 80
    let mut points = Vec::new();
    for i in 0..=150 {
        let x = i as f64;
        let y = if x < 40.0 {
            -7.0
        } else if x < 80.0 {
            -7.0 * (1.0 + (std::f64::consts::PI * (x - 40.0) / 40.0).cos()) / 2.0
        } else {
            0.0
        };
        points.push((x, y));
    }
    let route = Route::new(points, limit);
    let ego_v0 = rng.gen_range(5.0..7.0);

    // main-lane platoon, slightly under the ego's limit, with one designed
    // gap early enough to catch within the horizon
    let speed = limit - rng.gen_range(1.2..2.2);
    let n = rng.gen_range(3..=5usize);
    let gap_after = rng.gen_range(1..=2usize.min(n - 1));
    let mut agents = Vec::new();
    let mut x = rng.gen_range(15.0..30.0);
    for i in 0..n {
        agents.push(vehicle(straight(0.0, x, x + 300.0), 0.0, speed));
        let spacing =
            if i == gap_after { rng.gen_range(55.0..70.0) } else { rng.gen_range(22.0..28.0) };
        x -= spacing;
    }
    ScenarioScript {
        category: Category::Merging,
        seed,
        route,
        ego_initial_speed: ego_v0,
        agents,
        triggers: Vec::new(),
        horizon: 76,
    }
}

fn overtaking(seed: u64, rng: &mut ChaCha8Rng) -> ScenarioScript {
    let limit = rng.gen_range(11.0..13.0);
    let route = Route::new(straight(0.0, 0.0, 155.0), limit);
    let ego_v0 = rng.gen_range(7.0..9.0);

    let slow_speed = rng.gen_range(2.5..4.5);
    let gap0 = rng.gen_range(30.0..40.0);
    let slow_lead = vehicle(straight(0.0, gap0, gap0 + 300.0), 0.0, slow_speed);

    let mut agents = vec![slow_lead];
    // distant same-direction traffic on the far left lane (never conflicts)
    let n_ambient = rng.gen_range(1..=3);
    agents.extend(ambient_lane_traffic(rng, n_ambient, 7.0, -60.0, 6.0));
    ScenarioScript {
        category: Category::Overtaking,
        seed,
        route,
        ego_initial_speed: ego_v0,
        agents,
        triggers: Vec::new(),
        horizon: 68,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_scripts() {
        for cat in Category::ALL {
            let a = build_scenario(cat, 7);
            let b = build_scenario(cat, 7);
            assert_eq!(a, b, "{cat} not deterministic");
        }
    }

    #[test]
    fn emergency_brake_trigger_within_bounds() {
        for seed in 0..100 {
            let s = build_scenario(Category::EmergencyBrake, seed);
            let (_, step, _) = s.lead_brake().expect("missing trigger");
            assert!((10..=30).contains(&step), "seed {seed}: step {step}");
        }
    }

    #[test]
    fn scripts_satisfy_invariants() {
        for cat in Category::ALL {
            for seed in 0..100 {
                let s = build_scenario(cat, seed);
                assert!(s.route.length() >= 100.0, "{cat}/{seed}: route too short");
                assert!(
                    (2..=8).contains(&s.agents.len()),
                    "{cat}/{seed}: {} agents",
                    s.agents.len()
                );
                assert!(s.horizon > 0);
                for a in &s.agents {
                    assert!(a.length > 0.0 && a.width > 0.0);
                    assert!(a.accel_limit <= crate::world::A_MAX);
                    assert!(a.initial_speed >= 0.0 && a.initial_speed <= crate::world::V_MAX);
                    for p in &a.phases {
                        assert!(p.target_speed >= 0.0 && p.target_speed <= crate::world::V_MAX);
                    }
                    for &(x, y) in &a.path {
                        assert!(
                            x.abs() <= MAP_BOUND + 150.0 && y.abs() <= MAP_BOUND,
                            "{cat}/{seed}: path point ({x}, {y}) out of bounds"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn route_projection_roundtrip() {
        let s = build_scenario(Category::Merging, 3);
        for arc in [0.0, 25.0, 60.0, 100.0, 140.0] {
            let (x, y) = s.route.point_at(arc);
            let (proj, lat) = s.route.project(x, y);
            assert!((proj - arc).abs() < 0.6, "arc {arc} -> {proj}");
            assert!(lat.abs() < 1e-6);
        }
    }
}
