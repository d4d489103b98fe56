//! Fixed-layout ego-frame observation features.
//!
//! Layout (see the constants below for offsets):
//! - ego block (4): velocity, acceleration, heading error to route tangent,
//!   signed lateral offset
//! - 8 agent slots (13 each), nearest first: rel x, rel y, rel vx, rel vy,
//!   length, width, cos/sin of relative heading, kind one-hot (4), valid bit
//! - route block (7): signed curvature sampled at +{0,5,10,20,40,60} m,
//!   remaining route length / 100 (capped at 1)
//! - trigger block (5): lead-brake, crossing, red-signal, slow-lead flags,
//!   distance to the governing trigger point / 100 (capped at 1)
//!
//! Every entry is either a scalar invariant or expressed in the ego frame, so
//! a rigid transform of the whole world leaves the vector unchanged.

use serde::{Deserialize, Serialize};

use super::scenario::{ScenarioScript, TriggerKind, LANE_HALF_WIDTH};
use super::{wrap_angle, WorldState};

pub const AGENT_SLOTS: usize = 8;
pub const AGENT_FEAT: usize = 13;
pub const EGO_FEAT: usize = 4;
pub const ROUTE_FEAT: usize = 7;
pub const TRIGGER_FEAT: usize = 5;
/// Non-agent features, grouped as the per-frame embedding input.
pub const FRAME_FEAT: usize = EGO_FEAT + ROUTE_FEAT + TRIGGER_FEAT;
pub const OBS_DIM: usize = EGO_FEAT + AGENT_SLOTS * AGENT_FEAT + ROUTE_FEAT + TRIGGER_FEAT;

pub const AGENT_BLOCK: usize = EGO_FEAT;
pub const ROUTE_BLOCK: usize = AGENT_BLOCK + AGENT_SLOTS * AGENT_FEAT;
pub const TRIGGER_BLOCK: usize = ROUTE_BLOCK + ROUTE_FEAT;

const CURVATURE_OFFSETS: [f64; 6] = [0.0, 5.0, 10.0, 20.0, 40.0, 60.0];

/// One observation vector. The layout is stable across checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFeatures(pub Vec<f64>);

impl SceneFeatures {
    pub fn zeros() -> Self {
        SceneFeatures(vec![0.0; OBS_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// The 16 non-agent features: ego block, route block, trigger block.
    pub fn frame_features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(FRAME_FEAT);
        out.extend_from_slice(&self.0[0..EGO_FEAT]);
        out.extend_from_slice(&self.0[ROUTE_BLOCK..ROUTE_BLOCK + ROUTE_FEAT]);
        out.extend_from_slice(&self.0[TRIGGER_BLOCK..TRIGGER_BLOCK + TRIGGER_FEAT]);
        out
    }

    pub fn agent_slot(&self, slot: usize) -> &[f64] {
        let base = AGENT_BLOCK + slot * AGENT_FEAT;
        &self.0[base..base + AGENT_FEAT]
    }

    pub fn slot_valid(&self, slot: usize) -> bool {
        self.agent_slot(slot)[AGENT_FEAT - 1] > 0.5
    }
}

/// Agent slot ordering used by `observe`: by distance, ties by script index.
pub fn slot_order(world: &WorldState) -> Vec<usize> {
    let mut order: Vec<usize> = (0..world.agents.len()).collect();
    let d2 = |i: usize| {
        let b = &world.agents[i].state.bbox;
        let (dx, dy) = (b.cx - world.ego.x, b.cy - world.ego.y);
        dx * dx + dy * dy
    };
    order.sort_by(|&a, &b| {
        d2(a).partial_cmp(&d2(b)).unwrap().then(world.agents[a].script_idx.cmp(&world.agents[b].script_idx))
    });
    order.truncate(AGENT_SLOTS);
    order
}

/// Encode the world into the fixed feature layout (nearest-first slots).
pub fn observe(script: &ScenarioScript, world: &WorldState) -> SceneFeatures {
    let order: Vec<Option<usize>> = {
        let by_dist = slot_order(world);
        (0..AGENT_SLOTS)
            .map(|k| by_dist.get(k).map(|&i| world.agents[i].script_idx))
            .collect()
    };
    observe_with_order(script, world, &order)
}

/// Encode the world with a pinned slot-to-agent assignment (`order[k]` is the
/// script index of the agent in slot k). Pinning keeps slot identity stable
/// across a context window or a rollout.
pub fn observe_with_order(
    script: &ScenarioScript,
    world: &WorldState,
    order: &[Option<usize>],
) -> SceneFeatures {
    let mut f = vec![0.0; OBS_DIM];
    let ego = &world.ego;
    let (ego_arc, ego_lat) = script.route.project(ego.x, ego.y);
    let route_heading = script.route.tangent_at(ego_arc);

    f[0] = ego.velocity;
    f[1] = ego.acceleration;
    f[2] = wrap_angle(ego.heading - route_heading);
    f[3] = ego_lat;

    let (sin_h, cos_h) = ego.heading.sin_cos();
    let to_ego = |x: f64, y: f64| -> (f64, f64) {
        let (dx, dy) = (x - ego.x, y - ego.y);
        (dx * cos_h + dy * sin_h, -dx * sin_h + dy * cos_h)
    };

    for (slot, entry) in order.iter().enumerate().take(AGENT_SLOTS) {
        let Some(script_idx) = entry else { continue };
        let Some(agent) = world.agents.iter().find(|a| a.script_idx == *script_idx) else {
            continue;
        };
        let b = &agent.state.bbox;
        let base = AGENT_BLOCK + slot * AGENT_FEAT;
        let (rx, ry) = to_ego(b.cx, b.cy);
        // velocity vectors in the ego frame; ego's own velocity is (v, 0)
        let (avx, avy) = {
            let (s, c) = b.heading.sin_cos();
            let (wx, wy) = (agent.state.velocity * c, agent.state.velocity * s);
            (wx * cos_h + wy * sin_h, -wx * sin_h + wy * cos_h)
        };
        let rel_heading = wrap_angle(b.heading - ego.heading);
        f[base] = rx;
        f[base + 1] = ry;
        f[base + 2] = avx - ego.velocity;
        f[base + 3] = avy;
        f[base + 4] = b.length;
        f[base + 5] = b.width;
        f[base + 6] = rel_heading.cos();
        f[base + 7] = rel_heading.sin();
        f[base + 8 + agent.state.kind.one_hot_index()] = 1.0;
        f[base + 12] = 1.0;
    }

    for (i, off) in CURVATURE_OFFSETS.iter().enumerate() {
        let s = (ego_arc + off).min(script.route.length());
        f[ROUTE_BLOCK + i] = script.route.curvature_at(s);
    }
    f[ROUTE_BLOCK + 6] = ((script.route.length() - ego_arc) / 100.0).clamp(0.0, 1.0);

    // trigger flags + distance to the governing trigger point along the route
    let mut trigger_dist = f64::INFINITY;
    for trig in &script.triggers {
        match trig.kind {
            TriggerKind::LeadBrake { step, hold_steps, .. } => {
                if world.step >= step && world.step < step + hold_steps + 8 {
                    f[TRIGGER_BLOCK] = 1.0;
                }
            }
            TriggerKind::CrossingWindow { enter_step, exit_step, conflict_arc, .. } => {
                if world.step >= enter_step.saturating_sub(6) && world.step <= exit_step {
                    f[TRIGGER_BLOCK + 1] = 1.0;
                    trigger_dist = trigger_dist.min((conflict_arc - ego_arc).max(0.0));
                }
            }
            TriggerKind::SignalPhase { red_from, red_until, line_arc } => {
                if world.step >= red_from && world.step <= red_until && ego_arc < line_arc {
                    f[TRIGGER_BLOCK + 2] = 1.0;
                    trigger_dist = trigger_dist.min((line_arc - ego_arc).max(0.0));
                }
            }
        }
    }
    // slow lead ahead in lane (overtake/brake pressure cue)
    let slow_lead = world.agents.iter().any(|a| {
        let (arc, lat) = script.route.project(a.state.bbox.cx, a.state.bbox.cy);
        lat.abs() < LANE_HALF_WIDTH
            && arc > ego_arc
            && arc - ego_arc < 30.0
            && a.state.velocity < 0.6 * script.route.speed_limit
    });
    if slow_lead {
        f[TRIGGER_BLOCK + 3] = 1.0;
    }
    if trigger_dist.is_finite() {
        f[TRIGGER_BLOCK + 4] = (trigger_dist / 100.0).clamp(0.0, 1.0);
    }

    SceneFeatures(f)
}
