//! Policies for closed-loop evaluation: the expert oracle and the model
//! policy (plan at 2 Hz, track the selected mode).

use crate::dataset::to_world_frame;
use crate::lang::{describe, question_bank, QAItem};
use crate::model::VlaModel;
use crate::pretrain::empty_description;
use crate::rollout::LangToggles;
use crate::world::expert::expert_action;
use crate::world::observe::{observe_with_order, slot_order, AGENT_SLOTS};
use crate::world::scenario::ScenarioScript;
use crate::world::{Action, Trajectory, WorldState, DT, STEER_MAX, WHEELBASE};

pub trait Policy {
    fn reset(&mut self);
    fn act(&mut self, script: &ScenarioScript, world: &WorldState) -> Action;
    /// The plan the last action tracked, if the policy plans explicitly.
    fn last_plan(&self) -> Option<&Trajectory> {
        None
    }
}

/// The scripted expert oracle as a policy.
#[derive(Default)]
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn reset(&mut self) {}

    fn act(&mut self, script: &ScenarioScript, world: &WorldState) -> Action {
        expert_action(script, world).0
    }
}

/// Pure-pursuit tracking of an ego-frame waypoint plan.
pub fn track_plan(waypoints: &[(f64, f64)], velocity: f64) -> Action {
    // target speed from the arc length of the first two plan steps
    let d1 = (waypoints[0].0.powi(2) + waypoints[0].1.powi(2)).sqrt();
    let d2 = {
        let (dx, dy) = (waypoints[1].0 - waypoints[0].0, waypoints[1].1 - waypoints[0].1);
        (dx * dx + dy * dy).sqrt()
    };
    let v_des = (d1 + d2) / (2.0 * DT);
    let accel = ((v_des - velocity) / DT).clamp(-crate::world::A_MAX, crate::world::A_MAX);

    // lookahead point along the plan polyline
    let lookahead = (1.5 + 0.6 * velocity).clamp(3.0, 10.0);
    let mut point = *waypoints.last().unwrap();
    let mut walked = 0.0;
    let mut prev = (0.0, 0.0);
    for &wp in waypoints {
        let (dx, dy) = (wp.0 - prev.0, wp.1 - prev.1);
        let seg = (dx * dx + dy * dy).sqrt();
        if walked + seg >= lookahead && seg > 1e-9 {
            let f = (lookahead - walked) / seg;
            point = (prev.0 + f * dx, prev.1 + f * dy);
            break;
        }
        walked += seg;
        prev = wp;
    }
    let ld = (point.0 * point.0 + point.1 * point.1).sqrt().max(1.0);
    let alpha = point.1.atan2(point.0);
    let steer = (2.0 * WHEELBASE * alpha.sin() / ld).atan().clamp(-STEER_MAX, STEER_MAX);
    Action { accel, steer }
}

/// Model-driven policy: keeps a short world-snapshot buffer, re-encodes the
/// history with the current slot ordering, plans, and tracks the
/// argmax-score mode.
pub struct ModelPolicy<'m> {
    pub model: &'m VlaModel,
    pub lang: LangToggles,
    buffer: Vec<WorldState>,
    last_plan: Option<Trajectory>,
}

impl<'m> ModelPolicy<'m> {
    pub fn new(model: &'m VlaModel, lang: LangToggles) -> Self {
        ModelPolicy { model, lang, buffer: Vec::new(), last_plan: None }
    }

    /// Predict the plan (world frame) for the current state.
    pub fn plan(&mut self, script: &ScenarioScript, world: &WorldState) -> Trajectory {
        self.buffer.push(world.clone());
        let frames = self.model.cfg.context_frames;
        if self.buffer.len() > frames {
            let excess = self.buffer.len() - frames;
            self.buffer.drain(0..excess);
        }
        let order: Vec<Option<usize>> = {
            let by_dist = slot_order(world);
            (0..AGENT_SLOTS)
                .map(|k| by_dist.get(k).map(|&i| world.agents[i].script_idx))
                .collect()
        };
        let history: Vec<_> = (0..frames)
            .map(|i| {
                let idx = (self.buffer.len() + i).saturating_sub(frames).min(self.buffer.len() - 1);
                observe_with_order(script, &self.buffer[idx], &order)
            })
            .collect();
        let desc = if self.lang.sc_desc { describe(script, world) } else { empty_description() };
        let qa = QAItem {
            question: question_bank()[(script.seed as usize + world.step) % 3].clone(),
            answer: Vec::new(),
            step: world.step,
        };
        let question = self.lang.questions.then_some(&qa);

        let mut g = self.model.graph();
        let stream = self.model.encode(&mut g, &history, &desc, question);
        let (tok, _) = self.model.infer_tokens(&mut g, stream);
        let plan = self.model.plan_decode(&mut g, tok.ego_mean, tok.ego_logvar, None);
        let best = plan.best_mode(&g);
        let wps = g.tape.value(plan.mode_waypoints[best]);
        let pose = (world.ego.x, world.ego.y, world.ego.heading);
        let world_wps: Vec<(f64, f64)> =
            (0..wps.rows()).map(|r| to_world_frame(pose, wps.at(r, 0), wps.at(r, 1))).collect();
        Trajectory::new(world_wps)
    }
}

impl Policy for ModelPolicy<'_> {
    fn reset(&mut self) {
        self.buffer.clear();
        self.last_plan = None;
    }

    fn act(&mut self, script: &ScenarioScript, world: &WorldState) -> Action {
        let plan_world = self.plan(script, world);
        // track in the ego frame
        let pose = (world.ego.x, world.ego.y, world.ego.heading);
        let ego_wps: Vec<(f64, f64)> = plan_world
            .waypoints
            .iter()
            .map(|&(x, y)| crate::dataset::to_ego_frame(pose, x, y))
            .collect();
        let action = track_plan(&ego_wps, world.ego.velocity);
        self.last_plan = Some(plan_world);
        action
    }

    fn last_plan(&self) -> Option<&Trajectory> {
        self.last_plan.as_ref()
    }
}

/// Tracks the expert's own plan through the waypoint tracker; exercises the
/// tracker separately from the model.
#[derive(Default)]
pub struct ExpertPlanTracker {
    last_plan: Option<Trajectory>,
}

impl Policy for ExpertPlanTracker {
    fn reset(&mut self) {
        self.last_plan = None;
    }

    fn act(&mut self, script: &ScenarioScript, world: &WorldState) -> Action {
        let (plan, _) = crate::world::expert::expert_plan(script, world);
        let pose = (world.ego.x, world.ego.y, world.ego.heading);
        let ego_wps: Vec<(f64, f64)> = plan
            .waypoints
            .iter()
            .map(|&(x, y)| crate::dataset::to_ego_frame(pose, x, y))
            .collect();
        let action = track_plan(&ego_wps, world.ego.velocity);
        self.last_plan = Some(plan);
        action
    }

    fn last_plan(&self) -> Option<&Trajectory> {
        self.last_plan.as_ref()
    }
}
