//! Closed-loop and open-loop evaluation: driving score, success rate,
//! efficiency and comfort analogs, the multi-ability breakdown, and the
//! ablation configuration ladder.

pub mod ablation;
pub mod policy;
pub mod svg;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{to_world_frame, Dataset};
use crate::geometry::{obb_overlap, Obb};
use crate::model::VlaModel;
use crate::rollout::LangToggles;
use crate::world::scenario::{build_scenario, Category, ScenarioScript};
use crate::world::{EpisodeLog, InfractionKind, Simulation, Trajectory};
use policy::Policy;

/// Per-event penalty factors applied to the completion percentage.
pub const PENALTY_COLLISION: f64 = 0.60;
pub const PENALTY_SIGNAL: f64 = 0.70;
pub const PENALTY_DEPARTURE: f64 = 0.70;
/// Comfort thresholds.
pub const COMFORT_JERK: f64 = 6.0;
pub const COMFORT_LAT_ACCEL: f64 = 4.0;

/// Closed-loop scores for one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub category: Category,
    pub seed: u64,
    pub driving_score: f64,
    pub success: bool,
    pub efficiency: f64,
    pub comfort: f64,
    pub completion: f64,
    pub collisions: usize,
    pub signal_violations: usize,
    pub departures: usize,
    pub steps: usize,
    /// Set when the policy emitted a non-finite action.
    pub flagged: bool,
}

/// Derive the closed-loop scores from an episode log; shared by the live
/// path and offline recomputation so the two agree bit-exactly.
pub fn score_episode(script: &ScenarioScript, log: &EpisodeLog, flagged: bool) -> EpisodeResult {
    let mut collisions = 0;
    let mut signals = 0;
    let mut departures = 0;
    for inf in &log.infractions {
        match inf.kind {
            InfractionKind::Collision => collisions += 1,
            InfractionKind::SignalViolation => signals += 1,
            InfractionKind::RouteDeparture => departures += 1,
        }
    }
    let penalties = PENALTY_COLLISION.powi(collisions as i32)
        * PENALTY_SIGNAL.powi(signals as i32)
        * PENALTY_DEPARTURE.powi(departures as i32);
    let driving_score = if flagged { 0.0 } else { 100.0 * log.completion * penalties };
    let success = !flagged && log.reached_goal && collisions == 0;

    let steps = log.steps.len().max(1) as f64;
    let efficiency = 100.0
        * log
            .steps
            .iter()
            .map(|s| s.ego.velocity / script.route.speed_limit)
            .sum::<f64>()
        / steps;
    let comfort = 100.0
        * log
            .steps
            .iter()
            .filter(|s| s.jerk.abs() <= COMFORT_JERK && s.lat_accel.abs() <= COMFORT_LAT_ACCEL)
            .count() as f64
        / steps;

    EpisodeResult {
        category: script.category,
        seed: script.seed,
        driving_score,
        success,
        efficiency: efficiency.max(0.0),
        comfort,
        completion: log.completion,
        collisions,
        signal_violations: signals,
        departures,
        steps: log.steps.len(),
        flagged,
    }
}

/// Run one closed-loop episode under a policy.
pub fn run_episode(script: &ScenarioScript, policy: &mut dyn Policy) -> (EpisodeResult, EpisodeLog) {
    policy.reset();
    let mut sim = Simulation::new(script);
    let mut flagged = false;
    while !sim.is_done() {
        let action = policy.act(script, &sim.world);
        if !action.accel.is_finite() || !action.steer.is_finite() {
            flagged = true;
            break;
        }
        sim.step(action);
    }
    let log = sim.log.clone();
    (score_episode(script, &log, flagged), log)
}

/// Aggregates over a set of episode results.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub episodes: usize,
    pub driving_score: f64,
    pub success_rate: f64,
    pub efficiency: f64,
    pub comfort: f64,
    pub collision_rate: f64,
}

fn aggregate(results: &[&EpisodeResult]) -> Aggregate {
    let n = results.len().max(1) as f64;
    Aggregate {
        episodes: results.len(),
        driving_score: results.iter().map(|r| r.driving_score).sum::<f64>() / n,
        success_rate: 100.0 * results.iter().filter(|r| r.success).count() as f64 / n,
        efficiency: results.iter().map(|r| r.efficiency).sum::<f64>() / n,
        comfort: results.iter().map(|r| r.comfort).sum::<f64>() / n,
        collision_rate: 100.0 * results.iter().filter(|r| r.collisions > 0).count() as f64 / n,
    }
}

/// Closed-loop report: per-episode scores plus per-category and overall
/// aggregates, reduced in episode order so threading never changes them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopReport {
    pub episodes: Vec<EpisodeResult>,
    pub per_category: Vec<(Category, Aggregate)>,
    pub overall: Aggregate,
}

impl ClosedLoopReport {
    fn from_results(mut episodes: Vec<EpisodeResult>) -> Self {
        episodes.sort_by(|a, b| {
            a.category.to_string().cmp(&b.category.to_string()).then(a.seed.cmp(&b.seed))
        });
        let per_category = Category::ALL
            .iter()
            .filter_map(|&c| {
                let rows: Vec<&EpisodeResult> =
                    episodes.iter().filter(|e| e.category == c).collect();
                if rows.is_empty() {
                    None
                } else {
                    Some((c, aggregate(&rows)))
                }
            })
            .collect();
        let overall = aggregate(&episodes.iter().collect::<Vec<_>>());
        ClosedLoopReport { episodes, per_category, overall }
    }

    /// Per-category success percentages plus the unweighted mean; missing
    /// categories are excluded with a warning.
    pub fn multi_ability(&self) -> (Vec<(Category, f64)>, f64) {
        let mut rows = Vec::new();
        for &c in &Category::ALL {
            match self.per_category.iter().find(|(cat, _)| *cat == c) {
                Some((_, agg)) => rows.push((c, agg.success_rate)),
                None => log::warn!("multi_ability: category {c} absent from the suite"),
            }
        }
        let mean = rows.iter().map(|(_, v)| v).sum::<f64>() / rows.len().max(1) as f64;
        (rows, mean)
    }
}

/// Run the closed-loop suite. Episodes evaluate in parallel, each on its own
/// world with its own policy instance; results reduce in sorted order.
pub fn run_closed_loop<P, F>(factory: F, suite: &[(Category, u64)]) -> (ClosedLoopReport, Vec<EpisodeLog>)
where
    P: Policy,
    F: Fn() -> P + Sync,
{
    let mut rows: Vec<(usize, EpisodeResult, EpisodeLog)> = suite
        .par_iter()
        .enumerate()
        .map(|(i, &(cat, seed))| {
            let script = build_scenario(cat, seed);
            let mut policy = factory();
            let (result, log) = run_episode(&script, &mut policy);
            (i, result, log)
        })
        .collect();
    rows.sort_by_key(|(i, _, _)| *i);
    let logs = rows.iter().map(|(_, _, l)| l.clone()).collect();
    let results = rows.into_iter().map(|(_, r, _)| r).collect();
    (ClosedLoopReport::from_results(results), logs)
}

/// Open-loop trajectory metrics at the 1/2/3 s horizons.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopReport {
    pub l2: [f64; 3],
    pub l2_avg: f64,
    pub collision: [f64; 3],
    pub collision_avg: f64,
    pub samples: usize,
}

/// Horizon waypoint indices (0-based) for 1, 2, 3 seconds at 2 Hz.
pub const HORIZON_WP: [usize; 3] = [1, 3, 5];

/// Open-loop evaluation on held-out episodes: predict a plan from each
/// recorded context, then score L2 against the expert trajectory and
/// collision against the recorded agent boxes.
pub fn open_loop_eval(model: &VlaModel, dataset: &Dataset, lang: &LangToggles) -> OpenLoopReport {
    let frames = model.cfg.context_frames;
    let horizon = model.cfg.plan_horizon;
    let mut l2_sum = [0.0f64; 3];
    let mut coll_sum = [0.0f64; 3];
    let mut samples = 0usize;

    for (e, ep) in dataset.episodes.iter().enumerate() {
        if ep.len() <= horizon {
            continue;
        }
        for step in (0..ep.len() - horizon).step_by(2) {
            let sample = dataset.sample_at(e, step, frames, horizon);
            let desc = if lang.sc_desc {
                sample.description.clone()
            } else {
                crate::pretrain::empty_description()
            };
            let question = lang.questions.then_some(&sample.qa);
            let mut g = model.graph();
            let stream = model.encode(&mut g, &sample.history, &desc, question);
            let (tok, _) = model.infer_tokens(&mut g, stream);
            let plan = model.plan_decode(&mut g, tok.ego_mean, tok.ego_logvar, None);
            let best = plan.best_mode(&g);
            let wps = g.tape.value(plan.mode_waypoints[best]).clone();

            let pose = sample.ego_pose;
            let pred_world: Vec<(f64, f64)> =
                (0..wps.rows()).map(|r| to_world_frame(pose, wps.at(r, 0), wps.at(r, 1))).collect();
            let gt = &ep.states[step].expert_plan.waypoints;

            for (hi, &wp_idx) in HORIZON_WP.iter().enumerate() {
                let (px, py) = pred_world[wp_idx];
                let (gx, gy) = gt[wp_idx];
                l2_sum[hi] += ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
            }

            // collision by horizon: predicted ego box against recorded boxes
            let mut collided_by = [false; 3];
            let mut hit_step: Option<usize> = None;
            for j in 0..horizon {
                let world = &ep.states[step + 1 + j].world;
                let heading = if j == 0 {
                    let (dx, dy) = (pred_world[0].0 - pose.0, pred_world[0].1 - pose.1);
                    if dx * dx + dy * dy > 1e-9 { dy.atan2(dx) } else { pose.2 }
                } else {
                    let (dx, dy) = (
                        pred_world[j].0 - pred_world[j - 1].0,
                        pred_world[j].1 - pred_world[j - 1].1,
                    );
                    if dx * dx + dy * dy > 1e-9 {
                        dy.atan2(dx)
                    } else {
                        pose.2
                    }
                };
                let ego_box = Obb::new(
                    pred_world[j].0,
                    pred_world[j].1,
                    crate::world::EGO_LENGTH,
                    crate::world::EGO_WIDTH,
                    heading,
                );
                if world.agents.iter().any(|a| obb_overlap(&ego_box, &a.state.bbox)) {
                    hit_step = Some(j);
                    break;
                }
            }
            if let Some(j) = hit_step {
                for (hi, &wp_idx) in HORIZON_WP.iter().enumerate() {
                    if j <= wp_idx {
                        collided_by[hi] = true;
                    }
                }
            }
            for hi in 0..3 {
                if collided_by[hi] {
                    coll_sum[hi] += 1.0;
                }
            }
            samples += 1;
        }
    }

    let n = samples.max(1) as f64;
    let l2 = [l2_sum[0] / n, l2_sum[1] / n, l2_sum[2] / n];
    let collision = [coll_sum[0] / n, coll_sum[1] / n, coll_sum[2] / n];
    OpenLoopReport {
        l2,
        l2_avg: (l2[0] + l2[1] + l2[2]) / 3.0,
        collision,
        collision_avg: (collision[0] + collision[1] + collision[2]) / 3.0,
        samples,
    }
}

/// Plain L2 between two world-frame trajectories at the horizon waypoints
/// (shared helper for the rigid-transform invariance check).
pub fn l2_at_horizons(pred: &Trajectory, gt: &Trajectory) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (hi, &wp) in HORIZON_WP.iter().enumerate() {
        let (px, py) = pred.waypoints[wp];
        let (gx, gy) = gt.waypoints[wp];
        out[hi] = ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
    }
    out
}
