//! Expert-generated training data: per-step world snapshots, observation
//! features, expert plans, maneuver labels, descriptions, and QA items,
//! with versioned line-delimited serialization.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::lang::{describe, question_bank, QAItem, ScenarioText, EOS};
use crate::world::expert::{expert_action, expert_plan, Maneuver, PlanFlag};
use crate::world::observe::{observe, slot_order, SceneFeatures, AGENT_SLOTS};
use crate::world::scenario::{build_scenario, Category, ScenarioScript};
use crate::world::{wrap_angle, Simulation, Trajectory, WorldState};

pub const EPISODE_FORMAT: &str = "microdrive.episode";
pub const SCRIPTS_FORMAT: &str = "microdrive.scripts";
pub const FORMAT_VERSION: u32 = 1;

/// Everything recorded at one world state of an expert episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub step: usize,
    pub world: WorldState,
    pub features: SceneFeatures,
    pub expert_plan: Trajectory,
    pub plan_flag: PlanFlag,
    pub maneuver: Maneuver,
    pub qa: QAItem,
    pub description: ScenarioText,
    /// Agent script index occupying each observation slot.
    pub slots: Vec<Option<usize>>,
}

/// One expert episode: script plus the per-state records (states 0..=N).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeData {
    pub script: ScenarioScript,
    pub states: Vec<StateRecord>,
}

/// Shared QA construction so the dataset and `lang::qa_schedule` agree.
pub fn qa_item(seed: u64, step: usize, label: Maneuver) -> QAItem {
    let bank = question_bank();
    let tok = crate::lang::maneuver_token(label);
    QAItem { question: bank[(seed as usize + step) % bank.len()].clone(), answer: vec![tok, EOS], step }
}

impl EpisodeData {
    /// Run the expert over the script, recording every visited state.
    pub fn generate(script: ScenarioScript) -> EpisodeData {
        let mut sim = Simulation::new(&script);
        let mut states = Vec::new();
        loop {
            let world = sim.world.clone();
            let (action, label) = expert_action(&script, &world);
            let (plan, flag) = expert_plan(&script, &world);
            let slots: Vec<Option<usize>> = {
                let order = slot_order(&world);
                (0..AGENT_SLOTS)
                    .map(|k| order.get(k).map(|&i| world.agents[i].script_idx))
                    .collect()
            };
            states.push(StateRecord {
                step: world.step,
                world: world.clone(),
                features: observe(&script, &world),
                expert_plan: plan,
                plan_flag: flag,
                maneuver: label,
                qa: qa_item(script.seed, world.step, label),
                description: describe(&script, &world),
                slots,
            });
            if sim.is_done() {
                break;
            }
            sim.step(action);
            if sim.is_done() {
                // record the terminal state as well
                let world = sim.world.clone();
                let (_, label) = expert_action(&script, &world);
                let (plan, flag) = expert_plan(&script, &world);
                let slots: Vec<Option<usize>> = {
                    let order = slot_order(&world);
                    (0..AGENT_SLOTS)
                        .map(|k| order.get(k).map(|&i| world.agents[i].script_idx))
                        .collect()
                };
                states.push(StateRecord {
                    step: world.step,
                    world: world.clone(),
                    features: observe(&script, &world),
                    expert_plan: plan,
                    plan_flag: flag,
                    maneuver: label,
                    qa: qa_item(script.seed, world.step, label),
                    description: describe(&script, &world),
                    slots,
                });
                break;
            }
        }
        EpisodeData { script, states }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// World-to-ego-frame transform for a pose (x, y, heading).
pub fn to_ego_frame(pose: (f64, f64, f64), x: f64, y: f64) -> (f64, f64) {
    let (px, py, h) = pose;
    let (s, c) = h.sin_cos();
    let (dx, dy) = (x - px, y - py);
    (dx * c + dy * s, -dx * s + dy * c)
}

/// Ego-frame-to-world transform.
pub fn to_world_frame(pose: (f64, f64, f64), x: f64, y: f64) -> (f64, f64) {
    let (px, py, h) = pose;
    let (s, c) = h.sin_cos();
    (px + x * c - y * s, py + x * s + y * c)
}

/// Ground truth for one agent slot at a pretrain anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentTarget {
    /// (horizon, 2) future positions in the anchor ego frame.
    pub trajectory: Tensor,
    pub category: usize,
    /// cx, cy, length, width, cos/sin of relative heading (anchor ego frame).
    pub box_params: [f64; 6],
    /// Representative heading for collision axes, anchor ego frame.
    pub rel_heading: f64,
    pub length: f64,
    pub width: f64,
}

/// One assembled pretraining sample.
#[derive(Clone, Debug)]
pub struct PretrainSample {
    pub episode: usize,
    pub step: usize,
    pub history: Vec<SceneFeatures>,
    pub description: ScenarioText,
    pub qa: QAItem,
    /// (horizon, 2) expert waypoints in the anchor ego frame.
    pub expert: Tensor,
    pub agents: Vec<Option<AgentTarget>>,
    pub ego_pose: (f64, f64, f64),
}

/// In-memory dataset: a list of expert episodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub episodes: Vec<EpisodeData>,
}

impl Dataset {
    pub fn generate(suite: &[(Category, u64)]) -> Dataset {
        let episodes =
            suite.iter().map(|&(c, s)| EpisodeData::generate(build_scenario(c, s))).collect();
        Dataset { episodes }
    }

    /// The standard toy suite: every category crossed with `seeds` seeds
    /// starting at `seed_base`.
    pub fn toy_suite(seed_base: u64, seeds: u64) -> Vec<(Category, u64)> {
        let mut out = Vec::new();
        for cat in Category::ALL {
            for s in 0..seeds {
                out.push((cat, seed_base + s));
            }
        }
        out
    }

    /// Anchors with a full ground-truth horizon ahead of them.
    pub fn pretrain_anchors(&self, horizon: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (e, ep) in self.episodes.iter().enumerate() {
            if ep.len() <= horizon {
                continue;
            }
            for s in 0..ep.len() - horizon {
                out.push((e, s));
            }
        }
        out
    }

    /// Context frame history ending at `step`, replicating the first frame
    /// when the episode is younger than the window. Every frame is encoded
    /// with the slot ordering of the anchor step so agent slots keep their
    /// identity across the window.
    pub fn history(&self, episode: usize, step: usize, frames: usize) -> Vec<SceneFeatures> {
        self.history_with_order(episode, step, frames, &self.episodes[episode].states[step].slots)
    }

    /// History ending at `step` under an explicit slot assignment (used for
    /// teacher contexts anchored at an earlier step).
    pub fn history_with_order(
        &self,
        episode: usize,
        step: usize,
        frames: usize,
        order: &[Option<usize>],
    ) -> Vec<SceneFeatures> {
        let ep = &self.episodes[episode];
        (0..frames)
            .map(|i| {
                let k = (step + i + 1).saturating_sub(frames).min(step);
                crate::world::observe::observe_with_order(&ep.script, &ep.states[k].world, order)
            })
            .collect()
    }

    pub fn ego_pose(&self, episode: usize, step: usize) -> (f64, f64, f64) {
        let e = &self.episodes[episode].states[step].world.ego;
        (e.x, e.y, e.heading)
    }

    /// Assemble the full pretraining sample at an anchor.
    pub fn sample_at(&self, episode: usize, step: usize, frames: usize, horizon: usize) -> PretrainSample {
        let ep = &self.episodes[episode];
        let state = &ep.states[step];
        let pose = self.ego_pose(episode, step);

        let expert_pts: Vec<f64> = state
            .expert_plan
            .waypoints
            .iter()
            .flat_map(|&(x, y)| {
                let (ex, ey) = to_ego_frame(pose, x, y);
                [ex, ey]
            })
            .collect();
        let expert = Tensor::new(vec![horizon, 2], expert_pts);

        let agents = (0..AGENT_SLOTS)
            .map(|slot| {
                let script_idx = state.slots[slot]?;
                let current = state
                    .world
                    .agents
                    .iter()
                    .find(|a| a.script_idx == script_idx)
                    .expect("slot agent present");
                let mut pts = Vec::with_capacity(horizon * 2);
                for d in 1..=horizon {
                    let w = &ep.states[step + d].world;
                    let a = w
                        .agents
                        .iter()
                        .find(|a| a.script_idx == script_idx)
                        .expect("agent persists");
                    let (ex, ey) = to_ego_frame(pose, a.state.bbox.cx, a.state.bbox.cy);
                    pts.extend([ex, ey]);
                }
                let b = &current.state.bbox;
                let (cx, cy) = to_ego_frame(pose, b.cx, b.cy);
                let rel_h = wrap_angle(b.heading - pose.2);
                // representative heading for collision axes: mid-horizon
                let mid = &ep.states[step + horizon / 2].world;
                let midb = &mid
                    .agents
                    .iter()
                    .find(|a| a.script_idx == script_idx)
                    .expect("agent persists")
                    .state
                    .bbox;
                let mid_rel_h = wrap_angle(midb.heading - pose.2);
                Some(AgentTarget {
                    trajectory: Tensor::new(vec![horizon, 2], pts),
                    category: current.state.kind.one_hot_index(),
                    box_params: [cx, cy, b.length, b.width, rel_h.cos(), rel_h.sin()],
                    rel_heading: mid_rel_h,
                    length: b.length,
                    width: b.width,
                })
            })
            .collect();

        PretrainSample {
            episode,
            step,
            history: self.history(episode, step, frames),
            description: state.description.clone(),
            qa: state.qa.clone(),
            expert,
            agents,
            ego_pose: pose,
        }
    }

    pub fn sample_batch(
        &self,
        rng: &mut ChaCha8Rng,
        anchors: &[(usize, usize)],
        size: usize,
        frames: usize,
        horizon: usize,
    ) -> Vec<PretrainSample> {
        (0..size)
            .map(|_| {
                let (e, s) = anchors[rng.gen_range(0..anchors.len())];
                self.sample_at(e, s, frames, horizon)
            })
            .collect()
    }

    // ---- persistence ---------------------------------------------------------

    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir.join("episodes"))?;
        let mut scripts = BufWriter::new(std::fs::File::create(dir.join("scripts.jsonl"))?);
        writeln!(
            scripts,
            "{}",
            serde_json::json!({"record": "header", "format": SCRIPTS_FORMAT, "version": FORMAT_VERSION})
        )?;
        for ep in &self.episodes {
            let mut line = serde_json::to_value(&ep.script).unwrap();
            line["record"] = "script".into();
            writeln!(scripts, "{line}")?;
        }
        scripts.flush()?;

        for ep in &self.episodes {
            let name = format!("{}_{:04}.jsonl", ep.script.category, ep.script.seed);
            let mut w = BufWriter::new(std::fs::File::create(dir.join("episodes").join(name))?);
            writeln!(
                w,
                "{}",
                serde_json::json!({
                    "record": "header",
                    "format": EPISODE_FORMAT,
                    "version": FORMAT_VERSION,
                    "category": ep.script.category.to_string(),
                    "seed": ep.script.seed,
                    "states": ep.states.len(),
                })
            )?;
            for st in &ep.states {
                let mut line = serde_json::to_value(st).unwrap();
                line["record"] = "step".into();
                writeln!(w, "{line}")?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> std::io::Result<Dataset> {
        let mut scripts = Vec::new();
        {
            let f = BufReader::new(std::fs::File::open(dir.join("scripts.jsonl"))?);
            for line in f.lines().skip(1) {
                let line = line?;
                let script: ScenarioScript = serde_json::from_str(&line)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                scripts.push(script);
            }
        }
        let mut episodes = Vec::new();
        for script in scripts {
            let name = format!("{}_{:04}.jsonl", script.category, script.seed);
            let f = BufReader::new(std::fs::File::open(dir.join("episodes").join(name))?);
            let mut states = Vec::new();
            for line in f.lines().skip(1) {
                let line = line?;
                let st: StateRecord = serde_json::from_str(&line)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                states.push(st);
            }
            episodes.push(EpisodeData { script, states });
        }
        Ok(Dataset { episodes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_roundtrips() {
        let suite = vec![(Category::EmergencyBrake, 0), (Category::GiveWay, 1)];
        let a = Dataset::generate(&suite);
        let b = Dataset::generate(&suite);
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        a.write_dir(dir.path()).unwrap();
        let c = Dataset::read_dir(dir.path()).unwrap();
        assert_eq!(a, c);

        // byte-identical rewrite
        let dir2 = tempfile::tempdir().unwrap();
        c.write_dir(dir2.path()).unwrap();
        let bytes1 = std::fs::read(dir.path().join("scripts.jsonl")).unwrap();
        let bytes2 = std::fs::read(dir2.path().join("scripts.jsonl")).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn anchors_leave_room_for_the_horizon() {
        let ds = Dataset::generate(&[(Category::Overtaking, 2)]);
        for (e, s) in ds.pretrain_anchors(8) {
            assert!(s + 8 < ds.episodes[e].len());
        }
        assert!(!ds.pretrain_anchors(8).is_empty());
    }

    #[test]
    fn history_replicates_first_frame() {
        let ds = Dataset::generate(&[(Category::TrafficSign, 3)]);
        let h = ds.history(0, 1, 4);
        assert_eq!(h.len(), 4);
        assert_eq!(h[0], ds.episodes[0].states[0].features);
        assert_eq!(h[1], ds.episodes[0].states[0].features);
        assert_eq!(h[2], ds.episodes[0].states[0].features);
        assert_eq!(h[3], ds.episodes[0].states[1].features);
    }

    #[test]
    fn sample_expert_starts_near_origin_in_ego_frame() {
        let ds = Dataset::generate(&[(Category::EmergencyBrake, 5)]);
        let s = ds.sample_at(0, 2, 4, 8);
        // the first expert waypoint is half a step ahead, roughly along +x
        let x0 = s.expert.at(0, 0);
        let y0 = s.expert.at(0, 1);
        assert!(x0 >= -0.5 && x0 <= 10.0, "x0 {x0}");
        assert!(y0.abs() < 1.5, "y0 {y0}");
    }

    #[test]
    fn ego_frame_roundtrip() {
        let pose = (3.0, -2.0, 0.7);
        let (ex, ey) = to_ego_frame(pose, 10.0, 5.0);
        let (wx, wy) = to_world_frame(pose, ex, ey);
        assert!((wx - 10.0).abs() < 1e-12);
        assert!((wy - 5.0).abs() < 1e-12);
    }
}
