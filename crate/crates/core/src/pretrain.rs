//! Stage-1 trainer: joint supervision of planning, motion (with auxiliary
//! boxes), and language heads. The total is the plain sum of the three
//! component losses.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{focal_loss, l1_waypoints, DiffError, Tensor, Var};
use crate::dataset::{AgentTarget, Dataset, PretrainSample};
use crate::lang::{answer_loss, ScenarioText, EOS};
use crate::model::params::{GradSet, Graph};
use crate::model::{MotionVars, NoiseStream, PlanVars, VlaModel};
use crate::optim::AdamW;

/// Margin (meters) inside the collision hinge.
pub const COLLISION_MARGIN: f64 = 0.5;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

/// Loss weighting; the defaults follow the unweighted sum convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub collision: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            collision: 1.0,
            focal_gamma: FOCAL_GAMMA,
            focal_alpha: FOCAL_ALPHA,
            margin: COLLISION_MARGIN,
        }
    }
}

/// Which pretraining loss components are active (ablation rows 1-3).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainToggles {
    pub sc_desc: bool,
    pub questions: bool,
    pub plan: bool,
    pub motion: bool,
    pub vqa: bool,
}

impl Default for PretrainToggles {
    fn default() -> Self {
        PretrainToggles { sc_desc: true, questions: true, plan: true, motion: true, vqa: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub l_plan: f64,
    pub l_mot: f64,
    pub l_vla: f64,
    pub l_pre: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossComponent {
    Plan,
    Motion,
    Language,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite {0:?} loss at step {1}")]
    NonFinite(LossComponent, usize),
    #[error("autodiff fault: {0}")]
    Diff(#[from] DiffError),
    #[error("empty dataset")]
    EmptyDataset,
}

/// An obstacle box, constant within one loss evaluation (anchor ego frame).
#[derive(Clone, Copy, Debug)]
pub struct ObstacleBox {
    pub length: f64,
    pub width: f64,
    pub heading: f64,
}

/// Half-projection of an (l, w, heading) box onto a unit axis.
fn half_projection(length: f64, width: f64, heading: f64, axis: (f64, f64)) -> f64 {
    let (s, c) = heading.sin_cos();
    0.5 * length * (axis.0 * c + axis.1 * s).abs() + 0.5 * width * (-axis.0 * s + axis.1 * c).abs()
}

/// The four separating axes for an ego box at heading 0 against an obstacle.
fn sat_axes(ob: &ObstacleBox) -> [(f64, f64); 4] {
    let (s, c) = ob.heading.sin_cos();
    [(1.0, 0.0), (0.0, 1.0), (c, s), (-s, c)]
}

/// Per-step separation between differentiable ego waypoints and one obstacle
/// trajectory: max over the four face axes of the projected gap. `centers`
/// holds the obstacle position per step; extents and heading stay fixed.
fn separation_to_obstacle(
    tape: &mut crate::autodiff::Tape,
    ego_wps: Var,
    centers: &Tensor,
    ob: &ObstacleBox,
    ego_len: f64,
    ego_wid: f64,
) -> Var {
    let steps = centers.rows();
    assert_eq!(tape.shape(ego_wps), &[steps, 2], "waypoint/center step mismatch");
    let c = tape.leaf(centers.clone());
    let diff = tape.sub(ego_wps, c);
    let mut best: Option<Var> = None;
    for axis in sat_axes(ob) {
        let axis_t = tape.leaf(Tensor::new(vec![2, 1], vec![axis.0, axis.1]));
        let proj = tape.matmul(diff, axis_t);
        let dist = tape.abs(proj);
        let r = half_projection(ego_len, ego_wid, 0.0, axis)
            + half_projection(ob.length, ob.width, ob.heading, axis);
        let gap = tape.add_scalar(dist, -r);
        best = Some(match best {
            None => gap,
            Some(b) => tape.max2(b, gap),
        });
    }
    best.unwrap()
}

/// Obstacle set for a collision penalty: per-obstacle per-step centers plus
/// fixed extents/heading, all in the frame of the ego waypoints.
pub struct Obstacles {
    pub centers: Vec<Tensor>,
    pub boxes: Vec<ObstacleBox>,
}

impl Obstacles {
    pub fn from_targets(targets: &[Option<AgentTarget>]) -> Obstacles {
        let mut centers = Vec::new();
        let mut boxes = Vec::new();
        for t in targets.iter().flatten() {
            centers.push(t.trajectory.clone());
            boxes.push(ObstacleBox { length: t.length, width: t.width, heading: t.rel_heading });
        }
        Obstacles { centers, boxes }
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Differentiable collision penalty: sum over waypoints of the squared hinge
/// max(0, margin - d), where d is the separation to the nearest obstacle.
pub fn collision_penalty(
    tape: &mut crate::autodiff::Tape,
    ego_wps: Var,
    obstacles: &Obstacles,
    margin: f64,
) -> Var {
    if obstacles.is_empty() {
        return tape.scalar(0.0);
    }
    let mut nearest: Option<Var> = None;
    for (c, ob) in obstacles.centers.iter().zip(&obstacles.boxes) {
        let d = separation_to_obstacle(
            tape,
            ego_wps,
            c,
            ob,
            crate::world::EGO_LENGTH,
            crate::world::EGO_WIDTH,
        );
        nearest = Some(match nearest {
            None => d,
            Some(n) => tape.min2(n, d),
        });
    }
    let d = nearest.unwrap();
    let neg = tape.neg(d);
    let gap = tape.add_scalar(neg, margin);
    let hinge = tape.relu(gap);
    let sq = tape.square(hinge);
    tape.sum(sq)
}

/// Planning loss: L1 of the selected (argmax-score) mode against the expert,
/// plus the weighted collision penalty on that mode.
pub fn plan_loss(
    g: &mut Graph,
    plan: &PlanVars,
    expert: &Tensor,
    obstacles: &Obstacles,
    weights: &LossWeights,
) -> Var {
    let best = plan.best_mode(g);
    let wps = plan.mode_waypoints[best];
    let target = g.leaf(expert.clone());
    let l1 = l1_waypoints(&mut g.tape, wps, target);
    let pen = collision_penalty(&mut g.tape, wps, obstacles, weights.margin);
    let weighted = g.tape.scale(pen, weights.collision);
    g.tape.add(l1, weighted)
}

/// Motion loss: mean over valid slots of focal(category) + L1(trajectory)
/// + L1(box parameters). All-invalid batches contribute zero.
pub fn mot_loss(
    g: &mut Graph,
    motion: &MotionVars,
    targets: &[Option<AgentTarget>],
    weights: &LossWeights,
) -> Var {
    let mut terms = Vec::new();
    for (slot, target) in targets.iter().enumerate() {
        let Some(t) = target else { continue };
        let dec = &motion.slots[slot];
        let probs = {
            let s = g.tape.softmax_rows(dec.cat_logits);
            let n = g.tape.value(s).len();
            g.tape.reshape(s, &[n])
        };
        let focal = focal_loss(&mut g.tape, probs, t.category, weights.focal_gamma, weights.focal_alpha);
        let gt_traj = g.leaf(t.trajectory.clone());
        let l1_traj = l1_waypoints(&mut g.tape, dec.waypoints, gt_traj);
        let gt_box = g.leaf(Tensor::new(vec![1, 6], t.box_params.to_vec()));
        let l1_box = l1_waypoints(&mut g.tape, dec.box_params, gt_box);
        let sum = g.tape.add(focal, l1_traj);
        terms.push(g.tape.add(sum, l1_box));
    }
    if terms.is_empty() {
        log::warn!("mot_loss: no valid agent slots in sample");
        return g.tape.scalar(0.0);
    }
    let stacked = g.tape.concat(&terms);
    g.tape.mean(stacked)
}

/// Per-sample forward pass shared by the pretrainer and the rollout trainer's
/// ground-truth regime.
pub struct SampleLosses {
    pub plan: Var,
    pub motion: Var,
    pub language: Var,
}

pub fn empty_description() -> ScenarioText {
    ScenarioText(vec![EOS])
}

/// Forward one sample under the given toggles; returns component losses.
pub fn forward_sample(
    model: &VlaModel,
    noise: &mut NoiseStream,
    toggles: &PretrainToggles,
    weights: &LossWeights,
    g: &mut Graph,
    sample: &PretrainSample,
) -> SampleLosses {
    let desc = if toggles.sc_desc { sample.description.clone() } else { empty_description() };
    let question = if toggles.questions { Some(&sample.qa) } else { None };
    let stream = model.encode(g, &sample.history, &desc, question);
    let (tok, y) = model.infer_tokens(g, stream);

    let plan = if toggles.plan {
        let p = model.plan_decode(g, tok.ego_mean, tok.ego_logvar, Some(noise));
        let obstacles = Obstacles::from_targets(&sample.agents);
        plan_loss(g, &p, &sample.expert, &obstacles, weights)
    } else {
        g.tape.scalar(0.0)
    };

    let motion = if toggles.motion {
        let m = model.motion_decode(g, tok.agent_mean);
        mot_loss(g, &m, &sample.agents, weights)
    } else {
        g.tape.scalar(0.0)
    };

    let language = if toggles.vqa {
        let layout = model.cfg.encode_layout();
        let ctx = g.tape.gather_rows(y, &[layout.ego]);
        let logits = model.language_logits(g, ctx, &sample.qa.answer);
        answer_loss(&mut g.tape, &logits, &sample.qa)
    } else {
        g.tape.scalar(0.0)
    };

    SampleLosses { plan, motion, language }
}

/// Stage-1 trainer state.
pub struct PretrainTrainer {
    pub model: VlaModel,
    pub opt: AdamW,
    pub toggles: PretrainToggles,
    pub weights: LossWeights,
    pub batch_size: usize,
    noise: NoiseStream,
    rng: ChaCha8Rng,
}

impl PretrainTrainer {
    pub fn new(
        model: VlaModel,
        opt: AdamW,
        toggles: PretrainToggles,
        weights: LossWeights,
        batch_size: usize,
        seed: u64,
    ) -> Self {
        use rand::SeedableRng;
        PretrainTrainer {
            model,
            opt,
            toggles,
            weights,
            batch_size,
            noise: NoiseStream::new(seed.wrapping_add(0x5EED)),
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xBA7C4)),
        }
    }


    /// One optimizer step over a freshly sampled batch.
    pub fn step(&mut self, dataset: &Dataset, anchors: &[(usize, usize)]) -> Result<LossReport, TrainError> {
        if anchors.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let frames = self.model.cfg.context_frames;
        let horizon = self.model.cfg.plan_horizon;
        let batch =
            dataset.sample_batch(&mut self.rng, anchors, self.batch_size, frames, horizon);

        let mut acc = GradSet::zeros(&self.model.params);
        let (mut sum_plan, mut sum_mot, mut sum_vla) = (0.0, 0.0, 0.0);
        let step_idx = self.opt.step_index();
        for sample in &batch {
            let mut g = self.model.graph();
            let losses = forward_sample(
                &self.model,
                &mut self.noise,
                &self.toggles,
                &self.weights,
                &mut g,
                sample,
            );
            let (vp, vm, vl) = (
                g.tape.value(losses.plan).item(),
                g.tape.value(losses.motion).item(),
                g.tape.value(losses.language).item(),
            );
            if !vp.is_finite() {
                return Err(TrainError::NonFinite(LossComponent::Plan, step_idx));
            }
            if !vm.is_finite() {
                return Err(TrainError::NonFinite(LossComponent::Motion, step_idx));
            }
            if !vl.is_finite() {
                return Err(TrainError::NonFinite(LossComponent::Language, step_idx));
            }
            let pm = g.tape.add(losses.plan, losses.motion);
            let total = g.tape.add(pm, losses.language);
            let grads = g.backward(total)?;
            acc.add(&grads);
            sum_plan += vp;
            sum_mot += vm;
            sum_vla += vl;
        }
        acc.scale(1.0 / batch.len() as f64);
        let grad_norm = acc.l2_norm();
        let lr = self.opt.step(&mut self.model.params, &acc);

        let b = batch.len() as f64;
        let (l_plan, l_mot, l_vla) = (sum_plan / b, sum_mot / b, sum_vla / b);
        Ok(LossReport {
            step: step_idx,
            l_plan,
            l_mot,
            l_vla,
            l_pre: l_plan + l_mot + l_vla,
            lr,
            grad_norm,
        })
    }
}
