//! Reinforcement fine-tuning over groups of sampled rollouts: differentiable
//! surrogate safety rewards, reward-minus-baseline advantages, and the
//! group objective with pathwise gradients through the reward terms.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::dataset::Dataset;
use crate::lang::answer_loss;
use crate::model::params::{Graph, ParamStore};
use crate::model::{NoiseStream, VlaModel};
use crate::optim::AdamW;
use crate::pretrain::{LossWeights, ObstacleBox};
use crate::rollout::{
    rollout, sample_stride, teacher_targets, Feedback, LangToggles, RolloutContext, RolloutStep,
    RolloutToggles, RolloutTrace, TeacherTargets, ROLLOUT_T,
};
use crate::world::observe::{AGENT_FEAT, AGENT_SLOTS};
use crate::world::{EGO_LENGTH, EGO_WIDTH};

/// Floor on the smooth time-to-collision before inversion (seconds).
pub const TTC_FLOOR: f64 = 0.1;
/// Cap on the smooth time-to-collision (seconds).
pub const TTC_CAP: f64 = 10.0;
/// Soft-min temperature over substep crossing times.
pub const TTC_TEMP: f64 = 0.1;
/// Clearance-to-time factor: one meter of clearance defers the candidate
/// crossing time by this many seconds, pushing clear substeps past the cap.
pub const TTC_CLEARANCE_GAIN: f64 = 25.0;
/// Substep spacing of the smooth TTC grid (seconds).
pub const TTC_GRID_DT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardToggles {
    pub coll: bool,
    pub ttc: bool,
    pub vla: bool,
}

impl RewardToggles {
    pub fn all_off() -> Self {
        RewardToggles { coll: false, ttc: false, vla: false }
    }

    pub fn any(&self) -> bool {
        self.coll || self.ttc || self.vla
    }
}

impl Default for RewardToggles {
    fn default() -> Self {
        RewardToggles { coll: true, ttc: true, vla: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub coll: f64,
    pub ttc: f64,
    pub vla: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { coll: 1.0, ttc: 1.0, vla: 1.0 }
    }
}

/// One step's reward terms on the tape. Terms hold positive magnitudes; the
/// total is their weighted negated sum.
#[derive(Clone, Copy, Debug)]
pub struct RewardBreakdown {
    pub coll_term: Var,
    pub ttc_term: Var,
    pub lang_term: Var,
    pub total: Var,
}

/// Plain-value mirror of a reward breakdown.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardValues {
    pub coll: f64,
    pub ttc: f64,
    pub lang: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn values(&self, g: &Graph) -> RewardValues {
        RewardValues {
            coll: g.tape.value(self.coll_term).item(),
            ttc: g.tape.value(self.ttc_term).item(),
            lang: g.tape.value(self.lang_term).item(),
            total: g.tape.value(self.total).item(),
        }
    }
}

/// Interpolation matrix from `horizon` future waypoints onto the TTC substep
/// grid, plus the weight of the (origin) anchor point per grid row.
fn interp_matrix(horizon: usize) -> (Tensor, Vec<f64>, Vec<f64>) {
    let step_dt = crate::geometry::WAYPOINT_DT;
    let end = horizon as f64 * step_dt;
    let n = (end / TTC_GRID_DT).round() as usize;
    let mut weights = vec![0.0; (n + 1) * horizon];
    let mut anchor = vec![0.0; n + 1];
    let mut times = vec![0.0; n + 1];
    for j in 0..=n {
        let t = (j as f64 * TTC_GRID_DT).min(end);
        times[j] = t;
        let pos = t / step_dt; // waypoint k sits at (k + 1) * step_dt
        if pos <= 1.0 {
            anchor[j] = 1.0 - pos;
            weights[j * horizon] = pos;
        } else {
            let k = (pos - 1.0).floor() as usize;
            let frac = pos - 1.0 - k as f64;
            let k = k.min(horizon - 2);
            weights[j * horizon + k] = 1.0 - frac;
            weights[j * horizon + k + 1] = frac;
        }
    }
    (Tensor::new(vec![n + 1, horizon], weights), anchor, times)
}

fn half_projection(length: f64, width: f64, heading: f64, axis: (f64, f64)) -> f64 {
    let (s, c) = heading.sin_cos();
    0.5 * length * (axis.0 * c + axis.1 * s).abs() + 0.5 * width * (-axis.0 * s + axis.1 * c).abs()
}

/// Per-row separation between two point sequences carrying boxes: max over
/// the four face axes of |projected center gap| minus the summed projections.
fn separation_rows(
    g: &mut Graph,
    ego_pts: Var,
    agent_pts: Var,
    ob: &ObstacleBox,
) -> Var {
    let diff = g.tape.sub(ego_pts, agent_pts);
    let (s, c) = ob.heading.sin_cos();
    let axes = [(1.0, 0.0), (0.0, 1.0), (c, s), (-s, c)];
    let mut best: Option<Var> = None;
    for axis in axes {
        let a = g.leaf(Tensor::new(vec![2, 1], vec![axis.0, axis.1]));
        let proj = g.tape.matmul(diff, a);
        let dist = g.tape.abs(proj);
        let r = half_projection(EGO_LENGTH, EGO_WIDTH, 0.0, axis)
            + half_projection(ob.length, ob.width, ob.heading, axis);
        let gap = g.tape.add_scalar(dist, -r);
        best = Some(match best {
            None => gap,
            Some(b) => g.tape.max2(b, gap),
        });
    }
    best.unwrap()
}

/// Dynamic agent obstacle for the reward path: differentiable future
/// positions plus the observed current relative position and box geometry.
pub struct DynamicObstacle {
    pub waypoints: Var,
    pub current: (f64, f64),
    pub shape: ObstacleBox,
}

/// Extract reward obstacles from a rollout step: predicted agent trajectories
/// with observed extents/heading (values detached for the box geometry).
pub fn reward_obstacles(
    g: &Graph,
    step: &RolloutStep,
    anchor_features: &crate::world::observe::SceneFeatures,
    valid: &[bool],
) -> Vec<DynamicObstacle> {
    let _ = g;
    let mut out = Vec::new();
    for k in 0..AGENT_SLOTS {
        if !valid[k] {
            continue;
        }
        let slot = anchor_features.agent_slot(k);
        let (rx, ry) = (slot[0], slot[1]);
        let (length, width) = (slot[4].max(0.3), slot[5].max(0.3));
        let heading = slot[7].atan2(slot[6]);
        out.push(DynamicObstacle {
            waypoints: step.motion.slots[k].waypoints,
            current: (rx, ry),
            shape: ObstacleBox { length, width, heading },
        });
    }
    let _ = AGENT_FEAT;
    out
}

/// Differentiable collision surrogate between the predicted ego trajectory
/// and the predicted agent trajectories' boxes: squared hinge on the margin.
pub fn coll_surrogate(
    g: &mut Graph,
    ego_wps: Var,
    obstacles: &[DynamicObstacle],
    margin: f64,
) -> Var {
    if obstacles.is_empty() {
        return g.tape.scalar(0.0);
    }
    let mut nearest: Option<Var> = None;
    for ob in obstacles {
        let d = separation_rows(g, ego_wps, ob.waypoints, &ob.shape);
        nearest = Some(match nearest {
            None => d,
            Some(n) => g.tape.min2(n, d),
        });
    }
    let d = nearest.unwrap();
    let neg = g.tape.neg(d);
    let gap = g.tape.add_scalar(neg, margin);
    let hinge = g.tape.relu(gap);
    let sq = g.tape.square(hinge);
    g.tape.sum(sq)
}

/// Smooth time-to-collision: a soft-min over substep crossing-time
/// candidates (substep time plus clearance-scaled deferral), clamped to
/// [TTC_FLOOR, TTC_CAP]. Fully clear trajectories saturate at the cap.
pub fn ttc_smooth(g: &mut Graph, ego_wps: Var, obstacles: &[DynamicObstacle]) -> Var {
    let horizon = g.tape.value(ego_wps).rows();
    if obstacles.is_empty() {
        return g.tape.scalar(TTC_CAP);
    }
    let (interp, anchor_w, times) = interp_matrix(horizon);
    let interp_v = g.leaf(interp);
    // ego anchor point is the origin of its own frame, so the anchor term drops
    let ego_grid = g.tape.matmul(interp_v, ego_wps);

    let mut clearance: Option<Var> = None;
    for ob in obstacles {
        let agent_grid = {
            let base = g.tape.matmul(interp_v, ob.waypoints);
            let anchor: Vec<f64> = anchor_w
                .iter()
                .flat_map(|&w| [w * ob.current.0, w * ob.current.1])
                .collect();
            let anchor_v = g.leaf(Tensor::new(vec![anchor_w.len(), 2], anchor));
            g.tape.add(base, anchor_v)
        };
        let d = separation_rows(g, ego_grid, agent_grid, &ob.shape);
        clearance = Some(match clearance {
            None => d,
            Some(c) => g.tape.min2(c, d),
        });
    }
    let c = clearance.unwrap();
    let pos = g.tape.relu(c);
    let deferral = g.tape.scale(pos, TTC_CLEARANCE_GAIN);
    let t = g.leaf(Tensor::new(vec![times.len(), 1], times));
    let candidates = g.tape.add(t, deferral);
    let soft = g.tape.softmin(candidates, TTC_TEMP);
    g.tape.clamp(soft, TTC_FLOOR, TTC_CAP)
}

/// Surrogate reward for one rollout step:
/// R = -(w_c * Coll + w_t * TTC^-1 + w_l * L_VLA).
pub fn step_reward(
    g: &mut Graph,
    step: &RolloutStep,
    obstacles: &[DynamicObstacle],
    toggles: &RewardToggles,
    weights: &RewardWeights,
    loss_weights: &LossWeights,
) -> RewardBreakdown {
    let best = step.plan.best_mode(g);
    let ego_wps = step.plan.mode_waypoints[best];

    let coll_term = if toggles.coll {
        coll_surrogate(g, ego_wps, obstacles, loss_weights.margin)
    } else {
        g.tape.scalar(0.0)
    };
    let ttc_term = if toggles.ttc {
        let t = ttc_smooth(g, ego_wps, obstacles);
        g.tape.recip(t)
    } else {
        g.tape.scalar(0.0)
    };
    let lang_term = if toggles.vla {
        answer_loss(&mut g.tape, &step.answer_logits, &step.qa)
    } else {
        g.tape.scalar(0.0)
    };

    let wc = g.tape.scale(coll_term, weights.coll);
    let wt = g.tape.scale(ttc_term, weights.ttc);
    let wl = g.tape.scale(lang_term, weights.vla);
    let s1 = g.tape.add(wc, wt);
    let s2 = g.tape.add(s1, wl);
    let total = g.tape.neg(s2);
    RewardBreakdown { coll_term, ttc_term, lang_term, total }
}

/// Baseline for the advantage computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineMode {
    GroupMean,
    LearnedValue,
}

/// A small value predictor over (step index, token means) trained by squared
/// error against observed rewards.
pub struct ValueBaseline {
    pub params: ParamStore,
    opt: AdamW,
    feat_dim: usize,
}

impl ValueBaseline {
    pub fn new(latent_dim: usize, lr: f64) -> Self {
        let feat_dim = 2 + latent_dim;
        let mut params = ParamStore::new();
        params.register("baseline.w", Tensor::zeros(&[feat_dim, 1]));
        params.register("baseline.b", Tensor::zeros(&[1, 1]));
        let opt = AdamW::new(
            crate::optim::OptimizerConfig {
                learning_rate: lr,
                weight_decay: 0.0,
                total_steps: usize::MAX >> 1,
                ..Default::default()
            },
            &params,
        );
        ValueBaseline { params, opt, feat_dim }
    }

    fn features(&self, delta: usize, ego_mean: &[f64]) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.feat_dim);
        f.push(1.0);
        f.push(delta as f64 / ROLLOUT_T as f64);
        f.extend_from_slice(ego_mean);
        f
    }

    pub fn predict(&self, delta: usize, ego_mean: &[f64]) -> f64 {
        let f = self.features(delta, ego_mean);
        let w = self.params.get(crate::model::params::ParamId(0));
        let b = self.params.get(crate::model::params::ParamId(1));
        f.iter().zip(w.data()).map(|(x, w)| x * w).sum::<f64>() + b.data()[0]
    }

    /// One squared-error fit step over observed (delta, token, reward) rows.
    pub fn fit(&mut self, rows: &[(usize, Vec<f64>, f64)]) {
        if rows.is_empty() {
            return;
        }
        let mut g = Graph::new(&self.params);
        let w = g.p(crate::model::params::ParamId(0));
        let b = g.p(crate::model::params::ParamId(1));
        let mut errs = Vec::with_capacity(rows.len());
        for (delta, ego_mean, reward) in rows {
            let f = g.leaf(Tensor::new(vec![1, self.feat_dim], self.features(*delta, ego_mean)));
            let pred = g.tape.matmul(f, w);
            let pred = g.tape.add(pred, b);
            let target = g.leaf(Tensor::new(vec![1, 1], vec![*reward]));
            let d = g.tape.sub(pred, target);
            errs.push(g.tape.square(d));
        }
        let stacked = g.tape.concat(&errs);
        let loss = g.tape.mean(stacked);
        let grads = g.backward(loss).expect("baseline fit");
        self.opt.step(&mut self.params, &grads);
    }
}

/// Advantages A = R - b over a group of traces. Group-mean mode centers each
/// step across the group; learned-value mode subtracts the predictor.
pub fn advantage(
    rewards: &[Vec<RewardValues>],
    baseline: &BaselineState,
) -> Vec<Vec<f64>> {
    let group = rewards.len();
    match baseline {
        BaselineState::GroupMean => {
            assert!(group >= 2, "group-mean baseline needs at least two traces");
            let steps = rewards[0].len();
            let mut out = vec![vec![0.0; steps]; group];
            for s in 0..steps {
                let mean: f64 =
                    rewards.iter().map(|r| r[s].total).sum::<f64>() / group as f64;
                for (gi, r) in rewards.iter().enumerate() {
                    out[gi][s] = r[s].total - mean;
                }
            }
            out
        }
        BaselineState::Learned { baseline, tokens } => rewards
            .iter()
            .enumerate()
            .map(|(gi, r)| {
                r.iter()
                    .enumerate()
                    .map(|(s, v)| v.total - baseline.predict(s + 1, &tokens[gi][s]))
                    .collect()
            })
            .collect(),
    }
}

/// Baseline inputs for [`advantage`].
pub enum BaselineState<'a> {
    GroupMean,
    Learned {
        baseline: &'a ValueBaseline,
        /// Per-trace, per-step ego token means.
        tokens: &'a [Vec<Vec<f64>>],
    },
}

/// Group objective: -(1/G) sum over traces and steps of (R - b), with the
/// baseline entering as a detached constant so gradients flow only through
/// the differentiable reward terms.
pub fn grpo_loss(
    g: &mut Graph,
    rewards: &[Vec<RewardBreakdown>],
    baselines: &[Vec<f64>],
) -> Var {
    let group = rewards.len();
    assert!(group > 0);
    let mut terms = Vec::new();
    for (gi, trace) in rewards.iter().enumerate() {
        for (s, rb) in trace.iter().enumerate() {
            terms.push(g.tape.add_scalar(rb.total, -baselines[gi][s]));
        }
    }
    let stacked = g.tape.concat(&terms);
    let sum = g.tape.sum(stacked);
    g.tape.scale(sum, -1.0 / group as f64)
}

/// Full Stage-2 configuration (rollout consistency plus GRPO feedback).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub lang: LangToggles,
    pub rollout: RolloutToggles,
    pub rewards: RewardToggles,
    pub reward_weights: RewardWeights,
    pub group: usize,
    pub baseline: BaselineMode,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lang: LangToggles::default(),
            rollout: RolloutToggles::default(),
            rewards: RewardToggles::default(),
            reward_weights: RewardWeights::default(),
            group: 4,
            baseline: BaselineMode::GroupMean,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub step: usize,
    pub l_roll: f64,
    pub l_grpo: f64,
    pub total: f64,
    pub tc: f64,
    pub tc_deepest: f64,
    pub mean_reward: f64,
    pub mean_coll: f64,
    pub mean_ttc: f64,
    pub mean_lang: f64,
    pub lr: f64,
    pub skipped: bool,
}

/// Stage-2 trainer: rollout-consistency plus GRPO updates against a frozen
/// copy of the Stage-1 model.
pub struct Stage2Trainer {
    pub model: VlaModel,
    pub teacher: VlaModel,
    pub cfg: Stage2Config,
    pub weights: LossWeights,
    opt: AdamW,
    noise: NoiseStream,
    rng: ChaCha8Rng,
    value_baseline: ValueBaseline,
    teacher_cache: HashMap<(usize, usize, usize), TeacherTargets>,
}

impl Stage2Trainer {
    pub fn new(
        model: VlaModel,
        teacher: VlaModel,
        cfg: Stage2Config,
        weights: LossWeights,
        opt: AdamW,
        seed: u64,
    ) -> Self {
        use rand::SeedableRng;
        let latent = model.cfg.latent_dim;
        Stage2Trainer {
            model,
            teacher,
            cfg,
            weights,
            opt,
            noise: NoiseStream::new(seed.wrapping_add(0x2007)),
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x2008)),
            value_baseline: ValueBaseline::new(latent, 1e-2),
            teacher_cache: HashMap::new(),
        }
    }

    pub fn step_index(&self) -> usize {
        self.opt.step_index()
    }

    fn targets_for(&mut self, dataset: &Dataset, ctx: RolloutContext, stride: usize) -> TeacherTargets {
        let key = (ctx.episode, ctx.step, stride);
        if let Some(t) = self.teacher_cache.get(&key) {
            return t.clone();
        }
        let t = teacher_targets(&self.teacher, dataset, ctx, stride, &self.cfg.lang);
        self.teacher_cache.insert(key, t.clone());
        t
    }

    /// One Stage-2 update on a random anchor: sample a stride, roll the group,
    /// apply one step on L_roll + L_GRPO. Non-finite totals skip the update.
    pub fn step(&mut self, dataset: &Dataset, anchors: &[(usize, usize)]) -> Stage2Report {
        assert!(!anchors.is_empty(), "no rollout anchors");
        let (episode, step) = anchors[self.rng.gen_range(0..anchors.len())];
        let ctx = RolloutContext { episode, step };
        let stride = sample_stride(&mut self.rng);
        let targets = self.targets_for(dataset, ctx, stride);

        let group = if self.cfg.rewards.any() { self.cfg.group } else { 1 };
        let mut g = self.model.graph();
        let traces =
            roll_group(&self.model, &mut self.noise, &self.cfg, &mut g, dataset, ctx, stride, group);
        let (l_roll, l_grpo, mut report) = group_losses(
            &self.model,
            &self.cfg,
            &self.weights,
            &mut self.value_baseline,
            self.opt.step_index(),
            &mut g,
            dataset,
            &traces,
            &targets,
        );

        let total = g.tape.add(l_roll, l_grpo);
        if !g.tape.value(total).item().is_finite() {
            log::warn!("stage-2 step {}: non-finite total, skipping update", report.step);
            report.skipped = true;
            return report;
        }
        match g.backward(total) {
            Ok(grads) => {
                drop(g);
                report.lr = self.opt.step(&mut self.model.params, &grads);
            }
            Err(e) => {
                log::warn!("stage-2 step {}: {e}, skipping update", report.step);
                report.skipped = true;
            }
        }
        report
    }
}

/// Roll one group of stochastic traces on a shared graph.
#[allow(clippy::too_many_arguments)]
pub fn roll_group(
    model: &VlaModel,
    noise: &mut NoiseStream,
    cfg: &Stage2Config,
    g: &mut Graph,
    dataset: &Dataset,
    ctx: RolloutContext,
    stride: usize,
    count: usize,
) -> Vec<RolloutTrace> {
    (0..count)
        .map(|_| {
            rollout(
                model,
                g,
                dataset,
                ctx,
                stride,
                &cfg.lang,
                cfg.rollout.refresh_desc,
                Feedback::Sample(noise),
            )
        })
        .collect()
}

/// Losses for a prepared group: L_roll on the designated trace (index 0) and
/// L_GRPO across the whole group. Split out so the toggle-equivalence
/// contract can be tested on a fixed group.
#[allow(clippy::too_many_arguments)]
pub fn group_losses(
    model: &VlaModel,
    cfg: &Stage2Config,
    weights: &LossWeights,
    value_baseline: &mut ValueBaseline,
    step_index: usize,
    g: &mut Graph,
    dataset: &Dataset,
    traces: &[RolloutTrace],
    targets: &TeacherTargets,
) -> (Var, Var, Stage2Report) {
    let (l_roll, parts) = crate::rollout::rollout_loss(
        g,
        &traces[0],
        targets,
        dataset,
        &cfg.rollout,
        weights,
        &model.cfg,
    );

    let mut report = Stage2Report {
        step: step_index,
        tc: parts.tc,
        tc_deepest: parts.tc_deepest,
        ..Default::default()
    };

    let l_grpo = if cfg.rewards.any() {
        let anchor_features =
            &dataset.episodes[traces[0].ctx.episode].states[traces[0].ctx.step].features;
        let mut breakdowns: Vec<Vec<RewardBreakdown>> = Vec::with_capacity(traces.len());
        let mut values: Vec<Vec<RewardValues>> = Vec::with_capacity(traces.len());
        let mut token_means: Vec<Vec<Vec<f64>>> = Vec::with_capacity(traces.len());
        for trace in traces {
            let mut per_step = Vec::with_capacity(trace.steps.len());
            let mut per_vals = Vec::with_capacity(trace.steps.len());
            let mut per_tok = Vec::with_capacity(trace.steps.len());
            for step in &trace.steps {
                let obstacles = reward_obstacles(g, step, anchor_features, &trace.valid_slots);
                let rb = step_reward(g, step, &obstacles, &cfg.rewards, &cfg.reward_weights, weights);
                per_vals.push(rb.values(g));
                per_tok.push(g.tape.value(step.tokens.ego_mean).data().to_vec());
                per_step.push(rb);
            }
            breakdowns.push(per_step);
            values.push(per_vals);
            token_means.push(per_tok);
        }

        let baselines = match cfg.baseline {
            BaselineMode::GroupMean => advantage_baselines_group_mean(&values),
            BaselineMode::LearnedValue => {
                let rows: Vec<(usize, Vec<f64>, f64)> = values
                    .iter()
                    .zip(&token_means)
                    .flat_map(|(vals, toks)| {
                        vals.iter()
                            .zip(toks)
                            .enumerate()
                            .map(|(s, (v, t))| (s + 1, t.clone(), v.total))
                            .collect::<Vec<_>>()
                    })
                    .collect();
                value_baseline.fit(&rows);
                token_means
                    .iter()
                    .map(|toks| {
                        toks.iter()
                            .enumerate()
                            .map(|(s, t)| value_baseline.predict(s + 1, t))
                            .collect()
                    })
                    .collect()
            }
        };

        let n = (traces.len() * ROLLOUT_T) as f64;
        report.mean_reward = values.iter().flatten().map(|v| v.total).sum::<f64>() / n;
        report.mean_coll = values.iter().flatten().map(|v| v.coll).sum::<f64>() / n;
        report.mean_ttc = values.iter().flatten().map(|v| v.ttc).sum::<f64>() / n;
        report.mean_lang = values.iter().flatten().map(|v| v.lang).sum::<f64>() / n;
        grpo_loss(g, &breakdowns, &baselines)
    } else {
        g.tape.scalar(0.0)
    };

    report.l_roll = g.tape.value(l_roll).item();
    report.l_grpo = g.tape.value(l_grpo).item();
    report.total = report.l_roll + report.l_grpo;
    (l_roll, l_grpo, report)
}

/// Group-mean baselines per trace and step.
pub fn advantage_baselines_group_mean(values: &[Vec<RewardValues>]) -> Vec<Vec<f64>> {
    let group = values.len();
    assert!(group >= 2, "group-mean baseline needs at least two traces");
    let steps = values[0].len();
    let mut out = vec![vec![0.0; steps]; group];
    for s in 0..steps {
        let mean: f64 = values.iter().map(|v| v[s].total).sum::<f64>() / group as f64;
        for b in out.iter_mut() {
            b[s] = mean;
        }
    }
    out
}
