//! Stage-2 autoregressive scenario rollout: T-step token rollout with stride
//! sampling, frozen-teacher pseudo-labels from the true future frames, and
//! the per-step consistency loss (token KL plus plan/motion supervision).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gaussian_kl, Tensor, Var};
use crate::dataset::{Dataset, PretrainSample};
use crate::lang::{answer_loss, QAItem, ScenarioText};
use crate::model::params::Graph;
use crate::model::{MotionVars, NoiseStream, PlanVars, TokenSet, TokenVars, VlaModel};
use crate::pretrain::{
    empty_description, mot_loss, plan_loss, LossWeights, Obstacles,
};
use crate::world::observe::AGENT_SLOTS;

/// Rollout horizon T.
pub const ROLLOUT_T: usize = 8;
/// Stride bounds for uniform stride sampling.
pub const STRIDE_MIN: usize = 1;
pub const STRIDE_MAX: usize = 4;

/// Uniform stride over {1, 2, 3, 4}.
pub fn sample_stride(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(STRIDE_MIN..=STRIDE_MAX)
}

/// Which rollout-loss components are active (ablation rows 4-6), plus the
/// per-step description refresh flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutToggles {
    pub tc: bool,
    pub plan: bool,
    pub motion: bool,
    /// Refresh the scenario description each rollout step instead of holding
    /// the anchor description fixed.
    pub refresh_desc: bool,
}

impl Default for RolloutToggles {
    fn default() -> Self {
        RolloutToggles { tc: true, plan: true, motion: true, refresh_desc: false }
    }
}

/// A rollout anchor: episode index and world step t.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutContext {
    pub episode: usize,
    pub step: usize,
}

/// One step of a rollout trace (tape vars live on the trace's graph).
pub struct RolloutStep {
    pub delta: usize,
    /// World step this rollout step refers to: t + delta * stride.
    pub world_step: usize,
    pub tokens: TokenVars,
    pub plan: PlanVars,
    pub motion: MotionVars,
    pub answer_logits: Vec<Var>,
    pub qa: QAItem,
}

/// Full record of one T-step rollout on a graph.
pub struct RolloutTrace {
    pub ctx: RolloutContext,
    pub stride: usize,
    pub init_tokens: TokenVars,
    pub steps: Vec<RolloutStep>,
    /// Valid agent slots at the anchor (shared by every step).
    pub valid_slots: Vec<bool>,
}

/// Teacher decode of one future step: token distributions plus decoded
/// trajectories usable as pseudo-labels. Plain values; never on a student tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherStep {
    pub world_step: usize,
    pub tokens: TokenSet,
    /// Best-mode plan waypoints (horizon, 2), ego frame of the future step.
    pub plan: Vec<(f64, f64)>,
    /// Per-slot decoded trajectories and categories.
    pub motion_traj: Vec<Vec<(f64, f64)>>,
    pub motion_category: Vec<usize>,
    pub motion_box: Vec<[f64; 6]>,
}

/// Per-step teacher targets; `None` marks steps whose future frames are
/// missing from the episode (truncated and masked downstream).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TeacherTargets {
    pub steps: Vec<Option<TeacherStep>>,
}

/// Language-conditioning toggles shared by student and teacher passes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangToggles {
    pub sc_desc: bool,
    pub questions: bool,
}

impl Default for LangToggles {
    fn default() -> Self {
        LangToggles { sc_desc: true, questions: true }
    }
}

fn description_at(dataset: &Dataset, ctx: RolloutContext, step: usize, lang: &LangToggles) -> ScenarioText {
    if !lang.sc_desc {
        return empty_description();
    }
    let ep = &dataset.episodes[ctx.episode];
    let s = step.min(ep.len() - 1);
    ep.states[s].description.clone()
}

fn qa_at(dataset: &Dataset, ctx: RolloutContext, step: usize) -> QAItem {
    let ep = &dataset.episodes[ctx.episode];
    let s = step.min(ep.len() - 1);
    ep.states[s].qa.clone()
}

/// Run the frozen Stage-1 model over the true future frames, collecting token
/// distributions and decoded trajectories at each rollout step. The anchor's
/// slot ordering is pinned so teacher slot k tracks the same agent as the
/// student's slot k.
pub fn teacher_targets(
    teacher: &VlaModel,
    dataset: &Dataset,
    ctx: RolloutContext,
    stride: usize,
    lang: &LangToggles,
) -> TeacherTargets {
    let ep = &dataset.episodes[ctx.episode];
    let anchor_slots = ep.states[ctx.step].slots.clone();
    let frames = teacher.cfg.context_frames;
    let mut steps = Vec::with_capacity(ROLLOUT_T);
    for delta in 1..=ROLLOUT_T {
        let target_step = ctx.step + delta * stride;
        if target_step >= ep.len() {
            steps.push(None);
            continue;
        }
        let history = dataset.history_with_order(ctx.episode, target_step, frames, &anchor_slots);
        let desc = description_at(dataset, ctx, target_step, lang);
        let qa = qa_at(dataset, ctx, target_step);
        let question = lang.questions.then_some(&qa);

        // throwaway graph: teacher outputs enter student tapes as constants
        let mut g = teacher.graph();
        let stream = teacher.encode(&mut g, &history, &desc, question);
        let (tok, _) = teacher.infer_tokens(&mut g, stream);
        let plan = teacher.plan_decode(&mut g, tok.ego_mean, tok.ego_logvar, None);
        let motion = teacher.motion_decode(&mut g, tok.agent_mean);

        let best = plan.best_mode(&g);
        let plan_pts: Vec<(f64, f64)> = {
            let t = g.tape.value(plan.mode_waypoints[best]);
            (0..t.rows()).map(|r| (t.at(r, 0), t.at(r, 1))).collect()
        };
        let mut motion_traj = Vec::with_capacity(AGENT_SLOTS);
        let mut motion_category = Vec::with_capacity(AGENT_SLOTS);
        let mut motion_box = Vec::with_capacity(AGENT_SLOTS);
        for slot in &motion.slots {
            let t = g.tape.value(slot.waypoints);
            motion_traj.push((0..t.rows()).map(|r| (t.at(r, 0), t.at(r, 1))).collect());
            let logits = g.tape.value(slot.cat_logits).data();
            motion_category.push(
                logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap(),
            );
            let b = g.tape.value(slot.box_params).data();
            motion_box.push([b[0], b[1], b[2], b[3], b[4], b[5]]);
        }
        steps.push(Some(TeacherStep {
            world_step: target_step,
            tokens: tok.materialize(&g),
            plan: plan_pts,
            motion_traj,
            motion_category,
            motion_box,
        }));
    }
    TeacherTargets { steps }
}

/// Token feedback mode for the autoregressive loop.
pub enum Feedback<'n> {
    /// Feed predicted means back (deterministic trace).
    Mean,
    /// Feed reparameterized samples back (stochastic trace).
    Sample(&'n mut NoiseStream),
}

/// Autoregressive T-step rollout on the given graph. Tokens at step 0 come
/// from inference on the real context; each later step feeds the predicted
/// tokens back together with the (fixed or refreshed) description and the
/// next ego-action question.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    model: &VlaModel,
    g: &mut Graph,
    dataset: &Dataset,
    ctx: RolloutContext,
    stride: usize,
    lang: &LangToggles,
    refresh_desc: bool,
    mut feedback: Feedback,
) -> RolloutTrace {
    let ep = &dataset.episodes[ctx.episode];
    assert!(ctx.step < ep.len(), "anchor outside episode");
    let frames = model.cfg.context_frames;
    let history = dataset.history(ctx.episode, ctx.step, frames);
    let anchor_desc = description_at(dataset, ctx, ctx.step, lang);
    let anchor_qa = qa_at(dataset, ctx, ctx.step);
    let question0 = lang.questions.then_some(&anchor_qa);

    let stream = model.encode(g, &history, &anchor_desc, question0);
    let (init_tokens, _) = model.infer_tokens(g, stream);
    let valid_slots: Vec<bool> =
        ep.states[ctx.step].slots.iter().map(|s| s.is_some()).collect();

    let mut current = init_tokens;
    let mut steps = Vec::with_capacity(ROLLOUT_T);
    for delta in 1..=ROLLOUT_T {
        let world_step = ctx.step + delta * stride;
        let desc = if refresh_desc {
            description_at(dataset, ctx, world_step, lang)
        } else {
            anchor_desc.clone()
        };
        let qa = qa_at(dataset, ctx, world_step);
        let question = lang.questions.then_some(&qa);
        let (next, ego_row) = model.predict_next_tokens(g, &current, &desc, question);

        let plan = model.plan_decode(g, next.ego_mean, next.ego_logvar, None);
        let motion = model.motion_decode(g, next.agent_mean);
        let answer_logits = model.language_logits(g, ego_row, &qa.answer);

        // feed predicted tokens back, optionally via reparameterized samples
        let fed = match &mut feedback {
            Feedback::Mean => next,
            Feedback::Sample(noise) => {
                let ego = model.sample_latent(g, next.ego_mean, next.ego_logvar, noise);
                let agents = model.sample_latent(g, next.agent_mean, next.agent_logvar, noise);
                TokenVars {
                    ego_mean: ego,
                    ego_logvar: next.ego_logvar,
                    agent_mean: agents,
                    agent_logvar: next.agent_logvar,
                }
            }
        };
        steps.push(RolloutStep { delta, world_step, tokens: next, plan, motion, answer_logits, qa });
        current = fed;
    }
    RolloutTrace { ctx, stride, init_tokens, steps, valid_slots }
}

/// Token-consistency KL for one step: KL(student || teacher) over the ego
/// token plus every valid agent slot, summed.
pub fn step_token_kl(
    g: &mut Graph,
    student: &TokenVars,
    teacher: &TokenSet,
    valid_slots: &[bool],
) -> Var {
    let tm = g.leaf(Tensor::new(vec![1, teacher.ego_mean.len()], teacher.ego_mean.clone()));
    let tl = g.leaf(Tensor::new(vec![1, teacher.ego_logvar.len()], teacher.ego_logvar.clone()));
    let mut total = gaussian_kl(&mut g.tape, student.ego_mean, student.ego_logvar, tm, tl);
    let valid_idx: Vec<usize> =
        valid_slots.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
    if !valid_idx.is_empty() {
        let d = teacher.agent_mean[0].len();
        let sm = g.tape.gather_rows(student.agent_mean, &valid_idx);
        let sl = g.tape.gather_rows(student.agent_logvar, &valid_idx);
        let mut tmd = Vec::with_capacity(valid_idx.len() * d);
        let mut tld = Vec::with_capacity(valid_idx.len() * d);
        for &i in &valid_idx {
            tmd.extend_from_slice(&teacher.agent_mean[i]);
            tld.extend_from_slice(&teacher.agent_logvar[i]);
        }
        let tm = g.leaf(Tensor::new(vec![valid_idx.len(), d], tmd));
        let tl = g.leaf(Tensor::new(vec![valid_idx.len(), d], tld));
        let agents = gaussian_kl(&mut g.tape, sm, sl, tm, tl);
        total = g.tape.add(total, agents);
    }
    total
}

/// Supervision targets for one rollout step, either ground truth from the
/// episode or teacher-decoded pseudo-labels.
enum StepTargets {
    GroundTruth(Box<PretrainSample>),
    Pseudo,
    Missing,
}

fn step_targets(dataset: &Dataset, ctx: RolloutContext, world_step: usize, horizon: usize, frames: usize) -> StepTargets {
    let ep = &dataset.episodes[ctx.episode];
    if world_step >= ep.len() {
        return StepTargets::Missing;
    }
    if world_step + horizon < ep.len() {
        StepTargets::GroundTruth(Box::new(dataset.sample_at(ctx.episode, world_step, frames, horizon)))
    } else {
        StepTargets::Pseudo
    }
}

/// Component values of one rollout loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutLossParts {
    pub tc: f64,
    pub plan: f64,
    pub motion: f64,
    /// Per-step KL at the deepest step (diagnostic for drift tracking).
    pub tc_deepest: f64,
}

/// Eq.-2-shaped rollout loss: sum over steps of the token-consistency KL plus
/// plan and motion losses in whichever regime the data supports.
pub fn rollout_loss(
    g: &mut Graph,
    trace: &RolloutTrace,
    targets: &TeacherTargets,
    dataset: &Dataset,
    toggles: &RolloutToggles,
    weights: &LossWeights,
    model_cfg: &crate::model::ModelConfig,
) -> (Var, RolloutLossParts) {
    let mut total = g.tape.scalar(0.0);
    let mut parts = RolloutLossParts::default();
    let horizon = model_cfg.plan_horizon;
    let frames = model_cfg.context_frames;

    for (i, step) in trace.steps.iter().enumerate() {
        let teacher = targets.steps[i].as_ref();

        if toggles.tc {
            if let Some(t) = teacher {
                let kl = step_token_kl(g, &step.tokens, &t.tokens, &trace.valid_slots);
                let v = g.tape.value(kl).item();
                parts.tc += v;
                if step.delta == ROLLOUT_T {
                    parts.tc_deepest = v;
                }
                total = g.tape.add(total, kl);
            }
        }

        if !toggles.plan && !toggles.motion {
            continue;
        }
        match step_targets(dataset, trace.ctx, step.world_step, horizon, frames) {
            StepTargets::GroundTruth(sample) => {
                if toggles.plan {
                    let obstacles = Obstacles::from_targets(&sample.agents);
                    let lp = plan_loss(g, &step.plan, &sample.expert, &obstacles, weights);
                    parts.plan += g.tape.value(lp).item();
                    total = g.tape.add(total, lp);
                }
                if toggles.motion {
                    let lm = mot_loss(g, &step.motion, &sample.agents, weights);
                    parts.motion += g.tape.value(lm).item();
                    total = g.tape.add(total, lm);
                }
            }
            StepTargets::Pseudo => {
                let Some(t) = teacher else { continue };
                if toggles.plan {
                    let expert = Tensor::new(
                        vec![horizon, 2],
                        t.plan.iter().flat_map(|&(x, y)| [x, y]).collect(),
                    );
                    let obstacles = pseudo_obstacles(t, &trace.valid_slots);
                    let lp = plan_loss(g, &step.plan, &expert, &obstacles, weights);
                    parts.plan += g.tape.value(lp).item();
                    total = g.tape.add(total, lp);
                }
                if toggles.motion {
                    let targets = pseudo_motion_targets(t, &trace.valid_slots, horizon);
                    let lm = mot_loss(g, &step.motion, &targets, weights);
                    parts.motion += g.tape.value(lm).item();
                    total = g.tape.add(total, lm);
                }
            }
            StepTargets::Missing => {}
        }
    }
    (total, parts)
}

fn pseudo_obstacles(t: &TeacherStep, valid: &[bool]) -> Obstacles {
    let mut centers = Vec::new();
    let mut boxes = Vec::new();
    for (k, &ok) in valid.iter().enumerate() {
        if !ok {
            continue;
        }
        let pts: Vec<f64> = t.motion_traj[k].iter().flat_map(|&(x, y)| [x, y]).collect();
        centers.push(Tensor::new(vec![t.motion_traj[k].len(), 2], pts));
        let b = &t.motion_box[k];
        boxes.push(crate::pretrain::ObstacleBox {
            length: b[2].max(0.3),
            width: b[3].max(0.3),
            heading: b[5].atan2(b[4]),
        });
    }
    Obstacles { centers, boxes }
}

fn pseudo_motion_targets(
    t: &TeacherStep,
    valid: &[bool],
    horizon: usize,
) -> Vec<Option<crate::dataset::AgentTarget>> {
    valid
        .iter()
        .enumerate()
        .map(|(k, &ok)| {
            if !ok {
                return None;
            }
            let pts: Vec<f64> = t.motion_traj[k].iter().flat_map(|&(x, y)| [x, y]).collect();
            let b = t.motion_box[k];
            Some(crate::dataset::AgentTarget {
                trajectory: Tensor::new(vec![horizon, 2], pts),
                category: t.motion_category[k],
                box_params: b,
                rel_heading: b[5].atan2(b[4]),
                length: b[2].max(0.3),
                width: b[3].max(0.3),
            })
        })
        .collect()
}

/// Mean per-token answer loss over a trace (the language-alignment reward
/// term reads single steps; this aggregates for reporting).
pub fn trace_answer_loss(g: &mut Graph, trace: &RolloutTrace) -> Var {
    let mut terms = Vec::new();
    for step in &trace.steps {
        terms.push(answer_loss(&mut g.tape, &step.answer_logits, &step.qa));
    }
    let stacked = g.tape.concat(&terms);
    g.tape.mean(stacked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::world::scenario::Category;
    use rand::SeedableRng;

    fn small_model() -> VlaModel {
        VlaModel::new(ModelConfig { width: 16, mlp_hidden: 16, heads: 2, blocks: 2, ..Default::default() })
    }

    #[test]
    fn stride_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; STRIDE_MAX + 1];
        let draws = 40_000;
        for _ in 0..draws {
            counts[sample_stride(&mut rng)] += 1;
        }
        for r in STRIDE_MIN..=STRIDE_MAX {
            let freq = counts[r] as f64 / draws as f64;
            assert!((freq - 0.25).abs() < 0.01, "stride {r}: {freq}");
        }
    }

    #[test]
    fn stride_schedule_world_times() {
        // r = 4, T = 8 -> last step at t + 32; r = 2, t = 4 -> {6, 8, ..., 20}
        let dataset = Dataset::generate(&[(Category::EmergencyBrake, 0)]);
        let model = small_model();
        let ctx = RolloutContext { episode: 0, step: 4 };
        for r in STRIDE_MIN..=STRIDE_MAX {
            let mut g = model.graph();
            let trace = rollout(
                &model,
                &mut g,
                &dataset,
                ctx,
                r,
                &LangToggles::default(),
                false,
                Feedback::Mean,
            );
            assert_eq!(trace.steps.len(), ROLLOUT_T);
            for (i, s) in trace.steps.iter().enumerate() {
                assert_eq!(s.world_step, 4 + (i + 1) * r);
            }
            if r == 4 {
                assert_eq!(trace.steps.last().unwrap().world_step, 4 + 32);
            }
            if r == 2 {
                let times: Vec<usize> = trace.steps.iter().map(|s| s.world_step).collect();
                assert_eq!(times, vec![6, 8, 10, 12, 14, 16, 18, 20]);
            }
        }
    }

    #[test]
    fn fixed_noise_stream_gives_deterministic_traces() {
        let dataset = Dataset::generate(&[(Category::GiveWay, 1)]);
        let model = small_model();
        let ctx = RolloutContext { episode: 0, step: 3 };
        let run = |seed: u64| {
            let mut g = model.graph();
            let mut noise = NoiseStream::new(seed);
            let trace = rollout(
                &model,
                &mut g,
                &dataset,
                ctx,
                2,
                &LangToggles::default(),
                false,
                Feedback::Sample(&mut noise),
            );
            trace
                .steps
                .iter()
                .map(|s| g.tape.value(s.tokens.ego_mean).data().to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn teacher_at_delta_zero_equals_student_inference() {
        // with stride such that t + delta lands on the anchor context, the
        // teacher and student are the same function of the same inputs; the
        // directly comparable case is teacher at (t + r) vs a student
        // inference run at that step
        let dataset = Dataset::generate(&[(Category::Overtaking, 2)]);
        let model = small_model();
        let ctx = RolloutContext { episode: 0, step: 2 };
        let targets =
            teacher_targets(&model, &dataset, ctx, 1, &LangToggles::default());
        let t0 = targets.steps[0].as_ref().unwrap();
        // student inference at world step 3 with the anchor slot ordering
        let anchor_slots = dataset.episodes[0].states[2].slots.clone();
        let history = dataset.history_with_order(0, 3, model.cfg.context_frames, &anchor_slots);
        let desc = dataset.episodes[0].states[3].description.clone();
        let qa = dataset.episodes[0].states[3].qa.clone();
        let mut g = model.graph();
        let stream = model.encode(&mut g, &history, &desc, Some(&qa));
        let (tok, _) = model.infer_tokens(&mut g, stream);
        let set = tok.materialize(&g);
        assert_eq!(set, t0.tokens);
    }

    #[test]
    fn teacher_targets_replayed_from_disk_match() {
        let dataset = Dataset::generate(&[(Category::TrafficSign, 3)]);
        let dir = tempfile::tempdir().unwrap();
        dataset.write_dir(dir.path()).unwrap();
        let reloaded = Dataset::read_dir(dir.path()).unwrap();
        let model = small_model();
        let ctx = RolloutContext { episode: 0, step: 1 };
        let a = teacher_targets(&model, &dataset, ctx, 2, &LangToggles::default());
        let b = teacher_targets(&model, &reloaded, ctx, 2, &LangToggles::default());
        assert_eq!(a, b);
    }

    #[test]
    fn teacher_is_absent_from_student_tape() {
        let dataset = Dataset::generate(&[(Category::EmergencyBrake, 4)]);
        let model = small_model();
        let teacher = small_model();
        let ctx = RolloutContext { episode: 0, step: 2 };
        let targets = teacher_targets(&teacher, &dataset, ctx, 1, &LangToggles::default());
        let mut g = model.graph();
        let trace = rollout(
            &model,
            &mut g,
            &dataset,
            ctx,
            1,
            &LangToggles::default(),
            false,
            Feedback::Mean,
        );
        let before = g.tape.len();
        let (loss, _) = rollout_loss(
            &mut g,
            &trace,
            &targets,
            &dataset,
            &RolloutToggles { tc: true, plan: false, motion: false, refresh_desc: false },
            &LossWeights::default(),
            &model.cfg,
        );
        // teacher values entered as constants after the student forward pass
        assert!(g.tape.len() > before);
        let grads = g.backward(loss).unwrap();
        // gradient flows into the student's parameters
        let any_student = model
            .params
            .iter()
            .any(|(id, _, _)| grads.get(id).data().iter().any(|&v| v != 0.0));
        assert!(any_student, "no gradient reached student parameters");
    }

    #[test]
    fn tc_zero_when_student_equals_teacher() {
        let dataset = Dataset::generate(&[(Category::GiveWay, 5)]);
        let model = small_model();
        let ctx = RolloutContext { episode: 0, step: 2 };
        // teacher == student parameters, stride 1, deterministic feedback;
        // the tc at step 1 compares the rollout prediction against inference.
        // They differ in general. The exact-zero case: compare a token set
        // against itself.
        let mut g = model.graph();
        let trace = rollout(
            &model,
            &mut g,
            &dataset,
            ctx,
            1,
            &LangToggles::default(),
            false,
            Feedback::Mean,
        );
        let self_set = trace.steps[0].tokens.materialize(&g);
        let kl = step_token_kl(&mut g, &trace.steps[0].tokens, &self_set, &trace.valid_slots);
        assert_eq!(g.tape.value(kl).item(), 0.0);
        // and KL is nonnegative against a different target
        let other = trace.steps[1].tokens.materialize(&g);
        let kl2 = step_token_kl(&mut g, &trace.steps[0].tokens, &other, &trace.valid_slots);
        assert!(g.tape.value(kl2).item() >= 0.0);
    }

    #[test]
    fn rollout_loss_matches_term_oracle() {
        let dataset = Dataset::generate(&[(Category::EmergencyBrake, 6)]);
        let model = small_model();
        let teacher = small_model();
        let ctx = RolloutContext { episode: 0, step: 2 };
        let stride = 1;
        let lang = LangToggles::default();
        let targets = teacher_targets(&teacher, &dataset, ctx, stride, &lang);
        let toggles = RolloutToggles::default();
        let weights = LossWeights::default();

        let mut g = model.graph();
        let trace = rollout(&model, &mut g, &dataset, ctx, stride, &lang, false, Feedback::Mean);
        let (total, parts) = rollout_loss(&mut g, &trace, &targets, &dataset, &toggles, &weights, &model.cfg);
        let oracle = parts.tc + parts.plan + parts.motion;
        assert!(
            (g.tape.value(total).item() - oracle).abs() < 1e-10,
            "total {} vs oracle {oracle}",
            g.tape.value(total).item()
        );
        // masking all but the first step reproduces the single-step term
        let mut g2 = model.graph();
        let trace2 = rollout(&model, &mut g2, &dataset, ctx, stride, &lang, false, Feedback::Mean);
        let single = TeacherTargets {
            steps: targets
                .steps
                .iter()
                .enumerate()
                .map(|(i, s)| if i == 0 { s.clone() } else { None })
                .collect(),
        };
        let only_tc = RolloutToggles { tc: true, plan: false, motion: false, refresh_desc: false };
        let (v, p) = rollout_loss(&mut g2, &trace2, &single, &dataset, &only_tc, &weights, &model.cfg);
        let kl0 = step_token_kl(
            &mut g2,
            &trace2.steps[0].tokens,
            &targets.steps[0].as_ref().unwrap().tokens,
            &trace2.valid_slots,
        );
        assert!((g2.tape.value(v).item() - g2.tape.value(kl0).item()).abs() < 1e-12);
        assert_eq!(p.plan, 0.0);
    }

    #[test]
    fn rollout_gradient_zero_wrt_teacher_and_matches_fd_width8() {
        use crate::autodiff::gradcheck::{finite_difference, max_rel_err};
        let dataset = Dataset::generate(&[(Category::GiveWay, 7)]);
        let ctx = RolloutContext { episode: 0, step: 2 };
        let stride = 2;
        let lang = LangToggles::default();
        let toggles = RolloutToggles::default();
        let weights = LossWeights::default();
        let teacher = VlaModel::new(ModelConfig::width8(3));
        let targets = teacher_targets(&teacher, &dataset, ctx, stride, &lang);

        let eval = |m: &VlaModel| -> f64 {
            let mut g = m.graph();
            let trace = rollout(m, &mut g, &dataset, ctx, stride, &lang, false, Feedback::Mean);
            let (total, _) =
                rollout_loss(&mut g, &trace, &targets, &dataset, &toggles, &weights, &m.cfg);
            g.tape.value(total).item()
        };

        let model = VlaModel::new(ModelConfig::width8(4));
        let mut g = model.graph();
        let trace = rollout(&model, &mut g, &dataset, ctx, stride, &lang, false, Feedback::Mean);
        let (total, _) = rollout_loss(&mut g, &trace, &targets, &dataset, &toggles, &weights, &model.cfg);
        let grads = g.backward(total).unwrap();
        let analytic: Vec<f64> = model
            .params
            .iter()
            .flat_map(|(id, _, _)| grads.get(id).data().to_vec())
            .collect();
        let x0 = model.params.flatten();
        let mut probe = VlaModel::new(ModelConfig::width8(4));
        let fd = finite_difference(
            |x| {
                probe.params.load_flat(x);
                eval(&probe)
            },
            &x0,
            1e-5,
        );
        let err = max_rel_err(&analytic, &fd, 1e-3);
        assert!(err < 1e-3, "rel err {err}");
    }
}
