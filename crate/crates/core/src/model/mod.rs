//! The toy vision-language-action model: observation history and text embed
//! into a fixed-layout token stream, a causal attention core infers Gaussian
//! latent tokens for the ego and each agent slot, and three heads decode
//! plans, agent motion, and language answers. The same core, under a
//! next-step role embedding, predicts next-step tokens for rollout.

pub mod checkpoint;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::lang::{QAItem, ScenarioText, TokenId, BOS, EOS, MAX_ANSWER_LEN, MAX_DESC_LEN, MAX_QUESTION_LEN, VOCAB_SIZE};
use crate::world::observe::{SceneFeatures, AGENT_FEAT, AGENT_SLOTS, FRAME_FEAT};
use params::{Graph, ParamId, ParamStore};

/// Log-variance clamp bounds for every latent token.
pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seed: u64,
    /// Latent token dimensionality D.
    pub latent_dim: usize,
    /// Sequence core width.
    pub width: usize,
    /// Number of self-attention blocks.
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Context frames fed to the encoder (t).
    pub context_frames: usize,
    pub plan_modes: usize,
    pub plan_horizon: usize,
    /// Per-component displacement squash: waypoint spacing stays under
    /// sqrt(2) times this.
    pub max_step_disp: f64,
    pub plan_hidden: usize,
    pub motion_hidden: usize,
    pub lang_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seed: 0,
            latent_dim: 16,
            width: 64,
            blocks: 4,
            heads: 4,
            mlp_hidden: 128,
            context_frames: 4,
            plan_modes: 6,
            plan_horizon: 8,
            max_step_disp: 7.0,
            plan_hidden: 128,
            motion_hidden: 128,
            lang_hidden: 128,
        }
    }
}

impl ModelConfig {
    /// Miniature configuration for finite-difference checks.
    pub fn width8(seed: u64) -> Self {
        ModelConfig {
            seed,
            latent_dim: 4,
            width: 8,
            blocks: 2,
            heads: 2,
            mlp_hidden: 16,
            context_frames: 4,
            plan_modes: 2,
            plan_horizon: 8,
            max_step_disp: 7.0,
            plan_hidden: 12,
            motion_hidden: 12,
            lang_hidden: 12,
        }
    }

    /// Stream slot positions for the encoding pass.
    pub fn encode_layout(&self) -> StreamLayout {
        let frames = self.context_frames;
        StreamLayout {
            desc_start: frames,
            question_start: frames + MAX_DESC_LEN,
            ego: frames + MAX_DESC_LEN + MAX_QUESTION_LEN,
            agents_start: frames + MAX_DESC_LEN + MAX_QUESTION_LEN + 1,
            len: frames + MAX_DESC_LEN + MAX_QUESTION_LEN + 1 + AGENT_SLOTS,
        }
    }

    /// Stream slot positions for the next-step (rollout) pass.
    pub fn rollout_layout(&self) -> StreamLayout {
        let cur = 1 + AGENT_SLOTS;
        StreamLayout {
            desc_start: cur,
            question_start: cur + MAX_DESC_LEN,
            ego: cur + MAX_DESC_LEN + MAX_QUESTION_LEN,
            agents_start: cur + MAX_DESC_LEN + MAX_QUESTION_LEN + 1,
            len: cur + MAX_DESC_LEN + MAX_QUESTION_LEN + 1 + AGENT_SLOTS,
        }
    }
}

/// Positions of the named slots inside a token stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamLayout {
    pub desc_start: usize,
    pub question_start: usize,
    pub ego: usize,
    pub agents_start: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
struct BlockHandles {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Handles {
    frame_w: ParamId,
    frame_b: ParamId,
    frame_pos: ParamId,
    agent_w: ParamId,
    agent_b: ParamId,
    agent_role: ParamId,
    token_table: ParamId,
    desc_pos: ParamId,
    q_pos: ParamId,
    ego_query: ParamId,
    role_cur: ParamId,
    role_next: ParamId,
    tok_in_w: ParamId,
    tok_in_b: ParamId,
    blocks: Vec<BlockHandles>,
    ln_f_g: ParamId,
    ln_f_b: ParamId,
    token_head_w: ParamId,
    token_head_b: ParamId,
    plan_w1: ParamId,
    plan_b1: ParamId,
    plan_w2: ParamId,
    plan_b2: ParamId,
    mot_w1: ParamId,
    mot_b1: ParamId,
    mot_w2: ParamId,
    mot_b2: ParamId,
    mot_w3: ParamId,
    mot_b3: ParamId,
    lang_wc: ParamId,
    lang_we: ParamId,
    lang_pos: ParamId,
    lang_b1: ParamId,
    lang_w2: ParamId,
    lang_b2: ParamId,
}

/// Deterministic noise source for latent sampling.
pub struct NoiseStream(ChaCha8Rng);

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        NoiseStream(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(&mut self.0)).collect()
    }
}

/// Gaussian latent tokens for the ego slot and all agent slots, as tape vars:
/// ego (1, D) mean/logvar and agents (slots, D) mean/logvar.
#[derive(Clone, Copy, Debug)]
pub struct TokenVars {
    pub ego_mean: Var,
    pub ego_logvar: Var,
    pub agent_mean: Var,
    pub agent_logvar: Var,
}

/// Plain-value snapshot of a token set (used for teacher targets and logs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSet {
    pub ego_mean: Vec<f64>,
    pub ego_logvar: Vec<f64>,
    pub agent_mean: Vec<Vec<f64>>,
    pub agent_logvar: Vec<Vec<f64>>,
}

impl TokenVars {
    pub fn materialize(&self, g: &Graph) -> TokenSet {
        let rows = |t: &Tensor| -> Vec<Vec<f64>> {
            (0..t.rows()).map(|r| t.data()[r * t.cols()..(r + 1) * t.cols()].to_vec()).collect()
        };
        TokenSet {
            ego_mean: g.tape.value(self.ego_mean).data().to_vec(),
            ego_logvar: g.tape.value(self.ego_logvar).data().to_vec(),
            agent_mean: rows(g.tape.value(self.agent_mean)),
            agent_logvar: rows(g.tape.value(self.agent_logvar)),
        }
    }
}

/// Decoded plan head output on the tape: per-mode ego-frame waypoints plus
/// mode scores.
#[derive(Clone, Debug)]
pub struct PlanVars {
    pub mode_waypoints: Vec<Var>,
    pub scores: Var,
}

impl PlanVars {
    /// Selected mode = argmax score.
    pub fn best_mode(&self, g: &Graph) -> usize {
        let s = g.tape.value(self.scores).data();
        s.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }
}

/// Decoded motion head output for one agent slot.
#[derive(Clone, Copy, Debug)]
pub struct SlotDecode {
    /// (plan_horizon, 2) ego-frame waypoints.
    pub waypoints: Var,
    /// (1, 4) category logits.
    pub cat_logits: Var,
    /// (1, 6) box regression: center x/y, length, width, heading cos/sin.
    pub box_params: Var,
}

#[derive(Clone, Debug)]
pub struct MotionVars {
    pub slots: Vec<SlotDecode>,
}

/// The model: configuration plus named parameters.
pub struct VlaModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    h: Handles,
}

fn lower_triangular_ones(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            data[i * n + j] = 1.0;
        }
    }
    Tensor::new(vec![n, n], data)
}

fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = -1e9;
        }
    }
    Tensor::new(vec![n, n], data)
}

impl VlaModel {
    pub fn new(cfg: ModelConfig) -> Self {
        assert_eq!(cfg.width % cfg.heads, 0, "width must divide into heads");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xC0FFEE));
        let mut store = ParamStore::new();
        let d = cfg.latent_dim;
        let w = cfg.width;

        fn normal(
            store: &mut ParamStore,
            rng: &mut ChaCha8Rng,
            name: &str,
            shape: &[usize],
            std: f64,
        ) -> ParamId {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    std * z
                })
                .collect();
            store.register(name, Tensor::new(shape.to_vec(), data))
        }
        fn xavier(
            store: &mut ParamStore,
            rng: &mut ChaCha8Rng,
            name: &str,
            rows: usize,
            cols: usize,
        ) -> ParamId {
            let std = (2.0 / (rows + cols) as f64).sqrt();
            normal(store, rng, name, &[rows, cols], std)
        }
        let zeros = |store: &mut ParamStore, name: &str, shape: &[usize]| {
            store.register(name, Tensor::zeros(shape))
        };
        let ones = |store: &mut ParamStore, name: &str, shape: &[usize]| {
            store.register(name, Tensor::filled(shape, 1.0))
        };

        let frame_w = xavier(&mut store, &mut rng, "embed.frame.w", FRAME_FEAT, w);
        let frame_b = zeros(&mut store, "embed.frame.b", &[w]);
        let frame_pos = normal(&mut store, &mut rng, "embed.frame.pos", &[cfg.context_frames, w], 0.02);
        let agent_w =
            xavier(&mut store, &mut rng, "embed.agent.w", AGENT_FEAT * cfg.context_frames, w);
        let agent_b = zeros(&mut store, "embed.agent.b", &[w]);
        let agent_role = normal(&mut store, &mut rng, "embed.agent.role", &[w], 0.02);
        let token_table = normal(&mut store, &mut rng, "embed.token.table", &[VOCAB_SIZE, w], 0.02);
        let desc_pos = normal(&mut store, &mut rng, "embed.desc.pos", &[MAX_DESC_LEN, w], 0.02);
        let q_pos = normal(&mut store, &mut rng, "embed.question.pos", &[MAX_QUESTION_LEN, w], 0.02);
        let ego_query = normal(&mut store, &mut rng, "embed.ego.query", &[1, w], 0.02);
        let role_cur = normal(&mut store, &mut rng, "embed.role.current", &[w], 0.02);
        let role_next = normal(&mut store, &mut rng, "embed.role.next", &[w], 0.02);
        let tok_in_w = xavier(&mut store, &mut rng, "embed.token_in.w", 2 * d, w);
        let tok_in_b = zeros(&mut store, "embed.token_in.b", &[w]);

        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let p = |s: &str| format!("core.{i}.{s}");
            blocks.push(BlockHandles {
                ln1_g: ones(&mut store, &p("ln1.gain"), &[w]),
                ln1_b: zeros(&mut store, &p("ln1.bias"), &[w]),
                wq: xavier(&mut store, &mut rng, &p("attn.wq"), w, w),
                wk: xavier(&mut store, &mut rng, &p("attn.wk"), w, w),
                wv: xavier(&mut store, &mut rng, &p("attn.wv"), w, w),
                wo: xavier(&mut store, &mut rng, &p("attn.wo"), w, w),
                bo: zeros(&mut store, &p("attn.bo"), &[w]),
                ln2_g: ones(&mut store, &p("ln2.gain"), &[w]),
                ln2_b: zeros(&mut store, &p("ln2.bias"), &[w]),
                w1: xavier(&mut store, &mut rng, &p("mlp.w1"), w, cfg.mlp_hidden),
                b1: zeros(&mut store, &p("mlp.b1"), &[cfg.mlp_hidden]),
                w2: xavier(&mut store, &mut rng, &p("mlp.w2"), cfg.mlp_hidden, w),
                b2: zeros(&mut store, &p("mlp.b2"), &[w]),
            });
        }
        let ln_f_g = ones(&mut store, "core.final_ln.gain", &[w]);
        let ln_f_b = zeros(&mut store, "core.final_ln.bias", &[w]);

        let token_head_w = normal(&mut store, &mut rng, "head.token.w", &[w, 2 * d], 0.02);
        let token_head_b = zeros(&mut store, "head.token.b", &[2 * d]);

        let plan_out = cfg.plan_modes * (cfg.plan_horizon * 2 + 1);
        let plan_w1 = xavier(&mut store, &mut rng, "head.plan.w1", d, cfg.plan_hidden);
        let plan_b1 = zeros(&mut store, "head.plan.b1", &[cfg.plan_hidden]);
        let plan_w2 = xavier(&mut store, &mut rng, "head.plan.w2", cfg.plan_hidden, plan_out);
        let plan_b2 = zeros(&mut store, "head.plan.b2", &[plan_out]);

        let mot_out = cfg.plan_horizon * 2 + 4 + 6;
        let mot_w1 = xavier(&mut store, &mut rng, "head.motion.w1", d, cfg.motion_hidden);
        let mot_b1 = zeros(&mut store, "head.motion.b1", &[cfg.motion_hidden]);
        let mot_w2 =
            xavier(&mut store, &mut rng, "head.motion.w2", cfg.motion_hidden, cfg.motion_hidden);
        let mot_b2 = zeros(&mut store, "head.motion.b2", &[cfg.motion_hidden]);
        let mot_w3 = xavier(&mut store, &mut rng, "head.motion.w3", cfg.motion_hidden, mot_out);
        let mot_b3 = zeros(&mut store, "head.motion.b3", &[mot_out]);

        let lang_wc = xavier(&mut store, &mut rng, "head.lang.wc", w, cfg.lang_hidden);
        let lang_we = xavier(&mut store, &mut rng, "head.lang.we", w, cfg.lang_hidden);
        let lang_pos = normal(&mut store, &mut rng, "head.lang.pos", &[MAX_ANSWER_LEN, cfg.lang_hidden], 0.02);
        let lang_b1 = zeros(&mut store, "head.lang.b1", &[cfg.lang_hidden]);
        let lang_w2 = xavier(&mut store, &mut rng, "head.lang.w2", cfg.lang_hidden, VOCAB_SIZE);
        let lang_b2 = zeros(&mut store, "head.lang.b2", &[VOCAB_SIZE]);

        let h = Handles {
            frame_w,
            frame_b,
            frame_pos,
            agent_w,
            agent_b,
            agent_role,
            token_table,
            desc_pos,
            q_pos,
            ego_query,
            role_cur,
            role_next,
            tok_in_w,
            tok_in_b,
            blocks,
            ln_f_g,
            ln_f_b,
            token_head_w,
            token_head_b,
            plan_w1,
            plan_b1,
            plan_w2,
            plan_b2,
            mot_w1,
            mot_b1,
            mot_w2,
            mot_b2,
            mot_w3,
            mot_b3,
            lang_wc,
            lang_we,
            lang_pos,
            lang_b1,
            lang_w2,
            lang_b2,
        };
        VlaModel { cfg, params: store, h }
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.params)
    }

    fn linear(&self, g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Var {
        let wv = g.p(w);
        let bv = g.p(b);
        let xw = g.tape.matmul(x, wv);
        g.tape.add_row_broadcast(xw, bv)
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, gain: ParamId, bias: ParamId) -> Var {
        let n = g.tape.layer_norm_rows(x, 1e-5);
        let gv = g.p(gain);
        let bv = g.p(bias);
        let s = g.tape.mul_row_broadcast(n, gv);
        g.tape.add_row_broadcast(s, bv)
    }

    fn attention(&self, g: &mut Graph, x: Var, blk: &BlockHandles, mask: Var) -> Var {
        let hd = self.cfg.width / self.cfg.heads;
        let wq = g.p(blk.wq);
        let wk = g.p(blk.wk);
        let wv = g.p(blk.wv);
        let q = g.tape.matmul(x, wq);
        let k = g.tape.matmul(x, wk);
        let v = g.tape.matmul(x, wv);
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (c0, c1) = (h * hd, (h + 1) * hd);
            let qh = g.tape.slice_cols(q, c0, c1);
            let kh = g.tape.slice_cols(k, c0, c1);
            let vh = g.tape.slice_cols(v, c0, c1);
            let kt = g.tape.transpose(kh);
            let scores = g.tape.matmul(qh, kt);
            let scaled = g.tape.scale(scores, 1.0 / (hd as f64).sqrt());
            let masked = g.tape.add(scaled, mask);
            let probs = g.tape.softmax_rows(masked);
            heads.push(g.tape.matmul(probs, vh));
        }
        let merged = g.tape.concat_cols(&heads);
        self.linear(g, merged, blk.wo, blk.bo)
    }

    /// The causal sequence core over a (len, width) stream.
    fn core(&self, g: &mut Graph, mut x: Var) -> Var {
        let len = g.tape.value(x).rows();
        let mask = g.leaf(causal_mask(len));
        for i in 0..self.cfg.blocks {
            let blk = self.h.blocks[i].clone();
            let normed = self.layer_norm(g, x, blk.ln1_g, blk.ln1_b);
            let att = self.attention(g, normed, &blk, mask);
            x = g.tape.add(x, att);
            let normed2 = self.layer_norm(g, x, blk.ln2_g, blk.ln2_b);
            let h1 = self.linear(g, normed2, blk.w1, blk.b1);
            let h1t = g.tape.tanh(h1);
            let h2 = self.linear(g, h1t, blk.w2, blk.b2);
            x = g.tape.add(x, h2);
        }
        self.layer_norm(g, x, self.h.ln_f_g, self.h.ln_f_b)
    }

    fn text_rows(&self, g: &mut Graph, ids: &[TokenId], pos: ParamId) -> Var {
        let table = g.p(self.h.token_table);
        let rows = g.tape.gather_rows(table, ids);
        let posv = g.p(pos);
        g.tape.add(rows, posv)
    }

    /// Build the encoding stream from observation history plus text.
    /// History must hold exactly `context_frames` frames, oldest first.
    pub fn encode(
        &self,
        g: &mut Graph,
        history: &[SceneFeatures],
        description: &ScenarioText,
        question: Option<&QAItem>,
    ) -> Var {
        let t = self.cfg.context_frames;
        assert_eq!(history.len(), t, "encode expects exactly {t} context frames");
        let w = self.cfg.width;

        // frame rows: non-agent features per frame
        let mut frame_data = Vec::with_capacity(t * FRAME_FEAT);
        for f in history {
            frame_data.extend(f.frame_features());
        }
        let frames = g.leaf(Tensor::new(vec![t, FRAME_FEAT], frame_data));
        let fe = self.linear(g, frames, self.h.frame_w, self.h.frame_b);
        let fpos = g.p(self.h.frame_pos);
        let frame_rows = g.tape.add(fe, fpos);

        // agent rows: per-slot features concatenated across frames
        let mut agent_data = Vec::with_capacity(AGENT_SLOTS * AGENT_FEAT * t);
        for slot in 0..AGENT_SLOTS {
            for f in history {
                agent_data.extend_from_slice(f.agent_slot(slot));
            }
        }
        let agents = g.leaf(Tensor::new(vec![AGENT_SLOTS, AGENT_FEAT * t], agent_data));
        let ae = self.linear(g, agents, self.h.agent_w, self.h.agent_b);
        let arole = g.p(self.h.agent_role);
        let agent_rows = g.tape.add_row_broadcast(ae, arole);

        let desc_rows = self.text_rows(g, &description.padded(MAX_DESC_LEN), self.h.desc_pos);
        let q_ids = question.map(|q| q.question_padded(MAX_QUESTION_LEN)).unwrap_or_else(|| vec![0; MAX_QUESTION_LEN]);
        let q_rows = self.text_rows(g, &q_ids, self.h.q_pos);
        let ego_row = g.p(self.h.ego_query);

        let layout = self.cfg.encode_layout();
        let flat = g.tape.concat(&[frame_rows, desc_rows, q_rows, ego_row, agent_rows]);
        g.tape.reshape(flat, &[layout.len, w])
    }

    fn token_head(&self, g: &mut Graph, rows: Var) -> (Var, Var) {
        let d = self.cfg.latent_dim;
        let out = self.linear(g, rows, self.h.token_head_w, self.h.token_head_b);
        let mean = g.tape.slice_cols(out, 0, d);
        let raw_logvar = g.tape.slice_cols(out, d, 2 * d);
        let logvar = g.tape.clamp(raw_logvar, LOGVAR_MIN, LOGVAR_MAX);
        (mean, logvar)
    }

    /// Run the core over an encoding stream and read latent tokens off the
    /// ego and agent slots. Also returns the core output for the language head.
    pub fn infer_tokens(&self, g: &mut Graph, stream: Var) -> (TokenVars, Var) {
        let layout = self.cfg.encode_layout();
        let y = self.core(g, stream);
        let ego_rows = g.tape.gather_rows(y, &[layout.ego]);
        let agent_idx: Vec<usize> = (0..AGENT_SLOTS).map(|k| layout.agents_start + k).collect();
        let agent_rows = g.tape.gather_rows(y, &agent_idx);
        let (ego_mean, ego_logvar) = self.token_head(g, ego_rows);
        let (agent_mean, agent_logvar) = self.token_head(g, agent_rows);
        (TokenVars { ego_mean, ego_logvar, agent_mean, agent_logvar }, y)
    }

    /// Reparameterized sample from a (rows, D) Gaussian token block.
    pub fn sample_latent(&self, g: &mut Graph, mean: Var, logvar: Var, noise: &mut NoiseStream) -> Var {
        let shape = g.tape.shape(mean).to_vec();
        let n: usize = shape.iter().product();
        let eps = g.leaf(Tensor::new(shape, noise.standard_normal(n)));
        let half = g.tape.scale(logvar, 0.5);
        let std = g.tape.exp(half);
        let scaled = g.tape.mul(std, eps);
        g.tape.add(mean, scaled)
    }

    /// Decode the generative planner: 6 candidate ego-frame trajectories plus
    /// mode scores. With `noise` the latent is sampled; otherwise the mean is
    /// decoded.
    pub fn plan_decode(
        &self,
        g: &mut Graph,
        ego_mean: Var,
        ego_logvar: Var,
        noise: Option<&mut NoiseStream>,
    ) -> PlanVars {
        let z = match noise {
            Some(n) => self.sample_latent(g, ego_mean, ego_logvar, n),
            None => ego_mean,
        };
        let h1 = self.linear(g, z, self.h.plan_w1, self.h.plan_b1);
        let h1t = g.tape.tanh(h1);
        let out = self.linear(g, h1t, self.h.plan_w2, self.h.plan_b2);
        let hor = self.cfg.plan_horizon;
        let cum = g.leaf(lower_triangular_ones(hor));
        let mut mode_waypoints = Vec::with_capacity(self.cfg.plan_modes);
        for m in 0..self.cfg.plan_modes {
            let raw = g.tape.slice_cols(out, m * hor * 2, (m + 1) * hor * 2);
            let shaped = g.tape.reshape(raw, &[hor, 2]);
            let squashed = g.tape.tanh(shaped);
            let disp = g.tape.scale(squashed, self.cfg.max_step_disp);
            mode_waypoints.push(g.tape.matmul(cum, disp));
        }
        let scores =
            g.tape.slice_cols(out, self.cfg.plan_modes * hor * 2, self.cfg.plan_modes * (hor * 2 + 1));
        PlanVars { mode_waypoints, scores }
    }

    /// Decode per-slot agent futures, categories, and boxes from token means.
    pub fn motion_decode(&self, g: &mut Graph, agent_mean: Var) -> MotionVars {
        let h1 = self.linear(g, agent_mean, self.h.mot_w1, self.h.mot_b1);
        let h1t = g.tape.tanh(h1);
        let h2 = self.linear(g, h1t, self.h.mot_w2, self.h.mot_b2);
        let h2t = g.tape.tanh(h2);
        let out = self.linear(g, h2t, self.h.mot_w3, self.h.mot_b3);
        let hor = self.cfg.plan_horizon;
        let cum = g.leaf(lower_triangular_ones(hor));
        let slots = (0..AGENT_SLOTS)
            .map(|k| {
                let row = g.tape.gather_rows(out, &[k]);
                let raw = g.tape.slice_cols(row, 0, hor * 2);
                let shaped = g.tape.reshape(raw, &[hor, 2]);
                let squashed = g.tape.tanh(shaped);
                let disp = g.tape.scale(squashed, self.cfg.max_step_disp);
                let waypoints = g.tape.matmul(cum, disp);
                let cat_logits = g.tape.slice_cols(row, hor * 2, hor * 2 + 4);
                let box_params = g.tape.slice_cols(row, hor * 2 + 4, hor * 2 + 10);
                SlotDecode { waypoints, cat_logits, box_params }
            })
            .collect();
        MotionVars { slots }
    }

    fn lang_step(&self, g: &mut Graph, ctx: Var, prev: TokenId, step: usize) -> Var {
        let table = g.p(self.h.token_table);
        let e = g.tape.gather_rows(table, &[prev]);
        let hc = self.linear(g, ctx, self.h.lang_wc, self.h.lang_b1);
        let we = g.p(self.h.lang_we);
        let he = g.tape.matmul(e, we);
        let pos = g.p(self.h.lang_pos);
        let posr = g.tape.gather_rows(pos, &[step]);
        let sum = g.tape.add(hc, he);
        let sum = g.tape.add(sum, posr);
        let act = g.tape.tanh(sum);
        self.linear(g, act, self.h.lang_w2, self.h.lang_b2)
    }

    /// Teacher-forced answer logits against a reference answer.
    pub fn language_logits(&self, g: &mut Graph, ctx: Var, reference: &[TokenId]) -> Vec<Var> {
        let mut logits = Vec::with_capacity(reference.len());
        let mut prev = BOS;
        for (i, &tok) in reference.iter().enumerate() {
            logits.push(self.lang_step(g, ctx, prev, i));
            prev = tok;
        }
        logits
    }

    /// Greedy autoregressive decode, at most `MAX_ANSWER_LEN` tokens, stopping
    /// at the end marker. Returns per-step logits and the emitted tokens.
    pub fn language_decode(&self, g: &mut Graph, ctx: Var) -> (Vec<Var>, Vec<TokenId>) {
        let mut logits = Vec::new();
        let mut tokens = Vec::new();
        let mut prev = BOS;
        for i in 0..MAX_ANSWER_LEN {
            let l = self.lang_step(g, ctx, prev, i);
            let row = g.tape.value(l).data();
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            logits.push(l);
            tokens.push(best);
            prev = best;
            if best == EOS {
                break;
            }
        }
        (logits, tokens)
    }

    /// Rollout transition: predict next-step tokens from the current tokens
    /// conditioned on the description and the next ego-action question.
    /// Returns the tokens plus the core output row for the language head.
    pub fn predict_next_tokens(
        &self,
        g: &mut Graph,
        current: &TokenVars,
        description: &ScenarioText,
        question: Option<&QAItem>,
    ) -> (TokenVars, Var) {
        let w = self.cfg.width;
        let layout = self.cfg.rollout_layout();

        let ego_cat = g.tape.concat_cols(&[current.ego_mean, current.ego_logvar]);
        let agent_cat = g.tape.concat_cols(&[current.agent_mean, current.agent_logvar]);
        let all_flat = g.tape.concat(&[ego_cat, agent_cat]);
        let all = g.tape.reshape(all_flat, &[1 + AGENT_SLOTS, 2 * self.cfg.latent_dim]);
        let projected = self.linear(g, all, self.h.tok_in_w, self.h.tok_in_b);
        let rc = g.p(self.h.role_cur);
        let rn = g.p(self.h.role_next);
        let cur_rows = g.tape.add_row_broadcast(projected, rc);
        let next_rows = g.tape.add_row_broadcast(projected, rn);

        let desc_rows = self.text_rows(g, &description.padded(MAX_DESC_LEN), self.h.desc_pos);
        let q_ids = question
            .map(|q| q.question_padded(MAX_QUESTION_LEN))
            .unwrap_or_else(|| vec![0; MAX_QUESTION_LEN]);
        let q_rows = self.text_rows(g, &q_ids, self.h.q_pos);

        let flat = g.tape.concat(&[cur_rows, desc_rows, q_rows, next_rows]);
        let stream = g.tape.reshape(flat, &[layout.len, w]);
        let y = self.core(g, stream);

        let ego_rows = g.tape.gather_rows(y, &[layout.ego]);
        let agent_idx: Vec<usize> = (0..AGENT_SLOTS).map(|k| layout.agents_start + k).collect();
        let agent_rows = g.tape.gather_rows(y, &agent_idx);
        let (ego_mean, ego_logvar) = self.token_head(g, ego_rows);
        let (agent_mean, agent_logvar) = self.token_head(g, agent_rows);
        (TokenVars { ego_mean, ego_logvar, agent_mean, agent_logvar }, ego_rows)
    }
}
