//! Symbolic language channel: a closed 64-token vocabulary, templated
//! scenario descriptions, and per-step ego-action question-answer pairs
//! grounded in the expert oracle's phase.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy, Tape, Var};
use crate::world::expert::{expert_action, Maneuver};
use crate::world::scenario::{AgentKind, Category, ScenarioScript};
use crate::world::{Simulation, WorldState};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;

pub const MAX_DESC_LEN: usize = 16;
pub const MAX_QUESTION_LEN: usize = 8;
pub const MAX_ANSWER_LEN: usize = 8;

/// The full closed vocabulary, in id order. Index 0 is reserved for padding.
pub const VOCAB: [&str; 64] = [
    "<pad>",
    "<bos>",
    "<end>",
    "proceed",
    "brake",
    "yield",
    "stop",
    "merge",
    "overtake",
    "turn-left",
    "turn-right",
    "accelerate",
    "decelerate",
    "follow",
    "merging",
    "overtaking",
    "emergency-brake",
    "give-way",
    "traffic-sign",
    "vehicle",
    "pedestrian",
    "cyclist",
    "obstacle",
    "lead",
    "traffic",
    "sign",
    "light",
    "lane",
    "route",
    "ego",
    "ahead",
    "behind",
    "left",
    "right",
    "near",
    "far",
    "crossing",
    "oncoming",
    "clear",
    "blocked",
    "fast",
    "slow",
    "now",
    "soon",
    "what",
    "should",
    "do",
    "is",
    "it",
    "safe",
    "to",
    "why",
    "red",
    "green",
    "active",
    "waiting",
    "gap",
    "open",
    "closed",
    "limit",
    "speed",
    "distance",
    "braking",
    "slowing",
];

pub const VOCAB_SIZE: usize = VOCAB.len();

/// Token-string lookup; panics on an unknown word (the vocabulary is closed).
pub fn token(word: &str) -> TokenId {
    VOCAB
        .iter()
        .position(|&w| w == word)
        .unwrap_or_else(|| panic!("word {word:?} not in vocabulary"))
}

pub fn token_str(id: TokenId) -> &'static str {
    VOCAB[id]
}

/// Scenario description: token sequence, end-marked, max length 16.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioText(pub Vec<TokenId>);

impl ScenarioText {
    fn from_words(words: &[&str]) -> Self {
        let mut toks: Vec<TokenId> = words.iter().map(|w| token(w)).collect();
        toks.push(EOS);
        assert!(toks.len() <= MAX_DESC_LEN, "description too long: {} tokens", toks.len());
        ScenarioText(toks)
    }

    /// Padded to a fixed length for the model's token stream.
    pub fn padded(&self, len: usize) -> Vec<TokenId> {
        let mut out = self.0.clone();
        assert!(out.len() <= len);
        out.resize(len, PAD);
        out
    }
}

/// One ego-action question-answer pair tied to a world step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub question: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub step: usize,
}

impl QAItem {
    /// A blank item (used when question conditioning is toggled off).
    pub fn empty(step: usize) -> Self {
        QAItem { question: Vec::new(), answer: vec![token("proceed"), EOS], step }
    }

    pub fn question_padded(&self, len: usize) -> Vec<TokenId> {
        let mut out = self.question.clone();
        assert!(out.len() <= len);
        out.resize(len, PAD);
        out
    }
}

pub fn maneuver_token(m: Maneuver) -> TokenId {
    match m {
        Maneuver::Proceed => token("proceed"),
        Maneuver::Brake => token("brake"),
        Maneuver::Yield => token("yield"),
        Maneuver::Stop => token("stop"),
        Maneuver::Merge => token("merge"),
        Maneuver::Overtake => token("overtake"),
    }
}

fn category_word(c: Category) -> &'static str {
    match c {
        Category::Merging => "merging",
        Category::Overtaking => "overtaking",
        Category::EmergencyBrake => "emergency-brake",
        Category::GiveWay => "give-way",
        Category::TrafficSign => "traffic-sign",
    }
}

fn salient_agent_clause(script: &ScenarioScript, world: &WorldState) -> Vec<&'static str> {
    match script.category {
        Category::EmergencyBrake | Category::Overtaking => vec!["lead", "vehicle", "ahead"],
        Category::GiveWay => {
            let kind = script
                .crossing_window()
                .map(|(idx, ..)| script.agents[idx].kind)
                .unwrap_or(AgentKind::Pedestrian);
            let word = match kind {
                AgentKind::Cyclist => "cyclist",
                _ => "pedestrian",
            };
            vec![word, "crossing"]
        }
        Category::Merging => {
            if world.agents.iter().any(|a| a.state.kind == AgentKind::Vehicle) {
                vec!["traffic", "left"]
            } else {
                Vec::new()
            }
        }
        // the sign clause, not an agent clause
        Category::TrafficSign => Vec::new(),
    }
}

fn trigger_clause(script: &ScenarioScript, world: &WorldState) -> Vec<&'static str> {
    if let Some((_, step, hold)) = script.lead_brake() {
        if world.step >= step && world.step < step + hold {
            return vec!["braking", "now"];
        }
    }
    if let Some((_, enter, exit, _)) = script.crossing_window() {
        if world.step >= enter && world.step <= exit {
            return vec!["crossing", "now"];
        }
    }
    if let Some((red_from, red_until, _)) = script.signal_phase() {
        if world.step >= red_from && world.step <= red_until {
            return vec!["light", "red"];
        }
        return vec!["light", "green"];
    }
    Vec::new()
}

/// Deterministic template fill: category token, salient-agent clause,
/// trigger clause, end marker.
pub fn describe(script: &ScenarioScript, world: &WorldState) -> ScenarioText {
    let mut words = vec![category_word(script.category)];
    if script.category == Category::TrafficSign {
        words.extend(["stop", "sign", "ahead"]);
    }
    words.extend(salient_agent_clause(script, world));
    words.extend(trigger_clause(script, world));
    ScenarioText::from_words(&words)
}

/// The fixed question bank.
pub fn question_bank() -> [Vec<TokenId>; 3] {
    let q = |words: &[&str]| -> Vec<TokenId> {
        let mut t: Vec<TokenId> = words.iter().map(|w| token(w)).collect();
        t.push(EOS);
        assert!(t.len() <= MAX_QUESTION_LEN);
        t
    };
    [
        q(&["what", "should", "ego", "do", "now"]),
        q(&["is", "it", "safe", "to", "proceed"]),
        q(&["why", "is", "ego", "slowing"]),
    ]
}

/// Maneuver labels for every step of the scripted episode, produced by
/// replaying the expert from the initial state.
pub fn maneuver_schedule(script: &ScenarioScript) -> Vec<Maneuver> {
    let mut sim = Simulation::new(script);
    let mut labels = Vec::with_capacity(script.horizon);
    for _ in 0..script.horizon {
        let (action, label) = expert_action(script, &sim.world);
        labels.push(label);
        if !sim.is_done() {
            sim.step(action);
        }
    }
    labels
}

/// QA pairs for every step of the episode. The question rotates through the
/// bank at index (seed + step) mod bank size; the answer is the expert
/// oracle's maneuver label at that step plus the end marker.
pub fn qa_schedule(script: &ScenarioScript) -> Vec<QAItem> {
    let bank = question_bank();
    maneuver_schedule(script)
        .into_iter()
        .enumerate()
        .map(|(step, label)| QAItem {
            question: bank[(script.seed as usize + step) % bank.len()].clone(),
            answer: vec![maneuver_token(label), EOS],
            step,
        })
        .collect()
}

/// Single-step QA generation; computed by replay, so prefer
/// [`qa_schedule`] when more than one step is needed.
pub fn gen_qa(script: &ScenarioScript, step: usize) -> QAItem {
    assert!(step < script.horizon, "step {step} outside horizon {}", script.horizon);
    qa_schedule(script).swap_remove(step)
}

/// Mean per-token cross-entropy of answer logits against the reference
/// answer; padding positions are masked out.
pub fn answer_loss(tape: &mut Tape, answer_logits: &[Var], reference: &QAItem) -> Var {
    assert!(
        answer_logits.len() >= reference.answer.len(),
        "logits shorter than the reference answer"
    );
    let mut terms = Vec::new();
    for (i, &tok) in reference.answer.iter().enumerate() {
        if tok == PAD {
            continue;
        }
        let flat = {
            let n = tape.value(answer_logits[i]).len();
            tape.reshape(answer_logits[i], &[n])
        };
        terms.push(cross_entropy(tape, flat, tok));
    }
    if terms.is_empty() {
        return tape.scalar(0.0);
    }
    let stacked = tape.concat(&terms);
    tape.mean(stacked)
}
