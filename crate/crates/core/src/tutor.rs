//! Prior assembly, the output filter with revert, the multi-turn session
//! state machine and the model backends.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::astseg::{parse_source, plan_for_source, AstError, NodeKind, SubtaskPlan};
use crate::corpus::{guided_step_text, Role, Turn};
use crate::embed::{Embedder, HashingEmbedder};
use crate::astseg::plan_coverage;
use crate::train::TinyModel;
use crate::vectordb::{VectorIndex, DEFAULT_RELEVANCE_THRESHOLD};

#[derive(Debug, Error)]
pub enum TutorError {
    #[error("system prompt needs a non-empty {0}")]
    SystemPrompt(&'static str),
    #[error("task source does not parse: {0}")]
    Source(#[from] AstError),
    #[error("task source has no teachable subtasks")]
    EmptyPlan,
    #[error("backend failed: {0}")]
    Backend(String),
    #[error("index dimension {index} does not match embedder dimension {embedder}")]
    IndexDimension { index: usize, embedder: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemPrompt {
    pub persona: String,
    pub guide_constraint: String,
}

impl Default for SystemPrompt {
    fn default() -> Self {
        Self {
            persona: "You are a patient programming tutor for beginners.".into(),
            guide_constraint: "Guide the student one subtask at a time and never reveal the complete solution.".into(),
        }
    }
}

impl SystemPrompt {
    pub fn validate(&self) -> Result<(), TutorError> {
        if self.persona.trim().is_empty() {
            return Err(TutorError::SystemPrompt("persona"));
        }
        if self.guide_constraint.trim().is_empty() {
            return Err(TutorError::SystemPrompt("guide constraint"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TutorConfig {
    pub top_k: usize,
    pub relevance_threshold: f64,
    pub nprobe: usize,
    pub history_window: usize,
    pub partial_threshold: f64,
    pub full_threshold: f64,
    pub max_rejections: usize,
    pub filter_enabled: bool,
    pub prior_enabled: bool,
}

impl Default for TutorConfig {
    fn default() -> Self {
        Self {
            top_k: 4,
            relevance_threshold: DEFAULT_RELEVANCE_THRESHOLD,
            nprobe: 2,
            history_window: 8,
            partial_threshold: 0.3,
            full_threshold: 0.8,
            max_rejections: 3,
            filter_enabled: true,
            prior_enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub id: String,
    pub payload: String,
    pub score: f64,
}

/// Everything the backend sees for one generation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptBundle {
    pub system: SystemPrompt,
    pub retrieved: Vec<RetrievedItem>,
    /// Empty when the prior module is disabled.
    pub plan: SubtaskPlan,
    /// 1-based; 0 when no plan is attached.
    pub current_subtask: usize,
    pub history: Vec<Turn>,
    pub user_message: String,
    /// Reference solution the plan was segmented from.
    pub solution: Option<String>,
    /// Set on a regeneration after a partial leak.
    pub tightened: bool,
}

impl PromptBundle {
    pub fn constraint(&self) -> String {
        let mut c = self.system.guide_constraint.clone();
        if self.tightened {
            c.push_str(" Give a hint in words only and do not write any code.");
        }
        c
    }

    /// Flattened context: system prompt first, then knowledge, plan focus
    /// and the recent history.
    pub fn render_context(&self) -> String {
        let mut out = format!("SYSTEM: {}\n{}\n", self.system.persona, self.constraint());
        for r in &self.retrieved {
            out.push_str(&format!("KNOWLEDGE ({:.2}): {}\n", r.score, r.payload));
        }
        if let Some(st) = self.plan.get(self.current_subtask) {
            out.push_str(&format!("PLAN: subtask {} of {}: {}\n", st.index, self.plan.len(), st.description));
        }
        for t in &self.history {
            let tag = if t.role == Role::User { "U" } else { "A" };
            out.push_str(&format!("{tag}: {}\n", t.content));
        }
        out.push_str(&format!("U: {}\n", self.user_message));
        out
    }
}

/// Assembles the prior for one turn. Retrieval keeps the top `k` hits whose
/// score reaches the relevance threshold.
pub fn assemble_prior(
    query: &str,
    index: Option<&VectorIndex<f64>>,
    embedder: &HashingEmbedder,
    sys: &SystemPrompt,
    state: &SessionState,
    cfg: &TutorConfig,
) -> PromptBundle {
    let window = cfg.history_window;
    let history = state.history[state.history.len().saturating_sub(window)..].to_vec();
    let mut bundle = PromptBundle {
        system: sys.clone(),
        retrieved: Vec::new(),
        plan: SubtaskPlan::default(),
        current_subtask: 0,
        history,
        user_message: query.to_string(),
        solution: Some(state.source.clone()),
        tightened: false,
    };
    if !cfg.prior_enabled {
        return bundle;
    }
    bundle.plan = state.plan.clone();
    bundle.current_subtask = state.current_subtask;
    if let Some(index) = index.filter(|i| !i.is_empty()) {
        let q = Embedder::<f64>::embed(embedder, query);
        let found = if index.is_clustered() {
            index.search_clustered(&q, cfg.top_k, cfg.nprobe.min(index.n_clusters()))
        } else {
            index.search_exact(&q, cfg.top_k)
        };
        if let Ok(res) = found {
            bundle.retrieved = res
                .hits
                .into_iter()
                .filter(|h| h.score >= cfg.relevance_threshold)
                .map(|h| RetrievedItem { id: h.id, payload: h.payload, score: h.score })
                .collect();
        }
    }
    bundle
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictClass {
    Guided,
    PartialLeak,
    FullAnswer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub class: VerdictClass,
    pub coverage: f64,
    pub matched_patterns: Vec<String>,
}

fn terminal_patterns() -> &'static [(&'static str, Regex)] {
    static P: OnceLock<Vec<(&'static str, Regex)>> = OnceLock::new();
    P.get_or_init(|| {
        vec![
            ("final_answer_phrase", Regex::new(r"(?i)\bfinal answer is\b").unwrap()),
            (
                "complete_solution_phrase",
                Regex::new(r"(?i)\bhere(?:'s| is) the (?:complete|full|whole|entire) (?:solution|code|program|answer)\b")
                    .unwrap(),
            ),
        ]
    })
}

/// Classifies a candidate by how much of the plan it realizes and by
/// terminal-answer patterns.
pub fn filter_output(candidate: &str, plan: &SubtaskPlan, cfg: &TutorConfig) -> FilterVerdict {
    let coverage = if plan.is_empty() { 0.0 } else { plan_coverage(plan, candidate) };
    let mut matched: Vec<String> =
        terminal_patterns().iter().filter(|(_, re)| re.is_match(candidate)).map(|(n, _)| n.to_string()).collect();
    if coverage >= 1.0 {
        if let Ok(ast) = parse_source(candidate) {
            if ast.children.iter().any(|c| c.kind == NodeKind::FunctionDef) {
                matched.push("complete_function".into());
            }
        }
    }
    let class = if coverage >= cfg.full_threshold || !matched.is_empty() {
        VerdictClass::FullAnswer
    } else if coverage >= cfg.partial_threshold {
        VerdictClass::PartialLeak
    } else {
        VerdictClass::Guided
    };
    FilterVerdict { class, coverage, matched_patterns: matched }
}

fn looks_like_code(line: &str) -> bool {
    let t = line.trim();
    if t.is_empty() {
        return false;
    }
    !crate::astseg::heuristic_tags(line).is_empty()
        || t.ends_with(':')
        || t.contains(" = ")
        || t.contains("+=")
        || t.contains("-=")
        || line.starts_with("    ")
}

/// Replaces each run of code-like lines with the subtask description.
pub fn redact(candidate: &str, plan: &SubtaskPlan, subtask: usize) -> String {
    let label = match plan.get(subtask) {
        Some(st) => format!("[Subtask {}: {}]", st.index, st.description),
        None => "[hint withheld]".to_string(),
    };
    let mut out: Vec<String> = Vec::new();
    let mut in_code = false;
    for line in candidate.lines() {
        if looks_like_code(line) {
            if !in_code {
                out.push(label.clone());
            }
            in_code = true;
        } else {
            out.push(line.to_string());
            in_code = false;
        }
    }
    out.join("\n")
}

const GENERIC_HINT: &str = "Think about what the function has to do first. What would you try?";
const REANCHOR_PREFIX: &str = "Let's step back to where we were.";
const CLOSING: &str = "You have worked through every subtask. Put the pieces together and run your function to check it.";

/// Template adherence: a guided reply that is a step hint, a redacted
/// placeholder, the re-anchor message, the closing message or the generic
/// opener.
pub fn is_tutor_style(reply: &str, plan: &SubtaskPlan, cfg: &TutorConfig) -> bool {
    if filter_output(reply, plan, cfg).class != VerdictClass::Guided {
        return false;
    }
    static STEP: OnceLock<Regex> = OnceLock::new();
    STEP.get_or_init(|| Regex::new(r"^Step \d+: ").unwrap()).is_match(reply)
        || reply.contains("[Subtask ")
        || reply.starts_with(REANCHOR_PREFIX)
        || reply == CLOSING
        || reply == GENERIC_HINT
}

/// Pluggable text generator. Implementations must not depend on anything
/// but the bundle and the attempt number.
pub trait ModelBackend: Send + Sync {
    fn generate(&self, bundle: &PromptBundle, attempt: usize) -> Result<String, TutorError>;
}

impl<B: ModelBackend + ?Sized> ModelBackend for Box<B> {
    fn generate(&self, bundle: &PromptBundle, attempt: usize) -> Result<String, TutorError> {
        (**self).generate(bundle, attempt)
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for std::sync::Arc<B> {
    fn generate(&self, bundle: &PromptBundle, attempt: usize) -> Result<String, TutorError> {
        (**self).generate(bundle, attempt)
    }
}

/// Hint for the bundle's current subtask, or a generic nudge without a plan.
pub fn hint_for(bundle: &PromptBundle) -> String {
    match bundle.plan.get(bundle.current_subtask) {
        Some(st) => guided_step_text(st.index, &st.description),
        None => GENERIC_HINT.to_string(),
    }
}

/// Source lines covered by the current subtask's span.
fn partial_code(bundle: &PromptBundle) -> Option<String> {
    let st = bundle.plan.get(bundle.current_subtask)?;
    let src = bundle.solution.as_ref()?;
    let lines: Vec<&str> = src.lines().collect();
    let (a, b) = (st.span.start.line.saturating_sub(1), st.span.end.line.min(lines.len()));
    (a < b).then(|| lines[a..b].join("\n"))
}

/// Deterministic table keyed by subtask index; falls back to the plan hint.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    pub table: std::collections::BTreeMap<usize, String>,
}

impl ScriptedBackend {
    /// One hint per subtask.
    pub fn cooperative() -> Self {
        Self::default()
    }
}

impl ModelBackend for ScriptedBackend {
    fn generate(&self, bundle: &PromptBundle, _attempt: usize) -> Result<String, TutorError> {
        Ok(self.table.get(&bundle.current_subtask).cloned().unwrap_or_else(|| hint_for(bundle)))
    }
}

fn mix(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn call_rng(seed: u64, bundle: &PromptBundle, attempt: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[seed, bundle.current_subtask as u64, bundle.history.len() as u64, attempt as u64]))
}

/// Seeded mock that often tries to hand over the answer.
#[derive(Debug, Clone)]
pub struct AdversarialBackend {
    pub seed: u64,
    /// Probabilities of: full solution, final-answer phrase, partial code.
    /// The remainder is a plain hint.
    pub p_full: f64,
    pub p_phrase: f64,
    pub p_partial: f64,
}

impl AdversarialBackend {
    pub fn new(seed: u64) -> Self {
        Self { seed, p_full: 0.4, p_phrase: 0.1, p_partial: 0.25 }
    }

    pub fn always_full() -> Self {
        Self { seed: 0, p_full: 1.0, p_phrase: 0.0, p_partial: 0.0 }
    }
}

impl ModelBackend for AdversarialBackend {
    fn generate(&self, bundle: &PromptBundle, attempt: usize) -> Result<String, TutorError> {
        let mut rng = call_rng(self.seed, bundle, attempt);
        let solution = bundle.solution.clone().unwrap_or_default();
        let u: f64 = rng.random();
        let text = if u < self.p_full {
            solution
        } else if u < self.p_full + self.p_phrase {
            format!("The final answer is the function below.\n{}", hint_for(bundle))
        } else if u < self.p_full + self.p_phrase + self.p_partial {
            // several subtasks' worth of code from the top of the solution
            let lines: Vec<&str> = solution.lines().filter(|l| !l.trim().is_empty()).collect();
            let n = (lines.len() * 2 / 3).max(1).min(lines.len());
            format!("Start from this:\n{}", lines[..n].join("\n"))
        } else {
            hint_for(bundle)
        };
        Ok(text)
    }
}

/// Scores a fixed candidate set (plan hint, full solution, the current
/// subtask's code) by the model's mean per-character log-likelihood and
/// samples one at the given temperature.
#[derive(Debug, Clone)]
pub struct TinyModelBackend {
    pub model: TinyModel<f64>,
    pub temperature: f64,
    pub seed: u64,
}

impl TinyModelBackend {
    pub fn new(model: TinyModel<f64>, seed: u64) -> Self {
        Self { model, temperature: 0.1, seed }
    }

    pub fn candidates(bundle: &PromptBundle) -> Vec<String> {
        let mut c = vec![hint_for(bundle)];
        if let Some(sol) = &bundle.solution {
            c.push(sol.clone());
        }
        if !bundle.tightened {
            if let Some(p) = partial_code(bundle) {
                c.push(p);
            }
        }
        c
    }

    /// Mean log-likelihood of each candidate as the assistant reply.
    pub fn scores(&self, bundle: &PromptBundle) -> Vec<(String, f64)> {
        let prefix = format!("U: {}\nA: ", bundle.user_message);
        Self::candidates(bundle)
            .into_iter()
            .map(|c| {
                let s = self.model.mean_log_likelihood(&prefix, &format!("{c}\n"));
                (c, s)
            })
            .collect()
    }
}

impl ModelBackend for TinyModelBackend {
    fn generate(&self, bundle: &PromptBundle, attempt: usize) -> Result<String, TutorError> {
        let scored = self.scores(bundle);
        let t = self.temperature.max(1e-6);
        let top = scored.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scored.iter().map(|(_, s)| ((s - top) / t).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = call_rng(self.seed, bundle, attempt).random::<f64>() * total;
        for ((c, _), w) in scored.iter().zip(&weights) {
            if u < *w {
                return Ok(c.clone());
            }
            u -= w;
        }
        Ok(scored.last().map(|(c, _)| c.clone()).unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Checkpoint {
    pub history: Vec<Turn>,
    pub current_subtask: usize,
    pub visited: BTreeSet<usize>,
    pub finished: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    User,
    Assistant,
    /// A withheld candidate; its text is never stored.
    Rejected,
    Revert,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranscriptEntry {
    pub kind: EntryKind,
    pub content: String,
    pub verdict: Option<FilterVerdict>,
    pub subtask: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionState {
    pub id: String,
    pub source: String,
    pub system: SystemPrompt,
    pub plan: SubtaskPlan,
    /// 1-based, never above the plan length.
    pub current_subtask: usize,
    pub visited: BTreeSet<usize>,
    pub finished: bool,
    pub history: Vec<Turn>,
    pub checkpoints: Vec<Checkpoint>,
    pub consecutive_rejections: usize,
    pub transcript: Vec<TranscriptEntry>,
}

impl SessionState {
    pub fn new(id: impl Into<String>, source: &str, system: SystemPrompt) -> Result<Self, TutorError> {
        system.validate()?;
        let plan = plan_for_source(source)?;
        if plan.is_empty() {
            return Err(TutorError::EmptyPlan);
        }
        Ok(Self {
            id: id.into(),
            source: source.to_string(),
            system,
            plan,
            current_subtask: 1,
            visited: BTreeSet::new(),
            finished: false,
            history: Vec::new(),
            checkpoints: Vec::new(),
            consecutive_rejections: 0,
            transcript: Vec::new(),
        })
    }

    fn snapshot(&self) -> Checkpoint {
        Checkpoint {
            history: self.history.clone(),
            current_subtask: self.current_subtask,
            visited: self.visited.clone(),
            finished: self.finished,
        }
    }

    fn restore(&mut self, c: Checkpoint) {
        self.history = c.history;
        self.current_subtask = c.current_subtask;
        self.visited = c.visited;
        self.finished = c.finished;
    }

    /// Fraction of plan subtasks that received accepted guidance.
    pub fn coverage(&self) -> f64 {
        self.visited.len() as f64 / self.plan.len().max(1) as f64
    }

    pub fn emitted(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.transcript.iter().filter(|e| matches!(e.kind, EntryKind::Assistant | EntryKind::Revert))
    }
}

/// Restores and pops the top checkpoint, or resets to the initial state
/// when the stack is empty. The rejection counter is cleared either way.
pub fn revert_checkpoint(state: &mut SessionState) {
    let target = state.checkpoints.pop().unwrap_or(Checkpoint {
        history: Vec::new(),
        current_subtask: 1,
        visited: BTreeSet::new(),
        finished: false,
    });
    state.restore(target);
    state.consecutive_rejections = 0;
    state.transcript.push(TranscriptEntry {
        kind: EntryKind::Revert,
        content: String::new(),
        verdict: None,
        subtask: state.current_subtask,
    });
}

fn completion_signal() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(done|finished|next|completed)\b").unwrap())
}

pub fn is_completion_signal(msg: &str) -> bool {
    completion_signal().is_match(msg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnOutcome {
    pub reply: String,
    pub verdict: FilterVerdict,
    pub current_subtask: usize,
    pub reverted: bool,
    pub finished: bool,
}

/// Wiring for one tutor: backend, optional knowledge index and config.
pub struct Tutor<'a> {
    pub backend: &'a dyn ModelBackend,
    pub index: Option<&'a VectorIndex<f64>>,
    pub embedder: HashingEmbedder,
    pub config: TutorConfig,
}

impl<'a> Tutor<'a> {
    pub fn new(backend: &'a dyn ModelBackend, index: Option<&'a VectorIndex<f64>>, config: TutorConfig) -> Result<Self, TutorError> {
        let embedder = HashingEmbedder::default();
        if let Some(ix) = index {
            let d = Embedder::<f64>::dimension(&embedder);
            if ix.dim() != d {
                return Err(TutorError::IndexDimension { index: ix.dim(), embedder: d });
            }
        }
        Ok(Self { backend, index, embedder, config })
    }

    fn closing(&self) -> String {
        CLOSING.to_string()
    }

    fn reanchor(&self, state: &SessionState) -> String {
        let focus = state
            .plan
            .get(state.current_subtask)
            .map(|st| format!(" We are on subtask {}: {}.", st.index, st.description))
            .unwrap_or_default();
        format!(
            "{REANCHOR_PREFIX} {}{} Try writing just this part yourself.",
            state.system.guide_constraint, focus
        )
    }

    /// One user turn. On backend failure the state is unchanged apart from
    /// an error entry in the transcript.
    pub fn advance_turn(&self, state: &mut SessionState, user_msg: &str) -> Result<TurnOutcome, TutorError> {
        let mut next = state.clone();
        match self.turn(&mut next, user_msg) {
            Ok(out) => {
                *state = next;
                Ok(out)
            }
            Err(e) => {
                state.transcript.push(TranscriptEntry {
                    kind: EntryKind::Error,
                    content: e.to_string(),
                    verdict: None,
                    subtask: state.current_subtask,
                });
                Err(e)
            }
        }
    }

    fn turn(&self, s: &mut SessionState, user_msg: &str) -> Result<TurnOutcome, TutorError> {
        let cfg = &self.config;
        s.transcript.push(TranscriptEntry {
            kind: EntryKind::User,
            content: user_msg.to_string(),
            verdict: None,
            subtask: s.current_subtask,
        });
        if !s.finished && is_completion_signal(user_msg) && s.visited.contains(&s.current_subtask) {
            if s.current_subtask >= s.plan.len() {
                s.finished = true;
            } else {
                s.current_subtask += 1;
            }
        }
        if s.finished {
            let reply = self.closing();
            return Ok(self.accept(s, user_msg, reply));
        }
        let mut tightened = false;
        let max_attempts = cfg.max_rejections + 2;
        for attempt in 0..max_attempts {
            let mut bundle = assemble_prior(user_msg, self.index, &self.embedder, &s.system, s, cfg);
            bundle.tightened = tightened;
            let candidate = self.backend.generate(&bundle, attempt)?;
            if !cfg.filter_enabled {
                return Ok(self.accept(s, user_msg, candidate));
            }
            let verdict = filter_output(&candidate, &s.plan, cfg);
            match verdict.class {
                VerdictClass::Guided => return Ok(self.accept(s, user_msg, candidate)),
                VerdictClass::PartialLeak if !tightened => tightened = true,
                VerdictClass::PartialLeak => {
                    let redacted = redact(&candidate, &s.plan, s.current_subtask);
                    let reply = if filter_output(&redacted, &s.plan, cfg).class == VerdictClass::Guided {
                        redacted
                    } else {
                        hint_for(&bundle)
                    };
                    return Ok(self.accept(s, user_msg, reply));
                }
                VerdictClass::FullAnswer => {
                    s.consecutive_rejections += 1;
                    s.transcript.push(TranscriptEntry {
                        kind: EntryKind::Rejected,
                        content: String::new(),
                        verdict: Some(verdict),
                        subtask: s.current_subtask,
                    });
                    if s.consecutive_rejections >= cfg.max_rejections {
                        revert_checkpoint(s);
                        let reply = self.reanchor(s);
                        let verdict = filter_output(&reply, &s.plan, cfg);
                        if let Some(last) = s.transcript.last_mut() {
                            last.content = reply.clone();
                            last.verdict = Some(verdict.clone());
                        }
                        return Ok(TurnOutcome {
                            reply,
                            verdict,
                            current_subtask: s.current_subtask,
                            reverted: true,
                            finished: s.finished,
                        });
                    }
                }
            }
        }
        let bundle = assemble_prior(user_msg, self.index, &self.embedder, &s.system, s, cfg);
        let reply = hint_for(&bundle);
        Ok(self.accept(s, user_msg, reply))
    }

    /// Emits `reply`: history, visit mark, checkpoint, counter reset.
    fn accept(&self, s: &mut SessionState, user_msg: &str, reply: String) -> TurnOutcome {
        let verdict = filter_output(&reply, &s.plan, &self.config);
        s.consecutive_rejections = 0;
        s.history.push(Turn::user(user_msg));
        s.history.push(Turn::assistant(reply.clone()));
        if !s.finished {
            s.visited.insert(s.current_subtask);
        }
        s.checkpoints.push(s.snapshot());
        s.transcript.push(TranscriptEntry {
            kind: EntryKind::Assistant,
            content: reply.clone(),
            verdict: Some(verdict.clone()),
            subtask: s.current_subtask,
        });
        TurnOutcome { reply, verdict, current_subtask: s.current_subtask, reverted: false, finished: s.finished }
    }
}
