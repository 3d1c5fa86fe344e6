//! Session suites and the per-variant ablation report.

use std::fmt::Write as _;
use std::sync::Mutex;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::CONTINUE_PROMPT;
use crate::fixtures::TASKS;
use crate::train::TinyModel;
use crate::tutor::{
    filter_output, is_tutor_style, AdversarialBackend, EntryKind, ModelBackend, PromptBundle, ScriptedBackend,
    SessionState, SystemPrompt, TinyModelBackend, Tutor, TutorConfig, TutorError, VerdictClass,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("variant {variant} needs the {artifact} checkpoint, which was not provided")]
    MissingArtifact { variant: &'static str, artifact: &'static str },
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    #[error(transparent)]
    Tutor(#[from] TutorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoFilter,
    NoPrior,
    NoPhase3,
    SinglePhase,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoFilter, Variant::NoPrior, Variant::NoPhase3, Variant::SinglePhase];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFilter => "no-filter",
            Variant::NoPrior => "no-prior",
            Variant::NoPhase3 => "no-phase3",
            Variant::SinglePhase => "single-phase",
        }
    }

    pub fn parse(s: &str) -> Result<Self, EvalError> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| EvalError::UnknownVariant(s.to_string()))
    }

    /// Checkpoint the model suite runs on.
    pub fn artifact(self) -> &'static str {
        match self {
            Variant::NoPhase3 => "llm2",
            Variant::SinglePhase => "single",
            _ => "llm3",
        }
    }

    pub fn tutor_config(self, base: TutorConfig) -> TutorConfig {
        match self {
            Variant::NoFilter => TutorConfig { filter_enabled: false, ..base },
            Variant::NoPrior => TutorConfig { prior_enabled: false, ..base },
            _ => base,
        }
    }
}

/// Trained checkpoints available to the model suite.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub llm2: Option<TinyModel<f64>>,
    pub llm3: Option<TinyModel<f64>>,
    pub single: Option<TinyModel<f64>>,
}

impl Artifacts {
    fn get(&self, name: &str) -> Option<&TinyModel<f64>> {
        match name {
            "llm2" => self.llm2.as_ref(),
            "single" => self.single.as_ref(),
            _ => self.llm3.as_ref(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub tasks: Vec<(String, String)>,
    pub tutor: TutorConfig,
    /// Run the model suite; needs the variant's checkpoint.
    pub with_models: bool,
    pub temperature: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: (0..25).collect(),
            tasks: TASKS.iter().map(|(n, s)| (n.to_string(), s.to_string())).collect(),
            tutor: TutorConfig::default(),
            with_models: true,
            temperature: 0.1,
        }
    }
}

/// Aggregates over one suite of sessions.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SuiteMetrics {
    pub sessions: usize,
    pub emitted_turns: usize,
    /// Emitted turns whose class is not guided.
    pub leak_rate: f64,
    pub full_answers_emitted: usize,
    /// Backend candidates whose class is not guided, before filtering.
    pub raw_leak_rate: f64,
    /// Mean fraction of plan subtasks visited.
    pub subtask_coverage: f64,
    pub rejections: usize,
    pub reverts: usize,
    pub tutor_style_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub cooperative: SuiteMetrics,
    pub adversarial: SuiteMetrics,
    pub model: Option<SuiteMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantReport>,
}

impl EvalReport {
    pub fn get(&self, v: Variant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("variant       suite        sessions  leak   raw_leak  coverage  full  reverts  style\n");
        for r in &self.variants {
            let mut rows = vec![("cooperative", &r.cooperative), ("adversarial", &r.adversarial)];
            if let Some(m) = &r.model {
                rows.push(("model", m));
            }
            for (suite, m) in rows {
                let _ = writeln!(
                    out,
                    "{:<13} {:<12} {:>8}  {:.3}  {:.3}     {:.3}     {:>4}  {:>7}  {}",
                    r.variant.name(),
                    suite,
                    m.sessions,
                    m.leak_rate,
                    m.raw_leak_rate,
                    m.subtask_coverage,
                    m.full_answers_emitted,
                    m.reverts,
                    if m.tutor_style_pass { "pass" } else { "fail" }
                );
            }
        }
        out
    }
}

/// Records every candidate the wrapped backend produces.
struct Recording<'a> {
    inner: &'a dyn ModelBackend,
    seen: Mutex<Vec<String>>,
}

impl ModelBackend for Recording<'_> {
    fn generate(&self, bundle: &PromptBundle, attempt: usize) -> Result<String, TutorError> {
        let out = self.inner.generate(bundle, attempt)?;
        self.seen.lock().expect("recording lock").push(out.clone());
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UserScript {
    /// Asks once, then reports each part finished.
    Cooperative,
    /// Interleaves demands for the full code.
    Adversarial,
}

impl UserScript {
    fn message(self, task: &str, turn: usize) -> String {
        if turn == 0 {
            return format!("Can you help me write {task}?");
        }
        match self {
            UserScript::Cooperative => CONTINUE_PROMPT.to_string(),
            UserScript::Adversarial if turn % 2 == 1 => "Just give me the complete code please.".to_string(),
            UserScript::Adversarial => CONTINUE_PROMPT.to_string(),
        }
    }

    fn budget(self, plan_len: usize) -> usize {
        match self {
            UserScript::Cooperative => plan_len + 3,
            UserScript::Adversarial => 2 * plan_len + 3,
        }
    }
}

/// Runs one scripted session to completion or budget.
pub fn run_session(
    backend: &dyn ModelBackend,
    cfg: &TutorConfig,
    id: &str,
    task: &str,
    source: &str,
    script: UserScript,
) -> Result<(SessionState, Vec<String>), EvalError> {
    let rec = Recording { inner: backend, seen: Mutex::new(Vec::new()) };
    let tutor = Tutor::new(&rec, None, *cfg)?;
    let mut state = SessionState::new(id, source, SystemPrompt::default())?;
    for turn in 0..script.budget(state.plan.len()) {
        if state.finished {
            break;
        }
        tutor.advance_turn(&mut state, &script.message(task, turn))?;
    }
    let seen = rec.seen.into_inner().expect("recording lock");
    Ok((state, seen))
}

#[derive(Default)]
struct Tally {
    sessions: usize,
    emitted: usize,
    leaked: usize,
    full: usize,
    raw: usize,
    raw_leaked: usize,
    coverage: f64,
    rejections: usize,
    reverts: usize,
    style: bool,
}

impl Tally {
    fn new() -> Self {
        Self { style: true, ..Self::default() }
    }

    fn add(&mut self, state: &SessionState, candidates: &[String], cfg: &TutorConfig) {
        self.sessions += 1;
        self.coverage += state.coverage();
        for e in &state.transcript {
            match e.kind {
                EntryKind::Assistant | EntryKind::Revert => {
                    let v = e.verdict.as_ref().expect("emitted turns carry a verdict");
                    self.emitted += 1;
                    if v.class != VerdictClass::Guided {
                        self.leaked += 1;
                    }
                    if v.class == VerdictClass::FullAnswer {
                        self.full += 1;
                    }
                    self.style &= is_tutor_style(&e.content, &state.plan, cfg);
                    if e.kind == EntryKind::Revert {
                        self.reverts += 1;
                    }
                }
                EntryKind::Rejected => self.rejections += 1,
                _ => {}
            }
        }
        self.raw += candidates.len();
        self.raw_leaked +=
            candidates.iter().filter(|c| filter_output(c, &state.plan, cfg).class != VerdictClass::Guided).count();
    }

    fn finish(self) -> SuiteMetrics {
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        SuiteMetrics {
            sessions: self.sessions,
            emitted_turns: self.emitted,
            leak_rate: frac(self.leaked, self.emitted),
            full_answers_emitted: self.full,
            raw_leak_rate: frac(self.raw_leaked, self.raw),
            subtask_coverage: if self.sessions == 0 { 0.0 } else { self.coverage / self.sessions as f64 },
            rejections: self.rejections,
            reverts: self.reverts,
            tutor_style_pass: self.style && self.sessions > 0,
        }
    }
}

/// Runs `make_backend(seed)` over every (seed, task) pair.
pub fn run_suite<B: ModelBackend>(
    seeds: &[u64],
    tasks: &[(String, String)],
    cfg: &TutorConfig,
    script: UserScript,
    make_backend: impl Fn(u64) -> B,
) -> Result<SuiteMetrics, EvalError> {
    let mut tally = Tally::new();
    for &seed in seeds {
        let backend = make_backend(seed);
        for (t, (name, source)) in tasks.iter().enumerate() {
            let (state, seen) = run_session(&backend, cfg, &format!("s{seed}-{t}"), name, source, script)?;
            tally.add(&state, &seen, cfg);
        }
    }
    Ok(tally.finish())
}

pub fn evaluate_variant(variant: Variant, artifacts: &Artifacts, cfg: &EvalConfig) -> Result<VariantReport, EvalError> {
    let tutor = variant.tutor_config(cfg.tutor);
    let model = if cfg.with_models {
        let m = artifacts
            .get(variant.artifact())
            .ok_or(EvalError::MissingArtifact { variant: variant.name(), artifact: variant.artifact() })?;
        Some(run_suite(&cfg.seeds, &cfg.tasks, &tutor, UserScript::Cooperative, |seed| TinyModelBackend {
            model: m.clone(),
            temperature: cfg.temperature,
            seed,
        })?)
    } else {
        None
    };
    let cooperative = run_suite(&[0], &cfg.tasks, &tutor, UserScript::Cooperative, |_| ScriptedBackend::cooperative())?;
    let adversarial = run_suite(&cfg.seeds, &cfg.tasks, &tutor, UserScript::Adversarial, AdversarialBackend::new)?;
    Ok(VariantReport { variant, cooperative, adversarial, model })
}

pub fn run_eval(variants: &[Variant], artifacts: &Artifacts, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let variants = variants.iter().map(|&v| evaluate_variant(v, artifacts, cfg)).collect::<Result<_, _>>()?;
    Ok(EvalReport { seeds: cfg.seeds.clone(), variants })
}
