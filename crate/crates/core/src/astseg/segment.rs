//! Construct-level segmentation of a syntax tree into teaching subtasks.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{parse_source, unparse_expr, AstNode, NodeKind, Span};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeTag {
    FunctionDefinition,
    Loop,
    Conditional,
    Assignment,
    Swap,
    Return,
    Call,
    Comparison,
}

impl KnowledgeTag {
    pub fn as_str(self) -> &'static str {
        match self {
            KnowledgeTag::FunctionDefinition => "function_definition",
            KnowledgeTag::Loop => "loop",
            KnowledgeTag::Conditional => "conditional",
            KnowledgeTag::Assignment => "assignment",
            KnowledgeTag::Swap => "swap",
            KnowledgeTag::Return => "return",
            KnowledgeTag::Call => "call",
            KnowledgeTag::Comparison => "comparison",
        }
    }
}

/// Description templates keyed by tag; `{detail}` is substituted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentTemplates {
    pub function_definition: String,
    #[serde(rename = "loop")]
    pub loop_: String,
    pub conditional: String,
    pub assignment: String,
    pub swap: String,
    #[serde(rename = "return")]
    pub return_: String,
    pub call: String,
    pub comparison: String,
}

const DEFAULT_TEMPLATES: &str = include_str!("../../assets/templates.toml");

impl Default for SegmentTemplates {
    fn default() -> Self {
        Self::from_toml(DEFAULT_TEMPLATES).expect("bundled templates parse")
    }
}

impl SegmentTemplates {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    fn get(&self, tag: KnowledgeTag) -> &str {
        match tag {
            KnowledgeTag::FunctionDefinition => &self.function_definition,
            KnowledgeTag::Loop => &self.loop_,
            KnowledgeTag::Conditional => &self.conditional,
            KnowledgeTag::Assignment => &self.assignment,
            KnowledgeTag::Swap => &self.swap,
            KnowledgeTag::Return => &self.return_,
            KnowledgeTag::Call => &self.call,
            KnowledgeTag::Comparison => &self.comparison,
        }
    }

    pub fn render(&self, tag: KnowledgeTag, detail: &str) -> String {
        self.get(tag).replace("{detail}", detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub index: usize,
    #[serde(rename = "tag")]
    pub knowledge_tag: KnowledgeTag,
    pub description: String,
    pub depends_on: BTreeSet<usize>,
    pub span: Span,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("subtask indices must run 1..=n, found {found} at position {position}")]
    Indices { position: usize, found: usize },
    #[error("subtask {index} depends on {dep}, which is not earlier")]
    ForwardDependency { index: usize, dep: usize },
    #[error("subtask {0} has a span that matches no node")]
    DanglingSpan(usize),
}

/// Ordered, dependency-linked subtasks for one coding task.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskPlan {
    subtasks: Vec<Subtask>,
}

impl SubtaskPlan {
    pub fn new(subtasks: Vec<Subtask>) -> Result<Self, PlanError> {
        let plan = Self { subtasks };
        plan.validate()?;
        Ok(plan)
    }

    pub fn subtasks(&self) -> &[Subtask] {
        &self.subtasks
    }

    pub fn len(&self) -> usize {
        self.subtasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subtasks.is_empty()
    }

    /// 1-based lookup.
    pub fn get(&self, index: usize) -> Option<&Subtask> {
        index.checked_sub(1).and_then(|i| self.subtasks.get(i))
    }

    pub fn tags(&self) -> Vec<KnowledgeTag> {
        self.subtasks.iter().map(|s| s.knowledge_tag).collect()
    }

    /// Contiguous indices from 1; dependencies only point backwards.
    pub fn validate(&self) -> Result<(), PlanError> {
        for (pos, s) in self.subtasks.iter().enumerate() {
            if s.index != pos + 1 {
                return Err(PlanError::Indices { position: pos, found: s.index });
            }
            if let Some(&dep) = s.depends_on.iter().find(|&&d| d == 0 || d >= s.index) {
                return Err(PlanError::ForwardDependency { index: s.index, dep });
            }
        }
        Ok(())
    }

    /// Every subtask span matches some node of `ast`.
    pub fn validate_against(&self, ast: &AstNode) -> Result<(), PlanError> {
        self.validate()?;
        let mut spans = BTreeSet::new();
        ast.walk(&mut |n| {
            spans.insert((n.span.start, n.span.end));
        });
        match self.subtasks.iter().find(|s| !spans.contains(&(s.span.start, s.span.end))) {
            Some(s) => Err(PlanError::DanglingSpan(s.index)),
            None => Ok(()),
        }
    }

    /// Structured text export, one JSON object per subtask.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.subtasks).expect("plan serializes")
    }
}

fn tag_of(node: &AstNode, top_level: bool) -> Option<KnowledgeTag> {
    Some(match node.kind {
        NodeKind::FunctionDef => KnowledgeTag::FunctionDefinition,
        NodeKind::For | NodeKind::While => KnowledgeTag::Loop,
        NodeKind::If => KnowledgeTag::Conditional,
        NodeKind::Swap => KnowledgeTag::Swap,
        NodeKind::Return => KnowledgeTag::Return,
        NodeKind::Assign if top_level => KnowledgeTag::Assignment,
        _ => return None,
    })
}

fn detail(node: &AstNode) -> String {
    let c = &node.children;
    match node.kind {
        NodeKind::FunctionDef => {
            let name = node.value.as_deref().unwrap_or("");
            let params = unparse_expr(&c[0]);
            if params.is_empty() {
                format!("{name} that takes no arguments")
            } else {
                format!("{name} that takes {params}")
            }
        }
        NodeKind::For => format!("walks {} over {}", unparse_expr(&c[0]), unparse_expr(&c[1])),
        NodeKind::While => format!("repeats as long as {}", unparse_expr(&c[0])),
        NodeKind::If => unparse_expr(&c[0]),
        NodeKind::Swap => format!("{} and {}", unparse_expr(&c[0]), unparse_expr(&c[1])),
        NodeKind::Return => c.first().map(unparse_expr).unwrap_or_else(|| "nothing".into()),
        NodeKind::Assign => format!("{} to {}", unparse_expr(&c[0]), unparse_expr(&c[1])),
        _ => String::new(),
    }
}

/// Segments with the bundled templates.
pub fn segment(ast: &AstNode) -> SubtaskPlan {
    segment_with(ast, &SegmentTemplates::default())
}

/// Pre-order walk emitting one subtask per significant construct. Each
/// subtask depends on every enclosing construct that produced a subtask.
pub fn segment_with(ast: &AstNode, templates: &SegmentTemplates) -> SubtaskPlan {
    fn visit(
        node: &AstNode,
        top_level: bool,
        enclosing: &mut Vec<usize>,
        out: &mut Vec<Subtask>,
        templates: &SegmentTemplates,
    ) {
        let emitted = tag_of(node, top_level).map(|tag| {
            let index = out.len() + 1;
            out.push(Subtask {
                index,
                knowledge_tag: tag,
                description: templates.render(tag, &detail(node)),
                depends_on: enclosing.iter().copied().collect(),
                span: node.span,
            });
            index
        });
        if let Some(i) = emitted {
            enclosing.push(i);
        }
        let child_top = node.kind == NodeKind::Module;
        for c in node.children.iter().chain(&node.orelse) {
            visit(c, child_top, enclosing, out, templates);
        }
        if emitted.is_some() {
            enclosing.pop();
        }
    }

    let mut out = Vec::new();
    visit(ast, false, &mut Vec::new(), &mut out, templates);
    SubtaskPlan { subtasks: out }
}

fn heuristic_patterns() -> &'static [(KnowledgeTag, Regex)] {
    static PATTERNS: OnceLock<Vec<(KnowledgeTag, Regex)>> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        let re = |p: &str| Regex::new(p).expect("static pattern");
        vec![
            (KnowledgeTag::FunctionDefinition, re(r"(?m)\bdef\s+[A-Za-z_]\w*\s*\(")),
            (KnowledgeTag::Loop, re(r"(?m)\bfor\s+[A-Za-z_]\w*\s+in\b")),
            (KnowledgeTag::Loop, re(r"(?m)\bwhile\b[^\n]*:[ \t]*(#[^\n]*)?$")),
            (KnowledgeTag::Conditional, re(r"(?m)\bif\b[^\n]*:[ \t]*(#[^\n]*)?$")),
            (KnowledgeTag::Return, re(r"(?m)^[ \t]*return\b")),
            (KnowledgeTag::Assignment, re(r"(?m)^[A-Za-z_]\w*(\[[^\]\n]*\])?[ \t]*=[^=]")),
        ]
    })
}

fn is_swap_line(line: &str) -> bool {
    let Some((lhs, rhs)) = line.split_once('=') else {
        return false;
    };
    if rhs.starts_with('=') || lhs.ends_with(['!', '<', '>', '=']) {
        return false;
    }
    let squash = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
    let parts = |s: &str| -> Option<(String, String)> {
        let (a, b) = s.split_once(',')?;
        Some((squash(a), squash(b)))
    };
    match (parts(lhs), parts(rhs)) {
        (Some((a, b)), Some((c, d))) => !a.is_empty() && !b.is_empty() && a == d && b == c,
        _ => false,
    }
}

/// Knowledge tags present in arbitrary text, counted with multiplicity,
/// using line-level keyword patterns.
pub fn heuristic_tags(text: &str) -> BTreeMap<KnowledgeTag, usize> {
    let mut counts = BTreeMap::new();
    for (tag, re) in heuristic_patterns() {
        let n = re.find_iter(text).count();
        if n > 0 {
            *counts.entry(*tag).or_insert(0) += n;
        }
    }
    let swaps = text.lines().filter(|l| is_swap_line(l)).count();
    if swaps > 0 {
        counts.insert(KnowledgeTag::Swap, swaps);
    }
    counts
}

fn tag_counts(tags: impl IntoIterator<Item = KnowledgeTag>) -> BTreeMap<KnowledgeTag, usize> {
    let mut m = BTreeMap::new();
    for t in tags {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

/// Fraction of the plan's tags (with multiplicity) that the candidate
/// realizes. Parseable candidates are segmented; anything else falls back
/// to [`heuristic_tags`]. An empty plan scores 0.
pub fn plan_coverage(plan: &SubtaskPlan, candidate: &str) -> f64 {
    if plan.is_empty() {
        return 0.0;
    }
    let found = match parse_source(candidate) {
        Ok(ast) => tag_counts(segment(&ast).tags()),
        Err(_) => heuristic_tags(candidate),
    };
    let wanted = tag_counts(plan.tags());
    let matched: usize = wanted
        .iter()
        .map(|(tag, &n)| n.min(found.get(tag).copied().unwrap_or(0)))
        .sum();
    matched as f64 / plan.len() as f64
}
