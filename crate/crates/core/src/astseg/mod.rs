//! Parsing a small indentation-based code subset and segmenting it into an
//! ordered plan of teaching subtasks.

mod lexer;
mod parser;
mod segment;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lexer::{tokenize, Token, TokenKind};
pub use parser::parse;
pub use segment::{
    heuristic_tags, plan_coverage, segment, segment_with, KnowledgeTag, PlanError, SegmentTemplates, Subtask,
    SubtaskPlan,
};

/// Reference task used throughout the tests and fixtures.
pub const BUBBLE_SORT: &str = "\
def bubble_sort(arr):
    n = len(arr)

    for i in range(n):
        # In each iteration, perform n-i-1 comparisons
        for j in range(0, n-i-1):
            # If the current element is greater than the next element, swap their positions
            if arr[j] > arr[j+1]:
                arr[j], arr[j+1] = arr[j+1], arr[j]

    return arr
";

/// 1-based source position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl Pos {
    pub fn new(line: usize, col: usize) -> Self {
        Self { line, col }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

/// Half-open source range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: Pos,
    pub end: Pos,
}

impl Span {
    pub fn new(start: Pos, end: Pos) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AstError {
    #[error("illegal character {ch:?} at {pos}")]
    IllegalChar { ch: char, pos: Pos },
    #[error("indentation error at {pos}: {message}")]
    Indentation { pos: Pos, message: String },
    #[error("syntax error at {pos}: expected one of [{}], found {found}", expected.join(", "))]
    Syntax { pos: Pos, expected: Vec<String>, found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Module,
    FunctionDef,
    Params,
    For,
    While,
    If,
    Assign,
    AugAssign,
    Compare,
    BinOp,
    Call,
    Subscript,
    Name,
    Number,
    Return,
    Swap,
}

/// Syntax tree node.
///
/// `value` carries the identifier, literal or operator where the kind has
/// one (`FunctionDef` name, `Name`, `Number`, `BinOp`/`Compare`/`AugAssign`
/// operator; unary minus is `BinOp` with `neg` and one child). `orelse` is
/// only populated for `If` with an `else` block.
///
/// Child layout: `FunctionDef [Params, body..]`, `For [Name, iter, body..]`,
/// `While [test, body..]`, `If [test, body..]`, `Assign [target, value]`,
/// `Swap [t1, t2, v1, v2]`, `Call [callee, args..]`, `Subscript [obj, index]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AstNode {
    pub kind: NodeKind,
    pub value: Option<String>,
    pub children: Vec<AstNode>,
    pub orelse: Vec<AstNode>,
    pub span: Span,
}

impl AstNode {
    pub fn new(kind: NodeKind, value: Option<String>, children: Vec<AstNode>, span: Span) -> Self {
        Self { kind, value, children, orelse: Vec::new(), span }
    }

    pub fn leaf(kind: NodeKind, value: String, span: Span) -> Self {
        Self::new(kind, Some(value), Vec::new(), span)
    }

    /// Equality ignoring spans.
    pub fn same_structure(&self, other: &AstNode) -> bool {
        self.kind == other.kind
            && self.value == other.value
            && self.children.len() == other.children.len()
            && self.orelse.len() == other.orelse.len()
            && self.children.iter().zip(&other.children).all(|(a, b)| a.same_structure(b))
            && self.orelse.iter().zip(&other.orelse).all(|(a, b)| a.same_structure(b))
    }

    /// Pre-order traversal over children then the else block.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a AstNode)) {
        f(self);
        for c in self.children.iter().chain(&self.orelse) {
            c.walk(f);
        }
    }

    pub fn count_nodes(&self) -> usize {
        let mut n = 0;
        self.walk(&mut |_| n += 1);
        n
    }

    /// Every child span lies inside its parent's span.
    pub fn spans_nest(&self) -> bool {
        self.children
            .iter()
            .chain(&self.orelse)
            .all(|c| self.span.contains(&c.span) && c.spans_nest())
    }

    /// Compact structural rendering such as `Module(FunctionDef(Params, Return(Number)))`.
    pub fn shape(&self) -> String {
        let kids: Vec<String> = self.children.iter().chain(&self.orelse).map(|c| c.shape()).collect();
        if kids.is_empty() {
            format!("{:?}", self.kind)
        } else {
            format!("{:?}({})", self.kind, kids.join(", "))
        }
    }
}

/// Tokenize and parse in one step.
pub fn parse_source(source: &str) -> Result<AstNode, AstError> {
    parse(&tokenize(source)?)
}

/// Parse and segment with the default templates.
pub fn plan_for_source(source: &str) -> Result<SubtaskPlan, AstError> {
    Ok(segment(&parse_source(source)?))
}

fn needs_parens(node: &AstNode) -> bool {
    matches!(node.kind, NodeKind::BinOp | NodeKind::Compare)
}

fn unparse_operand(node: &AstNode) -> String {
    if needs_parens(node) {
        format!("({})", unparse_expr(node))
    } else {
        unparse_expr(node)
    }
}

/// Source text of an expression node. Nested operators are parenthesized,
/// so reparsing gives the same tree.
pub fn unparse_expr(node: &AstNode) -> String {
    let v = node.value.as_deref().unwrap_or("");
    match node.kind {
        NodeKind::Name | NodeKind::Number => v.to_string(),
        NodeKind::BinOp if v == "neg" => format!("-{}", unparse_operand(&node.children[0])),
        NodeKind::BinOp | NodeKind::Compare => format!(
            "{} {} {}",
            unparse_operand(&node.children[0]),
            v,
            unparse_operand(&node.children[1])
        ),
        NodeKind::Call => {
            let args: Vec<String> = node.children[1..].iter().map(unparse_expr).collect();
            format!("{}({})", unparse_operand(&node.children[0]), args.join(", "))
        }
        NodeKind::Subscript => format!(
            "{}[{}]",
            unparse_operand(&node.children[0]),
            unparse_expr(&node.children[1])
        ),
        NodeKind::Params => node.children.iter().map(unparse_expr).collect::<Vec<_>>().join(", "),
        _ => unparse_stmt(node, 0),
    }
}

fn unparse_stmt(node: &AstNode, depth: usize) -> String {
    let pad = "    ".repeat(depth);
    let body = |stmts: &[AstNode]| -> String {
        stmts.iter().map(|s| unparse_stmt(s, depth + 1)).collect::<String>()
    };
    match node.kind {
        NodeKind::Module => node.children.iter().map(|s| unparse_stmt(s, depth)).collect(),
        NodeKind::FunctionDef => format!(
            "{pad}def {}({}):\n{}",
            node.value.as_deref().unwrap_or(""),
            unparse_expr(&node.children[0]),
            body(&node.children[1..])
        ),
        NodeKind::For => format!(
            "{pad}for {} in {}:\n{}",
            unparse_expr(&node.children[0]),
            unparse_expr(&node.children[1]),
            body(&node.children[2..])
        ),
        NodeKind::While => format!(
            "{pad}while {}:\n{}",
            unparse_expr(&node.children[0]),
            body(&node.children[1..])
        ),
        NodeKind::If => {
            let mut s = format!(
                "{pad}if {}:\n{}",
                unparse_expr(&node.children[0]),
                body(&node.children[1..])
            );
            if !node.orelse.is_empty() {
                s.push_str(&format!("{pad}else:\n{}", body(&node.orelse)));
            }
            s
        }
        NodeKind::Return => match node.children.first() {
            Some(e) => format!("{pad}return {}\n", unparse_expr(e)),
            None => format!("{pad}return\n"),
        },
        NodeKind::Assign => format!(
            "{pad}{} = {}\n",
            unparse_expr(&node.children[0]),
            unparse_expr(&node.children[1])
        ),
        NodeKind::AugAssign => format!(
            "{pad}{} {} {}\n",
            unparse_expr(&node.children[0]),
            node.value.as_deref().unwrap_or("+="),
            unparse_expr(&node.children[1])
        ),
        NodeKind::Swap => format!(
            "{pad}{}, {} = {}, {}\n",
            unparse_expr(&node.children[0]),
            unparse_expr(&node.children[1]),
            unparse_expr(&node.children[2]),
            unparse_expr(&node.children[3])
        ),
        _ => format!("{pad}{}\n", unparse_expr(node)),
    }
}

/// Source text for a whole tree.
pub fn unparse(node: &AstNode) -> String {
    unparse_stmt(node, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn function_returning_number() {
        let ast = parse_source("def f():\n    return 1").unwrap();
        assert_eq!(ast.shape(), "Module(FunctionDef(Params, Return(Number)))");
        assert!(ast.spans_nest());
    }

    #[test]
    fn bubble_sort_tree_has_expected_constructs() {
        let ast = parse_source(BUBBLE_SORT).unwrap();
        let mut kinds = Vec::new();
        ast.walk(&mut |n| kinds.push(n.kind));
        let count = |k| kinds.iter().filter(|&&x| x == k).count();
        assert_eq!(count(NodeKind::FunctionDef), 1);
        assert_eq!(count(NodeKind::For), 2);
        assert_eq!(count(NodeKind::If), 1);
        assert_eq!(count(NodeKind::Swap), 1);
        assert_eq!(count(NodeKind::Return), 1);
        // The inner loop sits inside the outer one.
        let func = &ast.children[0];
        let outer = func.children.iter().find(|c| c.kind == NodeKind::For).unwrap();
        assert!(outer.children.iter().any(|c| c.kind == NodeKind::For));
        assert!(ast.spans_nest());
    }

    #[test]
    fn incomplete_for_is_syntax_error_at_end() {
        match parse_source("for x in") {
            Err(AstError::Syntax { found, expected, .. }) => {
                assert_eq!(found, "end of input");
                assert!(expected.contains(&"NAME".to_string()));
            }
            other => panic!("unexpected {other:?}"),
        }
        match parse_source("for x in y:") {
            Err(AstError::Syntax { found, .. }) => assert_eq!(found, "end of input"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn general_tuple_assignment_is_rejected() {
        assert!(parse_source("a, b = c, d").is_err());
        assert_eq!(parse_source("a, b = b, a").unwrap().shape(), "Module(Swap(Name, Name, Name, Name))");
    }

    #[test]
    fn assignment_to_call_is_rejected() {
        assert!(parse_source("f(x) = 1").is_err());
    }

    #[test]
    fn unparse_reparses_identically() {
        let srcs = [
            BUBBLE_SORT,
            "x = -(a - b) * 3 // 2\nif x >= 2:\n    y = x\nelse:\n    y = 0\n",
            "while i < n:\n    i += 1\n    total = total + (i % 3)\nprint(total)\n",
        ];
        for s in srcs {
            let a = parse_source(s).unwrap();
            let b = parse_source(&unparse(&a)).unwrap();
            assert!(a.same_structure(&b), "{}", unparse(&a));
        }
    }

    #[test]
    fn else_block_is_kept() {
        let ast = parse_source("if a:\n    b = 1\nelse:\n    b = 2\n").unwrap();
        assert_eq!(ast.children[0].orelse.len(), 1);
        assert!(ast.spans_nest());
    }
}
