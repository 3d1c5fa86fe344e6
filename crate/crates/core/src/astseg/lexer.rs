//! Indentation-aware lexer for the teaching subset.

use std::fmt;

use super::{AstError, Pos};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenKind {
    Def,
    For,
    While,
    If,
    Else,
    Return,
    In,
    Range,
    Name(String),
    Number(String),
    Assign,
    /// `+=`, `-=`, `*=`, `/=`
    AugAssign(String),
    /// `==`, `!=`, `<`, `>`, `<=`, `>=`
    CompareOp(String),
    /// `+`, `-`, `*`, `/`, `//`, `%`
    ArithOp(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Colon,
    Comma,
    Newline,
    Indent,
    Dedent,
    End,
}

impl TokenKind {
    /// Short name used in expected-token sets.
    pub fn describe(&self) -> String {
        match self {
            TokenKind::Def => "'def'".into(),
            TokenKind::For => "'for'".into(),
            TokenKind::While => "'while'".into(),
            TokenKind::If => "'if'".into(),
            TokenKind::Else => "'else'".into(),
            TokenKind::Return => "'return'".into(),
            TokenKind::In => "'in'".into(),
            TokenKind::Range => "'range'".into(),
            TokenKind::Name(_) => "NAME".into(),
            TokenKind::Number(_) => "NUMBER".into(),
            TokenKind::Assign => "'='".into(),
            TokenKind::AugAssign(op) | TokenKind::CompareOp(op) | TokenKind::ArithOp(op) => {
                format!("'{op}'")
            }
            TokenKind::LParen => "'('".into(),
            TokenKind::RParen => "')'".into(),
            TokenKind::LBracket => "'['".into(),
            TokenKind::RBracket => "']'".into(),
            TokenKind::Colon => "':'".into(),
            TokenKind::Comma => "','".into(),
            TokenKind::Newline => "NEWLINE".into(),
            TokenKind::Indent => "INDENT".into(),
            TokenKind::Dedent => "DEDENT".into(),
            TokenKind::End => "END".into(),
        }
    }
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub start: Pos,
    pub end: Pos,
}

fn keyword(word: &str) -> Option<TokenKind> {
    Some(match word {
        "def" => TokenKind::Def,
        "for" => TokenKind::For,
        "while" => TokenKind::While,
        "if" => TokenKind::If,
        "else" => TokenKind::Else,
        "return" => TokenKind::Return,
        "in" => TokenKind::In,
        "range" => TokenKind::Range,
        _ => return None,
    })
}

/// Longest-match lexing with INDENT/DEDENT synthesis. Blank and comment-only
/// lines produce no tokens; newlines inside brackets are joined.
pub fn tokenize(source: &str) -> Result<Vec<Token>, AstError> {
    let mut tokens = Vec::new();
    let mut indents: Vec<String> = vec![String::new()];
    let mut depth = 0usize;
    let mut last_line = 0usize;

    for (line_idx, raw) in source.lines().enumerate() {
        let line_no = line_idx + 1;
        last_line = line_no;
        let chars: Vec<char> = raw.chars().collect();
        let mut i = 0;
        while i < chars.len() && (chars[i] == ' ' || chars[i] == '\t') {
            i += 1;
        }
        let content_empty = i == chars.len() || chars[i] == '#';
        if depth == 0 {
            if content_empty {
                continue;
            }
            let indent: String = chars[..i].iter().collect();
            if indent.contains(' ') && indent.contains('\t') {
                return Err(AstError::Indentation {
                    pos: Pos::new(line_no, 1),
                    message: "tabs and spaces mixed in indentation".into(),
                });
            }
            let top = indents.last().unwrap().clone();
            let pos = Pos::new(line_no, i + 1);
            if indent == top {
            } else if indent.starts_with(&top) {
                indents.push(indent);
                tokens.push(Token { kind: TokenKind::Indent, start: pos, end: pos });
            } else if let Some(level) = indents.iter().position(|s| *s == indent) {
                while indents.len() > level + 1 {
                    indents.pop();
                    tokens.push(Token { kind: TokenKind::Dedent, start: pos, end: pos });
                }
            } else {
                return Err(AstError::Indentation {
                    pos: Pos::new(line_no, 1),
                    message: "indentation does not match any enclosing block".into(),
                });
            }
        }

        while i < chars.len() {
            let c = chars[i];
            let start = Pos::new(line_no, i + 1);
            if c == ' ' || c == '\t' {
                i += 1;
                continue;
            }
            if c == '#' {
                break;
            }
            if c.is_ascii_alphabetic() || c == '_' {
                let s = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[s..i].iter().collect();
                let kind = keyword(&word).unwrap_or(TokenKind::Name(word));
                tokens.push(Token { kind, start, end: Pos::new(line_no, i + 1) });
                continue;
            }
            if c.is_ascii_digit() {
                let s = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                    i += 1;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                let text: String = chars[s..i].iter().collect();
                tokens.push(Token { kind: TokenKind::Number(text), start, end: Pos::new(line_no, i + 1) });
                continue;
            }
            let next = chars.get(i + 1).copied();
            let (kind, len) = match (c, next) {
                ('/', Some('/')) => (TokenKind::ArithOp("//".into()), 2),
                ('=', Some('=')) => (TokenKind::CompareOp("==".into()), 2),
                ('!', Some('=')) => (TokenKind::CompareOp("!=".into()), 2),
                ('<', Some('=')) => (TokenKind::CompareOp("<=".into()), 2),
                ('>', Some('=')) => (TokenKind::CompareOp(">=".into()), 2),
                ('+' | '-' | '*' | '/', Some('=')) => (TokenKind::AugAssign(format!("{c}=")), 2),
                ('<' | '>', _) => (TokenKind::CompareOp(c.to_string()), 1),
                ('+' | '-' | '*' | '/' | '%', _) => (TokenKind::ArithOp(c.to_string()), 1),
                ('=', _) => (TokenKind::Assign, 1),
                ('(', _) => (TokenKind::LParen, 1),
                (')', _) => (TokenKind::RParen, 1),
                ('[', _) => (TokenKind::LBracket, 1),
                (']', _) => (TokenKind::RBracket, 1),
                (':', _) => (TokenKind::Colon, 1),
                (',', _) => (TokenKind::Comma, 1),
                _ => return Err(AstError::IllegalChar { ch: c, pos: start }),
            };
            match kind {
                TokenKind::LParen | TokenKind::LBracket => depth += 1,
                TokenKind::RParen | TokenKind::RBracket => depth = depth.saturating_sub(1),
                _ => {}
            }
            i += len;
            tokens.push(Token { kind, start, end: Pos::new(line_no, i + 1) });
        }

        if depth == 0 && !content_empty {
            let pos = Pos::new(line_no, chars.len() + 1);
            tokens.push(Token { kind: TokenKind::Newline, start: pos, end: pos });
        }
    }

    let end = Pos::new(last_line + 1, 1);
    while indents.len() > 1 {
        indents.pop();
        tokens.push(Token { kind: TokenKind::Dedent, start: end, end });
    }
    tokens.push(Token { kind: TokenKind::End, start: end, end });
    Ok(tokens)
}
