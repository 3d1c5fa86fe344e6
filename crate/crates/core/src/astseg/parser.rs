//! Recursive-descent parser over the token stream. The grammar is in
//! `docs/grammar.ebnf`.

use super::lexer::{Token, TokenKind};
use super::{AstError, AstNode, NodeKind, Pos, Span};

pub fn parse(tokens: &[Token]) -> Result<AstNode, AstError> {
    if tokens.last().map(|t| &t.kind) != Some(&TokenKind::End) {
        return Err(AstError::Syntax {
            pos: tokens.last().map(|t| t.end).unwrap_or(Pos::new(1, 1)),
            expected: vec!["END".into()],
            found: "end of token stream".into(),
        });
    }
    Parser { tokens, pos: 0 }.module()
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
}

type PResult = Result<AstNode, AstError>;

impl<'a> Parser<'a> {
    fn peek(&self) -> &'a Token {
        &self.tokens[self.pos.min(self.tokens.len() - 1)]
    }

    fn peek_kind(&self) -> &'a TokenKind {
        &self.peek().kind
    }

    fn advance(&mut self) -> &'a Token {
        let t = self.peek();
        if self.pos < self.tokens.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &[&str]) -> AstError {
        let t = self.peek();
        let at_end = self.tokens[self.pos..]
            .iter()
            .all(|t| matches!(t.kind, TokenKind::Newline | TokenKind::Dedent | TokenKind::End));
        let found = if at_end { "end of input".to_string() } else { t.kind.describe() };
        AstError::Syntax {
            pos: t.start,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found,
        }
    }

    fn expect(&mut self, kind: TokenKind) -> Result<&'a Token, AstError> {
        if *self.peek_kind() == kind {
            Ok(self.advance())
        } else {
            Err(self.error(&[&kind.describe()]))
        }
    }

    fn expect_name(&mut self) -> Result<(String, Span), AstError> {
        match self.peek_kind() {
            TokenKind::Name(n) => {
                let t = self.advance();
                Ok((n.clone(), Span::new(t.start, t.end)))
            }
            _ => Err(self.error(&["NAME"])),
        }
    }

    fn module(mut self) -> PResult {
        let mut children = Vec::new();
        loop {
            match self.peek_kind() {
                TokenKind::End => break,
                TokenKind::Newline => {
                    self.advance();
                }
                _ => children.push(self.statement()?),
            }
        }
        let start = Pos::new(1, 1);
        let end = children.last().map(|c| c.span.end).unwrap_or(start);
        Ok(AstNode::new(NodeKind::Module, None, children, Span::new(start, end)))
    }

    fn statement(&mut self) -> PResult {
        match self.peek_kind() {
            TokenKind::Def => self.funcdef(),
            TokenKind::For => self.for_stmt(),
            TokenKind::While => self.while_stmt(),
            TokenKind::If => self.if_stmt(),
            TokenKind::Return => self.return_stmt(),
            _ => {
                let node = self.simple()?;
                self.expect(TokenKind::Newline)?;
                Ok(node)
            }
        }
    }

    fn block(&mut self) -> Result<Vec<AstNode>, AstError> {
        self.expect(TokenKind::Colon)?;
        self.expect(TokenKind::Newline)?;
        self.expect(TokenKind::Indent)?;
        let mut body = vec![self.statement()?];
        while !matches!(self.peek_kind(), TokenKind::Dedent | TokenKind::End) {
            body.push(self.statement()?);
        }
        self.expect(TokenKind::Dedent)?;
        Ok(body)
    }

    fn funcdef(&mut self) -> PResult {
        let start = self.expect(TokenKind::Def)?.start;
        let (name, _) = self.expect_name()?;
        let lp = self.expect(TokenKind::LParen)?.start;
        let mut params = Vec::new();
        if *self.peek_kind() != TokenKind::RParen {
            loop {
                let (p, span) = self.expect_name()?;
                params.push(AstNode::leaf(NodeKind::Name, p, span));
                if *self.peek_kind() == TokenKind::Comma {
                    self.advance();
                } else {
                    break;
                }
            }
        }
        let rp = self.expect(TokenKind::RParen)?.end;
        let params = AstNode::new(NodeKind::Params, None, params, Span::new(lp, rp));
        let mut children = vec![params];
        children.extend(self.block()?);
        let end = children.last().unwrap().span.end;
        Ok(AstNode::new(NodeKind::FunctionDef, Some(name), children, Span::new(start, end)))
    }

    fn for_stmt(&mut self) -> PResult {
        let start = self.expect(TokenKind::For)?.start;
        let (var, vspan) = self.expect_name()?;
        self.expect(TokenKind::In)?;
        let iter = self.expr()?;
        let mut children = vec![AstNode::leaf(NodeKind::Name, var, vspan), iter];
        children.extend(self.block()?);
        let end = children.last().unwrap().span.end;
        Ok(AstNode::new(NodeKind::For, None, children, Span::new(start, end)))
    }

    fn while_stmt(&mut self) -> PResult {
        let start = self.expect(TokenKind::While)?.start;
        let mut children = vec![self.expr()?];
        children.extend(self.block()?);
        let end = children.last().unwrap().span.end;
        Ok(AstNode::new(NodeKind::While, None, children, Span::new(start, end)))
    }

    fn if_stmt(&mut self) -> PResult {
        let start = self.expect(TokenKind::If)?.start;
        let mut children = vec![self.expr()?];
        children.extend(self.block()?);
        let mut orelse = Vec::new();
        if *self.peek_kind() == TokenKind::Else {
            self.advance();
            orelse = self.block()?;
        }
        let end = orelse.last().or(children.last()).unwrap().span.end;
        let mut node = AstNode::new(NodeKind::If, None, children, Span::new(start, end));
        node.orelse = orelse;
        Ok(node)
    }

    fn return_stmt(&mut self) -> PResult {
        let t = self.expect(TokenKind::Return)?;
        let mut children = Vec::new();
        if *self.peek_kind() != TokenKind::Newline {
            children.push(self.expr()?);
        }
        let end = children.last().map(|c| c.span.end).unwrap_or(t.end);
        self.expect(TokenKind::Newline)?;
        Ok(AstNode::new(NodeKind::Return, None, children, Span::new(t.start, end)))
    }

    fn simple(&mut self) -> PResult {
        let first = self.expr()?;
        match self.peek_kind() {
            TokenKind::Comma => {
                self.advance();
                let second = self.postfix()?;
                self.expect(TokenKind::Assign)?;
                let v1 = self.expr()?;
                self.expect(TokenKind::Comma)?;
                let v2 = self.expr()?;
                for t in [&first, &second] {
                    check_target(t)?;
                }
                if !(v1.same_structure(&second) && v2.same_structure(&first)) {
                    return Err(AstError::Syntax {
                        pos: first.span.start,
                        expected: vec!["swap of the form `a, b = b, a`".into()],
                        found: "general tuple assignment".into(),
                    });
                }
                let span = Span::new(first.span.start, v2.span.end);
                Ok(AstNode::new(NodeKind::Swap, None, vec![first, second, v1, v2], span))
            }
            TokenKind::Assign => {
                check_target(&first)?;
                self.advance();
                let value = self.expr()?;
                let span = Span::new(first.span.start, value.span.end);
                Ok(AstNode::new(NodeKind::Assign, None, vec![first, value], span))
            }
            TokenKind::AugAssign(op) => {
                check_target(&first)?;
                self.advance();
                let value = self.expr()?;
                let span = Span::new(first.span.start, value.span.end);
                Ok(AstNode::new(NodeKind::AugAssign, Some(op.clone()), vec![first, value], span))
            }
            _ => Ok(first),
        }
    }

    fn expr(&mut self) -> PResult {
        let left = self.arith()?;
        if let TokenKind::CompareOp(op) = self.peek_kind() {
            self.advance();
            let right = self.arith()?;
            let span = Span::new(left.span.start, right.span.end);
            return Ok(AstNode::new(NodeKind::Compare, Some(op.clone()), vec![left, right], span));
        }
        Ok(left)
    }

    fn arith(&mut self) -> PResult {
        let mut left = self.term()?;
        while let TokenKind::ArithOp(op) = self.peek_kind() {
            if op != "+" && op != "-" {
                break;
            }
            self.advance();
            let right = self.term()?;
            let span = Span::new(left.span.start, right.span.end);
            left = AstNode::new(NodeKind::BinOp, Some(op.clone()), vec![left, right], span);
        }
        Ok(left)
    }

    fn term(&mut self) -> PResult {
        let mut left = self.factor()?;
        while let TokenKind::ArithOp(op) = self.peek_kind() {
            if !matches!(op.as_str(), "*" | "/" | "//" | "%") {
                break;
            }
            self.advance();
            let right = self.factor()?;
            let span = Span::new(left.span.start, right.span.end);
            left = AstNode::new(NodeKind::BinOp, Some(op.clone()), vec![left, right], span);
        }
        Ok(left)
    }

    fn factor(&mut self) -> PResult {
        if let TokenKind::ArithOp(op) = self.peek_kind() {
            if op == "-" {
                let start = self.advance().start;
                let operand = self.factor()?;
                let span = Span::new(start, operand.span.end);
                return Ok(AstNode::new(NodeKind::BinOp, Some("neg".into()), vec![operand], span));
            }
        }
        self.postfix()
    }

    fn postfix(&mut self) -> PResult {
        let mut node = self.atom()?;
        loop {
            match self.peek_kind() {
                TokenKind::LParen => {
                    self.advance();
                    let mut children = vec![node];
                    if *self.peek_kind() != TokenKind::RParen {
                        loop {
                            children.push(self.expr()?);
                            if *self.peek_kind() == TokenKind::Comma {
                                self.advance();
                            } else {
                                break;
                            }
                        }
                    }
                    let end = self.expect(TokenKind::RParen)?.end;
                    let span = Span::new(children[0].span.start, end);
                    node = AstNode::new(NodeKind::Call, None, children, span);
                }
                TokenKind::LBracket => {
                    self.advance();
                    let index = self.expr()?;
                    let end = self.expect(TokenKind::RBracket)?.end;
                    let span = Span::new(node.span.start, end);
                    node = AstNode::new(NodeKind::Subscript, None, vec![node, index], span);
                }
                _ => return Ok(node),
            }
        }
    }

    fn atom(&mut self) -> PResult {
        let t = self.peek();
        match &t.kind {
            TokenKind::Name(n) => {
                self.advance();
                Ok(AstNode::leaf(NodeKind::Name, n.clone(), Span::new(t.start, t.end)))
            }
            TokenKind::Range => {
                self.advance();
                Ok(AstNode::leaf(NodeKind::Name, "range".into(), Span::new(t.start, t.end)))
            }
            TokenKind::Number(v) => {
                self.advance();
                Ok(AstNode::leaf(NodeKind::Number, v.clone(), Span::new(t.start, t.end)))
            }
            TokenKind::LParen => {
                self.advance();
                let inner = self.expr()?;
                self.expect(TokenKind::RParen)?;
                Ok(inner)
            }
            _ => Err(self.error(&["NAME", "NUMBER", "'range'", "'('", "'-'"])),
        }
    }
}

fn check_target(node: &AstNode) -> Result<(), AstError> {
    match node.kind {
        NodeKind::Name | NodeKind::Subscript => Ok(()),
        _ => Err(AstError::Syntax {
            pos: node.span.start,
            expected: vec!["assignment target (NAME or subscript)".into()],
            found: format!("{:?}", node.kind),
        }),
    }
}
