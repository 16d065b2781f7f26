//! Tokenizer and recursive-descent parser for reward expressions.
//!
//! Grammar, lowest precedence first:
//!
//! ```text
//! or_expr  := and_expr ("or" and_expr)*
//! and_expr := sum ("and" sum)*
//! sum      := product (("+" | "-") product)*
//! product  := unary (("*" | "/") unary)*
//! unary    := "-" unary | atom
//! atom     := NUMBER | "state" | "agent_feats" "[" INT "]" | "(" or_expr ")"
//! ```

use thiserror::Error;

use super::ast::{BinOp, Expr, RewardAst};
use crate::environment::NUM_SLOTS;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("feature index {index} at {pos} is outside 0..{NUM_SLOTS}")]
    IndexOutOfRange { pos: usize, index: u64 },
    #[error("unsupported construct at {pos}: {construct}")]
    Unsupported { pos: usize, construct: String },
}

impl ParseError {
    /// Stable machine-readable reason code.
    pub fn code(&self) -> &'static str {
        match self {
            ParseError::Syntax { .. } => "syntax",
            ParseError::IndexOutOfRange { .. } => "index-out-of-range",
            ParseError::Unsupported { .. } => "unsupported-construct",
        }
    }

    pub fn pos(&self) -> usize {
        match self {
            ParseError::Syntax { pos, .. }
            | ParseError::IndexOutOfRange { pos, .. }
            | ParseError::Unsupported { pos, .. } => *pos,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64, bool),
    Ident(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Plus,
    Minus,
    Star,
    Slash,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: usize,
}

const PY_KEYWORDS: &[&str] = &[
    "not", "if", "else", "elif", "lambda", "import", "from", "for", "while", "in", "is", "def",
    "return", "True", "False", "None", "with", "as", "yield", "await", "async", "del", "global",
    "class", "pass", "raise", "try", "except", "finally", "assert", "break", "continue",
];

fn unsupported(pos: usize, construct: impl Into<String>) -> ParseError {
    ParseError::Unsupported {
        pos,
        construct: construct.into(),
    }
}

fn syntax(pos: usize, message: impl Into<String>) -> ParseError {
    ParseError::Syntax {
        pos,
        message: message.into(),
    }
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let simple = match c {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
                continue;
            }
            b'(' => Some(Tok::LParen),
            b')' => Some(Tok::RParen),
            b'[' => Some(Tok::LBracket),
            b']' => Some(Tok::RBracket),
            b'+' => Some(Tok::Plus),
            b'-' => Some(Tok::Minus),
            b'*' if bytes.get(i + 1) == Some(&b'*') => return Err(unsupported(i, "power operator `**`")),
            b'*' => Some(Tok::Star),
            b'/' if bytes.get(i + 1) == Some(&b'/') => return Err(unsupported(i, "floor division `//`")),
            b'/' => Some(Tok::Slash),
            _ => None,
        };
        if let Some(tok) = simple {
            out.push(Token { tok, pos: start });
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let mut integral = true;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'.' {
                integral = false;
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    integral = false;
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let v: f64 = text
                .parse()
                .map_err(|_| syntax(start, format!("malformed number `{text}`")))?;
            if !v.is_finite() {
                return Err(syntax(start, format!("numeric literal `{text}` overflows")));
            }
            out.push(Token {
                tok: Tok::Num(v, integral),
                pos: start,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token {
                tok: Tok::Ident(src[start..i].to_string()),
                pos: start,
            });
            continue;
        }
        let construct = match c {
            b'<' | b'>' | b'=' | b'!' => "comparison or assignment".to_string(),
            b'%' => "operator `%`".to_string(),
            b'&' | b'|' | b'^' | b'~' => "bitwise operator".to_string(),
            b'\'' | b'"' => "string literal".to_string(),
            b',' => "tuple or argument list".to_string(),
            b'.' => "attribute access".to_string(),
            b':' | b';' => "statement separator".to_string(),
            b'#' => "comment".to_string(),
            b'{' | b'}' => "dict or set literal".to_string(),
            b'@' => "decorator or matmul".to_string(),
            _ => {
                let ch = src[start..].chars().next().unwrap_or('?');
                format!("character {ch:?}")
            }
        };
        return Err(unsupported(start, construct));
    }
    Ok(out)
}

struct Parser<'a> {
    toks: &'a [Token],
    idx: usize,
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.idx)
    }

    fn pos(&self) -> usize {
        self.peek().map_or(self.end, |t| t.pos)
    }

    fn bump(&mut self) -> Option<&Token> {
        let t = self.toks.get(self.idx);
        self.idx += 1;
        t
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Token { tok: Tok::Ident(s), .. }) if s == kw)
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ParseError> {
        let pos = self.pos();
        match self.bump() {
            Some(t) if t.tok == want => Ok(()),
            _ => Err(syntax(pos, format!("expected {what}"))),
        }
    }

    fn or_expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.and_expr()?;
        while self.is_keyword("or") {
            self.idx += 1;
            lhs = Expr::binary(BinOp::Or, lhs, self.and_expr()?);
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.sum()?;
        while self.is_keyword("and") {
            self.idx += 1;
            lhs = Expr::binary(BinOp::And, lhs, self.sum()?);
        }
        Ok(lhs)
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek().map(|t| &t.tok) {
                Some(Tok::Plus) => BinOp::Add,
                Some(Tok::Minus) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.idx += 1;
            lhs = Expr::binary(op, lhs, self.product()?);
        }
    }

    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().map(|t| &t.tok) {
                Some(Tok::Star) => BinOp::Mul,
                Some(Tok::Slash) => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.idx += 1;
            lhs = Expr::binary(op, lhs, self.unary()?);
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if matches!(self.peek(), Some(Token { tok: Tok::Minus, .. })) {
            self.idx += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        let Some(tok) = self.bump().map(|t| t.tok.clone()) else {
            return Err(syntax(pos, "unexpected end of expression"));
        };
        match tok {
            Tok::Num(v, _) => Ok(Expr::Num(v)),
            Tok::LParen => {
                let inner = self.or_expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(name) => self.named(&name, pos),
            Tok::Plus => Err(syntax(pos, "unary `+` is not part of the grammar")),
            other => Err(syntax(pos, format!("unexpected token {}", describe(&other)))),
        }
    }

    fn named(&mut self, name: &str, pos: usize) -> Result<Expr, ParseError> {
        match name {
            "state" => Ok(Expr::State),
            "agent_feats" => {
                self.expect(Tok::LBracket, "`[` after agent_feats")?;
                let ipos = self.pos();
                let index = match self.bump().map(|t| t.tok.clone()) {
                    Some(Tok::Num(v, true)) => v,
                    _ => return Err(syntax(ipos, "feature index must be a non-negative integer literal")),
                };
                if index >= NUM_SLOTS as f64 {
                    let index = if index >= u64::MAX as f64 { u64::MAX } else { index as u64 };
                    return Err(ParseError::IndexOutOfRange { pos: ipos, index });
                }
                self.expect(Tok::RBracket, "`]`")?;
                Ok(Expr::Feat(index as usize))
            }
            "and" | "or" => Err(syntax(pos, format!("`{name}` is missing its left operand"))),
            _ if PY_KEYWORDS.contains(&name) => Err(unsupported(pos, format!("keyword `{name}`"))),
            _ if matches!(self.peek(), Some(Token { tok: Tok::LParen, .. })) => {
                Err(unsupported(pos, format!("call to `{name}`")))
            }
            _ => Err(unsupported(pos, format!("name `{name}`"))),
        }
    }
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Num(v, _) => format!("number {v}"),
        Tok::Ident(s) => format!("`{s}`"),
        Tok::LParen => "`(`".into(),
        Tok::RParen => "`)`".into(),
        Tok::LBracket => "`[`".into(),
        Tok::RBracket => "`]`".into(),
        Tok::Plus => "`+`".into(),
        Tok::Minus => "`-`".into(),
        Tok::Star => "`*`".into(),
        Tok::Slash => "`/`".into(),
    }
}

/// Parses one reward expression. Positions in errors are byte offsets.
pub fn parse(src: &str) -> Result<RewardAst, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser {
        toks: &toks,
        idx: 0,
        end: src.len(),
    };
    let expr = p.or_expr()?;
    if let Some(t) = p.peek() {
        return Err(match &t.tok {
            Tok::Ident(name) if PY_KEYWORDS.contains(&name.as_str()) => {
                unsupported(t.pos, format!("keyword `{name}`"))
            }
            Tok::LParen | Tok::LBracket => unsupported(t.pos, "call or subscript"),
            other => syntax(t.pos, format!("unexpected trailing {}", describe(other))),
        });
    }
    // from_expr cannot fail here: indices were range-checked while parsing.
    Ok(RewardAst::from_expr(expr).expect("indices checked during parse"))
}
