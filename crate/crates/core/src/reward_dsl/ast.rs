use std::fmt;

use serde::{Deserialize, Serialize};

use crate::environment::NUM_SLOTS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Or,
    And,
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Or => "or",
            BinOp::And => "and",
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }

    pub(crate) fn precedence(self) -> u8 {
        match self {
            BinOp::Or => 1,
            BinOp::And => 2,
            BinOp::Add | BinOp::Sub => 3,
            BinOp::Mul | BinOp::Div => 4,
        }
    }
}

const NEG_PRECEDENCE: u8 = 5;
const ATOM_PRECEDENCE: u8 = 6;

/// Expression node. Parentheses are not kept as nodes; they only shape the
/// tree and are re-derived when printing.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    State,
    Feat(usize),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn binary(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(op, ..) => op.precedence(),
            Expr::Neg(_) => NEG_PRECEDENCE,
            _ => ATOM_PRECEDENCE,
        }
    }

    /// Calls `f` on every feature index, left to right.
    pub fn for_each_feature(&self, f: &mut impl FnMut(usize)) {
        match self {
            Expr::Feat(i) => f(*i),
            Expr::Neg(e) => e.for_each_feature(f),
            Expr::Binary(_, l, r) => {
                l.for_each_feature(f);
                r.for_each_feature(f);
            }
            Expr::Num(_) | Expr::State => {}
        }
    }

    fn fmt_child(&self, f: &mut fmt::Formatter<'_>, parens: bool) -> fmt::Result {
        if parens {
            write!(f, "({self})")
        } else {
            write!(f, "{self}")
        }
    }
}

pub(crate) fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:?}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => f.write_str(&format_number(*v)),
            Expr::State => f.write_str("state"),
            Expr::Feat(i) => write!(f, "agent_feats[{i}]"),
            Expr::Neg(e) => {
                f.write_str("-")?;
                e.fmt_child(f, e.precedence() < NEG_PRECEDENCE)
            }
            Expr::Binary(op, l, r) => {
                let p = op.precedence();
                // All operators are left-associative.
                l.fmt_child(f, l.precedence() < p)?;
                write!(f, " {} ", op.symbol())?;
                r.fmt_child(f, r.precedence() <= p)
            }
        }
    }
}

/// A parsed reward expression whose feature indices are all in `0..34`.
///
/// Serializes as its canonical single-line text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RewardAst {
    root: Expr,
}

impl RewardAst {
    /// Wraps an expression tree, rejecting out-of-range feature indices.
    pub fn from_expr(root: Expr) -> Option<RewardAst> {
        let mut ok = true;
        root.for_each_feature(&mut |i| ok &= i < NUM_SLOTS);
        ok.then_some(RewardAst { root })
    }

    pub fn root(&self) -> &Expr {
        &self.root
    }

    /// Canonical text: single line, minimal parentheses.
    pub fn canonical(&self) -> String {
        self.root.to_string()
    }
}

impl fmt::Display for RewardAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

impl From<RewardAst> for String {
    fn from(ast: RewardAst) -> String {
        ast.canonical()
    }
}

impl TryFrom<String> for RewardAst {
    type Error = super::ParseError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        super::parse(&s)
    }
}
