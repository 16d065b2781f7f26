//! The single-line reward expression language.
//!
//! Expressions range over `state` (0 or 1) and `agent_feats[i]` for the 34
//! feature slots. `and` / `or` follow Python: they short-circuit and return
//! one of their operands rather than a boolean.

mod ast;
mod parser;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ast::{BinOp, Expr, RewardAst};
pub use parser::{parse, ParseError};

use crate::environment::{FeatureGroup, FeatureSchema, NUM_SLOTS};

const DELIMITER: &str = "$$$";

/// Probe sets handed to [`validate`] are capped at this many vectors.
pub const MAX_PROBES: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("no `$$$ ... $$$` block in response")]
    NoDelimitedBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("non-finite intermediate value")]
    NonFinite,
}

/// Content of the first `$$$ ... $$$` block, trimmed, without a leading
/// `return`.
pub fn extract_candidate(llm_text: &str) -> Result<String, ExtractError> {
    let open = llm_text.find(DELIMITER).ok_or(ExtractError::NoDelimitedBlock)?;
    let body_start = open + DELIMITER.len();
    let close = llm_text[body_start..]
        .find(DELIMITER)
        .ok_or(ExtractError::NoDelimitedBlock)?;
    let body = llm_text[body_start..body_start + close].trim();
    let body = match body.strip_prefix("return") {
        Some(rest) if rest.starts_with(char::is_whitespace) || rest.starts_with('(') => rest.trim_start(),
        _ => body,
    };
    Ok(body.to_string())
}

fn finite(v: f64) -> Result<f64, EvalError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite)
    }
}

fn eval_expr(e: &Expr, state: f64, feats: &[f64; NUM_SLOTS]) -> Result<f64, EvalError> {
    match e {
        Expr::Num(v) => finite(*v),
        Expr::State => Ok(state),
        Expr::Feat(i) => finite(feats[*i]),
        Expr::Neg(inner) => Ok(-eval_expr(inner, state, feats)?),
        Expr::Binary(BinOp::Or, l, r) => {
            let a = eval_expr(l, state, feats)?;
            if a != 0.0 {
                Ok(a)
            } else {
                eval_expr(r, state, feats)
            }
        }
        Expr::Binary(BinOp::And, l, r) => {
            let a = eval_expr(l, state, feats)?;
            if a != 0.0 {
                eval_expr(r, state, feats)
            } else {
                Ok(a)
            }
        }
        Expr::Binary(op, l, r) => {
            let a = eval_expr(l, state, feats)?;
            let b = eval_expr(r, state, feats)?;
            let v = match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div if b == 0.0 => return Err(EvalError::DivisionByZero),
                BinOp::Div => a / b,
                BinOp::Or | BinOp::And => unreachable!(),
            };
            finite(v)
        }
    }
}

impl RewardAst {
    pub fn evaluate(&self, state: usize, feats: &[f64; NUM_SLOTS]) -> Result<f64, EvalError> {
        eval_expr(self.root(), state as f64, feats)
    }

    pub fn indices_used(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        self.root().for_each_feature(&mut |i| {
            out.insert(i);
        });
        out
    }
}

pub fn evaluate(ast: &RewardAst, state: usize, feats: &[f64; NUM_SLOTS]) -> Result<f64, EvalError> {
    ast.evaluate(state, feats)
}

fn groups_of(indices: &BTreeSet<usize>, schema: &FeatureSchema) -> BTreeSet<FeatureGroup> {
    indices.iter().filter_map(|i| schema.group_of_slot(*i)).collect()
}

/// Feature groups with at least one referenced slot.
pub fn referenced_features(ast: &RewardAst, schema: &FeatureSchema) -> BTreeSet<FeatureGroup> {
    groups_of(&ast.indices_used(), schema)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub parse_ok: bool,
    pub indices_used: BTreeSet<usize>,
    pub feature_groups_used: BTreeSet<FeatureGroup>,
    pub positivity_ok: bool,
    pub monotone_in_state_ok: bool,
    pub failure_reason: Option<String>,
}

impl ValidationReport {
    /// Report for text that never produced an AST.
    pub fn rejected(reason: impl Into<String>) -> Self {
        Self {
            failure_reason: Some(reason.into()),
            ..Self::default()
        }
    }

    pub fn is_valid(&self) -> bool {
        self.parse_ok && self.positivity_ok && self.monotone_in_state_ok && self.failure_reason.is_none()
    }
}

/// Probes the expression at both states on every probe vector.
pub fn validate(ast: &RewardAst, probe_arms: &[[f64; NUM_SLOTS]]) -> ValidationReport {
    let schema = FeatureSchema::standard();
    let indices_used = ast.indices_used();
    let mut report = ValidationReport {
        parse_ok: true,
        feature_groups_used: groups_of(&indices_used, &schema),
        indices_used,
        positivity_ok: true,
        monotone_in_state_ok: true,
        failure_reason: None,
    };
    if probe_arms.is_empty() {
        report.positivity_ok = false;
        report.monotone_in_state_ok = false;
        report.failure_reason = Some("no probe arms supplied".into());
        return report;
    }
    for (k, feats) in probe_arms.iter().enumerate() {
        let (r0, r1) = match (ast.evaluate(0, feats), ast.evaluate(1, feats)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                report.positivity_ok = false;
                report.monotone_in_state_ok = false;
                report.failure_reason = Some(format!("evaluation failed on probe {k}: {e}"));
                return report;
            }
        };
        if r0 < 0.0 || r1 < 0.0 {
            report.positivity_ok = false;
        }
        if r1 < r0 {
            report.monotone_in_state_ok = false;
        }
        if !report.positivity_ok || !report.monotone_in_state_ok {
            let what = if report.positivity_ok { "decreasing in state" } else { "negative reward" };
            report.failure_reason = Some(format!("{what} on probe {k} (r0={r0}, r1={r1})"));
            return report;
        }
    }
    report
}
