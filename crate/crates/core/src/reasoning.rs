//! Exact execution of parsed formulas.
//!
//! Every node of the parse tree is annotated with an exact rational value
//! (operator leaves carry their operator), producing the reasoning tree that
//! back-search walks top-down.

use std::fmt;
use std::str::FromStr;

use num_rational::Rational64;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::grammar::{CnfGrammar, RuleId};
use crate::parsing::{fold_parse, parse_string, Folded, ParseTree};
use crate::symbol::{Operator, Symbol, SymbolString};

/// Reduced rational with positive denominator. Equality is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Value(Rational64);

impl Value {
    pub fn new(numer: i64, denom: i64) -> Value {
        Value(Rational64::new(numer, denom))
    }

    pub fn integer(n: i64) -> Value {
        Value(Rational64::from_integer(n))
    }

    pub fn numer(&self) -> i64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> i64 {
        *self.0.denom()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_integer(&self) -> bool {
        self.0.is_integer()
    }

    /// The digit this value denotes, if it is an integer in `0..=9`.
    pub fn as_digit(&self) -> Option<u8> {
        if self.is_integer() && (0..=9).contains(&self.numer()) {
            Some(self.numer() as u8)
        } else {
            None
        }
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    /// `self op rhs`; `None` on division by zero.
    pub fn apply(self, op: Operator, rhs: Value) -> Option<Value> {
        Some(Value(match op {
            Operator::Add => self.0 + rhs.0,
            Operator::Sub => self.0 - rhs.0,
            Operator::Mul => self.0 * rhs.0,
            Operator::Div => {
                if rhs.is_zero() {
                    return None;
                }
                self.0 / rhs.0
            }
        }))
    }

    pub fn checked_div(self, rhs: Value) -> Option<Value> {
        self.apply(Operator::Div, rhs)
    }
}

impl From<i64> for Value {
    fn from(n: i64) -> Self {
        Value::integer(n)
    }
}

impl fmt::Display for Value {
    /// `num/den`, or `num` when the denominator is 1.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denom() == 1 {
            write!(f, "{}", self.numer())
        } else {
            write!(f, "{}/{}", self.numer(), self.denom())
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid rational {0:?}")]
pub struct ParseValueError(String);

impl FromStr for Value {
    type Err = ParseValueError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ParseValueError(s.to_string());
        let (n, d) = match s.trim().split_once('/') {
            Some((n, d)) => (n.trim().parse::<i64>().map_err(|_| bad())?, d.trim().parse::<i64>().map_err(|_| bad())?),
            None => (s.trim().parse::<i64>().map_err(|_| bad())?, 1),
        };
        if d == 0 {
            return Err(bad());
        }
        Ok(Value::new(n, d))
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("parse tree node has a shape the calculator cannot execute")]
    Malformed,
    #[error("string is not in the language")]
    NotInLanguage,
}

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Rule(RuleId),
    Leaf { pos: usize, symbol: Symbol },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeValue {
    Number(Value),
    Operator(Operator),
}

impl NodeValue {
    pub fn number(self) -> Option<Value> {
        match self {
            NodeValue::Number(v) => Some(v),
            NodeValue::Operator(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningNode {
    pub kind: NodeKind,
    pub start: usize,
    pub end: usize,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub value: NodeValue,
}

/// Parse tree with a value on every node, stored as an arena with the root
/// at index 0 and children after their parents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningTree {
    nodes: Vec<ReasoningNode>,
    string: SymbolString,
}

impl ReasoningTree {
    pub fn root(&self) -> NodeId {
        0
    }

    pub fn node(&self, id: NodeId) -> &ReasoningNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[ReasoningNode] {
        &self.nodes
    }

    /// The executed formula.
    pub fn string(&self) -> &SymbolString {
        &self.string
    }

    /// Value at the root.
    pub fn result(&self) -> Value {
        self.nodes[0].value.number().expect("root carries a number")
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id].kind, NodeKind::Leaf { .. })
    }

    /// Leaf node at a string position.
    pub fn leaf_at(&self, pos: usize) -> Option<NodeId> {
        self.nodes.iter().position(|n| matches!(n.kind, NodeKind::Leaf { pos: p, .. } if p == pos))
    }
}

/// Bottom-up annotation. Unit nodes copy their child's value; `L op R` nodes
/// apply the operator exactly.
pub fn evaluate(tree: &ParseTree) -> Result<ReasoningTree, EvalError> {
    let mut nodes = Vec::new();
    build(tree, None, &mut nodes)?;
    Ok(ReasoningTree { nodes, string: tree.yield_string() })
}

fn build(t: &ParseTree, parent: Option<NodeId>, nodes: &mut Vec<ReasoningNode>) -> Result<NodeValue, EvalError> {
    let id = nodes.len();
    let (start, end) = t.span();
    match t {
        ParseTree::Leaf { pos, symbol } => {
            let value = match symbol.operator() {
                Some(op) => NodeValue::Operator(op),
                None => NodeValue::Number(Value::integer(symbol.id() as i64)),
            };
            nodes.push(ReasoningNode {
                kind: NodeKind::Leaf { pos: *pos, symbol: *symbol },
                start,
                end,
                parent,
                children: Vec::new(),
                value,
            });
            Ok(value)
        }
        ParseTree::Node { rule, children, .. } => {
            nodes.push(ReasoningNode {
                kind: NodeKind::Rule(*rule),
                start,
                end,
                parent,
                children: Vec::new(),
                value: NodeValue::Number(Value::integer(0)),
            });
            let mut vals = Vec::with_capacity(children.len());
            for c in children {
                let cid = nodes.len();
                nodes[id].children.push(cid);
                vals.push(build(c, Some(id), nodes)?);
            }
            let value = match vals.as_slice() {
                [NodeValue::Number(v)] => *v,
                [NodeValue::Number(l), NodeValue::Operator(op), NodeValue::Number(r)] => {
                    l.apply(*op, *r).ok_or(EvalError::DivisionByZero)?
                }
                _ => return Err(EvalError::Malformed),
            };
            nodes[id].value = NodeValue::Number(value);
            Ok(nodes[id].value)
        }
    }
}

/// Value of a formula. Same result as `evaluate` on its parse, computed
/// straight from the chart.
pub fn execute(cnf: &CnfGrammar, z: &SymbolString) -> Result<Value, EvalError> {
    let mut combine = |items: &[Folded<Value>]| match items {
        [Folded::Value(v)] => Ok(*v),
        [Folded::Leaf(_, s)] => s.digit_value().map(|d| Value::integer(d as i64)).ok_or(EvalError::Malformed),
        [Folded::Value(l), Folded::Leaf(_, s), Folded::Value(r)] => {
            let op = s.operator().ok_or(EvalError::Malformed)?;
            l.apply(op, *r).ok_or(EvalError::DivisionByZero)
        }
        _ => Err(EvalError::Malformed),
    };
    fold_parse(cnf, z, &mut combine).unwrap_or(Err(EvalError::NotInLanguage))
}

pub fn reasoning_tree(cnf: &CnfGrammar, z: &SymbolString) -> Result<ReasoningTree, EvalError> {
    let tree = parse_string(cnf, z).ok_or(EvalError::NotInLanguage)?;
    evaluate(&tree)
}
