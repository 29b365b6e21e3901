//! Back-search: top-down error propagation through the reasoning tree.
//!
//! `one_step_backsearch` finds the most probable single-symbol correction
//! that makes the formula execute to the observed answer. It is a best-first
//! search over `(node, expected value, priority)` entries seeded at the root
//! with the answer. Expanding an internal node solves for the value each
//! child would need; reaching a leaf yields a candidate symbol.
//!
//! The priority of an internal node, `(1 - p(A)) / p(A)` with `p(A)` the
//! product of its leaf probabilities, bounds the priority `p(α) / p(leaf)` of
//! every leaf change beneath it, so the first leaf popped is the highest
//! priority correction.
//!
//! An operator change can regroup the formula, so operator candidates are
//! checked by executing the rewritten formula rather than inside the old tree.
//! For the same reason, when no value of an internal node can produce the
//! answer, its subtree is still searched for operator changes.
//!
//! `multi_step_backsearch` wraps 1-BS in a Metropolis-Hastings chain whose
//! other move is a Poisson-distance random walk.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::parsing::{CompiledGrammar, ProbMatrix};
use crate::reasoning::{execute, reasoning_tree, NodeId, NodeKind, NodeValue, ReasoningTree, Value};
use crate::symbol::{Category, Symbol, SymbolString};

/// What a node is expected to become.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expected {
    /// The node's value must change to this.
    Value(Value),
    /// A leaf must be rewritten to this symbol.
    Symbol(Symbol),
    /// No value of this node reaches the answer; only operator rewrites
    /// beneath it, which regroup the formula, can.
    Regroup,
}

/// A priority-queue entry: node, its expected value and visiting priority.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correction {
    pub node: NodeId,
    pub expected: Expected,
    pub priority: f64,
}

/// Product of the leaf probabilities under `node`.
pub fn node_probability(rt: &ReasoningTree, node: NodeId, pm: &ProbMatrix) -> f64 {
    let n = rt.node(node);
    let z = rt.string();
    (n.start..n.end).map(|i| pm.prob(i, z.get(i))).product()
}

/// Visiting priority of changing `node`: `(1 - p(A)) / p(A)` for internal
/// nodes, `p(α) / p(A)` for a leaf rewritten to `alpha`.
pub fn priority(rt: &ReasoningTree, node: NodeId, alpha: Option<Symbol>, pm: &ProbMatrix) -> f64 {
    match (rt.node(node).kind, alpha) {
        (NodeKind::Leaf { pos, symbol }, Some(a)) => pm.prob(pos, a) / pm.prob(pos, symbol),
        _ => {
            let p = node_probability(rt, node, pm);
            (1.0 - p) / p
        }
    }
}

/// Expected values for `child` given that its parent must equal `alpha`.
///
/// Unit nodes pass the expectation down. For `L op R`, the operand children
/// solve `α_B op R = α` or `L op α_B = α`; an operator child yields every
/// other operator for which the rewritten formula executes to `answer`.
/// Digit leaves keep only integer targets in `0..=9`. Impossible cases
/// produce no candidates.
pub fn solve(
    cg: &CompiledGrammar,
    rt: &ReasoningTree,
    child: NodeId,
    parent: NodeId,
    alpha: Value,
    answer: Value,
) -> Vec<Expected> {
    let p = rt.node(parent);
    let raw: Vec<Expected> = match p.children.as_slice() {
        [only] if *only == child => vec![Expected::Value(alpha)],
        [l, op, r] => {
            let num = |id: NodeId| rt.node(id).value.number().expect("operand carries a number");
            let NodeValue::Operator(operator) = rt.node(*op).value else {
                return Vec::new();
            };
            if child == *op {
                return operator_rewrites(cg, rt, child, answer);
            }
            let solved = if child == *l {
                solve_left(operator, num(*r), alpha)
            } else if child == *r {
                solve_right(operator, num(*l), alpha)
            } else {
                None
            };
            solved.map(Expected::Value).into_iter().collect()
        }
        _ => Vec::new(),
    };
    match rt.node(child).kind {
        NodeKind::Leaf { symbol, .. } if symbol.category() == Category::Digit => raw
            .into_iter()
            .filter_map(|e| match e {
                Expected::Value(v) => v.as_digit().map(|d| Expected::Symbol(Symbol::digit(d))),
                other => Some(other),
            })
            .collect(),
        _ => raw,
    }
}

/// `x op right = target`.
fn solve_left(op: crate::symbol::Operator, right: Value, target: Value) -> Option<Value> {
    use crate::symbol::Operator::*;
    match op {
        Add => target.apply(Sub, right),
        Sub => target.apply(Add, right),
        Mul => target.checked_div(right),
        Div => target.apply(Mul, right),
    }
}

/// `left op x = target`.
fn solve_right(op: crate::symbol::Operator, left: Value, target: Value) -> Option<Value> {
    use crate::symbol::Operator::*;
    match op {
        Add => target.apply(Sub, left),
        Sub => left.apply(Sub, target),
        Mul => target.checked_div(left),
        Div => {
            if left.is_zero() {
                None
            } else {
                left.checked_div(target)
            }
        }
    }
}

fn operator_rewrites(cg: &CompiledGrammar, rt: &ReasoningTree, leaf: NodeId, answer: Value) -> Vec<Expected> {
    let NodeKind::Leaf { pos, symbol } = rt.node(leaf).kind else {
        return Vec::new();
    };
    symbol
        .category_members()
        .map(|id| Symbol::new(id).expect("category member"))
        .filter(|&o| o != symbol)
        .filter(|&o| execute(cg.cnf(), &rt.string().with(pos, o)) == Ok(answer))
        .map(Expected::Symbol)
        .collect()
}

/// A single-symbol correction found by 1-BS.
#[derive(Debug, Clone, PartialEq)]
pub struct Fix {
    pub string: SymbolString,
    pub position: usize,
    pub symbol: Symbol,
    pub priority: f64,
}

struct Queued {
    entry: Correction,
    seq: usize,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // max-heap on priority, earlier insertion first among equals
    fn cmp(&self, other: &Self) -> Ordering {
        self.entry.priority.total_cmp(&other.entry.priority).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// 1-step back-search on the executed formula `rt`. Returns `None` when no
/// single-symbol change executes to `answer`, or when `rt` already does.
///
/// Nodes are visited best-first, and the search runs until the queue is
/// empty so the returned fix has the largest leaf priority; among equal
/// priorities the first one reached wins.
pub fn one_step_backsearch(cg: &CompiledGrammar, rt: &ReasoningTree, answer: Value, pm: &ProbMatrix) -> Option<Fix> {
    if rt.result() == answer {
        return None;
    }
    let mut heap = BinaryHeap::new();
    let mut seq = 0;
    let mut push = |heap: &mut BinaryHeap<Queued>, entry: Correction| {
        heap.push(Queued { entry, seq });
        seq += 1;
    };
    push(&mut heap, Correction { node: rt.root(), expected: Expected::Value(answer), priority: 1.0 });

    let mut best: Option<Fix> = None;
    while let Some(Queued { entry, .. }) = heap.pop() {
        let node = rt.node(entry.node);
        if let NodeKind::Leaf { pos, .. } = node.kind {
            let Expected::Symbol(sym) = entry.expected else {
                continue;
            };
            if best.as_ref().is_some_and(|b| b.priority >= entry.priority) {
                continue;
            }
            let string = rt.string().with(pos, sym);
            // operator rewrites were verified by execution already; digit
            // rewrites keep the tree shape so solve is exact for them
            debug_assert_eq!(execute(cg.cnf(), &string), Ok(answer));
            best = Some(Fix { string, position: pos, symbol: sym, priority: entry.priority });
            continue;
        }
        for &child in &node.children {
            let candidates = match entry.expected {
                Expected::Value(alpha) => {
                    let mut c = solve(cg, rt, child, entry.node, alpha, answer);
                    // a solved value can be unreachable by digit edits while
                    // an operator edit below still regroups to the answer
                    if !rt.is_leaf(child) {
                        c.push(Expected::Regroup);
                    }
                    c
                }
                Expected::Regroup => match rt.node(child).kind {
                    NodeKind::Leaf { symbol, .. } if symbol.category() == Category::Operator => {
                        operator_rewrites(cg, rt, child, answer)
                    }
                    NodeKind::Leaf { .. } => Vec::new(),
                    NodeKind::Rule(_) => vec![Expected::Regroup],
                },
                Expected::Symbol(_) => Vec::new(),
            };
            for expected in candidates {
                let alpha = match expected {
                    Expected::Symbol(s) => Some(s),
                    _ => None,
                };
                let priority = priority(rt, child, alpha, pm);
                push(&mut heap, Correction { node: child, expected, priority });
            }
        }
    }
    best
}

/// 1-BS starting from a formula string; `None` if it does not execute.
pub fn one_step_backsearch_string(
    cg: &CompiledGrammar,
    z: &SymbolString,
    answer: Value,
    pm: &ProbMatrix,
) -> Option<Fix> {
    let rt = reasoning_tree(cg.cnf(), z).ok()?;
    one_step_backsearch(cg, &rt, answer, pm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MbsConfig {
    /// Number of sampler steps `T`.
    pub steps: usize,
    /// Probability of proposing a 1-BS move.
    pub lambda: f64,
    /// Poisson mean of the random-walk distance.
    pub beta: f64,
    pub seed: u64,
}

impl Default for MbsConfig {
    fn default() -> Self {
        MbsConfig { steps: 10, lambda: 0.5, beta: 1.0, seed: 0 }
    }
}

impl MbsConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.steps < 1 {
            return Err("m-BS needs at least one step".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.beta <= 0.0 || !self.beta.is_finite() {
            return Err(format!("beta {} must be positive", self.beta));
        }
        Ok(())
    }
}

/// Distance distribution of the random walk: Poisson(β) restricted to
/// `1..=len`, as probabilities indexed by distance.
pub fn walk_distance_pmf(len: usize, beta: f64) -> Vec<f64> {
    let mut w = vec![0.0; len + 1];
    let mut term = 1.0;
    for (d, slot) in w.iter_mut().enumerate().skip(1) {
        term *= beta / d as f64;
        *slot = term;
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

fn category_size(s: Symbol) -> usize {
    s.category_members().len()
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Probability that one random-walk proposal from `from` lands on `to`.
pub fn proposal_probability(from: &SymbolString, to: &SymbolString, beta: f64) -> f64 {
    if from.len() != to.len() {
        return 0.0;
    }
    let mut d = 0;
    let mut choices = 1.0;
    for (a, b) in from.symbols().iter().zip(to.symbols()) {
        if a != b {
            if a.category() != b.category() {
                return 0.0;
            }
            d += 1;
            choices *= (category_size(*a) - 1) as f64;
        }
    }
    if d == 0 {
        return 0.0;
    }
    walk_distance_pmf(from.len(), beta)[d] / binomial(from.len(), d) / choices
}

/// Draw a random-walk proposal: a Poisson distance `d`, then `d` distinct
/// positions each rewritten to a different symbol of the same category.
pub fn propose_walk<R: Rng + ?Sized>(z: &SymbolString, beta: f64, rng: &mut R) -> SymbolString {
    let l = z.len();
    let pmf = walk_distance_pmf(l, beta);
    let mut u = rng.random::<f64>();
    let mut d = l;
    for (k, &p) in pmf.iter().enumerate().skip(1) {
        if u < p {
            d = k;
            break;
        }
        u -= p;
    }
    let mut out = z.clone();
    for pos in index::sample(rng, l, d).into_iter() {
        let cur = z.get(pos);
        let members = cur.category_members();
        let k = rng.random_range(0..members.len() - 1) as u8;
        let mut id = members.start + k;
        if id >= cur.id() {
            id += 1;
        }
        out.set(pos, Symbol::new(id).expect("category member"));
    }
    out
}

/// One Metropolis-Hastings random-walk step targeting `Π_i pm[i][z_i]` over
/// the language. Returns the next state and whether the proposal was taken.
pub fn random_walk_step<R: Rng + ?Sized>(
    cg: &CompiledGrammar,
    z: &SymbolString,
    pm: &ProbMatrix,
    beta: f64,
    rng: &mut R,
) -> (SymbolString, bool) {
    let proposal = propose_walk(z, beta, rng);
    let u = rng.random::<f64>();
    if !cg.accepts(&proposal) {
        return (z.clone(), false);
    }
    let log_ratio = pm.string_log_prob(&proposal) - pm.string_log_prob(z);
    if log_ratio >= 0.0 || u < log_ratio.exp() {
        (proposal, true)
    } else {
        (z.clone(), false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalKind {
    OneStep,
    Walk,
    /// 1-BS branch on a state that already executes to the answer.
    Hold,
}

impl fmt::Display for ProposalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProposalKind::OneStep => "1-bs",
            ProposalKind::Walk => "walk",
            ProposalKind::Hold => "hold",
        })
    }
}

/// One sampler step for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub kind: ProposalKind,
    pub z: SymbolString,
    pub accepted: bool,
    pub in_q: bool,
}

impl TraceRecord {
    pub const CSV_HEADER: &'static str = "step,proposal_kind,z,accepted,in_Q";
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.step, self.kind, self.z, self.accepted, self.in_q)
    }
}

/// m-step back-search. Each step proposes 1-BS with probability λ (always
/// accepted when a correction exists) and otherwise, or when 1-BS finds
/// nothing, takes a random-walk step. A state that already executes to the
/// answer is kept on the 1-BS branch.
pub fn multi_step_backsearch<R: Rng + ?Sized>(
    cg: &CompiledGrammar,
    z0: &SymbolString,
    answer: Value,
    pm: &ProbMatrix,
    cfg: &MbsConfig,
    rng: &mut R,
) -> SymbolString {
    run_chain(cg, z0, answer, pm, cfg, rng, None)
}

/// As [`multi_step_backsearch`], also returning one record per step.
pub fn multi_step_backsearch_traced<R: Rng + ?Sized>(
    cg: &CompiledGrammar,
    z0: &SymbolString,
    answer: Value,
    pm: &ProbMatrix,
    cfg: &MbsConfig,
    rng: &mut R,
) -> (SymbolString, Vec<TraceRecord>) {
    let mut trace = Vec::with_capacity(cfg.steps);
    let z = run_chain(cg, z0, answer, pm, cfg, rng, Some(&mut trace));
    (z, trace)
}

enum OneStep {
    Satisfied,
    Fix(SymbolString),
    NotFound,
}

fn run_chain<R: Rng + ?Sized>(
    cg: &CompiledGrammar,
    z0: &SymbolString,
    answer: Value,
    pm: &ProbMatrix,
    cfg: &MbsConfig,
    rng: &mut R,
    mut trace: Option<&mut Vec<TraceRecord>>,
) -> SymbolString {
    // 1-BS is deterministic given (z, answer, pm), so revisited states reuse it
    let mut memo: HashMap<SymbolString, OneStep> = HashMap::new();
    let mut z = z0.clone();
    for step in 0..cfg.steps {
        let u = rng.random::<f64>();
        let mut outcome = None;
        if u < cfg.lambda {
            let result = memo.entry(z.clone()).or_insert_with(|| match reasoning_tree(cg.cnf(), &z) {
                Ok(rt) if rt.result() == answer => OneStep::Satisfied,
                Ok(rt) => {
                    one_step_backsearch(cg, &rt, answer, pm).map_or(OneStep::NotFound, |f| OneStep::Fix(f.string))
                }
                Err(_) => OneStep::NotFound,
            });
            match result {
                OneStep::Satisfied => outcome = Some((ProposalKind::Hold, false)),
                OneStep::Fix(next) => {
                    z = next.clone();
                    outcome = Some((ProposalKind::OneStep, true));
                }
                OneStep::NotFound => {}
            }
        }
        let (kind, accepted) = match outcome {
            Some(o) => o,
            None => {
                let (next, accepted) = random_walk_step(cg, &z, pm, cfg.beta, rng);
                z = next;
                (ProposalKind::Walk, accepted)
            }
        };
        if let Some(t) = trace.as_deref_mut() {
            let in_q = execute(cg.cnf(), &z) == Ok(answer);
            t.push(TraceRecord { step, kind, z: z.clone(), accepted, in_q });
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::symbol::NUM_SYMBOLS;

    fn s(text: &str) -> SymbolString {
        text.parse().unwrap()
    }

    fn tree(cg: &CompiledGrammar, text: &str) -> ReasoningTree {
        reasoning_tree(cg.cnf(), &s(text)).unwrap()
    }

    fn peaked(z: &SymbolString, p: f64) -> ProbMatrix {
        let rows = z
            .symbols()
            .iter()
            .map(|sym| {
                let mut r = [(1.0 - p) / 13.0; NUM_SYMBOLS];
                r[sym.index()] = p;
                r
            })
            .collect();
        ProbMatrix::new(rows).unwrap()
    }

    #[test]
    fn priority_definitions() {
        let cg = CompiledGrammar::arithmetic();
        let rt = tree(&cg, "3");
        let mut row = [0.25 / 12.0; NUM_SYMBOLS];
        row[3] = 0.5;
        row[2] = 0.25;
        let pm = ProbMatrix::new(vec![row]).unwrap();
        let leaf = rt.leaf_at(0).unwrap();
        assert!((priority(&rt, leaf, Some(Symbol::digit(2)), &pm) - 0.5).abs() < 1e-12);

        // internal node over leaves with probabilities 0.9, 0.8 and 1
        let rt = tree(&cg, "1+2");
        let row_with = |sym: usize, p: f64| {
            let mut r = [(1.0 - p) / 13.0; NUM_SYMBOLS];
            r[sym] = p;
            r
        };
        let pm = ProbMatrix::new(vec![row_with(1, 0.9), row_with(10, 0.8), row_with(2, 1.0)]).unwrap();
        assert!((priority(&rt, rt.root(), None, &pm) - 0.28 / 0.72).abs() < 1e-12);

        let u = ProbMatrix::uniform(3);
        for pos in [0, 2] {
            let leaf = rt.leaf_at(pos).unwrap();
            for d in 0..10 {
                assert_eq!(priority(&rt, leaf, Some(Symbol::digit(d)), &u), 1.0);
            }
        }
    }

    #[test]
    fn solve_examples() {
        let cg = CompiledGrammar::arithmetic();
        // "3×4" = 12, parent expected 8, left child -> 2
        let rt = tree(&cg, "3*4");
        let term = rt.nodes().iter().position(|n| n.children.len() == 3).unwrap();
        let left = rt.node(term).children[0];
        assert_eq!(
            solve(&cg, &rt, left, term, Value::integer(8), Value::integer(8)),
            vec![Expected::Value(Value::integer(2))]
        );

        // "2+3×4" with the root sum expected to be 10: no operator rewrite works
        let rt = tree(&cg, "2+3*4");
        let expr = rt.nodes().iter().position(|n| n.children.len() == 3).unwrap();
        let op = rt.node(expr).children[1];
        assert!(solve(&cg, &rt, op, expr, Value::integer(10), Value::integer(10)).is_empty());

        // unit chain passes the value down
        let rt = tree(&cg, "5");
        let expr = rt.node(rt.root()).children[0];
        let term = rt.node(expr).children[0];
        assert_eq!(
            solve(&cg, &rt, term, expr, Value::integer(5), Value::integer(5)),
            vec![Expected::Value(Value::integer(5))]
        );

        // right child of a division by an expected zero is impossible
        let rt = tree(&cg, "6/3");
        let t = rt.nodes().iter().position(|n| n.children.len() == 3).unwrap();
        let r = rt.node(t).children[2];
        assert!(solve(&cg, &rt, r, t, Value::integer(0), Value::integer(0)).is_empty());
        // 6 ÷ x = 3 -> 2, and 6 ÷ x = 4 -> 3/2
        assert_eq!(
            solve(&cg, &rt, r, t, Value::integer(3), Value::integer(3)),
            vec![Expected::Value(Value::integer(2))]
        );
        assert_eq!(
            solve(&cg, &rt, r, t, Value::integer(4), Value::integer(4)),
            vec![Expected::Value(Value::new(3, 2))]
        );
        // at the digit leaf only integer targets in 0..=9 survive
        let leaf = rt.leaf_at(2).unwrap();
        let above = rt.node(leaf).parent.unwrap();
        assert_eq!(
            solve(&cg, &rt, leaf, above, Value::integer(2), Value::integer(3)),
            vec![Expected::Symbol(Symbol::digit(2))]
        );
        assert!(solve(&cg, &rt, leaf, above, Value::new(3, 2), Value::integer(4)).is_empty());
        assert!(solve(&cg, &rt, leaf, above, Value::integer(12), Value::integer(4)).is_empty());
    }

    #[test]
    fn one_step_examples() {
        let cg = CompiledGrammar::arithmetic();
        let u = ProbMatrix::uniform(5);
        let fix = one_step_backsearch_string(&cg, &s("2+3×4"), Value::integer(10), &u).unwrap();
        assert_eq!(fix.string, s("2+2×4"));
        assert_eq!(fix.position, 2);

        let u3 = ProbMatrix::uniform(3);
        assert!(one_step_backsearch_string(&cg, &s("1+1"), Value::integer(100), &u3).is_none());

        // two fixes: "2+1" and "1+2"; position 0 has the larger ratio
        let r0 = {
            let rest = (1.0 - 0.4) / 12.0;
            let mut r = [rest; NUM_SYMBOLS];
            r[1] = 0.2;
            r[2] = 0.2;
            r
        };
        let r2 = {
            let rest = (1.0 - 0.6) / 12.0;
            let mut r = [rest; NUM_SYMBOLS];
            r[1] = 0.5;
            r[2] = 0.1;
            r
        };
        let pm = ProbMatrix::new(vec![r0, [1.0 / 14.0; NUM_SYMBOLS], r2]).unwrap();
        let fix = one_step_backsearch_string(&cg, &s("1+1"), Value::integer(3), &pm).unwrap();
        assert_eq!(fix.string, s("2+1"));
        assert!((fix.priority - 1.0).abs() < 1e-12);
    }

    #[test]
    fn operator_rewrite_that_regroups() {
        let cg = CompiledGrammar::arithmetic();
        let u = ProbMatrix::uniform(5);
        // "8÷2×3" = 12 is the only fix; inside the old tree 8 ÷ (2×3) ≠ 12
        let fix = one_step_backsearch_string(&cg, &s("8-2*3"), Value::integer(12), &u).unwrap();
        assert_eq!(fix.string, s("8/2*3"));
        // the only fixes sit below a node multiplied by zero
        let fix = one_step_backsearch_string(&cg, &s("2*3*0"), Value::integer(2), &u).unwrap();
        assert!(fix.string == s("2+3*0") || fix.string == s("2-3*0"));
        // no regrouped fix is accepted unless it really executes
        assert!(one_step_backsearch_string(&cg, &s("2+3*4"), Value::new(1, 6), &u).is_none());
    }

    #[test]
    fn satisfied_state_needs_no_fix() {
        let cg = CompiledGrammar::arithmetic();
        assert!(one_step_backsearch_string(&cg, &s("2+2"), Value::integer(4), &ProbMatrix::uniform(3)).is_none());
    }

    #[test]
    fn distance_pmf() {
        let p = walk_distance_pmf(3, 1.0);
        // e^-1 (1, 1/2, 1/6) renormalized
        let z = 1.0 + 0.5 + 1.0 / 6.0;
        assert!((p[1] - 1.0 / z).abs() < 1e-15);
        assert!((p[3] - 1.0 / 6.0 / z).abs() < 1e-15);
        assert_eq!(walk_distance_pmf(1, 3.0), vec![0.0, 1.0]);
    }

    #[test]
    fn proposal_is_symmetric_and_category_preserving() {
        let cg = CompiledGrammar::arithmetic();
        let mut rng = stream(11, &[]);
        let z = s("3+4*5-6");
        for _ in 0..2000 {
            let z2 = propose_walk(&z, 1.0, &mut rng);
            assert!(cg.accepts(&z2));
            assert_ne!(z2, z);
            let fwd = proposal_probability(&z, &z2, 1.0);
            let back = proposal_probability(&z2, &z, 1.0);
            assert!(fwd > 0.0);
            assert_eq!(fwd, back);
        }
        // proposal probabilities from one state sum to 1
        let z = s("1+2");
        let total: f64 =
            cg.grammar().enumerate_language(3).unwrap().iter().map(|t| proposal_probability(&z, t, 1.0)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_digit_walk() {
        let cg = CompiledGrammar::arithmetic();
        let mut rng = stream(12, &[]);
        let z = s("4");
        let mut counts = [0usize; 10];
        for _ in 0..9000 {
            let z2 = propose_walk(&z, 1.0, &mut rng);
            counts[z2.get(0).index()] += 1;
        }
        assert_eq!(counts[4], 0);
        for (d, &c) in counts.iter().enumerate() {
            if d != 4 {
                assert!((800..1200).contains(&c), "digit {d}: {c}");
            }
        }
        // acceptance follows the probability ratio: moving to a less likely
        // digit is accepted at rate p(new)/p(old)
        let mut row = [0.0; NUM_SYMBOLS];
        row[4] = 0.5;
        (0..10).filter(|&d| d != 4).for_each(|d| row[d] = 0.5 / 9.0);
        let pm = ProbMatrix::new(vec![row]).unwrap();
        let accepted = (0..20000).filter(|_| random_walk_step(&cg, &z, &pm, 1.0, &mut rng).1).count();
        let rate = accepted as f64 / 20000.0;
        assert!((rate - 1.0 / 9.0).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn mbs_examples() {
        let cg = CompiledGrammar::arithmetic();
        let pm = ProbMatrix::uniform(5);
        let mut rng = stream(13, &[]);
        let cfg = MbsConfig { steps: 1, lambda: 1.0, ..MbsConfig::default() };
        assert_eq!(multi_step_backsearch(&cg, &s("2+3*4"), Value::integer(10), &pm, &cfg, &mut rng), s("2+2*4"));

        // a satisfying state is absorbing on the 1-BS branch
        let cfg = MbsConfig { steps: 20, lambda: 1.0, ..MbsConfig::default() };
        let (z, trace) = multi_step_backsearch_traced(&cg, &s("2+2*4"), Value::integer(10), &pm, &cfg, &mut rng);
        assert_eq!(z, s("2+2*4"));
        assert!(trace.iter().all(|t| t.kind == ProposalKind::Hold && t.in_q));
        assert_eq!(trace[0].to_string(), "0,hold,2+2*4,false,true");
    }

    #[test]
    fn mbs_mostly_in_posterior_support() {
        let cg = CompiledGrammar::arithmetic();
        let truth = s("7-3*2");
        let answer = Value::integer(1);
        let pm = peaked(&truth, 0.8);
        let cfg = MbsConfig { steps: 20_000, lambda: 0.5, ..MbsConfig::default() };
        let mut rng = stream(14, &[]);
        let (_, trace) = multi_step_backsearch_traced(&cg, &s("7-4*2"), answer, &pm, &cfg, &mut rng);
        let burn = 1000;
        let inside = trace[burn..].iter().filter(|t| t.in_q).count();
        let frac = inside as f64 / (trace.len() - burn) as f64;
        assert!(frac >= 0.9, "fraction in Q {frac}");
    }
}
