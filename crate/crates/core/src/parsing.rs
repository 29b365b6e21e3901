//! Grammar-constrained decoding of per-position symbol distributions.
//!
//! `viterbi_parse` is a max-product CYK over the CNF grammar where the
//! lexical weight of symbol `a` at position `i` is `log pm[i][a]`. Because the
//! probability of a string does not depend on its derivation, the best
//! derivation spells the most probable grammatical string.
//!
//! `FeasibilityAutomaton` is the minimal prefix automaton of `L(G)` at one
//! length, used for grammar-constrained sampling.

use std::collections::HashMap;
use std::sync::OnceLock;

use rand::Rng;
use thiserror::Error;

use crate::grammar::{
    binarize, CnfGrammar, CnfRhs, Grammar, GrammarError, NonterminalId, RuleId, MAX_ENUMERATION_LENGTH,
};
use crate::symbol::{Symbol, SymbolString, NUM_SYMBOLS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbMatrixError {
    #[error("probability matrix has no rows")]
    Empty,
    #[error("row {row} has a negative or non-finite entry")]
    BadEntry { row: usize },
    #[error("row {row} sums to {sum}, not 1")]
    NotNormalized { row: usize, sum: f64 },
}

/// Row-stochastic `l x 14` matrix of per-position symbol probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    rows: Vec<[f64; NUM_SYMBOLS]>,
    logs: Vec<[f64; NUM_SYMBOLS]>,
}

impl ProbMatrix {
    pub fn new(rows: Vec<[f64; NUM_SYMBOLS]>) -> Result<Self, ProbMatrixError> {
        if rows.is_empty() {
            return Err(ProbMatrixError::Empty);
        }
        for (i, row) in rows.iter().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(ProbMatrixError::BadEntry { row: i });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ProbMatrixError::NotNormalized { row: i, sum });
            }
        }
        let logs = rows.iter().map(|r| r.map(f64::ln)).collect();
        Ok(ProbMatrix { rows, logs })
    }

    /// Normalizes each row of non-negative weights.
    pub fn from_weights(weights: Vec<[f64; NUM_SYMBOLS]>) -> Result<Self, ProbMatrixError> {
        let rows = weights
            .into_iter()
            .map(|w| {
                let s: f64 = w.iter().sum();
                w.map(|x| x / s)
            })
            .collect();
        ProbMatrix::new(rows)
    }

    pub fn uniform(len: usize) -> Self {
        ProbMatrix::new(vec![[1.0 / NUM_SYMBOLS as f64; NUM_SYMBOLS]; len]).expect("uniform rows")
    }

    pub fn one_hot(z: &SymbolString) -> Self {
        let rows = z
            .symbols()
            .iter()
            .map(|s| {
                let mut r = [0.0; NUM_SYMBOLS];
                r[s.index()] = 1.0;
                r
            })
            .collect();
        ProbMatrix::new(rows).expect("one-hot rows")
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64; NUM_SYMBOLS] {
        &self.rows[i]
    }

    pub fn prob(&self, i: usize, s: Symbol) -> f64 {
        self.rows[i][s.index()]
    }

    pub fn log_prob(&self, i: usize, s: Symbol) -> f64 {
        self.logs[i][s.index()]
    }

    /// `log Π_i pm[i][z_i]`.
    pub fn string_log_prob(&self, z: &SymbolString) -> f64 {
        assert_eq!(z.len(), self.len(), "string length must match matrix");
        z.symbols().iter().enumerate().map(|(i, &s)| self.log_prob(i, s)).sum()
    }

    pub fn string_prob(&self, z: &SymbolString) -> f64 {
        self.string_log_prob(z).exp()
    }
}

/// Syntax tree in the shape of the source grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseTree {
    Node { rule: RuleId, lhs: NonterminalId, start: usize, end: usize, children: Vec<ParseTree> },
    Leaf { pos: usize, symbol: Symbol },
}

impl ParseTree {
    /// Half-open span of positions covered.
    pub fn span(&self) -> (usize, usize) {
        match *self {
            ParseTree::Node { start, end, .. } => (start, end),
            ParseTree::Leaf { pos, .. } => (pos, pos + 1),
        }
    }

    pub fn children(&self) -> &[ParseTree] {
        match self {
            ParseTree::Node { children, .. } => children,
            ParseTree::Leaf { .. } => &[],
        }
    }

    /// Leaves left to right.
    pub fn yield_string(&self) -> SymbolString {
        fn walk(t: &ParseTree, out: &mut Vec<Symbol>) {
            match t {
                ParseTree::Leaf { symbol, .. } => out.push(*symbol),
                ParseTree::Node { children, .. } => children.iter().for_each(|c| walk(c, out)),
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        SymbolString::new(out)
    }

    /// Checks that spans are contiguous unions of children and that every
    /// node matches its source rule.
    pub fn is_well_formed(&self, g: &Grammar) -> bool {
        match self {
            ParseTree::Leaf { .. } => true,
            ParseTree::Node { rule, lhs, start, end, children } => {
                let r = g.rule(*rule);
                if r.lhs != *lhs || r.rhs.len() != children.len() || children.is_empty() {
                    return false;
                }
                let mut at = *start;
                for (item, child) in r.rhs.iter().zip(children) {
                    let (s, e) = child.span();
                    if s != at {
                        return false;
                    }
                    at = e;
                    let ok = match (item, child) {
                        (crate::grammar::Item::T(a), ParseTree::Leaf { symbol, .. }) => a == symbol,
                        (crate::grammar::Item::N(b), ParseTree::Node { lhs, .. }) => b == lhs,
                        _ => false,
                    };
                    if !ok || !child.is_well_formed(g) {
                        return false;
                    }
                }
                at == *end
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parse {
    pub string: SymbolString,
    pub tree: ParseTree,
    /// Log-probability of `string` under the matrix.
    pub score: f64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("no string of length {0} is in the language")]
pub struct NoParse(pub usize);

#[derive(Clone, Copy)]
enum Back {
    Lexical { rule: RuleId, symbol: Symbol },
    Binary { rule: RuleId, split: usize },
}

#[derive(Clone, Copy)]
struct Entry {
    score: f64,
    back: Back,
}

struct Chart {
    len: usize,
    nn: usize,
    entries: Vec<Option<Entry>>,
}

impl Chart {
    fn at(&self, i: usize, span: usize, nt: NonterminalId) -> Option<Entry> {
        self.entries[(i * (self.len + 1) + span) * self.nn + nt]
    }

    fn slot(&mut self, i: usize, span: usize, nt: NonterminalId) -> &mut Option<Entry> {
        &mut self.entries[(i * (self.len + 1) + span) * self.nn + nt]
    }
}

/// Max-product chart over a lexical weight function. `weight(i, a)` returns
/// the log weight of symbol `a` at position `i`, or `None` to forbid it.
fn fill_chart<F>(cnf: &CnfGrammar, len: usize, weight: F) -> Chart
where
    F: Fn(usize, Symbol) -> Option<f64>,
{
    let nn = cnf.num_nonterminals();
    let mut chart = Chart { len, nn, entries: vec![None; len * (len + 1) * nn] };
    for i in 0..len {
        for a in Symbol::all() {
            let Some(w) = weight(i, a) else { continue };
            for &r in cnf.lexical_rules(a) {
                let slot = chart.slot(i, 1, cnf.rule(r).lhs);
                if slot.is_none_or(|e| w > e.score) {
                    *slot = Some(Entry { score: w, back: Back::Lexical { rule: r, symbol: a } });
                }
            }
        }
    }
    for span in 2..=len {
        for i in 0..=len - span {
            for split in 1..span {
                for &r in cnf.binary_rules() {
                    let rule = cnf.rule(r);
                    let CnfRhs::Binary(b, c) = rule.rhs else { unreachable!() };
                    let (Some(left), Some(right)) = (chart.at(i, split, b), chart.at(i + split, span - split, c))
                    else {
                        continue;
                    };
                    let score = left.score + right.score;
                    let slot = chart.slot(i, span, rule.lhs);
                    if slot.is_none_or(|e| score > e.score) {
                        *slot = Some(Entry { score, back: Back::Binary { rule: r, split } });
                    }
                }
            }
        }
    }
    chart
}

fn best_derivation<F>(cnf: &CnfGrammar, len: usize, weight: F) -> Option<(f64, ParseTree)>
where
    F: Fn(usize, Symbol) -> Option<f64>,
{
    if len == 0 {
        return None;
    }
    let chart = fill_chart(cnf, len, weight);
    let root = chart.at(0, len, cnf.start())?;
    let mut nodes = rebuild(cnf, &chart, 0, len, cnf.start());
    debug_assert_eq!(nodes.len(), 1);
    Some((root.score, nodes.pop().expect("start symbol yields one node")))
}

/// Item produced while folding a derivation bottom-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Folded<V> {
    Leaf(usize, Symbol),
    Value(V),
}

/// Folds the parse of `z` without building a tree: `combine` receives the
/// items of every source-rule node (helpers spliced, unit chains skipped)
/// and returns its value. `None` when `z` is not in the language.
/// Combines the folded children of one source-rule node.
pub(crate) type Combine<'a, V, E> = dyn FnMut(&[Folded<V>]) -> Result<V, E> + 'a;

pub(crate) fn fold_parse<V: Copy, E>(
    cnf: &CnfGrammar,
    z: &SymbolString,
    combine: &mut Combine<'_, V, E>,
) -> Option<Result<V, E>> {
    if z.is_empty() {
        return None;
    }
    let chart = fill_chart(cnf, z.len(), |i, a| (z.get(i) == a).then_some(0.0));
    chart.at(0, z.len(), cnf.start())?;
    let mut items = Vec::with_capacity(2 * z.len());
    Some(fold(cnf, &chart, 0, z.len(), cnf.start(), &mut items, combine).map(|()| match items[0] {
        Folded::Value(v) => v,
        Folded::Leaf(..) => unreachable!("start symbol has a rule"),
    }))
}

fn fold<V: Copy, E>(
    cnf: &CnfGrammar,
    chart: &Chart,
    i: usize,
    span: usize,
    nt: NonterminalId,
    items: &mut Vec<Folded<V>>,
    combine: &mut Combine<'_, V, E>,
) -> Result<(), E> {
    let entry = chart.at(i, span, nt).expect("back pointer target exists");
    let mark = items.len();
    let rule = match entry.back {
        Back::Lexical { rule, symbol } => {
            items.push(Folded::Leaf(i, symbol));
            rule
        }
        Back::Binary { rule, split } => {
            let CnfRhs::Binary(b, c) = cnf.rule(rule).rhs else { unreachable!() };
            fold(cnf, chart, i, split, b, items, combine)?;
            fold(cnf, chart, i + split, span - split, c, items, combine)?;
            rule
        }
    };
    if cnf.rule(rule).origin.is_some() {
        let v = combine(&items[mark..])?;
        items.truncate(mark);
        items.push(Folded::Value(v));
    }
    Ok(())
}

/// Source-shaped subtrees for the chart entry `(i, span, nt)`. Helper
/// nonterminals splice their children into the parent.
fn rebuild(cnf: &CnfGrammar, chart: &Chart, i: usize, span: usize, nt: NonterminalId) -> Vec<ParseTree> {
    let entry = chart.at(i, span, nt).expect("back pointer target exists");
    let (rule, items) = match entry.back {
        Back::Lexical { rule, symbol } => (rule, vec![ParseTree::Leaf { pos: i, symbol }]),
        Back::Binary { rule, split } => {
            let CnfRhs::Binary(b, c) = cnf.rule(rule).rhs else { unreachable!() };
            let mut items = rebuild(cnf, chart, i, split, b);
            items.extend(rebuild(cnf, chart, i + split, span - split, c));
            (rule, items)
        }
    };
    let Some(origin) = &cnf.rule(rule).origin else {
        return items;
    };
    let source = cnf.source();
    let mut node = ParseTree::Node {
        rule: origin.source,
        lhs: source.rule(origin.source).lhs,
        start: i,
        end: i + span,
        children: items,
    };
    for &u in origin.units.iter().rev() {
        node = ParseTree::Node { rule: u, lhs: source.rule(u).lhs, start: i, end: i + span, children: vec![node] };
    }
    vec![node]
}

/// Most probable grammatical string under `pm`, with its tree and log score.
///
/// Ties are broken towards lower symbol ids, then lower rule ids, then
/// earlier split points.
pub fn viterbi_parse(cnf: &CnfGrammar, pm: &ProbMatrix) -> Result<Parse, NoParse> {
    let (score, tree) = best_derivation(cnf, pm.len(), |i, a| Some(pm.log_prob(i, a))).ok_or(NoParse(pm.len()))?;
    Ok(Parse { string: tree.yield_string(), tree, score })
}

/// Parse tree of a fixed string, if it is in the language.
pub fn parse_string(cnf: &CnfGrammar, z: &SymbolString) -> Option<ParseTree> {
    best_derivation(cnf, z.len(), |i, a| (z.get(i) == a).then_some(0.0)).map(|(_, t)| t)
}

/// Bitmask over symbol ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SymbolSet(u16);

impl SymbolSet {
    pub fn contains(self, s: Symbol) -> bool {
        self.0 & (1 << s.id()) != 0
    }

    pub fn insert(&mut self, s: Symbol) {
        self.0 |= 1 << s.id();
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Symbol> {
        Symbol::all().filter(move |s| self.contains(*s))
    }
}

pub type StateId = usize;

#[derive(Debug, Clone)]
struct State {
    next: [Option<StateId>; NUM_SYMBOLS],
    /// Number of accepted completions from this state.
    completions: u64,
}

/// Minimal deterministic automaton accepting exactly the strings of one
/// length in `L(G)`. A symbol is admissible in a state iff some completion of
/// the prefix lies in the language.
#[derive(Debug, Clone)]
pub struct FeasibilityAutomaton {
    length: usize,
    states: Vec<State>,
    start: StateId,
}

impl FeasibilityAutomaton {
    pub fn build(g: &Grammar, length: usize) -> Result<Self, GrammarError> {
        let strings = g.enumerate_language(length)?;
        let mut builder = Builder { states: Vec::new(), interned: HashMap::new() };
        // The empty-language automaton is a single dead start state.
        let start = if strings.is_empty() {
            builder.intern(0, [None; NUM_SYMBOLS], 0)
        } else {
            builder.node(&strings, 0, length)
        };
        Ok(FeasibilityAutomaton { length, states: builder.states, start })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn start(&self) -> StateId {
        self.start
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn language_size(&self) -> u64 {
        self.states[self.start].completions
    }

    pub fn admissible(&self, state: StateId) -> SymbolSet {
        let mut set = SymbolSet::default();
        for s in Symbol::all() {
            if self.states[state].next[s.index()].is_some() {
                set.insert(s);
            }
        }
        set
    }

    pub fn step(&self, state: StateId, s: Symbol) -> Option<StateId> {
        self.states[state].next[s.index()]
    }

    /// State reached after `prefix`, if the prefix is feasible.
    pub fn walk(&self, prefix: &[Symbol]) -> Option<StateId> {
        prefix.iter().try_fold(self.start, |st, &s| self.step(st, s))
    }

    pub fn accepts(&self, z: &SymbolString) -> bool {
        z.len() == self.length && self.walk(z.symbols()).is_some()
    }

    /// Uniform draw from the language at this length.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<SymbolString> {
        if self.language_size() == 0 {
            return None;
        }
        let mut st = self.start;
        let mut out = Vec::with_capacity(self.length);
        for _ in 0..self.length {
            let total = self.states[st].completions;
            let mut pick = rng.random_range(0..total);
            for s in Symbol::all() {
                if let Some(nx) = self.step(st, s) {
                    let c = self.states[nx].completions;
                    if pick < c {
                        out.push(s);
                        st = nx;
                        break;
                    }
                    pick -= c;
                }
            }
        }
        Some(SymbolString::new(out))
    }
}

struct Builder {
    states: Vec<State>,
    interned: HashMap<(usize, [Option<StateId>; NUM_SYMBOLS]), StateId>,
}

impl Builder {
    fn intern(&mut self, depth: usize, next: [Option<StateId>; NUM_SYMBOLS], completions: u64) -> StateId {
        if let Some(&id) = self.interned.get(&(depth, next)) {
            return id;
        }
        self.states.push(State { next, completions });
        let id = self.states.len() - 1;
        self.interned.insert((depth, next), id);
        id
    }

    // `strings` is sorted and shares its first `depth` symbols.
    fn node(&mut self, strings: &[SymbolString], depth: usize, length: usize) -> StateId {
        if depth == length {
            return self.intern(depth, [None; NUM_SYMBOLS], 1);
        }
        let mut next = [None; NUM_SYMBOLS];
        let mut completions = 0;
        let mut lo = 0;
        while lo < strings.len() {
            let s = strings[lo].get(depth);
            let hi = lo + strings[lo..].partition_point(|z| z.get(depth) == s);
            let child = self.node(&strings[lo..hi], depth + 1, length);
            completions += self.states[child].completions;
            next[s.index()] = Some(child);
            lo = hi;
        }
        self.intern(depth, next, completions)
    }
}

/// Left-to-right sample with each row renormalized over the admissible
/// symbols. Always returns a member of the language (or `None` when the
/// language at this length is empty). If every admissible symbol has zero
/// probability the draw is uniform over the admissible set.
pub fn constrained_sample<R: Rng + ?Sized>(
    automaton: &FeasibilityAutomaton,
    pm: &ProbMatrix,
    rng: &mut R,
) -> Option<SymbolString> {
    assert_eq!(pm.len(), automaton.length(), "matrix length must match automaton");
    if automaton.language_size() == 0 {
        return None;
    }
    let mut st = automaton.start();
    let mut out = Vec::with_capacity(pm.len());
    for i in 0..pm.len() {
        let allowed = automaton.admissible(st);
        let total: f64 = allowed.iter().map(|s| pm.prob(i, s)).sum();
        let chosen = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for s in allowed.iter() {
                let p = pm.prob(i, s);
                if p > 0.0 {
                    pick = Some(s);
                    if u < p {
                        break;
                    }
                    u -= p;
                }
            }
            pick.expect("positive total implies a candidate")
        } else {
            let k = rng.random_range(0..allowed.len());
            allowed.iter().nth(k).expect("index within set")
        };
        out.push(chosen);
        st = automaton.step(st, chosen).expect("admissible symbol has a transition");
    }
    Some(SymbolString::new(out))
}

/// A binarized grammar together with lazily built feasibility automata for
/// every enumerable length.
#[derive(Debug)]
pub struct CompiledGrammar {
    cnf: CnfGrammar,
    automata: [OnceLock<FeasibilityAutomaton>; MAX_ENUMERATION_LENGTH + 1],
}

impl CompiledGrammar {
    pub fn new(g: &Grammar) -> Result<Self, GrammarError> {
        Ok(CompiledGrammar { cnf: binarize(g)?, automata: Default::default() })
    }

    pub fn arithmetic() -> Self {
        CompiledGrammar::new(&crate::grammar::load_arithmetic_grammar()).expect("arithmetic grammar binarizes")
    }

    pub fn cnf(&self) -> &CnfGrammar {
        &self.cnf
    }

    pub fn grammar(&self) -> &Grammar {
        self.cnf.source()
    }

    /// Panics for lengths outside `1..=7`.
    pub fn automaton(&self, length: usize) -> &FeasibilityAutomaton {
        self.automata[length].get_or_init(|| {
            FeasibilityAutomaton::build(self.cnf.source(), length).expect("length within enumeration cap")
        })
    }

    pub fn accepts(&self, z: &SymbolString) -> bool {
        if (1..=MAX_ENUMERATION_LENGTH).contains(&z.len()) {
            self.automaton(z.len()).accepts(z)
        } else {
            self.cnf.accepts(z)
        }
    }
}
