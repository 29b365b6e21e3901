//! Context-free grammars over the formula alphabet, the built-in arithmetic
//! grammar, Chomsky-normal-form conversion and language membership.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::symbol::{Symbol, SymbolString, NUM_SYMBOLS};

pub type NonterminalId = usize;
pub type RuleId = usize;

/// Longest string `enumerate_language` will produce.
pub const MAX_ENUMERATION_LENGTH: usize = 7;

/// The arithmetic grammar over single-digit numbers.
pub const ARITHMETIC_GRAMMAR: &str = "\
# Arithmetic over single digits. `*` and `/` bind tighter than `+` and `-`;
# all operators are left associative.
S -> Expression
Expression -> Term
Expression -> Expression + Term
Expression -> Expression - Term
Term -> Factor
Term -> Term * Factor
Term -> Term / Factor
Factor -> 0
Factor -> 1
Factor -> 2
Factor -> 3
Factor -> 4
Factor -> 5
Factor -> 6
Factor -> 7
Factor -> 8
Factor -> 9
";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GrammarError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("nonterminal {0:?} is used but never defined")]
    Undefined(String),
    #[error("grammar has no rules")]
    Empty,
    #[error("rule {0} has an empty right-hand side")]
    EmptyProduction(RuleId),
    #[error("invalid nonterminal id {0}")]
    BadNonterminal(NonterminalId),
    #[error("enumeration length {0} outside 1..={MAX_ENUMERATION_LENGTH}")]
    LengthCap(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Item {
    N(NonterminalId),
    T(Symbol),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub lhs: NonterminalId,
    pub rhs: Vec<Item>,
}

/// A context-free grammar `(V, Σ, R, S)`. Terminals are always the 14 formula
/// symbols; nonterminals are named.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grammar {
    names: Vec<String>,
    rules: Vec<Rule>,
    start: NonterminalId,
}

impl Grammar {
    pub fn new(names: Vec<String>, rules: Vec<Rule>, start: NonterminalId) -> Result<Self, GrammarError> {
        if rules.is_empty() {
            return Err(GrammarError::Empty);
        }
        let n = names.len();
        if start >= n {
            return Err(GrammarError::BadNonterminal(start));
        }
        for r in &rules {
            if r.lhs >= n {
                return Err(GrammarError::BadNonterminal(r.lhs));
            }
            for it in &r.rhs {
                if let Item::N(b) = *it {
                    if b >= n {
                        return Err(GrammarError::BadNonterminal(b));
                    }
                }
            }
        }
        Ok(Grammar { names, rules, start })
    }

    pub fn nonterminals(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: NonterminalId) -> &str {
        &self.names[id]
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn rule(&self, id: RuleId) -> &Rule {
        &self.rules[id]
    }

    pub fn start(&self) -> NonterminalId {
        self.start
    }

    /// All strings of exactly `length` in the language, in lexicographic
    /// symbol-id order. Works on the source rules directly (no CNF), so it
    /// serves as an independent reference for the chart parser.
    pub fn enumerate_language(&self, length: usize) -> Result<Vec<SymbolString>, GrammarError> {
        if length == 0 || length > MAX_ENUMERATION_LENGTH {
            return Err(GrammarError::LengthCap(length));
        }
        let sets = self.derivable_sets(length);
        let mut codes: Vec<u64> = sets[self.start][length].iter().copied().collect();
        codes.sort_unstable();
        Ok(codes.into_iter().map(|c| unpack(c, length)).collect())
    }

    // sets[A][n] = packed strings of length n derivable from A. Packing uses
    // 4 bits per symbol, most significant first, so numeric order is
    // lexicographic order at fixed length.
    fn derivable_sets(&self, max_len: usize) -> Vec<Vec<HashSet<u64>>> {
        let nn = self.names.len();
        let mut sets: Vec<Vec<HashSet<u64>>> = vec![vec![HashSet::new(); max_len + 1]; nn];
        for n in 1..=max_len {
            loop {
                let mut changed = false;
                for r in &self.rules {
                    let k = r.rhs.len();
                    if k == 0 || k > n {
                        continue;
                    }
                    let mut found = Vec::new();
                    for parts in compositions(n, k) {
                        let mut acc: Vec<u64> = vec![0];
                        for (item, &len) in r.rhs.iter().zip(&parts) {
                            let options: Vec<u64> = match *item {
                                Item::T(a) if len == 1 => vec![a.id() as u64],
                                Item::T(_) => Vec::new(),
                                Item::N(b) => sets[b][len].iter().copied().collect(),
                            };
                            let shift = 4 * len as u32;
                            let mut next = Vec::with_capacity(acc.len() * options.len());
                            for &prefix in &acc {
                                for &o in &options {
                                    next.push((prefix << shift) | o);
                                }
                            }
                            acc = next;
                            if acc.is_empty() {
                                break;
                            }
                        }
                        found.extend(acc);
                    }
                    let target = &mut sets[r.lhs][n];
                    for code in found {
                        changed |= target.insert(code);
                    }
                }
                if !changed {
                    break;
                }
            }
        }
        sets
    }
}

fn unpack(code: u64, length: usize) -> SymbolString {
    let ids: Vec<u8> = (0..length).map(|i| ((code >> (4 * (length - 1 - i))) & 0xf) as u8).collect();
    SymbolString::from_ids(&ids).expect("packed ids are valid")
}

/// Ordered ways to write `n` as a sum of `k` positive parts.
fn compositions(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            cur.push(n);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for first in 1..=n.saturating_sub(k - 1) {
            cur.push(first);
            go(n - first, k - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k >= 1 && n >= k {
        go(n, k, &mut Vec::new(), &mut out);
    }
    out
}

/// The built-in arithmetic grammar: 4 nonterminals and 17 rules.
pub fn load_arithmetic_grammar() -> Grammar {
    ARITHMETIC_GRAMMAR.parse().expect("built-in grammar parses")
}

impl FromStr for Grammar {
    type Err = GrammarError;

    /// Plain-text rule list: one `LHS -> RHS1 RHS2 ...` per line, `#` starts
    /// a comment, `|` separates alternatives. Single-glyph tokens are
    /// terminals; identifiers are nonterminals. The first left-hand side is
    /// the start symbol.
    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut names: Vec<String> = Vec::new();
        let mut index: HashMap<String, NonterminalId> = HashMap::new();
        let mut raw: Vec<(usize, NonterminalId, Vec<String>)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |msg: &str| GrammarError::Syntax { line: lineno + 1, msg: msg.to_string() };
            let (lhs, rhs) = line.split_once("->").ok_or_else(|| syntax("missing `->`"))?;
            let lhs = lhs.trim();
            if !is_identifier(lhs) {
                return Err(syntax("left-hand side must be an identifier"));
            }
            let lhs_id = *index.entry(lhs.to_string()).or_insert_with(|| {
                names.push(lhs.to_string());
                names.len() - 1
            });
            for alt in rhs.split('|') {
                let toks: Vec<String> = alt.split_whitespace().map(str::to_string).collect();
                if toks.is_empty() {
                    return Err(syntax("empty alternative"));
                }
                raw.push((lineno + 1, lhs_id, toks));
            }
        }
        if raw.is_empty() {
            return Err(GrammarError::Empty);
        }
        let mut rules = Vec::with_capacity(raw.len());
        for (line, lhs, toks) in raw {
            let mut rhs = Vec::with_capacity(toks.len());
            for t in toks {
                let mut chars = t.chars();
                let single = match (chars.next(), chars.next()) {
                    (Some(c), None) => Symbol::from_glyph(c).ok(),
                    _ => None,
                };
                if let Some(sym) = single {
                    rhs.push(Item::T(sym));
                } else if is_identifier(&t) {
                    let id = *index.get(&t).ok_or(GrammarError::Undefined(t.clone()))?;
                    rhs.push(Item::N(id));
                } else {
                    return Err(GrammarError::Syntax { line, msg: format!("bad token {t:?}") });
                }
            }
            rules.push(Rule { lhs, rhs });
        }
        let start = rules[0].lhs;
        Grammar::new(names, rules, start)
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_') && chars.all(|c| c.is_alphanumeric() || c == '_')
}

impl fmt::Display for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rules {
            write!(f, "{} ->", self.names[r.lhs])?;
            for it in &r.rhs {
                match *it {
                    Item::N(b) => write!(f, " {}", self.names[b])?,
                    Item::T(a) => write!(f, " {}", a)?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CnfRhs {
    Binary(NonterminalId, NonterminalId),
    Lexical(Symbol),
}

/// Where a CNF rule came from: the unit rules collapsed above it (outermost
/// first) and the source rule it was cut from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Origin {
    pub units: Vec<RuleId>,
    pub source: RuleId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnfRule {
    pub lhs: NonterminalId,
    pub rhs: CnfRhs,
    /// `None` for rules whose left side is a helper nonterminal introduced by
    /// binarization; those nodes are spliced away when reporting trees.
    pub origin: Option<Origin>,
}

/// A grammar in Chomsky normal form with provenance back to its source.
///
/// Nonterminal ids below `source.nonterminals().len()` are shared with the
/// source grammar; higher ids are helpers.
#[derive(Debug, Clone)]
pub struct CnfGrammar {
    source: Grammar,
    names: Vec<String>,
    rules: Vec<CnfRule>,
    binary: Vec<RuleId>,
    lexical: Vec<Vec<RuleId>>,
}

impl CnfGrammar {
    pub fn source(&self) -> &Grammar {
        &self.source
    }

    pub fn start(&self) -> NonterminalId {
        self.source.start
    }

    pub fn num_nonterminals(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, id: NonterminalId) -> &str {
        &self.names[id]
    }

    pub fn is_helper(&self, id: NonterminalId) -> bool {
        id >= self.source.names.len()
    }

    pub fn rules(&self) -> &[CnfRule] {
        &self.rules
    }

    pub fn rule(&self, id: RuleId) -> &CnfRule {
        &self.rules[id]
    }

    /// Ids of binary rules, ascending.
    pub fn binary_rules(&self) -> &[RuleId] {
        &self.binary
    }

    /// Ids of lexical rules producing `a`, ascending.
    pub fn lexical_rules(&self, a: Symbol) -> &[RuleId] {
        &self.lexical[a.index()]
    }

    /// CYK recognition.
    pub fn accepts(&self, z: &SymbolString) -> bool {
        let l = z.len();
        if l == 0 {
            return false;
        }
        let nn = self.num_nonterminals();
        // chart[start * (l + 1) + len]
        let mut chart = vec![vec![false; nn]; l * (l + 1)];
        let cell = |i: usize, len: usize| i * (l + 1) + len;
        for (i, &a) in z.symbols().iter().enumerate() {
            for &r in self.lexical_rules(a) {
                chart[cell(i, 1)][self.rules[r].lhs] = true;
            }
        }
        for len in 2..=l {
            for i in 0..=l - len {
                for split in 1..len {
                    for &r in &self.binary {
                        let CnfRhs::Binary(b, c) = self.rules[r].rhs else { unreachable!() };
                        if chart[cell(i, split)][b] && chart[cell(i + split, len - split)][c] {
                            let a = self.rules[r].lhs;
                            chart[cell(i, len)][a] = true;
                        }
                    }
                }
            }
        }
        chart[cell(0, l)][self.start()]
    }
}

/// Convert to Chomsky normal form.
///
/// Terminals inside long rules get one wrapper nonterminal per symbol, long
/// rules are split right-to-left into helper chains, and unit rules are
/// collapsed with their chain recorded in each resulting rule's `Origin`.
/// Helper numbering depends only on rule order.
pub fn binarize(g: &Grammar) -> Result<CnfGrammar, GrammarError> {
    if let Some(id) = g.rules.iter().position(|r| r.rhs.is_empty()) {
        return Err(GrammarError::EmptyProduction(id));
    }
    let mut names = g.names.clone();
    let mut wrapper: [Option<NonterminalId>; NUM_SYMBOLS] = [None; NUM_SYMBOLS];
    let mut helper_rules: Vec<CnfRule> = Vec::new();
    // Non-unit rules headed by a source nonterminal: (lhs, rhs, source rule).
    let mut base: Vec<(NonterminalId, CnfRhs, RuleId)> = Vec::new();
    let mut units: Vec<(NonterminalId, NonterminalId, RuleId)> = Vec::new();

    for (rid, r) in g.rules.iter().enumerate() {
        match r.rhs.as_slice() {
            [Item::T(a)] => base.push((r.lhs, CnfRhs::Lexical(*a), rid)),
            [Item::N(b)] => units.push((r.lhs, *b, rid)),
            items => {
                let ids: Vec<NonterminalId> = items
                    .iter()
                    .map(|it| match *it {
                        Item::N(b) => b,
                        Item::T(a) => *wrapper[a.index()].get_or_insert_with(|| {
                            names.push(format!("_{}", a));
                            let id = names.len() - 1;
                            helper_rules.push(CnfRule { lhs: id, rhs: CnfRhs::Lexical(a), origin: None });
                            id
                        }),
                    })
                    .collect();
                // A -> X1 H1, H1 -> X2 H2, ..., Hk -> X(n-1) Xn
                let mut lhs = r.lhs;
                for (j, &head) in ids[..ids.len() - 2].iter().enumerate() {
                    names.push(format!("_{}_{}", names[r.lhs], rid));
                    let h = names.len() - 1;
                    let rhs = CnfRhs::Binary(head, h);
                    if j == 0 {
                        base.push((lhs, rhs, rid));
                    } else {
                        helper_rules.push(CnfRule { lhs, rhs, origin: None });
                    }
                    lhs = h;
                }
                let rhs = CnfRhs::Binary(ids[ids.len() - 2], ids[ids.len() - 1]);
                if lhs == r.lhs {
                    base.push((lhs, rhs, rid));
                } else {
                    helper_rules.push(CnfRule { lhs, rhs, origin: None });
                }
            }
        }
    }

    let mut rules: Vec<CnfRule> = Vec::new();
    for a in 0..g.names.len() {
        for (b, chain) in unit_closure(a, &units) {
            for &(lhs, rhs, source) in &base {
                if lhs == b {
                    rules.push(CnfRule { lhs: a, rhs, origin: Some(Origin { units: chain.clone(), source }) });
                }
            }
        }
    }
    rules.extend(helper_rules);

    let mut binary = Vec::new();
    let mut lexical = vec![Vec::new(); NUM_SYMBOLS];
    for (i, r) in rules.iter().enumerate() {
        match r.rhs {
            CnfRhs::Binary(..) => binary.push(i),
            CnfRhs::Lexical(a) => lexical[a.index()].push(i),
        }
    }
    Ok(CnfGrammar { source: g.clone(), names, rules, binary, lexical })
}

/// Nonterminals reachable from `a` through unit rules, each with the shortest
/// chain of unit rules (breadth first, rule order), starting with `a` itself.
fn unit_closure(
    a: NonterminalId,
    units: &[(NonterminalId, NonterminalId, RuleId)],
) -> Vec<(NonterminalId, Vec<RuleId>)> {
    let mut seen = HashSet::from([a]);
    let mut out = vec![(a, Vec::new())];
    let mut queue = VecDeque::from([(a, Vec::new())]);
    while let Some((x, chain)) = queue.pop_front() {
        for &(lhs, rhs, rid) in units {
            if lhs == x && seen.insert(rhs) {
                let mut c: Vec<RuleId> = chain.clone();
                c.push(rid);
                out.push((rhs, c.clone()));
                queue.push_back((rhs, c));
            }
        }
    }
    out
}
