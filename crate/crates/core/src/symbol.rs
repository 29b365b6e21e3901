//! The formula alphabet: ten digits followed by the four operators `+ - * /`.
//!
//! Symbol ids are fixed everywhere (probability columns, files, logs):
//! `0..=9` are the digits, `10..=13` are `+`, `-`, `*`, `/` in that order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of terminal symbols.
pub const NUM_SYMBOLS: usize = 14;
/// Number of digit symbols.
pub const NUM_DIGITS: usize = 10;
/// Number of operator symbols.
pub const NUM_OPERATORS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SymbolError {
    #[error("symbol id {0} out of range 0..14")]
    BadId(u8),
    #[error("unknown glyph {0:?}")]
    BadGlyph(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Digit,
    Operator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operator {
    Add,
    Sub,
    Mul,
    Div,
}

impl Operator {
    pub const ALL: [Operator; 4] = [Operator::Add, Operator::Sub, Operator::Mul, Operator::Div];

    pub fn symbol(self) -> Symbol {
        Symbol(10 + self as u8)
    }

    pub fn glyph(self) -> char {
        match self {
            Operator::Add => '+',
            Operator::Sub => '-',
            Operator::Mul => '*',
            Operator::Div => '/',
        }
    }
}

/// A terminal symbol, identified by its id in `0..14`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Symbol(u8);

impl Symbol {
    pub fn new(id: u8) -> Result<Symbol, SymbolError> {
        if (id as usize) < NUM_SYMBOLS {
            Ok(Symbol(id))
        } else {
            Err(SymbolError::BadId(id))
        }
    }

    pub fn digit(d: u8) -> Symbol {
        assert!(d < 10, "digit {d} out of range");
        Symbol(d)
    }

    /// All symbols in id order.
    pub fn all() -> impl Iterator<Item = Symbol> + Clone {
        (0..NUM_SYMBOLS as u8).map(Symbol)
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn category(self) -> Category {
        if self.0 < 10 {
            Category::Digit
        } else {
            Category::Operator
        }
    }

    pub fn digit_value(self) -> Option<u8> {
        (self.0 < 10).then_some(self.0)
    }

    pub fn operator(self) -> Option<Operator> {
        match self.0 {
            10 => Some(Operator::Add),
            11 => Some(Operator::Sub),
            12 => Some(Operator::Mul),
            13 => Some(Operator::Div),
            _ => None,
        }
    }

    /// Symbols sharing this symbol's category, in id order.
    pub fn category_members(self) -> std::ops::Range<u8> {
        match self.category() {
            Category::Digit => 0..10,
            Category::Operator => 10..14,
        }
    }

    pub fn glyph(self) -> char {
        match self.operator() {
            Some(op) => op.glyph(),
            None => (b'0' + self.0) as char,
        }
    }

    /// Accepts the ASCII glyphs plus the typographic `−`, `×`, `÷`.
    pub fn from_glyph(c: char) -> Result<Symbol, SymbolError> {
        let id = match c {
            '0'..='9' => c as u8 - b'0',
            '+' => 10,
            '-' | '−' => 11,
            '*' | '×' => 12,
            '/' | '÷' => 13,
            _ => return Err(SymbolError::BadGlyph(c.to_string())),
        };
        Ok(Symbol(id))
    }
}

impl TryFrom<u8> for Symbol {
    type Error = SymbolError;
    fn try_from(id: u8) -> Result<Self, Self::Error> {
        Symbol::new(id)
    }
}

impl From<Symbol> for u8 {
    fn from(s: Symbol) -> u8 {
        s.0
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.glyph())
    }
}

/// A sequence of symbols; the latent formula.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SymbolString(Vec<Symbol>);

impl SymbolString {
    pub fn new(symbols: Vec<Symbol>) -> Self {
        SymbolString(symbols)
    }

    pub fn from_ids(ids: &[u8]) -> Result<Self, SymbolError> {
        ids.iter().map(|&i| Symbol::new(i)).collect::<Result<Vec<_>, _>>().map(SymbolString)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.0
    }

    pub fn ids(&self) -> Vec<u8> {
        self.0.iter().map(|s| s.0).collect()
    }

    pub fn get(&self, i: usize) -> Symbol {
        self.0[i]
    }

    /// Copy with position `pos` replaced by `sym`.
    pub fn with(&self, pos: usize, sym: Symbol) -> SymbolString {
        let mut v = self.0.clone();
        v[pos] = sym;
        SymbolString(v)
    }

    pub fn set(&mut self, pos: usize, sym: Symbol) {
        self.0[pos] = sym;
    }

    pub fn hamming(&self, other: &SymbolString) -> usize {
        assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

impl FromStr for SymbolString {
    type Err = SymbolError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.chars()
            .filter(|c| !c.is_whitespace())
            .map(Symbol::from_glyph)
            .collect::<Result<Vec<_>, _>>()
            .map(SymbolString)
    }
}

impl fmt::Display for SymbolString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.0 {
            write!(f, "{}", s.glyph())?;
        }
        Ok(())
    }
}

impl From<Vec<Symbol>> for SymbolString {
    fn from(v: Vec<Symbol>) -> Self {
        SymbolString(v)
    }
}
