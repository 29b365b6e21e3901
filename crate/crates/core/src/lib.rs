//! Neural-grammar-symbolic learning on synthetic handwritten formulas.
//!
//! A perception model maps pre-segmented symbol features to per-position
//! symbol distributions, a chart parser decodes the most probable formula the
//! grammar admits, and an exact calculator executes it. When the answer is
//! wrong, back-search walks the reasoning tree top-down to find the most
//! probable correction, which becomes a pseudo label for the perception model.

pub mod backsearch;
pub mod dataset;
pub mod grammar;
pub mod harness;
pub mod learning;
pub mod parsing;
pub mod perception;
pub mod reasoning;
pub mod rng;
pub mod symbol;

pub use grammar::{binarize, load_arithmetic_grammar, CnfGrammar, Grammar};
pub use parsing::{viterbi_parse, CompiledGrammar, ProbMatrix};
pub use reasoning::{evaluate, execute, ReasoningTree, Value};
pub use symbol::{Symbol, SymbolString};
