//! Independent oracles shared by the integration and acceptance tests.
//! Nothing here goes through the CNF chart parser.
#![allow(dead_code)]

use ngs::perception::{Architecture, FeatureSeq, PerceptionModel};
use ngs::symbol::{Operator, Symbol, SymbolString, NUM_SYMBOLS};
use ngs::{ProbMatrix, Value};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Eval {
    Ok(Value),
    DivByZero,
    Invalid,
}

/// Precedence evaluation by operator stack, straight from the token pattern
/// `digit (op digit)*`.
pub fn shunting_yard(z: &SymbolString) -> Eval {
    let syms = z.symbols();
    if syms.len().is_multiple_of(2) {
        return Eval::Invalid;
    }
    for (i, s) in syms.iter().enumerate() {
        let want_digit = i % 2 == 0;
        if want_digit != s.digit_value().is_some() {
            return Eval::Invalid;
        }
    }
    let prec = |op: Operator| match op {
        Operator::Add | Operator::Sub => 1,
        Operator::Mul | Operator::Div => 2,
    };
    let mut values: Vec<Value> = Vec::new();
    let mut ops: Vec<Operator> = Vec::new();
    let reduce = |values: &mut Vec<Value>, ops: &mut Vec<Operator>| -> bool {
        let op = ops.pop().unwrap();
        let r = values.pop().unwrap();
        let l = values.pop().unwrap();
        match l.apply(op, r) {
            Some(v) => {
                values.push(v);
                true
            }
            None => false,
        }
    };
    for s in syms {
        if let Some(d) = s.digit_value() {
            values.push(Value::integer(d as i64));
        } else {
            let op = s.operator().unwrap();
            while let Some(&top) = ops.last() {
                if prec(top) >= prec(op) {
                    if !reduce(&mut values, &mut ops) {
                        return Eval::DivByZero;
                    }
                } else {
                    break;
                }
            }
            ops.push(op);
        }
    }
    while !ops.is_empty() {
        if !reduce(&mut values, &mut ops) {
            return Eval::DivByZero;
        }
    }
    Eval::Ok(values[0])
}

/// Every string of the length, valid or not, by counting in base 14.
pub fn all_strings(len: usize) -> impl Iterator<Item = SymbolString> {
    let total = NUM_SYMBOLS.pow(len as u32);
    (0..total).map(move |mut code| {
        let ids: Vec<u8> = (0..len)
            .map(|_| {
                let id = (code % NUM_SYMBOLS) as u8;
                code /= NUM_SYMBOLS;
                id
            })
            .collect();
        SymbolString::from_ids(&ids).unwrap()
    })
}

/// Category-pattern strings of odd length: digits at even slots, operators
/// at odd slots, as a product construction.
pub fn pattern_strings(len: usize) -> Vec<SymbolString> {
    let mut out = vec![Vec::<Symbol>::new()];
    for i in 0..len {
        let choices: Vec<Symbol> = if i % 2 == 0 {
            (0..10).map(Symbol::digit).collect()
        } else {
            Operator::ALL.iter().map(|o| o.symbol()).collect()
        };
        out = out
            .into_iter()
            .flat_map(|p| {
                choices.iter().map(move |&c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
    }
    out.into_iter().map(SymbolString::new).collect()
}

pub fn random_pattern_string<R: Rng>(len: usize, rng: &mut R) -> SymbolString {
    SymbolString::new(
        (0..len)
            .map(|i| {
                if i % 2 == 0 {
                    Symbol::digit(rng.random_range(0..10))
                } else {
                    Operator::ALL[rng.random_range(0..4)].symbol()
                }
            })
            .collect(),
    )
}

/// Random matrix with rows `softmax(scale * N(0, 1))`.
pub fn random_matrix<R: Rng>(len: usize, scale: f64, rng: &mut R) -> ProbMatrix {
    let normal = rand_distr::StandardNormal;
    let rows = (0..len)
        .map(|_| {
            let mut r = [0.0; NUM_SYMBOLS];
            for v in r.iter_mut() {
                let g: f64 = rng.sample(normal);
                *v = (scale * g).exp();
            }
            r
        })
        .collect();
    ProbMatrix::from_weights(rows).unwrap()
}

/// Most probable category-pattern string under `pm` and its log score.
pub fn brute_force_best(pm: &ProbMatrix) -> (SymbolString, f64) {
    pattern_strings(pm.len())
        .into_iter()
        .map(|z| {
            let s = pm.string_log_prob(&z);
            (z, s)
        })
        .fold(None, |best: Option<(SymbolString, f64)>, (z, s)| match best {
            Some((bz, bs)) if bs >= s => Some((bz, bs)),
            _ => Some((z, s)),
        })
        .unwrap()
}

/// All single-symbol substitutions of `z` that evaluate to `y`, with their
/// priority `p(new) / p(old)`.
pub fn brute_force_fixes(z: &SymbolString, y: Value, pm: &ProbMatrix) -> Vec<(SymbolString, f64)> {
    let mut out = Vec::new();
    for pos in 0..z.len() {
        for s in Symbol::all() {
            if s == z.get(pos) {
                continue;
            }
            let cand = z.with(pos, s);
            if shunting_yard(&cand) == Eval::Ok(y) {
                out.push((cand, pm.prob(pos, s) / pm.prob(pos, z.get(pos))));
            }
        }
    }
    out
}

/// A feature sequence with the class prototypes plus Gaussian noise.
pub fn noisy_features<R: Rng>(z: &SymbolString, dim: usize, sigma: f64, rng: &mut R) -> FeatureSeq {
    FeatureSeq::new(
        z.symbols()
            .iter()
            .map(|s| {
                (0..dim)
                    .map(|k| {
                        let g: f64 = rng.sample(rand_distr::StandardNormal);
                        (if k == s.index() { 1.0 } else { 0.0 }) + sigma * g
                    })
                    .collect()
            })
            .collect(),
    )
}

/// Linear model with scores `scale * x_c` for class `c`.
pub fn prototype_model(dim: usize, scale: f64) -> PerceptionModel {
    let mut m = PerceptionModel::zeros(Architecture::Linear, dim);
    for c in 0..NUM_SYMBOLS {
        m.params_mut()[c * dim + c] = scale;
    }
    m
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Largest relative error between the analytic NLL gradient and central
/// differences, with the denominator floored at `floor`.
pub fn fd_max_relative_error(m: &PerceptionModel, x: &FeatureSeq, z: &SymbolString, h: f64, floor: f64) -> f64 {
    let analytic = m.nll_gradient(x, z).unwrap();
    let mut probe = m.clone();
    let mut worst: f64 = 0.0;
    for k in 0..m.num_params() {
        let orig = probe.params()[k];
        probe.params_mut()[k] = orig + h;
        let up = probe.nll(x, z).unwrap();
        probe.params_mut()[k] = orig - h;
        let down = probe.nll(x, z).unwrap();
        probe.params_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.0[k];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
    }
    worst
}

/// Monte Carlo REINFORCE estimate `mean r(z) ∇(-log p(z))` under independent
/// sampling, returned as per-coordinate mean and standard error.
pub fn reinforce_estimate<R: Rng>(
    cg: &ngs::CompiledGrammar,
    m: &PerceptionModel,
    obs: &ngs::dataset::Observation,
    samples: usize,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let pm = m.forward(&obs.x).unwrap();
    let n = m.num_params();
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for _ in 0..samples {
        let z = ngs::learning::sample_independent(&pm, rng);
        if ngs::learning::reward(cg, &z, obs.y) > 0.0 {
            let g = m.nll_gradient(&obs.x, &z).unwrap();
            for k in 0..n {
                sum[k] += g.0[k];
                sq[k] += g.0[k] * g.0[k];
            }
        }
    }
    let s = samples as f64;
    let mean: Vec<f64> = sum.iter().map(|v| v / s).collect();
    let se = mean.iter().zip(&sq).map(|(mu, q)| ((q / s - mu * mu).max(0.0) / (s - 1.0)).sqrt()).collect();
    (mean, se)
}

/// Per-coordinate mean and variance of `r(z) ∇(-log p(z))` under independent
/// sampling, by enumerating every string of the length.
pub fn reinforce_moments(m: &PerceptionModel, obs: &ngs::dataset::Observation) -> (Vec<f64>, Vec<f64>) {
    let pm = m.forward(&obs.x).unwrap();
    let n = m.num_params();
    let (mut first, mut second) = (vec![0.0; n], vec![0.0; n]);
    for z in all_strings(obs.len()) {
        if shunting_yard(&z) != Eval::Ok(obs.y) {
            continue;
        }
        let p = pm.string_prob(&z);
        let g = m.nll_gradient(&obs.x, &z).unwrap();
        for k in 0..n {
            first[k] += p * g.0[k];
            second[k] += p * g.0[k] * g.0[k];
        }
    }
    let var = first.iter().zip(&second).map(|(a, b)| (b - a * a).max(0.0)).collect();
    (first, var)
}
