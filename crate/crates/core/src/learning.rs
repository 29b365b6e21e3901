//! Weakly supervised training of the perception model from `(x, y)` pairs.
//!
//! Four methods share one loop:
//! - `ngs-mbs` labels each example with its parsed formula when it already
//!   executes to `y`, otherwise with the output of m-step back-search, and
//!   takes a supervised step on those pseudo-labels;
//! - `ns-rl` samples every symbol independently and uses REINFORCE;
//! - `ngs-rl` samples through the grammar automaton and uses REINFORCE;
//! - `ngs-mapo` adds a per-example buffer of rewarding formulas to `ngs-rl`.
//!
//! Trainers only receive [`Observation`]s, never the hidden formulas.
//!
//! The module also provides enumeration oracles over the language at one
//! length: the exact posterior `p(z | x, y)` and the KL divergence of its
//! ε-smoothed version.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backsearch::{multi_step_backsearch, MbsConfig};
use crate::dataset::{Observation, SymbolPool};
use crate::parsing::{constrained_sample, viterbi_parse, CompiledGrammar, ProbMatrix};
use crate::perception::{Architecture, Gradient, PerceptionError, PerceptionModel, DEFAULT_LEARNING_RATE};
use crate::reasoning::{evaluate, execute, Value};
use crate::rng::stream;
use crate::symbol::{Symbol, SymbolString, NUM_SYMBOLS};

const TAG_INIT: u64 = 10;
const TAG_SUBSET: u64 = 11;
const TAG_PRETRAIN: u64 = 12;
const TAG_BATCH: u64 = 13;
const TAG_EXAMPLE: u64 = 14;

#[derive(Debug, Error)]
pub enum LearningError {
    #[error("no formula of this length executes to the answer")]
    EmptySupport,
    #[error("length {0} is too long to enumerate")]
    TooLong(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("trainer state does not match this run: {0}")]
    State(String),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    NgsMbs,
    NsRl,
    NgsRl,
    NgsMapo,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::NgsMbs, Method::NsRl, Method::NgsRl, Method::NgsMapo];

    pub fn name(self) -> &'static str {
        match self {
            Method::NgsMbs => "ngs-mbs",
            Method::NsRl => "ns-rl",
            Method::NgsRl => "ngs-rl",
            Method::NgsMapo => "ngs-mapo",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub architecture: Architecture,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub mbs: MbsConfig,
    pub baseline_decay: f64,
    /// Fraction of the training split used, chosen at random once per run.
    pub data_fraction: f64,
    /// Labeled pool instances for supervised pretraining; 0 disables it.
    pub pretrain_samples: usize,
    pub pretrain_steps: usize,
    /// Iterations between test evaluations.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::NgsMbs,
            architecture: Architecture::Linear,
            batch_size: 64,
            iterations: 15_000,
            learning_rate: DEFAULT_LEARNING_RATE,
            mbs: MbsConfig::default(),
            baseline_decay: 0.99,
            data_fraction: 1.0,
            pretrain_samples: 0,
            pretrain_steps: 500,
            eval_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearningError> {
        let bad = |m: String| Err(LearningError::Config(m));
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad(format!("data_fraction {} outside (0, 1]", self.data_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.baseline_decay) {
            return bad(format!("baseline_decay {} outside [0, 1]", self.baseline_decay));
        }
        if let Architecture::Mlp { hidden: 0 } = self.architecture {
            return bad("hidden layer must be nonempty".into());
        }
        self.mbs.validate().map_err(LearningError::Config)
    }
}

/// One evaluation point of a training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub calc_acc: f64,
    pub sym_acc: f64,
    /// Fraction of examples since the previous record that produced a
    /// pseudo-label (ngs-mbs) or a reward (the policy-gradient methods).
    pub label_frac: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "iter,calc_acc,sym_acc,label_frac,seconds";

    pub fn push(&mut self, r: LogRecord) {
        if let Some(last) = self.records.last() {
            assert!(r.iter > last.iter, "log iterations must increase");
        }
        self.records.push(r);
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{},{},{:.3}\n", r.iter, r.calc_acc, r.sym_acc, r.label_frac, r.seconds));
        }
        out
    }

    /// First logged iteration whose calculation accuracy reaches `level`.
    pub fn iterations_to(&self, level: f64) -> Option<usize> {
        self.records.iter().find(|r| r.calc_acc >= level).map(|r| r.iter)
    }
}

/// Everything needed to resume a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub model: PerceptionModel,
    pub iteration: usize,
    pub baseline: f64,
    /// Rewarding formulas found so far per training index (ngs-mapo).
    pub buffers: BTreeMap<usize, Vec<SymbolString>>,
    pub log: TrainLog,
    pub elapsed: f64,
    labeled: usize,
    seen: usize,
}

/// Descent direction of the REINFORCE surrogate for one sample:
/// `(r - b) ∇(-log p(z | x))`, accumulated into `grad` with `weight`.
pub fn accumulate_policy_gradient(
    model: &PerceptionModel,
    obs: &Observation,
    z: &SymbolString,
    advantage: f64,
    weight: f64,
    grad: &mut Gradient,
) -> Result<(), PerceptionError> {
    if advantage == 0.0 {
        return Ok(());
    }
    model.accumulate_nll_gradient(&obs.x, z, weight * advantage, grad)
}

/// Per-position independent draw, ignoring the grammar.
pub fn sample_independent<R: Rng + ?Sized>(pm: &ProbMatrix, rng: &mut R) -> SymbolString {
    let syms = (0..pm.len())
        .map(|i| {
            let mut u = rng.random::<f64>();
            let row = pm.row(i);
            let mut pick = NUM_SYMBOLS - 1;
            for (c, &p) in row.iter().enumerate() {
                if u < p {
                    pick = c;
                    break;
                }
                u -= p;
            }
            Symbol::new(pick as u8).expect("class index")
        })
        .collect();
    SymbolString::new(syms)
}

pub fn reward(cg: &CompiledGrammar, z: &SymbolString, y: Value) -> f64 {
    if execute(cg.cnf(), z) == Ok(y) {
        1.0
    } else {
        0.0
    }
}

pub struct Trainer<'a> {
    cg: &'a CompiledGrammar,
    data: &'a [Observation],
    active: Vec<usize>,
    cfg: TrainConfig,
    state: TrainerState,
}

impl<'a> Trainer<'a> {
    /// Fresh run: seeded initialization plus optional pretraining on `pool`.
    pub fn new(
        cg: &'a CompiledGrammar,
        data: &'a [Observation],
        pool: Option<&SymbolPool>,
        cfg: &TrainConfig,
    ) -> Result<Self, LearningError> {
        cfg.validate()?;
        let dim = data.first().map(|o| o.x.dim()).ok_or_else(|| LearningError::Config("empty training set".into()))?;
        let mut model = PerceptionModel::new(cfg.architecture, dim, &mut stream(cfg.seed, &[TAG_INIT]))
            .with_learning_rate(cfg.learning_rate);
        if cfg.pretrain_samples > 0 {
            let pool = pool.ok_or_else(|| LearningError::Config("pretraining needs the labeled pool".into()))?;
            pretrain(&mut model, pool, cfg)?;
        }
        let state = TrainerState {
            model,
            iteration: 0,
            baseline: 0.0,
            buffers: BTreeMap::new(),
            log: TrainLog::default(),
            elapsed: 0.0,
            labeled: 0,
            seen: 0,
        };
        Self::resume(cg, data, cfg, state)
    }

    pub fn resume(
        cg: &'a CompiledGrammar,
        data: &'a [Observation],
        cfg: &TrainConfig,
        state: TrainerState,
    ) -> Result<Self, LearningError> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(LearningError::Config("empty training set".into()));
        }
        if state.model.input_dim() != data[0].x.dim() || state.model.architecture() != cfg.architecture {
            return Err(LearningError::State("model shape differs from the config and data".into()));
        }
        let n = data.len();
        let keep = ((n as f64 * cfg.data_fraction).ceil() as usize).clamp(1, n);
        let mut active = index::sample(&mut stream(cfg.seed, &[TAG_SUBSET]), n, keep).into_vec();
        active.sort_unstable();
        Ok(Trainer { cg, data, active, cfg: cfg.clone(), state })
    }

    pub fn model(&self) -> &PerceptionModel {
        &self.state.model
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn into_state(self) -> TrainerState {
        self.state
    }

    /// Indices of the training examples this run draws from.
    pub fn active_indices(&self) -> &[usize] {
        &self.active
    }

    /// One iteration on a fresh batch. Returns the number of examples that
    /// produced a label or reward.
    pub fn step(&mut self) -> Result<usize, LearningError> {
        let t = self.state.iteration as u64;
        let b = self.cfg.batch_size.min(self.active.len());
        let batch: Vec<usize> = index::sample(&mut stream(self.cfg.seed, &[TAG_BATCH, t]), self.active.len(), b)
            .into_iter()
            .map(|k| self.active[k])
            .collect();
        let mut grad = Gradient::zeros(self.state.model.num_params());
        let labeled = match self.cfg.method {
            Method::NgsMbs => self.mbs_batch(&batch, &mut grad)?,
            Method::NsRl | Method::NgsRl | Method::NgsMapo => self.policy_batch(&batch, &mut grad)?,
        };
        self.state.iteration += 1;
        self.state.labeled += labeled;
        self.state.seen += batch.len();
        Ok(labeled)
    }

    fn example_rng(&self, slot: usize) -> crate::rng::StreamRng {
        stream(self.cfg.seed, &[TAG_EXAMPLE, self.state.iteration as u64, slot as u64])
    }

    fn mbs_batch(&mut self, batch: &[usize], grad: &mut Gradient) -> Result<usize, LearningError> {
        let model = &self.state.model;
        let mut labels = Vec::with_capacity(batch.len());
        for (slot, &i) in batch.iter().enumerate() {
            let obs = &self.data[i];
            let pm = model.forward(&obs.x)?;
            let Ok(parse) = viterbi_parse(self.cg.cnf(), &pm) else {
                continue;
            };
            let z = if evaluate(&parse.tree).map(|t| t.result()) == Ok(obs.y) {
                parse.string
            } else {
                let mut rng = self.example_rng(slot);
                let z = multi_step_backsearch(self.cg, &parse.string, obs.y, &pm, &self.cfg.mbs, &mut rng);
                if execute(self.cg.cnf(), &z) != Ok(obs.y) {
                    continue;
                }
                z
            };
            labels.push((i, z));
        }
        if labels.is_empty() {
            return Ok(0);
        }
        let w = 1.0 / labels.len() as f64;
        for (i, z) in &labels {
            model.accumulate_nll_gradient(&self.data[*i].x, z, w, grad)?;
        }
        self.state.model.apply_update(grad, 1.0)?;
        Ok(labels.len())
    }

    fn policy_batch(&mut self, batch: &[usize], grad: &mut Gradient) -> Result<usize, LearningError> {
        let model = &self.state.model;
        let b = self.state.baseline;
        let w = 1.0 / batch.len() as f64;
        let mut total_reward = 0.0;
        let mut rewarded = Vec::new();
        for (slot, &i) in batch.iter().enumerate() {
            let obs = &self.data[i];
            let pm = model.forward(&obs.x)?;
            let mut rng = self.example_rng(slot);
            let z = match self.cfg.method {
                Method::NsRl => sample_independent(&pm, &mut rng),
                _ => constrained_sample(self.cg.automaton(obs.len()), &pm, &mut rng).expect("nonempty language"),
            };
            let r = reward(self.cg, &z, obs.y);
            total_reward += r;
            let mix = match (self.cfg.method, self.state.buffers.get(&i)) {
                (Method::NgsMapo, Some(buf)) if !buf.is_empty() => {
                    let probs: Vec<f64> = buf.iter().map(|c| pm.string_prob(c)).collect();
                    let mass: f64 = probs.iter().sum();
                    let weight = mass.clamp(0.1, 1.0);
                    let pick = pick_weighted(&probs, &mut rng);
                    model.accumulate_nll_gradient(&obs.x, &buf[pick], w * weight, grad)?;
                    1.0 - weight
                }
                _ => 1.0,
            };
            accumulate_policy_gradient(model, obs, &z, r - b, w * mix, grad)?;
            if r > 0.0 {
                rewarded.push((i, z));
            }
        }
        self.state.model.apply_update(grad, 1.0)?;
        let d = self.cfg.baseline_decay;
        self.state.baseline = d * b + (1.0 - d) * total_reward / batch.len() as f64;
        let count = rewarded.len();
        if self.cfg.method == Method::NgsMapo {
            for (i, z) in rewarded {
                let buf = self.state.buffers.entry(i).or_default();
                if !buf.contains(&z) {
                    buf.push(z);
                }
            }
        }
        Ok(count)
    }

    /// Trains to `cfg.iterations`, recording an evaluation at the start, every
    /// `eval_every` iterations and at the end. `checkpoint` runs after every
    /// record.
    pub fn run<E, C>(&mut self, eval: &mut E, checkpoint: &mut C) -> Result<(), LearningError>
    where
        E: FnMut(&PerceptionModel) -> (f64, f64),
        C: FnMut(&TrainerState) -> Result<(), LearningError>,
    {
        self.run_until(self.cfg.iterations, eval, checkpoint)
    }

    /// As [`Trainer::run`] but stops after iteration `limit`.
    pub fn run_until<E, C>(&mut self, limit: usize, eval: &mut E, checkpoint: &mut C) -> Result<(), LearningError>
    where
        E: FnMut(&PerceptionModel) -> (f64, f64),
        C: FnMut(&TrainerState) -> Result<(), LearningError>,
    {
        let start = Instant::now();
        let base = self.state.elapsed;
        if self.state.log.records.is_empty() {
            self.record(eval, base);
            checkpoint(&self.state)?;
        }
        while self.state.iteration < self.cfg.iterations.min(limit) {
            self.step()?;
            let t = self.state.iteration;
            if t.is_multiple_of(self.cfg.eval_every) || t == self.cfg.iterations {
                self.record(eval, base + start.elapsed().as_secs_f64());
                checkpoint(&self.state)?;
            }
        }
        Ok(())
    }

    fn record<E: FnMut(&PerceptionModel) -> (f64, f64)>(&mut self, eval: &mut E, seconds: f64) {
        let (calc_acc, sym_acc) = eval(&self.state.model);
        let label_frac = if self.state.seen == 0 { 0.0 } else { self.state.labeled as f64 / self.state.seen as f64 };
        self.state.labeled = 0;
        self.state.seen = 0;
        self.state.elapsed = seconds;
        self.state.log.push(LogRecord { iter: self.state.iteration, calc_acc, sym_acc, label_frac, seconds });
    }
}

fn pick_weighted<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> usize {
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return rng.random_range(0..w.len());
    }
    let mut u = rng.random::<f64>() * total;
    for (k, &p) in w.iter().enumerate() {
        if u < p {
            return k;
        }
        u -= p;
    }
    w.len() - 1
}

/// Supervised steps on a random subset of the labeled pool.
fn pretrain(model: &mut PerceptionModel, pool: &SymbolPool, cfg: &TrainConfig) -> Result<(), LearningError> {
    let all: Vec<(Symbol, &[f64])> = pool.labeled().collect();
    let mut rng = stream(cfg.seed, &[TAG_PRETRAIN]);
    let n = cfg.pretrain_samples.min(all.len());
    let chosen: Vec<usize> = index::sample(&mut rng, all.len(), n).into_vec();
    for _ in 0..cfg.pretrain_steps {
        let b = cfg.batch_size.min(n);
        let mut grad = Gradient::zeros(model.num_params());
        for k in index::sample(&mut rng, n, b) {
            let (label, x) = all[chosen[k]];
            model.accumulate_symbol(x, label, 1.0 / b as f64, &mut grad);
        }
        model.apply_update(&grad, 1.0)?;
    }
    Ok(())
}

/// Runs a whole training job without checkpoints.
pub fn train<E: FnMut(&PerceptionModel) -> (f64, f64)>(
    cg: &CompiledGrammar,
    data: &[Observation],
    pool: Option<&SymbolPool>,
    cfg: &TrainConfig,
    eval: &mut E,
) -> Result<(PerceptionModel, TrainLog), LearningError> {
    let mut t = Trainer::new(cg, data, pool, cfg)?;
    t.run(eval, &mut |_| Ok(()))?;
    let s = t.into_state();
    Ok((s.model, s.log))
}

fn train_as<E: FnMut(&PerceptionModel) -> (f64, f64)>(
    allowed: &[Method],
    cg: &CompiledGrammar,
    data: &[Observation],
    cfg: &TrainConfig,
    eval: &mut E,
) -> Result<(PerceptionModel, TrainLog), LearningError> {
    if !allowed.contains(&cfg.method) {
        return Err(LearningError::Config(format!("method {} not handled here", cfg.method)));
    }
    train(cg, data, None, cfg, eval)
}

pub fn train_ngs_mbs<E: FnMut(&PerceptionModel) -> (f64, f64)>(
    cg: &CompiledGrammar,
    data: &[Observation],
    cfg: &TrainConfig,
    eval: &mut E,
) -> Result<(PerceptionModel, TrainLog), LearningError> {
    train_as(&[Method::NgsMbs], cg, data, cfg, eval)
}

pub fn train_reinforce<E: FnMut(&PerceptionModel) -> (f64, f64)>(
    cg: &CompiledGrammar,
    data: &[Observation],
    cfg: &TrainConfig,
    eval: &mut E,
) -> Result<(PerceptionModel, TrainLog), LearningError> {
    train_as(&[Method::NsRl, Method::NgsRl], cg, data, cfg, eval)
}

pub fn train_mapo_lite<E: FnMut(&PerceptionModel) -> (f64, f64)>(
    cg: &CompiledGrammar,
    data: &[Observation],
    cfg: &TrainConfig,
    eval: &mut E,
) -> Result<(PerceptionModel, TrainLog), LearningError> {
    train_as(&[Method::NgsMapo], cg, data, cfg, eval)
}

/// `p(z | x, y)` over the formulas of one length, with `p_θ` normalized
/// over the language at that length.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    /// Formulas executing to `y` with their posterior probabilities.
    pub support: Vec<(SymbolString, f64)>,
    /// Prior mass of the support, `C = Σ_{z ∈ Q} p_θ(z | x)`.
    pub mass: f64,
}

/// `p_θ(z | x)` restricted to and renormalized over the language.
pub fn language_distribution(cg: &CompiledGrammar, pm: &ProbMatrix) -> Result<Vec<(SymbolString, f64)>, LearningError> {
    let strings = cg.grammar().enumerate_language(pm.len()).map_err(|_| LearningError::TooLong(pm.len()))?;
    let weights: Vec<f64> = strings.iter().map(|z| pm.string_prob(z)).collect();
    let total: f64 = weights.iter().sum();
    Ok(strings.into_iter().zip(weights).map(|(z, w)| (z, w / total)).collect())
}

pub fn exact_posterior_pm(cg: &CompiledGrammar, pm: &ProbMatrix, y: Value) -> Result<Posterior, LearningError> {
    let prior = language_distribution(cg, pm)?;
    let support: Vec<(SymbolString, f64)> = prior.into_iter().filter(|(z, _)| execute(cg.cnf(), z) == Ok(y)).collect();
    let mass: f64 = support.iter().map(|(_, p)| p).sum();
    if support.is_empty() || mass <= 0.0 {
        return Err(LearningError::EmptySupport);
    }
    Ok(Posterior { support: support.into_iter().map(|(z, p)| (z, p / mass)).collect(), mass })
}

pub fn exact_posterior(
    cg: &CompiledGrammar,
    obs: &Observation,
    m: &PerceptionModel,
) -> Result<Posterior, LearningError> {
    exact_posterior_pm(cg, &m.forward(&obs.x)?, obs.y)
}

/// KL divergence of the smoothed posterior `p'(z) ∝ p_θ(z)(1[f(z) = y] + ε)`
/// from the exact posterior, by enumeration, next to the closed form
/// `log(1 + ε/C) - log(1 + ε)`.
pub fn kl_smoothed_pm(
    cg: &CompiledGrammar,
    pm: &ProbMatrix,
    y: Value,
    epsilon: f64,
) -> Result<(f64, f64), LearningError> {
    let prior = language_distribution(cg, pm)?;
    let inside: Vec<bool> = prior.iter().map(|(z, _)| execute(cg.cnf(), z) == Ok(y)).collect();
    let c: f64 = prior.iter().zip(&inside).filter(|(_, &q)| q).map(|((_, p), _)| p).sum();
    if c <= 0.0 {
        return Err(LearningError::EmptySupport);
    }
    let smoothed_total: f64 =
        prior.iter().zip(&inside).map(|((_, p), &q)| p * (if q { 1.0 } else { 0.0 } + epsilon)).sum();
    let mut kl = 0.0;
    for ((_, p), &q) in prior.iter().zip(&inside) {
        if q && *p > 0.0 {
            let exact = p / c;
            let smooth = p * (1.0 + epsilon) / smoothed_total;
            kl += exact * (exact.ln() - smooth.ln());
        }
    }
    let closed = (epsilon / c).ln_1p() - epsilon.ln_1p();
    Ok((kl, closed))
}

pub fn kl_smoothed(
    cg: &CompiledGrammar,
    obs: &Observation,
    m: &PerceptionModel,
    epsilon: f64,
) -> Result<(f64, f64), LearningError> {
    kl_smoothed_pm(cg, &m.forward(&obs.x)?, obs.y, epsilon)
}

/// Enumerated expected REINFORCE descent direction with independent
/// sampling and no baseline: `Σ_z r(z) p_θ(z | x) ∇(-log p_θ(z | x))` over
/// all `14^l` strings.
pub fn exact_policy_gradient(
    cg: &CompiledGrammar,
    m: &PerceptionModel,
    obs: &Observation,
) -> Result<Gradient, LearningError> {
    let l = obs.len();
    if l > 4 {
        return Err(LearningError::TooLong(l));
    }
    let pm = m.forward(&obs.x)?;
    let mut grad = Gradient::zeros(m.num_params());
    let mut ids = vec![0u8; l];
    let total = NUM_SYMBOLS.pow(l as u32);
    for code in 0..total {
        let mut c = code;
        for slot in ids.iter_mut() {
            *slot = (c % NUM_SYMBOLS) as u8;
            c /= NUM_SYMBOLS;
        }
        let z = SymbolString::from_ids(&ids).expect("ids below 14");
        if reward(cg, &z, obs.y) > 0.0 {
            m.accumulate_nll_gradient(&obs.x, &z, pm.string_prob(&z), &mut grad)?;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, DatasetSpec, LengthMix};
    use crate::perception::FeatureSeq;

    fn s(t: &str) -> SymbolString {
        t.parse().unwrap()
    }

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            mix: vec![LengthMix { length: 1, train: 30, test: 10 }, LengthMix { length: 3, train: 30, test: 10 }],
            per_class: 20,
            seed: 4,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn posterior_examples() {
        let cg = CompiledGrammar::arithmetic();
        let p = exact_posterior_pm(&cg, &ProbMatrix::uniform(1), Value::integer(7)).unwrap();
        assert_eq!(p.support, vec![(s("7"), 1.0)]);
        assert!((p.mass - 0.1).abs() < 1e-15);

        let p = exact_posterior_pm(&cg, &ProbMatrix::uniform(3), Value::integer(3)).unwrap();
        let n = p.support.len() as f64;
        assert!(p.support.iter().all(|(_, q)| (q - 1.0 / n).abs() < 1e-12));
        for z in ["1+2", "2+1", "3*1", "3/1", "1*3", "9/3", "6/2", "3-0", "0+3", "4-1"] {
            assert!(p.support.iter().any(|(t, _)| *t == s(z)), "{z}");
        }
        assert!(matches!(
            exact_posterior_pm(&cg, &ProbMatrix::uniform(3), Value::integer(1000)),
            Err(LearningError::EmptySupport)
        ));
    }

    #[test]
    fn kl_limits() {
        let cg = CompiledGrammar::arithmetic();
        // every length-1 string executes to its own digit: with a one-hot
        // row the support carries all the mass
        let pm = ProbMatrix::one_hot(&s("4"));
        let (kl, closed) = kl_smoothed_pm(&cg, &pm, Value::integer(4), 0.5).unwrap();
        assert!(kl.abs() < 1e-15 && closed.abs() < 1e-15);
        let pm = ProbMatrix::uniform(3);
        let (kl, closed) = kl_smoothed_pm(&cg, &pm, Value::integer(3), 1e-12).unwrap();
        assert!(kl.abs() < 1e-9 && (kl - closed).abs() < 1e-12);
    }

    #[test]
    fn no_reward_no_gradient() {
        let m = PerceptionModel::new(Architecture::Linear, 16, &mut stream(1, &[]));
        let obs = Observation { x: FeatureSeq::new(vec![vec![0.1; 16]]), y: Value::integer(3) };
        let mut g = Gradient::zeros(m.num_params());
        accumulate_policy_gradient(&m, &obs, &s("5"), 0.0, 1.0, &mut g).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn mbs_step_raises_label_likelihood() {
        let cg = CompiledGrammar::arithmetic();
        let ds = generate_dataset(&cg, &tiny_spec()).unwrap();
        let obs = &ds.train.observations()[..1];
        let cfg = TrainConfig { batch_size: 1, iterations: 1, ..TrainConfig::default() };
        let mut t = Trainer::new(&cg, obs, None, &cfg).unwrap();
        let before = t.model().clone();
        assert_eq!(t.step().unwrap(), 1);
        // a length-1 example always has a correction, namely the answer digit
        let label = SymbolString::new(vec![Symbol::digit(obs[0].y.as_digit().unwrap())]);
        assert!(t.model().nll(&obs[0].x, &label).unwrap() < before.nll(&obs[0].x, &label).unwrap());
    }

    #[test]
    fn trainers_are_deterministic() {
        let cg = CompiledGrammar::arithmetic();
        let ds = generate_dataset(&cg, &tiny_spec()).unwrap();
        for method in Method::ALL {
            let cfg = TrainConfig { method, iterations: 30, batch_size: 8, eval_every: 10, ..TrainConfig::default() };
            let run = || {
                let mut t = Trainer::new(&cg, ds.train.observations(), None, &cfg).unwrap();
                t.run(&mut |_| (0.0, 0.0), &mut |_| Ok(())).unwrap();
                t.into_state()
            };
            let a = run();
            let b = run();
            assert_eq!(a.model, b.model, "{method}");
            assert_eq!(a.log.records.len(), 4);
            assert_eq!(a.log.records.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![0, 10, 20, 30]);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cg = CompiledGrammar::arithmetic();
        let ds = generate_dataset(&cg, &tiny_spec()).unwrap();
        let cfg = TrainConfig {
            method: Method::NgsMapo,
            iterations: 20,
            batch_size: 8,
            eval_every: 5,
            ..TrainConfig::default()
        };
        let obs = ds.train.observations();
        let mut full = Trainer::new(&cg, obs, None, &cfg).unwrap();
        full.run(&mut |_| (0.5, 0.5), &mut |_| Ok(())).unwrap();

        let half = TrainConfig { iterations: 10, ..cfg.clone() };
        let mut first = Trainer::new(&cg, obs, None, &half).unwrap();
        first.run(&mut |_| (0.5, 0.5), &mut |_| Ok(())).unwrap();
        let saved = serde_json::to_string(first.state()).unwrap();
        let state: TrainerState = serde_json::from_str(&saved).unwrap();
        let mut second = Trainer::resume(&cg, obs, &cfg, state).unwrap();
        second.run(&mut |_| (0.5, 0.5), &mut |_| Ok(())).unwrap();
        assert_eq!(second.state().model, full.state().model);
        assert_eq!(second.state().buffers, full.state().buffers);
    }

    #[test]
    fn data_fraction_subsets() {
        let cg = CompiledGrammar::arithmetic();
        let ds = generate_dataset(&cg, &tiny_spec()).unwrap();
        let cfg = TrainConfig { data_fraction: 0.25, ..TrainConfig::default() };
        let t = Trainer::new(&cg, ds.train.observations(), None, &cfg).unwrap();
        assert_eq!(t.active_indices().len(), 15);
        assert!(TrainConfig { data_fraction: 0.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn pretraining_learns_symbols() {
        let cg = CompiledGrammar::arithmetic();
        let ds = generate_dataset(&cg, &tiny_spec()).unwrap();
        let cfg =
            TrainConfig { pretrain_samples: 280, pretrain_steps: 300, learning_rate: 0.05, ..TrainConfig::default() };
        let t = Trainer::new(&cg, ds.train.observations(), Some(&ds.train_pool), &cfg).unwrap();
        let correct = ds
            .train_pool
            .labeled()
            .filter(|(sym, x)| {
                let p = t.model().predict(x);
                let best = (0..NUM_SYMBOLS).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
                best == sym.index()
            })
            .count();
        assert!(correct as f64 / ds.train_pool.len() as f64 > 0.9);
        assert!(Trainer::new(&cg, ds.train.observations(), None, &cfg).is_err());
    }

    #[test]
    fn log_csv_layout() {
        let mut log = TrainLog::default();
        log.push(LogRecord { iter: 0, calc_acc: 0.25, sym_acc: 0.5, label_frac: 0.0, seconds: 0.0 });
        log.push(LogRecord { iter: 500, calc_acc: 0.75, sym_acc: 0.875, label_frac: 0.5, seconds: 1.23456 });
        assert_eq!(
            log.to_csv(),
            "iter,calc_acc,sym_acc,label_frac,seconds\n0,0.25,0.5,0,0.000\n500,0.75,0.875,0.5,1.235\n"
        );
        assert_eq!(log.iterations_to(0.7), Some(500));
        assert_eq!(log.iterations_to(0.9), None);
    }
}
