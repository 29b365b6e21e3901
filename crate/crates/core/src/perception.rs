//! Trainable perception: a shallow softmax classifier applied independently
//! to each pre-segmented symbol slot, plus Adam updates and checkpoints.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parsing::ProbMatrix;
use crate::symbol::{Symbol, SymbolString, NUM_SYMBOLS};

pub const DEFAULT_FEATURE_DIM: usize = 16;
pub const DEFAULT_LEARNING_RATE: f64 = 5e-4;

/// Scores are clamped to `[-SCORE_CLAMP, SCORE_CLAMP]` before the softmax, so
/// every probability is at least `exp(-2 * SCORE_CLAMP) / 14 > exp(-50)`.
pub const SCORE_CLAMP: f64 = 23.0;

const CHECKPOINT_FORMAT: &str = "ngs-perception";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("feature dimension {got} does not match model input {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label length {labels} does not match {positions} positions")]
    LengthMismatch { positions: usize, labels: usize },
    #[error("gradient has {got} entries, model has {expected}")]
    GradientShape { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One feature vector per symbol slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureSeq(Vec<Vec<f64>>);

impl FeatureSeq {
    /// Panics if rows are empty or ragged.
    pub fn new(rows: Vec<Vec<f64>>) -> Self {
        assert!(!rows.is_empty(), "feature sequence needs at least one slot");
        let d = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == d), "ragged feature sequence");
        FeatureSeq(rows)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.0[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    /// Scores `W x + b`.
    Linear,
    /// Scores `W2 tanh(W1 x + b1) + b2`.
    Mlp { hidden: usize },
}

impl Architecture {
    fn num_params(self, d: usize) -> usize {
        match self {
            Architecture::Linear => NUM_SYMBOLS * d + NUM_SYMBOLS,
            Architecture::Mlp { hidden } => hidden * d + hidden + NUM_SYMBOLS * hidden + NUM_SYMBOLS,
        }
    }
}

/// Flat gradient in the model's parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(n: usize) -> Self {
        Gradient(vec![0.0; n])
    }

    pub fn add_scaled(&mut self, other: &Gradient, w: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += w * b;
        }
    }

    pub fn scale(&mut self, w: f64) {
        self.0.iter_mut().for_each(|a| *a *= w);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: vec![0.0; n],
            second: vec![0.0; n],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptionModel {
    arch: Architecture,
    input_dim: usize,
    params: Vec<f64>,
    optimizer: Adam,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: PerceptionModel,
}

impl PerceptionModel {
    /// Gaussian initialization with standard deviation `1/sqrt(fan_in)`,
    /// zero biases.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, input_dim: usize, rng: &mut R) -> Self {
        let mut m = PerceptionModel::zeros(arch, input_dim);
        let d = input_dim;
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, params: &mut [f64]| {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            for p in &mut params[range] {
                *p = normal.sample(rng);
            }
        };
        match arch {
            Architecture::Linear => fill(0..NUM_SYMBOLS * d, d, &mut m.params),
            Architecture::Mlp { hidden } => {
                fill(0..hidden * d, d, &mut m.params);
                let w2 = hidden * d + hidden;
                fill(w2..w2 + NUM_SYMBOLS * hidden, hidden, &mut m.params);
            }
        }
        m
    }

    pub fn zeros(arch: Architecture, input_dim: usize) -> Self {
        let n = arch.num_params(input_dim);
        PerceptionModel { arch, input_dim, params: vec![0.0; n], optimizer: Adam::new(n, DEFAULT_LEARNING_RATE) }
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.optimizer.learning_rate = lr;
        self
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    fn check_dim(&self, x: &FeatureSeq) -> Result<(), PerceptionError> {
        if x.dim() != self.input_dim {
            return Err(PerceptionError::DimensionMismatch { expected: self.input_dim, got: x.dim() });
        }
        Ok(())
    }

    /// Raw (unclamped) scores and, for the MLP, hidden activations.
    fn scores(&self, x: &[f64]) -> ([f64; NUM_SYMBOLS], Vec<f64>) {
        let d = self.input_dim;
        let p = &self.params;
        let mut s = [0.0; NUM_SYMBOLS];
        match self.arch {
            Architecture::Linear => {
                let b = NUM_SYMBOLS * d;
                for c in 0..NUM_SYMBOLS {
                    let w = &p[c * d..(c + 1) * d];
                    s[c] = p[b + c] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
                (s, Vec::new())
            }
            Architecture::Mlp { hidden } => {
                let b1 = hidden * d;
                let w2 = b1 + hidden;
                let b2 = w2 + NUM_SYMBOLS * hidden;
                let h: Vec<f64> = (0..hidden)
                    .map(|j| {
                        let w = &p[j * d..(j + 1) * d];
                        (p[b1 + j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).tanh()
                    })
                    .collect();
                for c in 0..NUM_SYMBOLS {
                    let w = &p[w2 + c * hidden..w2 + (c + 1) * hidden];
                    s[c] = p[b2 + c] + w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
                }
                (s, h)
            }
        }
    }

    fn softmax(scores: &[f64; NUM_SYMBOLS]) -> [f64; NUM_SYMBOLS] {
        let clamped = scores.map(|s| s.clamp(-SCORE_CLAMP, SCORE_CLAMP));
        let max = clamped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = clamped.map(|s| (s - max).exp());
        let z: f64 = e.iter().sum();
        e.map(|v| v / z)
    }

    /// Symbol distribution for a single feature vector.
    pub fn predict(&self, x: &[f64]) -> [f64; NUM_SYMBOLS] {
        Self::softmax(&self.scores(x).0)
    }

    /// Per-position softmax distributions.
    pub fn forward(&self, x: &FeatureSeq) -> Result<ProbMatrix, PerceptionError> {
        self.check_dim(x)?;
        let rows = x.rows().iter().map(|r| self.predict(r)).collect();
        Ok(ProbMatrix::new(rows).expect("softmax rows are stochastic"))
    }

    /// `-log p(z | x)` under the factorized model.
    pub fn nll(&self, x: &FeatureSeq, z: &SymbolString) -> Result<f64, PerceptionError> {
        self.check_labels(x, z)?;
        Ok(x.rows().iter().zip(z.symbols()).map(|(r, s)| -self.predict(r)[s.index()].ln()).sum())
    }

    fn check_labels(&self, x: &FeatureSeq, z: &SymbolString) -> Result<(), PerceptionError> {
        self.check_dim(x)?;
        if x.len() != z.len() {
            return Err(PerceptionError::LengthMismatch { positions: x.len(), labels: z.len() });
        }
        Ok(())
    }

    /// Gradient of `-log p(z | x)`, summed over positions.
    pub fn nll_gradient(&self, x: &FeatureSeq, z: &SymbolString) -> Result<Gradient, PerceptionError> {
        let mut g = Gradient::zeros(self.num_params());
        self.accumulate_nll_gradient(x, z, 1.0, &mut g)?;
        Ok(g)
    }

    /// Adds `weight * ∇(-log p(z | x))` into `grad`.
    pub fn accumulate_nll_gradient(
        &self,
        x: &FeatureSeq,
        z: &SymbolString,
        weight: f64,
        grad: &mut Gradient,
    ) -> Result<(), PerceptionError> {
        self.check_labels(x, z)?;
        for (row, &label) in x.rows().iter().zip(z.symbols()) {
            self.accumulate_symbol(row, label, weight, grad);
        }
        Ok(())
    }

    /// Single-slot cross-entropy gradient, used for supervised pretraining.
    pub fn accumulate_symbol(&self, x: &[f64], label: Symbol, weight: f64, grad: &mut Gradient) {
        let d = self.input_dim;
        let (raw, h) = self.scores(x);
        let p = Self::softmax(&raw);
        let mut ds = [0.0; NUM_SYMBOLS];
        for c in 0..NUM_SYMBOLS {
            if raw[c].abs() <= SCORE_CLAMP {
                let target = if c == label.index() { 1.0 } else { 0.0 };
                ds[c] = weight * (p[c] - target);
            }
        }
        let g = &mut grad.0;
        match self.arch {
            Architecture::Linear => {
                let b = NUM_SYMBOLS * d;
                for c in 0..NUM_SYMBOLS {
                    if ds[c] == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        g[c * d + k] += ds[c] * x[k];
                    }
                    g[b + c] += ds[c];
                }
            }
            Architecture::Mlp { hidden } => {
                let b1 = hidden * d;
                let w2 = b1 + hidden;
                let b2 = w2 + NUM_SYMBOLS * hidden;
                let mut dh = vec![0.0; hidden];
                for c in 0..NUM_SYMBOLS {
                    if ds[c] == 0.0 {
                        continue;
                    }
                    for j in 0..hidden {
                        g[w2 + c * hidden + j] += ds[c] * h[j];
                        dh[j] += ds[c] * self.params[w2 + c * hidden + j];
                    }
                    g[b2 + c] += ds[c];
                }
                for j in 0..hidden {
                    let da = dh[j] * (1.0 - h[j] * h[j]);
                    for k in 0..d {
                        g[j * d + k] += da * x[k];
                    }
                    g[b1 + j] += da;
                }
            }
        }
    }

    /// One Adam descent step on `scale * grad`.
    pub fn apply_update(&mut self, grad: &Gradient, scale: f64) -> Result<(), PerceptionError> {
        if grad.0.len() != self.params.len() {
            return Err(PerceptionError::GradientShape { expected: self.params.len(), got: grad.0.len() });
        }
        let opt = &mut self.optimizer;
        opt.step += 1;
        let t = opt.step as i32;
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        for i in 0..self.params.len() {
            let g = scale * grad.0[i];
            opt.first[i] = opt.beta1 * opt.first[i] + (1.0 - opt.beta1) * g;
            opt.second[i] = opt.beta2 * opt.second[i] + (1.0 - opt.beta2) * g * g;
            let m = opt.first[i] / c1;
            let v = opt.second[i] / c2;
            self.params[i] -= opt.learning_rate * m / (v.sqrt() + opt.epsilon);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, model: self.clone() };
        serde_json::to_string(&ck).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PerceptionError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| PerceptionError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(PerceptionError::Checkpoint(format!("unsupported format {} v{}", ck.format, ck.version)));
        }
        let m = ck.model;
        let n = m.arch.num_params(m.input_dim);
        if m.params.len() != n || m.optimizer.first.len() != n || m.optimizer.second.len() != n {
            return Err(PerceptionError::Checkpoint("parameter count does not match architecture".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), PerceptionError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PerceptionError> {
        PerceptionModel::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn random_seq<R: Rng>(l: usize, d: usize, rng: &mut R) -> FeatureSeq {
        FeatureSeq::new((0..l).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = PerceptionModel::zeros(Architecture::Linear, 16);
        let mut rng = stream(1, &[]);
        let pm = m.forward(&random_seq(5, 16, &mut rng)).unwrap();
        for i in 0..5 {
            for &p in pm.row(i) {
                assert!((p - 1.0 / 14.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rows_normalized_and_floored() {
        let mut rng = stream(2, &[]);
        for k in 0..1000 {
            let arch = if k % 2 == 0 { Architecture::Linear } else { Architecture::Mlp { hidden: 8 } };
            let mut m = PerceptionModel::new(arch, 6, &mut rng);
            // exaggerate some models so clamping engages
            if k % 10 == 0 {
                m.params_mut().iter_mut().for_each(|p| *p *= 200.0);
            }
            let pm = m.forward(&random_seq(3, 6, &mut rng)).unwrap();
            for i in 0..3 {
                let s: f64 = pm.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(pm.row(i).iter().all(|&p| p >= (-50.0f64).exp()));
            }
        }
    }

    #[test]
    fn weight_scaling_keeps_argmax() {
        let mut rng = stream(3, &[]);
        let m = PerceptionModel::new(Architecture::Linear, 16, &mut rng);
        let x = random_seq(4, 16, &mut rng);
        let argmax = |pm: &ProbMatrix, i: usize| {
            (0..NUM_SYMBOLS).max_by(|&a, &b| pm.row(i)[a].total_cmp(&pm.row(i)[b])).unwrap()
        };
        let base = m.forward(&x).unwrap();
        for c in [0.1, 0.5, 3.0] {
            let mut scaled = m.clone();
            scaled.params_mut().iter_mut().for_each(|p| *p *= c);
            let pm = scaled.forward(&x).unwrap();
            for i in 0..4 {
                assert_eq!(argmax(&pm, i), argmax(&base, i));
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = PerceptionModel::zeros(Architecture::Linear, 16);
        let x = FeatureSeq::new(vec![vec![0.0; 15]]);
        assert!(matches!(m.forward(&x), Err(PerceptionError::DimensionMismatch { expected: 16, got: 15 })));
        let x = FeatureSeq::new(vec![vec![0.0; 16]]);
        let z: SymbolString = "1+2".parse().unwrap();
        assert!(matches!(m.nll_gradient(&x, &z), Err(PerceptionError::LengthMismatch { .. })));
    }

    #[test]
    fn gradient_vanishes_at_one_hot_optimum() {
        let mut m = PerceptionModel::zeros(Architecture::Linear, 16);
        // bias for '7' saturates the clamp; other scores stay in range
        let b = NUM_SYMBOLS * 16;
        m.params_mut()[b + 7] = SCORE_CLAMP;
        for c in 0..NUM_SYMBOLS {
            if c != 7 {
                m.params_mut()[b + c] = -SCORE_CLAMP;
            }
        }
        let x = FeatureSeq::new(vec![vec![0.0; 16]]);
        let g = m.nll_gradient(&x, &"7".parse().unwrap()).unwrap();
        assert!(g.norm() <= 1e-6, "norm {}", g.norm());
    }

    #[test]
    fn batch_gradient_is_sum() {
        let mut rng = stream(4, &[]);
        let m = PerceptionModel::new(Architecture::Mlp { hidden: 5 }, 16, &mut rng);
        let (x1, x2) = (random_seq(3, 16, &mut rng), random_seq(1, 16, &mut rng));
        let (z1, z2): (SymbolString, SymbolString) = ("1+2".parse().unwrap(), "9".parse().unwrap());
        let mut both = Gradient::zeros(m.num_params());
        m.accumulate_nll_gradient(&x1, &z1, 1.0, &mut both).unwrap();
        m.accumulate_nll_gradient(&x2, &z2, 1.0, &mut both).unwrap();
        let mut sum = m.nll_gradient(&x1, &z1).unwrap();
        sum.add_scaled(&m.nll_gradient(&x2, &z2).unwrap(), 1.0);
        for (a, b) in both.0.iter().zip(&sum.0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut rng = stream(5, &[]);
        let mut m = PerceptionModel::new(Architecture::Linear, 16, &mut rng);
        let before = m.params().to_vec();
        m.apply_update(&Gradient::zeros(m.num_params()), 1.0).unwrap();
        assert_eq!(m.params(), &before[..]);
        assert!(m.apply_update(&Gradient::zeros(3), 1.0).is_err());
    }

    #[test]
    fn fixed_gradient_descends_linear_surrogate() {
        let mut rng = stream(6, &[]);
        let mut m = PerceptionModel::new(Architecture::Linear, 16, &mut rng);
        let g = Gradient((0..m.num_params()).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect());
        let surrogate = |p: &[f64]| p.iter().zip(&g.0).map(|(a, b)| a * b).sum::<f64>();
        let s0 = surrogate(m.params());
        m.apply_update(&g, 1.0).unwrap();
        let s1 = surrogate(m.params());
        m.apply_update(&g, 1.0).unwrap();
        let s2 = surrogate(m.params());
        assert!(s1 < s0 && s2 < s1);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = stream(7, &[]);
        let mut m = PerceptionModel::new(Architecture::Mlp { hidden: 7 }, 16, &mut rng);
        let x = random_seq(3, 16, &mut rng);
        let g = m.nll_gradient(&x, &"4*5".parse().unwrap()).unwrap();
        m.apply_update(&g, 1.0).unwrap();
        let back = PerceptionModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert!(PerceptionModel::from_json("{\"format\":\"other\"}").is_err());
    }
}
