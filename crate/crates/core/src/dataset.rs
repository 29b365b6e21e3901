//! Synthetic handwritten-formula data.
//!
//! Each symbol class has a prototype, the unit basis vector `e_c` in the
//! first 14 feature dimensions. A pool holds `K` noisy instances per class,
//! and the training and test splits draw symbol features from independent
//! pools. Formulas are sampled uniformly from the language at each length,
//! skipping any that divide by zero.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parsing::CompiledGrammar;
use crate::perception::{FeatureSeq, DEFAULT_FEATURE_DIM};
use crate::reasoning::{execute, Value};
use crate::rng::{stream, StreamRng};
use crate::symbol::{Symbol, SymbolString, NUM_SYMBOLS};

const TAG_POOL: u64 = 1;
const TAG_FORMULA: u64 = 2;
const TAG_FEATURES: u64 = 3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("{path}: line {line}: {msg}")]
    Record { path: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthMix {
    pub length: usize,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub mix: Vec<LengthMix>,
    pub feature_dim: usize,
    pub sigma: f64,
    pub per_class: usize,
    pub seed: u64,
    /// Multiplies every count in `mix`.
    pub scale: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            mix: vec![
                LengthMix { length: 1, train: 1000, test: 200 },
                LengthMix { length: 3, train: 1000, test: 200 },
                LengthMix { length: 5, train: 2000, test: 400 },
                LengthMix { length: 7, train: 6000, test: 1200 },
            ],
            feature_dim: DEFAULT_FEATURE_DIM,
            sigma: 0.3,
            per_class: 200,
            seed: 0,
            scale: 1.0,
        }
    }
}

impl DatasetSpec {
    /// The desk-scale variant: every count times 0.2.
    pub fn desk_scale(seed: u64) -> Self {
        DatasetSpec { seed, scale: 0.2, ..DatasetSpec::default() }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Spec(m));
        if self.feature_dim < NUM_SYMBOLS {
            return bad(format!("feature_dim {} is below {NUM_SYMBOLS}", self.feature_dim));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {} must be finite and nonnegative", self.sigma));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad(format!("scale {} must be positive", self.scale));
        }
        if self.per_class == 0 {
            return bad("per_class must be positive".into());
        }
        for m in &self.mix {
            if m.length % 2 == 0 || m.length > crate::grammar::MAX_ENUMERATION_LENGTH {
                return bad(format!("length {} must be odd and at most 7", m.length));
            }
        }
        Ok(())
    }

    /// `(length, train, test)` after scaling.
    pub fn scaled_mix(&self) -> Vec<LengthMix> {
        let s = |n: usize| (n as f64 * self.scale).round() as usize;
        self.mix.iter().map(|m| LengthMix { length: m.length, train: s(m.train), test: s(m.test) }).collect()
    }
}

/// What a learner sees: features and the final answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: FeatureSeq,
    pub y: Value,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// A split keeps the hidden formulas apart from the observations, so that
/// anything given only `observations()` cannot read them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    observations: Vec<Observation>,
    truths: Vec<SymbolString>,
}

impl Split {
    pub fn new(observations: Vec<Observation>, truths: Vec<SymbolString>) -> Self {
        assert_eq!(observations.len(), truths.len(), "one hidden formula per observation");
        Split { observations, truths }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    /// Ground-truth formulas, for evaluation and diagnostics only.
    pub fn hidden_truths(&self) -> &[SymbolString] {
        &self.truths
    }
}

/// Labeled symbol instances, `instances[c]` for class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolPool {
    instances: Vec<Vec<Vec<f64>>>,
}

impl SymbolPool {
    pub fn class(&self, s: Symbol) -> &[Vec<f64>] {
        &self.instances[s.index()]
    }

    pub fn len(&self) -> usize {
        self.instances.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labeled(&self) -> impl Iterator<Item = (Symbol, &[f64])> {
        self.instances
            .iter()
            .enumerate()
            .flat_map(|(c, v)| v.iter().map(move |x| (Symbol::new(c as u8).expect("class id"), x.as_slice())))
    }

    fn pick<R: Rng + ?Sized>(&self, s: Symbol, rng: &mut R) -> Vec<f64> {
        let class = self.class(s);
        class[rng.random_range(0..class.len())].clone()
    }
}

/// Class prototype: `e_c` in the first 14 dimensions, zero elsewhere.
pub fn prototype(s: Symbol, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[s.index()] = 1.0;
    v
}

fn build_pool(spec: &DatasetSpec, rng: &mut StreamRng) -> SymbolPool {
    let noise = Normal::new(0.0, spec.sigma).expect("sigma validated");
    let instances = Symbol::all()
        .map(|s| {
            (0..spec.per_class)
                .map(|_| prototype(s, spec.feature_dim).into_iter().map(|p| p + noise.sample(rng)).collect())
                .collect()
        })
        .collect();
    SymbolPool { instances }
}

/// Independent training and test pools.
pub fn build_symbol_pools(spec: &DatasetSpec) -> (SymbolPool, SymbolPool) {
    let train = build_pool(spec, &mut stream(spec.seed, &[TAG_POOL, 0]));
    let test = build_pool(spec, &mut stream(spec.seed, &[TAG_POOL, 1]));
    (train, test)
}

/// Uniform draw from the language at `length`, redrawn until it executes
/// without dividing by zero.
pub fn sample_formula<R: Rng + ?Sized>(cg: &CompiledGrammar, length: usize, rng: &mut R) -> (SymbolString, Value) {
    let automaton = cg.automaton(length);
    loop {
        let z = automaton.sample_uniform(rng).expect("language nonempty at odd lengths");
        if let Ok(y) = execute(cg.cnf(), &z) {
            return (z, y);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Split,
    pub test: Split,
    /// Labeled training-pool instances, used only for optional pretraining.
    pub train_pool: SymbolPool,
}

fn build_split(cg: &CompiledGrammar, spec: &DatasetSpec, pool: &SymbolPool, split: u64) -> Split {
    let mut obs = Vec::new();
    let mut truths = Vec::new();
    for (group, m) in spec.scaled_mix().iter().enumerate() {
        let count = if split == 0 { m.train } else { m.test };
        for i in 0..count {
            let tags = [split, group as u64, i as u64];
            let mut frng = stream(spec.seed, &[TAG_FORMULA, tags[0], tags[1], tags[2]]);
            let (z, y) = sample_formula(cg, m.length, &mut frng);
            let mut xrng = stream(spec.seed, &[TAG_FEATURES, tags[0], tags[1], tags[2]]);
            let x = FeatureSeq::new(z.symbols().iter().map(|&s| pool.pick(s, &mut xrng)).collect());
            obs.push(Observation { x, y });
            truths.push(z);
        }
    }
    Split::new(obs, truths)
}

pub fn generate_dataset(cg: &CompiledGrammar, spec: &DatasetSpec) -> Result<Dataset, DatasetError> {
    spec.validate()?;
    let (train_pool, test_pool) = build_symbol_pools(spec);
    let train = build_split(cg, spec, &train_pool, 0);
    let test = build_split(cg, spec, &test_pool, 1);
    Ok(Dataset { spec: spec.clone(), train, test, train_pool })
}

#[derive(Serialize, Deserialize)]
struct Hidden {
    hidden: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    len: usize,
    y: Value,
    z: Hidden,
    x: FeatureSeq,
}

#[derive(Serialize, Deserialize)]
struct PoolRecord {
    label: u8,
    x: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    spec: DatasetSpec,
    train: usize,
    test: usize,
    pool: usize,
}

const MANIFEST_FORMAT: &str = "ngs-dataset-v1";

fn write_lines<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DatasetError::Record {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn split_records(split: &Split) -> impl Iterator<Item = ExampleRecord> + '_ {
    split.observations.iter().zip(&split.truths).map(|(o, z)| ExampleRecord {
        len: z.len(),
        y: o.y,
        z: Hidden { hidden: z.ids() },
        x: o.x.clone(),
    })
}

fn read_split(path: &Path) -> Result<Split, DatasetError> {
    let records: Vec<ExampleRecord> = read_lines(path)?;
    let mut obs = Vec::with_capacity(records.len());
    let mut truths = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let bad = |msg: String| DatasetError::Record { path: path.display().to_string(), line: i + 1, msg };
        let z = SymbolString::from_ids(&r.z.hidden).map_err(|e| bad(e.to_string()))?;
        if z.len() != r.len || r.x.len() != r.len {
            return Err(bad(format!("length field {} disagrees with the record", r.len)));
        }
        obs.push(Observation { x: r.x, y: r.y });
        truths.push(z);
    }
    Ok(Split::new(obs, truths))
}

impl Dataset {
    /// Writes `train.jsonl`, `test.jsonl`, `pool.jsonl` and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir)?;
        write_lines(&dir.join("train.jsonl"), split_records(&self.train))?;
        write_lines(&dir.join("test.jsonl"), split_records(&self.test))?;
        write_lines(
            &dir.join("pool.jsonl"),
            self.train_pool.labeled().map(|(s, x)| PoolRecord { label: s.id(), x: x.to_vec() }),
        )?;
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            spec: self.spec.clone(),
            train: self.train.len(),
            test: self.test.len(),
            pool: self.train_pool.len(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset, DatasetError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(DatasetError::Spec(format!("unknown dataset format {}", manifest.format)));
        }
        let train = read_split(&dir.join("train.jsonl"))?;
        let test = read_split(&dir.join("test.jsonl"))?;
        let pool_path = dir.join("pool.jsonl");
        let mut instances = vec![Vec::new(); NUM_SYMBOLS];
        for (i, r) in read_lines::<PoolRecord>(&pool_path)?.into_iter().enumerate() {
            let s = Symbol::new(r.label).map_err(|e| DatasetError::Record {
                path: pool_path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            instances[s.index()].push(r.x);
        }
        if train.len() != manifest.train || test.len() != manifest.test {
            return Err(DatasetError::Spec("split sizes disagree with the manifest".into()));
        }
        Ok(Dataset { spec: manifest.spec, train, test, train_pool: SymbolPool { instances } })
    }
}
