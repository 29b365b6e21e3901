//! Experiment orchestration: evaluation, resumable runs, plans and tables.
//!
//! A run directory holds `log.csv` (the learning curve), `state.json` (the
//! resumable trainer state), `model.json` and `metrics.json`. A plan runs
//! several of these against one dataset and writes `report.json` plus the
//! summary tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{generate_dataset, Dataset, DatasetError, DatasetSpec, Split};
use crate::learning::{LearningError, Method, TrainConfig, Trainer, TrainerState};
use crate::parsing::{viterbi_parse, CompiledGrammar};
use crate::perception::{PerceptionError, PerceptionModel};
use crate::reasoning::execute;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("{path}: {msg}")]
    Config { path: String, msg: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Learning(#[from] LearningError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthMetrics {
    pub length: usize,
    pub count: usize,
    pub calc_acc: f64,
    pub sym_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub calc_acc: f64,
    pub sym_acc: f64,
    pub per_length: Vec<LengthMetrics>,
}

/// Calculation accuracy: the parsed formula executes exactly to `y`.
/// Symbol accuracy: per-slot agreement of the parsed formula with the hidden
/// one, averaged over all slots.
pub fn evaluate_model(cg: &CompiledGrammar, m: &PerceptionModel, split: &Split) -> Result<Evaluation, PerceptionError> {
    // length -> (examples, correct results, slots, correct slots)
    let mut acc: BTreeMap<usize, [usize; 4]> = BTreeMap::new();
    for (obs, truth) in split.observations().iter().zip(split.hidden_truths()) {
        let pm = m.forward(&obs.x)?;
        let e = acc.entry(obs.len()).or_default();
        e[0] += 1;
        e[2] += truth.len();
        if let Ok(parse) = viterbi_parse(cg.cnf(), &pm) {
            if execute(cg.cnf(), &parse.string) == Ok(obs.y) {
                e[1] += 1;
            }
            e[3] += truth.len() - parse.string.hamming(truth);
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let total = acc.values().fold([0; 4], |t, e| [t[0] + e[0], t[1] + e[1], t[2] + e[2], t[3] + e[3]]);
    Ok(Evaluation {
        calc_acc: ratio(total[1], total[0]),
        sym_acc: ratio(total[3], total[2]),
        per_length: acc
            .iter()
            .map(|(&length, e)| LengthMetrics {
                length,
                count: e[0],
                calc_acc: ratio(e[1], e[0]),
                sym_acc: ratio(e[3], e[2]),
            })
            .collect(),
    })
}

/// Hex SHA-256 of the canonical JSON form of a config.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| HarnessError::Config { path: path.display().to_string(), msg: e.to_string() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRun {
    pub name: String,
    /// Table row label; defaults to the method name.
    #[serde(default)]
    pub row: Option<String>,
    #[serde(default)]
    pub config: TrainConfig,
}

impl PlanRun {
    pub fn row_label(&self) -> String {
        self.row.clone().unwrap_or_else(|| self.config.method.to_string())
    }
}

fn default_eval_every() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub output_dir: PathBuf,
    /// Dataset directory, generated from `dataset` when it does not exist.
    pub data: PathBuf,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    /// Iterations between test evaluations, applied to every run.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    pub runs: Vec<PlanRun>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut names = BTreeSet::new();
        for r in &self.runs {
            if r.name.is_empty() || r.name.contains(['/', '\\']) || r.name.starts_with('.') {
                return Err(HarnessError::Plan(format!("bad run name {:?}", r.name)));
            }
            if !names.insert(&r.name) {
                return Err(HarnessError::Plan(format!("duplicate run name {:?}", r.name)));
            }
        }
        if self.eval_every == 0 {
            return Err(HarnessError::Plan("eval_every must be positive".into()));
        }
        if self.dataset.is_none() && !self.data.join("manifest.json").exists() {
            return Err(HarnessError::Plan(format!("dataset {} does not exist", self.data.display())));
        }
        Ok(())
    }

    /// `methods × fractions`, named `<method>-<fraction>`.
    pub fn fraction_sweep(base: &TrainConfig, methods: &[Method], fractions: &[f64]) -> Vec<PlanRun> {
        let mut runs = Vec::new();
        for &method in methods {
            for &f in fractions {
                runs.push(PlanRun {
                    name: format!("{method}-{f}"),
                    row: None,
                    config: TrainConfig { method, data_fraction: f, ..base.clone() },
                });
            }
        }
        runs
    }

    /// ngs-mbs with one run per back-search step count.
    pub fn steps_sweep(base: &TrainConfig, steps: &[usize]) -> Vec<PlanRun> {
        steps
            .iter()
            .map(|&t| {
                let mut config = TrainConfig { method: Method::NgsMbs, ..base.clone() };
                config.mbs.steps = t;
                PlanRun { name: format!("ngs-mbs-T{t}"), row: Some(format!("ngs-mbs T={t}")), config }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub name: String,
    pub row: String,
    pub method: Method,
    pub data_fraction: f64,
    pub mbs_steps: usize,
    pub iterations: usize,
    pub final_calc_acc: Option<f64>,
    pub final_sym_acc: Option<f64>,
    pub per_length: Vec<LengthMetrics>,
    /// Learning curve, relative to the plan output directory.
    pub curve: String,
    pub config_hash: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: Vec<RunMetrics>,
}

impl MetricsReport {
    pub fn is_complete(&self) -> bool {
        self.runs.iter().all(|r| r.error.is_none())
    }

    pub fn get(&self, name: &str) -> Option<&RunMetrics> {
        self.runs.iter().find(|r| r.name == name)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    config_hash: String,
    state: TrainerState,
}

fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(tmp, path)
}

/// Writes `state.json` and `log.csv` for a run of `cfg` into `dir`.
pub fn write_checkpoint(dir: &Path, cfg: &TrainConfig, state: &TrainerState) -> Result<(), HarnessError> {
    let saved = SavedState { config_hash: config_hash(cfg), state: state.clone() };
    write_atomic(&dir.join("state.json"), &serde_json::to_string(&saved)?)?;
    write_atomic(&dir.join("log.csv"), &state.log.to_csv())?;
    Ok(())
}

/// Trains one config into `dir`, resuming from `dir/state.json` when it was
/// written by the same config.
pub fn run_training(
    cg: &CompiledGrammar,
    data: &Dataset,
    cfg: &TrainConfig,
    dir: &Path,
) -> Result<(PerceptionModel, Evaluation, TrainerState), HarnessError> {
    fs::create_dir_all(dir)?;
    let hash = config_hash(cfg);
    let state_path = dir.join("state.json");
    let obs = data.train.observations();
    let saved = match fs::read_to_string(&state_path) {
        Ok(text) => Some(serde_json::from_str::<SavedState>(&text)?).filter(|s| s.config_hash == hash),
        Err(_) => None,
    };
    let mut trainer = match saved {
        Some(s) => Trainer::resume(cg, obs, cfg, s.state)?,
        None => Trainer::new(cg, obs, Some(&data.train_pool), cfg)?,
    };
    let mut eval_error = None;
    let mut eval = |m: &PerceptionModel| match evaluate_model(cg, m, &data.test) {
        Ok(e) => (e.calc_acc, e.sym_acc),
        Err(e) => {
            eval_error.get_or_insert(e);
            (0.0, 0.0)
        }
    };
    let mut checkpoint =
        |state: &TrainerState| write_checkpoint(dir, cfg, state).map_err(|e| LearningError::State(e.to_string()));
    trainer.run(&mut eval, &mut checkpoint)?;
    if let Some(e) = eval_error {
        return Err(e.into());
    }
    let state = trainer.into_state();
    let model = state.model.clone();
    model.save(&dir.join("model.json"))?;
    let evaluation = evaluate_model(cg, &model, &data.test)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&evaluation)? + "\n")?;
    Ok((model, evaluation, state))
}

/// Loads the plan's dataset, generating and saving it first if needed.
pub fn prepare_dataset(cg: &CompiledGrammar, plan: &ExperimentPlan) -> Result<Dataset, HarnessError> {
    if plan.data.join("manifest.json").exists() {
        let ds = Dataset::load(&plan.data)?;
        if let Some(spec) = &plan.dataset {
            if *spec != ds.spec {
                return Err(HarnessError::Plan(format!("{} was generated from a different spec", plan.data.display())));
            }
        }
        return Ok(ds);
    }
    let spec = plan.dataset.as_ref().ok_or_else(|| HarnessError::Plan("no dataset".into()))?;
    let ds = generate_dataset(cg, spec)?;
    ds.save(&plan.data)?;
    Ok(ds)
}

/// Runs every plan entry in order. A failed run is recorded in the report
/// and the remaining runs still execute.
pub fn run_plan(cg: &CompiledGrammar, plan: &ExperimentPlan) -> Result<MetricsReport, HarnessError> {
    plan.validate()?;
    let data = prepare_dataset(cg, plan)?;
    fs::create_dir_all(&plan.output_dir)?;
    let mut report = MetricsReport::default();
    for run in &plan.runs {
        let cfg = TrainConfig { eval_every: plan.eval_every, ..run.config.clone() };
        let dir = plan.output_dir.join(&run.name);
        let mut m = RunMetrics {
            name: run.name.clone(),
            row: run.row_label(),
            method: cfg.method,
            data_fraction: cfg.data_fraction,
            mbs_steps: cfg.mbs.steps,
            iterations: cfg.iterations,
            final_calc_acc: None,
            final_sym_acc: None,
            per_length: Vec::new(),
            curve: format!("{}/log.csv", run.name),
            config_hash: config_hash(&cfg),
            error: None,
        };
        match run_training(cg, &data, &cfg, &dir) {
            Ok((_, eval, _)) => {
                m.final_calc_acc = Some(eval.calc_acc);
                m.final_sym_acc = Some(eval.sym_acc);
                m.per_length = eval.per_length;
            }
            Err(e) => m.error = Some(e.to_string()),
        }
        report.runs.push(m);
        fs::write(plan.output_dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}

const MISSING: &str = "—";

/// Rows are table labels in order of appearance, columns the distinct data
/// fractions. Cells without a finished run hold `None`.
pub fn table_cells<F: Fn(&RunMetrics) -> Option<f64>>(
    report: &MetricsReport,
    value: F,
) -> (Vec<String>, Vec<f64>, Vec<Vec<Option<f64>>>) {
    let mut rows: Vec<String> = Vec::new();
    for r in &report.runs {
        if !rows.contains(&r.row) {
            rows.push(r.row.clone());
        }
    }
    let mut cols: Vec<f64> = report.runs.iter().map(|r| r.data_fraction).collect();
    cols.sort_by(f64::total_cmp);
    cols.dedup();
    let cells = rows
        .iter()
        .map(|row| {
            cols.iter()
                .map(|&c| {
                    report
                        .runs
                        .iter()
                        .find(|r| &r.row == row && r.data_fraction == c && r.error.is_none())
                        .and_then(&value)
                })
                .collect()
        })
        .collect();
    (rows, cols, cells)
}

fn render(rows: &[String], cols: &[f64], cells: &[Vec<Option<f64>>]) -> (String, String) {
    let fmt_cell = |c: &Option<f64>| c.map_or_else(|| MISSING.to_string(), |v| format!("{v:.3}"));
    let header: Vec<String> =
        std::iter::once("method".to_string()).chain(cols.iter().map(|c| format!("{c}"))).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .zip(cells)
        .map(|(r, cs)| std::iter::once(r.clone()).chain(cs.iter().map(fmt_cell)).collect())
        .collect();
    let mut csv = header.join(",") + "\n";
    for line in &body {
        csv += &(line.join(",") + "\n");
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|k| std::iter::once(&header).chain(&body).map(|l| l[k].chars().count()).max().unwrap_or(0))
        .collect();
    let align = |line: &[String]| {
        line.iter()
            .zip(&widths)
            .enumerate()
            .map(|(k, (s, &w))| {
                let pad = " ".repeat(w - s.chars().count());
                if k == 0 {
                    format!("{s}{pad}")
                } else {
                    format!("{pad}{s}")
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut text = align(&header) + "\n";
    for line in &body {
        text += &(align(line) + "\n");
    }
    (csv, text)
}

/// Writes calculation and symbol accuracy tables (`.csv` and aligned `.txt`)
/// and `curves.csv` joining every run's learning curve. Returns `false` when
/// any cell is missing.
pub fn emit_tables(report: &MetricsReport, plan_dir: &Path, out: &Path) -> Result<bool, HarnessError> {
    fs::create_dir_all(out)?;
    let mut complete = report.is_complete();
    type Column = fn(&RunMetrics) -> Option<f64>;
    let metrics: [(&str, Column); 2] = [("calc_acc", |r| r.final_calc_acc), ("sym_acc", |r| r.final_sym_acc)];
    for (name, value) in metrics {
        let (rows, cols, cells) = table_cells(report, value);
        complete &= cells.iter().flatten().all(Option::is_some);
        let (csv, text) = render(&rows, &cols, &cells);
        fs::write(out.join(format!("{name}.csv")), csv)?;
        fs::write(out.join(format!("{name}.txt")), text)?;
    }
    let mut curves = String::from("run,iter,calc_acc,sym_acc,label_frac\n");
    for r in &report.runs {
        let Ok(text) = fs::read_to_string(plan_dir.join(&r.curve)) else {
            complete = false;
            continue;
        };
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() == 5 {
                curves += &format!("{},{},{},{},{}\n", r.name, f[0], f[1], f[2], f[3]);
            }
        }
    }
    fs::write(out.join("curves.csv"), curves)?;
    Ok(complete)
}
