//! Experiment configuration, trial orchestration and result emission.
//!
//! Every runner turns an [`ExperimentConfig`] into [`ResultRow`]s. Trials
//! run on a rayon pool with per-trial seeds derived from the master seed, so
//! output bytes do not depend on the number of workers.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::batch::{expected_loss_exact, train_o2b, train_o2b_passk, BatchError, SnapshotMixture};
use crate::exact::{
    derive_seed, floor_log, format_rational, int, parse_rational, rational_le_log, rng_from_seed, to_f64, Rational,
};
use crate::instances::{
    cloning_report, default_cloning_estimators, from_spec, majority_lb, mle_failure_supp, mle_failure_unif, passk_lb_online,
    passk_stat_average_loss, random_reward_class, InstanceError, ProblemInstance,
};
use crate::mle::{mle_pis_adversarial, mle_unif, overlap_probability, MleError};
use crate::model::{reward_class_to_model_class, support_of_reward, ActionId, ContextId, Dataset, RewardFunction};
use crate::policy::{
    loss_exact, optimal_value, uniform_support_policy, value_exact, ContextDistribution, ListPolicy, Policy, PolicyError,
};
use crate::sim::{
    adversarial_search, run_online, sample_dataset, version_space_policy, DemonstratorSpec, LearnerSpec, RevealingAdversary,
    RunOptions, SequenceSource, SimError,
};
use crate::weights::{EvalMode, Hyperparams, ModeAudit};

/// Environment variable holding the default number of worker threads.
pub const THREADS_ENV: &str = "CORRDEMO_THREADS";

/// Classes up to this size run with exact and log-float evaluation side by side.
pub const AUDIT_MAX_CLASS: usize = 256;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Mle(#[from] MleError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("output: {0}")]
    Io(String),
}

fn config_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: String,
    /// Instance generator spec, e.g. `majority_lb:d=33` or `random:S=2..1024`.
    pub instance: Option<String>,
    pub learner: Option<String>,
    /// Sample sizes, or sizes of the swept parameter.
    pub grid: Vec<usize>,
    /// Online horizon; derived from the mistake bound when absent.
    pub rounds: Option<usize>,
    pub trials: usize,
    /// Online runs for experiments that mix online and batch parts.
    pub runs: Option<usize>,
    pub seed: u64,
    pub delta: String,
    pub epsilon: String,
    pub gamma: Vec<String>,
    pub k: Vec<usize>,
    pub d: Vec<usize>,
    /// Rollouts per adversarial search.
    pub budget: usize,
    pub which: Option<String>,
    /// Off-support mass of the suboptimal demonstrator.
    pub noise: String,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub transcripts: bool,
    pub svg: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: String::new(),
            instance: None,
            learner: None,
            grid: Vec::new(),
            rounds: None,
            trials: 100,
            runs: None,
            seed: 0,
            delta: "1/10".into(),
            epsilon: "1/5".into(),
            gamma: Vec::new(),
            k: Vec::new(),
            d: Vec::new(),
            budget: 0,
            which: None,
            noise: "1/10".into(),
            out: None,
            threads: None,
            transcripts: false,
            svg: false,
        }
    }
}

impl ExperimentConfig {
    pub fn named(experiment: &str) -> Self {
        ExperimentConfig { experiment: experiment.into(), ..Default::default() }
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn rational(&self, text: &str, name: &str) -> Result<Rational, ExperimentError> {
        parse_rational(text).map_err(|e| config_err(format!("{name}: {e}")))
    }

    fn worker_count(&self) -> usize {
        self.threads
            .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
            .max(1)
    }
}

/// Parses `alg1:realizable`, `alg1:agnostic`, `alg1:majority`,
/// `alg1:<alpha>,<beta>`, `passk:k=<k>`, `majority` and `ci`.
pub fn parse_learner(text: &str) -> Result<LearnerSpec, ExperimentError> {
    let (kind, arg) = text.split_once(':').unwrap_or((text, ""));
    match kind {
        "alg1" | "weighted" => match arg {
            "" | "realizable" => Ok(LearnerSpec::Weighted(Hyperparams::realizable())),
            "agnostic" => Ok(LearnerSpec::Weighted(Hyperparams::agnostic())),
            "majority" => Ok(LearnerSpec::Weighted(Hyperparams::majority())),
            pair => {
                let (a, b) = pair.split_once(',').ok_or_else(|| config_err(format!("expected alpha,beta in {text}")))?;
                let alpha = parse_rational(a).map_err(|e| config_err(e.to_string()))?;
                let beta = parse_rational(b).map_err(|e| config_err(e.to_string()))?;
                Ok(LearnerSpec::Weighted(Hyperparams::new(alpha, beta).map_err(|e| config_err(e.to_string()))?))
            }
        },
        "passk" => {
            let k = arg.trim_start_matches("k=").parse().map_err(|_| config_err(format!("bad k in {text}")))?;
            Ok(LearnerSpec::PassK(k))
        }
        "majority" => Ok(LearnerSpec::Majority),
        "ci" | "common-intersection" => Ok(LearnerSpec::CommonIntersection),
        _ => Err(config_err(format!("unknown learner {text}"))),
    }
}

/// Parses `1..50`, `1,2,4` or a mix such as `1..3,8`.
pub fn parse_grid(text: &str) -> Result<Vec<usize>, ExperimentError> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let a: usize = a.parse().map_err(|_| config_err(format!("bad range {part}")))?;
                let b: usize = b.trim_start_matches('=').parse().map_err(|_| config_err(format!("bad range {part}")))?;
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| config_err(format!("bad grid value {part}")))?),
        }
    }
    Ok(out)
}

/// Resolves a generator spec for one trial. Integer parameters written as
/// `a..b` are drawn from the trial seed (class sizes log-uniformly), and
/// random generators without an explicit seed use the trial seed.
pub fn resolve_instance(spec: &str, seed: u64) -> Result<ProblemInstance, ExperimentError> {
    Ok(from_spec(&resolve_spec(spec, seed)?)?)
}

fn resolve_spec(spec: &str, seed: u64) -> Result<String, ExperimentError> {
    use rand::Rng;
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let mut rng = rng_from_seed(seed);
    let mut parts = Vec::new();
    let mut has_seed = false;
    for kv in rest.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| config_err(format!("expected key=value in {spec}")))?;
        has_seed |= k == "seed";
        let value = match v.split_once("..") {
            Some((a, b)) => {
                let a: u64 = a.parse().map_err(|_| config_err(format!("bad range in {spec}")))?;
                let b: u64 = b.parse().map_err(|_| config_err(format!("bad range in {spec}")))?;
                if a == 0 || a > b {
                    return Err(config_err(format!("empty range in {spec}")));
                }
                let drawn = if k == "S" {
                    let exp = rng.random_range((a as f64).ln()..=(b as f64).ln());
                    (exp.exp().round() as u64).clamp(a, b)
                } else {
                    rng.random_range(a..=b)
                };
                drawn.to_string()
            }
            None => v.to_string(),
        };
        parts.push(format!("{k}={value}"));
    }
    if (kind == "random" || kind == "reward") && !has_seed {
        parts.push(format!("seed={seed}"));
    }
    Ok(if parts.is_empty() { kind.to_string() } else { format!("{kind}:{}", parts.join(",")) })
}

/// Random reward class turned into a model class; the truth is a uniformly
/// chosen reward function. Spec keys: `X`, `Y`, `R`, `seed`.
pub fn resolve_reward_instance(spec: &str, seed: u64) -> Result<(ProblemInstance, RewardFunction), ExperimentError> {
    use rand::Rng;
    let resolved = resolve_spec(spec, seed)?;
    let rest = resolved.split_once(':').map(|(_, r)| r).unwrap_or("");
    let get = |key: &str, default: u64| -> Result<u64, ExperimentError> {
        match rest.split(',').find_map(|kv| kv.strip_prefix(&format!("{key}="))) {
            Some(v) => v.parse().map_err(|_| config_err(format!("bad {key} in {spec}"))),
            None => Ok(default),
        }
    };
    let (nx, ny, nr, s) = (get("X", 4)? as usize, get("Y", 3)? as usize, get("R", 8)? as usize, get("seed", seed)?);
    let rewards = random_reward_class(nx, ny, nr, s)?;
    let truth_r = rewards.members()[rng_from_seed(s ^ 0xA5A5).random_range(0..nr)].clone();
    let class = reward_class_to_model_class(&rewards);
    let sigma = support_of_reward(&truth_r);
    let truth = class.members().iter().position(|m| m.same_table(&sigma)).expect("support of a member is in the class");
    let inst = ProblemInstance::new(
        class,
        ContextDistribution::uniform(nx),
        truth,
        DemonstratorSpec::UniformSupport,
        format!("reward class x={nx} y={ny} r={nr} seed={s}"),
    )?;
    Ok((inst, truth_r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Pass when observed <= bound.
    Le,
    /// Pass when observed >= bound.
    Ge,
    /// Pass when observed == bound.
    Eq,
    /// Informational row without a bound.
    Info,
}

/// A number in a result row.
#[derive(Debug, Clone, PartialEq)]
pub enum Num {
    Exact(Rational),
    Float(f64),
    /// `log_base(n) / m`, compared exactly against rationals.
    LogOver { base: u64, n: u64, m: u64 },
}

impl Num {
    pub fn count(c: u64) -> Self {
        Num::Exact(int(c as i64))
    }

    pub fn to_f64(&self) -> f64 {
        match self {
            Num::Exact(r) => to_f64(r),
            Num::Float(f) => *f,
            Num::LogOver { base, n, m } => (*n as f64).ln() / (*base as f64).ln() / *m as f64,
        }
    }

    pub fn text(&self) -> String {
        match self {
            Num::Exact(r) => format_rational(r),
            other => format!("{}", other.to_f64()),
        }
    }

    fn cmp_to(&self, other: &Num) -> Ordering {
        match (self, other) {
            (Num::Exact(a), Num::Exact(b)) => a.cmp(b),
            (Num::Exact(a), Num::LogOver { base, n, m }) => {
                let scaled = a * int(*m as i64);
                let pow = (*base as u128).checked_pow(floor_log(*base, *n));
                let log_is_integer = pow == Some(*n as u128);
                if log_is_integer && scaled == int(floor_log(*base, *n) as i64) {
                    Ordering::Equal
                } else if rational_le_log(&scaled, *base, *n) {
                    Ordering::Less
                } else {
                    Ordering::Greater
                }
            }
            (Num::LogOver { .. }, Num::Exact(_)) => other.cmp_to(self).reverse(),
            _ => self.to_f64().partial_cmp(&other.to_f64()).unwrap_or(Ordering::Greater),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub instance_hash: String,
    pub learner: String,
    pub param_name: String,
    pub param: u64,
    pub trial: Option<u64>,
    pub seed: Option<u64>,
    pub metric: String,
    pub observed: String,
    pub observed_f64: f64,
    pub bound: String,
    pub bound_f64: Option<f64>,
    pub direction: Direction,
    pub slack: Option<f64>,
    pub pass: bool,
}

/// Shared fields for the rows of one trial.
#[derive(Debug, Clone)]
pub struct RowCtx {
    pub experiment: String,
    pub instance_hash: String,
    pub learner: String,
    pub param_name: String,
    pub param: u64,
    pub trial: Option<u64>,
    pub seed: Option<u64>,
}

impl RowCtx {
    /// Builds a row; `extra_ok` folds side conditions into the pass flag.
    pub fn row(&self, metric: &str, observed: Num, bound: Option<Num>, direction: Direction, extra_ok: bool) -> ResultRow {
        let (pass, slack) = match (&bound, direction) {
            (Some(b), Direction::Le) => (observed.cmp_to(b) != Ordering::Greater, Some(b.to_f64() - observed.to_f64())),
            (Some(b), Direction::Ge) => (observed.cmp_to(b) != Ordering::Less, Some(observed.to_f64() - b.to_f64())),
            (Some(b), Direction::Eq) => (observed.cmp_to(b) == Ordering::Equal, Some(0.0 - (observed.to_f64() - b.to_f64()).abs())),
            _ => (true, None),
        };
        ResultRow {
            experiment: self.experiment.clone(),
            instance_hash: self.instance_hash.clone(),
            learner: self.learner.clone(),
            param_name: self.param_name.clone(),
            param: self.param,
            trial: self.trial,
            seed: self.seed,
            metric: metric.into(),
            observed: observed.text(),
            observed_f64: observed.to_f64(),
            bound: bound.as_ref().map(Num::text).unwrap_or_default(),
            bound_f64: bound.as_ref().map(Num::to_f64),
            direction: if bound.is_some() { direction } else { Direction::Info },
            slack,
            pass: pass && extra_ok,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AuditCounts {
    pub comparisons: u64,
    pub disagreements: u64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub experiment: String,
    pub rows: Vec<ResultRow>,
    /// Extra summary fields, merged into summary.json.
    pub extra: Map<String, Value>,
    /// `(file name, JSONL text)` for saved transcripts.
    pub transcripts: Vec<(String, String)>,
    pub audit: AuditCounts,
}

impl ExperimentOutput {
    fn new(experiment: &str, mut rows: Vec<ResultRow>, audit: &ModeAudit) -> Self {
        sort_rows(&mut rows);
        ExperimentOutput {
            experiment: experiment.into(),
            rows,
            extra: Map::new(),
            transcripts: Vec::new(),
            audit: AuditCounts { comparisons: audit.comparisons(), disagreements: audit.disagreements() },
        }
    }

    /// All rows pass and exact and float evaluation never disagreed.
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass) && self.audit.disagreements == 0
    }

    pub fn failures(&self) -> Vec<&ResultRow> {
        self.rows.iter().filter(|r| !r.pass).collect()
    }

    pub fn worst_slack(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.slack).min_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal))
    }

    pub fn summary_json(&self) -> Value {
        let mut v = json!({
            "experiment": self.experiment,
            "pass": self.pass(),
            "rows": self.rows.len(),
            "worst_slack": self.worst_slack().map(|s| s.to_string()).unwrap_or_default(),
            "audit": self.audit,
        });
        let o = v.as_object_mut().expect("object");
        for (k, val) in &self.extra {
            o.insert(k.clone(), val.clone());
        }
        v
    }

    /// Writes results.csv, summary.json, curves.json, transcripts and an
    /// optional SVG figure into `dir`.
    pub fn write(&self, dir: &Path, svg: bool) -> Result<(), ExperimentError> {
        let io = |e: std::io::Error| ExperimentError::Io(e.to_string());
        std::fs::create_dir_all(dir).map_err(io)?;
        std::fs::write(dir.join("results.csv"), rows_to_csv(&self.rows)?).map_err(io)?;
        let summary = serde_json::to_string_pretty(&self.summary_json()).expect("summary serializes");
        std::fs::write(dir.join("summary.json"), summary + "\n").map_err(io)?;
        let curves = emit_curves(&self.rows);
        std::fs::write(dir.join("curves.json"), serde_json::to_string_pretty(&curves).expect("curves serialize")).map_err(io)?;
        if svg && !curves.is_empty() {
            std::fs::write(dir.join("curves.svg"), curves_svg(&curves)).map_err(io)?;
        }
        if !self.transcripts.is_empty() {
            let tdir = dir.join("transcripts");
            std::fs::create_dir_all(&tdir).map_err(io)?;
            for (name, text) in &self.transcripts {
                std::fs::write(tdir.join(name), text).map_err(io)?;
            }
        }
        Ok(())
    }
}

fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        (&a.param_name, a.param, a.trial.map_or(u64::MAX, |t| t), &a.learner, &a.metric, &a.instance_hash).cmp(&(
            &b.param_name,
            b.param,
            b.trial.map_or(u64::MAX, |t| t),
            &b.learner,
            &b.metric,
            &b.instance_hash,
        ))
    });
}

pub fn rows_to_csv(rows: &[ResultRow]) -> Result<String, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| ExperimentError::Io(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record([
            "experiment", "instance_hash", "learner", "param_name", "param", "trial", "seed", "metric", "observed",
            "observed_f64", "bound", "bound_f64", "direction", "slack", "pass",
        ])
        .map_err(|e| ExperimentError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| ExperimentError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ResultRow>, ExperimentError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().collect::<Result<Vec<ResultRow>, _>>().map_err(|e| ExperimentError::Io(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub param: u64,
    pub n: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub experiment: String,
    pub learner: String,
    pub metric: String,
    pub param_name: String,
    pub points: Vec<CurvePoint>,
}

/// Per-parameter means with normal 95% intervals over per-trial rows.
pub fn emit_curves(rows: &[ResultRow]) -> Vec<Series> {
    use std::collections::BTreeMap;
    type Key = (String, String, String, String);
    let mut groups: BTreeMap<Key, BTreeMap<u64, Vec<&ResultRow>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.trial.is_some()) {
        groups
            .entry((r.experiment.clone(), r.learner.clone(), r.metric.clone(), r.param_name.clone()))
            .or_default()
            .entry(r.param)
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((experiment, learner, metric, param_name), by_param)| Series {
            experiment,
            learner,
            metric,
            param_name,
            points: by_param
                .into_iter()
                .map(|(param, rs)| {
                    let values: Vec<f64> = rs.iter().map(|r| r.observed_f64).collect();
                    let (mean, hw) = mean_and_halfwidth(&values);
                    let bounds: Vec<f64> = rs.iter().filter_map(|r| r.bound_f64).collect();
                    CurvePoint {
                        param,
                        n: values.len(),
                        mean,
                        ci_low: mean - hw,
                        ci_high: mean + hw,
                        bound: (!bounds.is_empty()).then(|| bounds.iter().sum::<f64>() / bounds.len() as f64),
                    }
                })
                .collect(),
        })
        .collect()
}

/// Sample mean and the half-width `1.96 * sd / sqrt(n)`; zero for one value.
pub fn mean_and_halfwidth(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// Standalone SVG with one panel line per series and dashed bound lines.
pub fn curves_svg(series: &[Series]) -> String {
    let (w, h, pad) = (640.0, 400.0, 48.0);
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.param as f64)).collect();
    let ys: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().flat_map(|p| [p.ci_high, p.mean, p.bound.unwrap_or(p.mean)]))
        .filter(|v| v.is_finite())
        .collect();
    let (x0, x1) = (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = (0.0f64.min(ys.iter().cloned().fold(f64::INFINITY, f64::min)), ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let sx = |x: f64| pad + if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.5 } * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - if y1 > y0 { (y - y0) / (y1 - y0) } else { 0.5 } * (h - 2.0 * pad);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    let _ = writeln!(out, r#"<text x="{pad}" y="{}" font-size="11">{x0} .. {x1}</text>"#, h - pad / 3.0);
    let _ = writeln!(out, r#"<text x="4" y="{}" font-size="11">{y1:.3}</text>"#, pad);
    for (i, s) in series.iter().enumerate() {
        let c = colors[i % colors.len()];
        let pts: Vec<String> = s.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.param as f64), sy(p.mean))).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for p in &s.points {
            let _ = writeln!(
                out,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{c}"/>"#,
                sy(p.ci_low),
                sy(p.ci_high),
                x = sx(p.param as f64)
            );
        }
        let bounds: Vec<String> = s
            .points
            .iter()
            .filter_map(|p| p.bound.filter(|b| b.is_finite()).map(|b| format!("{:.2},{:.2}", sx(p.param as f64), sy(b))))
            .collect();
        if !bounds.is_empty() {
            let _ = writeln!(out, r#"<polyline fill="none" stroke="{c}" stroke-dasharray="5,4" points="{}"/>"#, bounds.join(" "));
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="11" fill="{c}">{} {}</text>"#, w - 220.0, pad + 14.0 * i as f64, s.learner, s.metric);
    }
    out.push_str("</svg>\n");
    out
}

fn par_map<T, F>(threads: usize, n: usize, f: F) -> Result<Vec<T>, ExperimentError>
where
    T: Send,
    F: Fn(usize) -> Result<T, ExperimentError> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| config_err(e.to_string()))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

fn mode_for(class_size: usize, audit: &Arc<ModeAudit>) -> EvalMode {
    if class_size <= AUDIT_MAX_CLASS {
        EvalMode::Audited(Arc::clone(audit))
    } else {
        EvalMode::Exact
    }
}

fn default_rounds(learner: &LearnerSpec, class_size: usize) -> usize {
    let b = learner.mistake_bound(class_size).unwrap_or(floor_log(2, class_size as u64) as u64) as usize;
    (2 * b + 8).min(4 * class_size + 8)
}

/// Runs the named experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    match cfg.experiment.as_str() {
        "run-online" => run_online_experiment(cfg),
        "run-batch" => run_batch(cfg),
        "run-passk" => run_passk(cfg),
        "run-mle-failure" => run_mle_failure(cfg),
        "run-mle-overlap" => run_mle_overlap(cfg),
        "run-agnostic" => run_agnostic(cfg),
        "run-lower-bounds" => run_lower_bounds(cfg),
        "run-cloning-report" => run_cloning_report(cfg),
        "sweep" => run_sweep(cfg),
        "validate-instance" => validate_instance(cfg),
        other => Err(config_err(format!("unknown experiment {other}"))),
    }
}

/// Adversarially searched online runs on per-trial instances; every run
/// must stay within the learner's mistake bound.
pub fn run_online_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let spec = cfg.instance.clone().unwrap_or_else(|| "random:S=2..1024,X=2..8,Y=2..5".into());
    let learner = parse_learner(cfg.learner.as_deref().unwrap_or("alg1:realizable"))?;
    let audit = ModeAudit::new();
    let results = par_map(cfg.worker_count(), cfg.trials, |trial| {
        let seed = derive_seed(cfg.seed, trial as u64);
        let inst = resolve_instance(&spec, seed)?;
        online_trial(cfg, "run-online", &inst, &learner, trial, seed, &audit)
    })?;
    collect_trials(cfg, "run-online", results, &audit)
}

type TrialOut = (Vec<ResultRow>, Option<(String, String)>);

fn online_trial(
    cfg: &ExperimentConfig,
    experiment: &str,
    inst: &ProblemInstance,
    learner: &LearnerSpec,
    trial: usize,
    seed: u64,
    audit: &Arc<ModeAudit>,
) -> Result<TrialOut, ExperimentError> {
    let size = inst.class.len();
    let rounds = cfg.rounds.unwrap_or_else(|| default_rounds(learner, size));
    let run = adversarial_search(inst, learner, rounds, cfg.budget, seed, mode_for(size, audit))?;
    let ctx = RowCtx {
        experiment: experiment.into(),
        instance_hash: inst.hash(),
        learner: learner.label(),
        param_name: "S".into(),
        param: size as u64,
        trial: Some(trial as u64),
        seed: Some(seed),
    };
    let s = &run.summary;
    let side_ok = s.monotone_ok && s.key_inequality_violations == 0 && s.regret_ok != Some(false);
    let mut rows = vec![ctx.row("mistakes", Num::count(s.mistakes), s.bound.map(Num::count), Direction::Le, side_ok)];
    if learner.k() > 1 {
        rows.push(ctx.row("key_inequality_violations", Num::count(s.key_inequality_violations), Some(Num::count(0)), Direction::Eq, true));
    }
    let transcript = cfg.transcripts.then(|| (format!("{experiment}-trial{trial:05}.jsonl"), run.to_jsonl()));
    Ok((rows, transcript))
}

fn collect_trials(
    cfg: &ExperimentConfig,
    experiment: &str,
    results: Vec<TrialOut>,
    audit: &ModeAudit,
) -> Result<ExperimentOutput, ExperimentError> {
    let mut rows = Vec::new();
    let mut transcripts = Vec::new();
    for (r, t) in results {
        rows.extend(r);
        transcripts.extend(t);
    }
    let mut out = ExperimentOutput::new(experiment, rows, audit);
    out.transcripts = transcripts;
    out.extra.insert("config".into(), serde_json::to_value(cfg).expect("config serializes"));
    Ok(out)
}

/// Online-to-batch expected loss against `log_b|S| / m`, with exact
/// enumeration on small instances and the reward reduction on reward specs.
pub fn run_batch(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let spec = cfg.instance.clone().unwrap_or_else(|| "majority_lb:d=33".into());
    let learner = parse_learner(cfg.learner.as_deref().unwrap_or("alg1:realizable"))?;
    let grid = if cfg.grid.is_empty() { vec![1, 2, 4, 8, 16, 32, 64, 128] } else { cfg.grid.clone() };
    let reward = spec.starts_with("reward");
    let (inst, reward_truth) = if reward {
        let (i, r) = resolve_reward_instance(&spec, cfg.seed)?;
        (i, Some(r))
    } else {
        (resolve_instance(&spec, cfg.seed)?, None)
    };
    let size = inst.class.len() as u64;
    let base = learner.k() as u64 + 1;
    let audit = ModeAudit::new();
    let mode = mode_for(inst.class.len(), &audit);
    let delta = to_f64(&cfg.rational(&cfg.delta, "delta")?);
    let trials = cfg.trials;
    let jobs: Vec<(usize, usize)> = grid.iter().flat_map(|&m| (0..trials).map(move |t| (m, t))).collect();
    let label = learner.label();
    let hash = inst.hash();
    let per_trial = par_map(cfg.worker_count(), jobs.len(), |j| {
        let (m, trial) = jobs[j];
        let seed = derive_seed(cfg.seed, (m as u64) << 32 | trial as u64);
        let data = sample_dataset(&inst, m, seed)?;
        let mix = train_for(&inst, &learner, &data, mode.clone())?;
        let loss = expected_loss_exact(&mix, &inst.dist, inst.truth());
        let ctx = RowCtx {
            experiment: "run-batch".into(),
            instance_hash: hash.clone(),
            learner: label.clone(),
            param_name: "m".into(),
            param: m as u64,
            trial: Some(trial as u64),
            seed: Some(seed),
        };
        let mut rows = vec![ctx.row("loss", Num::Exact(loss.clone()), None, Direction::Info, true)];
        if let Some(r) = &reward_truth {
            let policy = Arc::new(mix).as_policy();
            let value = value_exact(&policy, &inst.dist, r)?;
            let floor = optimal_value(&inst.dist, r) - loss_exact(&policy, &inst.dist, inst.truth())?;
            rows.push(ctx.row("value", Num::Exact(value), Some(Num::Exact(floor)), Direction::Ge, true));
        }
        Ok((rows, to_f64(&loss)))
    })?;

    let mut rows = Vec::new();
    let mut hp_natural = Map::new();
    let mut hp_base = Map::new();
    for (gi, &m) in grid.iter().enumerate() {
        let slice = &per_trial[gi * trials..(gi + 1) * trials];
        let losses: Vec<f64> = slice.iter().map(|(_, l)| *l).collect();
        for (r, _) in slice {
            rows.extend(r.iter().cloned());
        }
        let (mean, hw) = mean_and_halfwidth(&losses);
        let ctx = RowCtx {
            experiment: "run-batch".into(),
            instance_hash: hash.clone(),
            learner: label.clone(),
            param_name: "m".into(),
            param: m as u64,
            trial: None,
            seed: None,
        };
        let envelope = Num::LogOver { base, n: size, m: m as u64 };
        let allowed = envelope.to_f64() + 3.0 * hw;
        rows.push(ctx.row("mean_loss", Num::Float(mean), Some(Num::Float(allowed)), Direction::Le, true));
        // High-probability reading with natural logs, and with base-b logs on the class size.
        if m >= 2 {
            let lm = (m as f64).ln();
            let tail = 12.0 * (2.0 * lm / delta).ln();
            let nat = (1.0 + 2.0 * (size as f64).ln() + tail) / m as f64;
            let lb = (1.0 + 2.0 * (size as f64).ln() / (base as f64).ln() + tail) / m as f64;
            let frac = |b: f64| losses.iter().filter(|&&l| l > b).count() as f64 / losses.len().max(1) as f64;
            hp_natural.insert(m.to_string(), json!({"bound": nat, "violation_rate": frac(nat)}));
            hp_base.insert(m.to_string(), json!({"bound": lb, "violation_rate": frac(lb)}));
        }
        if let Some(expect) = exact_expected_loss(&inst, &learner, m, mode.clone())? {
            rows.push(ctx.row("exact_expected_loss", Num::Exact(expect), Some(envelope), Direction::Le, true));
        }
    }
    let mut out = ExperimentOutput::new("run-batch", rows, &audit);
    out.extra.insert("high_probability_natural_log".into(), Value::Object(hp_natural));
    out.extra.insert("high_probability_class_log_base".into(), Value::Object(hp_base));
    out.extra.insert("class_size".into(), json!(size));
    out.extra.insert("config".into(), serde_json::to_value(cfg).expect("config serializes"));
    Ok(out)
}

fn train_for(inst: &ProblemInstance, learner: &LearnerSpec, data: &Dataset, mode: EvalMode) -> Result<SnapshotMixture, ExperimentError> {
    Ok(match learner {
        LearnerSpec::Weighted(p) => train_o2b(Arc::clone(&inst.class), data, p.clone(), mode)?,
        LearnerSpec::PassK(k) => train_o2b_passk(Arc::clone(&inst.class), data, *k, mode)?,
        _ => return Err(config_err("batch training needs a weighted or k-list learner")),
    })
}

/// Exact `E_S[L]` by enumerating every dataset of size `m`, when the
/// instance has at most 4 contexts, `m <= 3` and an exact demonstrator.
pub fn exact_expected_loss(
    inst: &ProblemInstance,
    learner: &LearnerSpec,
    m: usize,
    mode: EvalMode,
) -> Result<Option<Rational>, ExperimentError> {
    let Some(demo) = inst.demonstrator.policy(inst.truth()) else { return Ok(None) };
    if inst.class.num_contexts() > 4 || m > 3 || m == 0 {
        return Ok(None);
    }
    let ny = inst.class.num_actions();
    let mut atoms: Vec<((ContextId, ActionId), Rational)> = Vec::new();
    for x in inst.dist.support() {
        let probs = demo.action_probs(x, ny)?;
        for (y, p) in probs.into_iter().enumerate() {
            if p != int(0) {
                atoms.push(((x, ActionId(y)), inst.dist.prob(x) * p));
            }
        }
    }
    let n = atoms.len();
    let mut total = int(0);
    for mut code in 0..n.pow(m as u32) {
        let mut data = Dataset::default();
        let mut prob = int(1);
        for _ in 0..m {
            let ((x, y), p) = &atoms[code % n];
            code /= n;
            data.push(*x, *y);
            prob *= p;
        }
        let mix = train_for(inst, learner, &data, mode.clone())?;
        total += prob * expected_loss_exact(&mix, &inst.dist, inst.truth());
    }
    Ok(Some(total))
}

/// k-list online runs with adversarial search, plus revealing-adversary
/// lower bounds on product classes.
pub fn run_passk(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let spec = cfg.instance.clone().unwrap_or_else(|| "random:S=2..1024,X=2..6,Y=3..7".into());
    let ks = if cfg.k.is_empty() { vec![1, 2, 3, 5] } else { cfg.k.clone() };
    let audit = ModeAudit::new();
    let jobs: Vec<(usize, usize)> = ks.iter().flat_map(|&k| (0..cfg.trials).map(move |t| (k, t))).collect();
    let mut results = par_map(cfg.worker_count(), jobs.len(), |j| {
        let (k, trial) = jobs[j];
        let seed = derive_seed(cfg.seed, (k as u64) << 32 | trial as u64);
        let mut inst = resolve_instance(&spec, seed)?;
        if inst.class.num_actions() < k {
            // Widen nothing; skip the pair by running k = |Y|.
            inst = resolve_instance(&format!("random:S={},X={},Y={}", inst.class.len(), inst.class.num_contexts(), k), seed)?;
        }
        let learner = LearnerSpec::PassK(k);
        online_trial(cfg, "run-passk", &inst, &learner, trial, seed, &audit)
    })?;
    let ds = if cfg.d.is_empty() { vec![2, 4, 16, 100, 1000] } else { cfg.d.clone() };
    for &k in &ks {
        for &d in &ds {
            if d < k + 1 {
                continue;
            }
            results.push((revealing_rows("run-passk", k, d, &audit)?, None));
        }
    }
    collect_trials(cfg, "run-passk", results, &audit)
}

fn revealing_rows(experiment: &str, k: usize, d: usize, audit: &Arc<ModeAudit>) -> Result<Vec<ResultRow>, ExperimentError> {
    let inst = passk_lb_online(k, d)?;
    let nx = inst.class.num_contexts();
    let mut learners = vec![LearnerSpec::PassK(k)];
    if k == 1 {
        learners.push(LearnerSpec::Weighted(Hyperparams::realizable()));
    }
    let mut rows = Vec::new();
    for learner in learners {
        let adv = RevealingAdversary { num_contexts: nx, num_actions: k + 1 };
        let opts = RunOptions { mode: mode_for(inst.class.len(), audit), record_weights: true, seed: 0 };
        let run = run_online(&inst, &learner, SequenceSource::Adversarial(Box::new(adv)), &opts)?;
        let ctx = RowCtx {
            experiment: experiment.into(),
            instance_hash: inst.hash(),
            learner: learner.label(),
            param_name: "d".into(),
            param: d as u64,
            trial: None,
            seed: None,
        };
        let expected = floor_log(k as u64 + 1, d as u64) as u64;
        let s = &run.summary;
        rows.push(ctx.row("forced_mistakes", Num::count(s.mistakes), Some(Num::count(expected)), Direction::Eq, s.monotone_ok));
    }
    Ok(rows)
}

/// MLE failure instances: the missing-mass witness and the unique
/// uniform-support maximizer.
pub fn run_mle_failure(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let which = cfg.which.clone().unwrap_or_else(|| "both".into());
    let grid = if cfg.grid.is_empty() { (1..=50).collect() } else { cfg.grid.clone() };
    let gammas: Vec<Rational> = if cfg.gamma.is_empty() {
        vec![Rational::new(1.into(), 10.into()), Rational::new(1.into(), 4.into()), Rational::new(1.into(), 2.into())]
    } else {
        cfg.gamma.iter().map(|g| cfg.rational(g, "gamma")).collect::<Result<_, _>>()?
    };
    let audit = ModeAudit::new();
    let mut rows = Vec::new();
    if which == "supp" || which == "both" {
        let jobs: Vec<(usize, usize, usize)> = grid
            .iter()
            .flat_map(|&m| (0..gammas.len()).flat_map(move |g| (0..cfg.trials).map(move |t| (m, g, t))))
            .collect();
        let out = par_map(cfg.worker_count(), jobs.len(), |j| {
            let (m, g, trial) = jobs[j];
            let gamma = &gammas[g];
            let inst = mle_failure_supp(m, gamma)?;
            let seed = derive_seed(cfg.seed, ((m as u64) << 40) | ((g as u64) << 20) | trial as u64);
            let data = sample_dataset(&inst, m, seed)?;
            let ctx = RowCtx {
                experiment: "run-mle-failure".into(),
                instance_hash: inst.hash(),
                learner: format!("mle-witness:gamma={}", format_rational(gamma)),
                param_name: "m".into(),
                param: m as u64,
                trial: Some(trial as u64),
                seed: Some(seed),
            };
            let floor = Num::Exact(int(1) - gamma);
            let mut rs = Vec::new();
            for (name, truth) in [("loss_blind", None), ("loss_truth_aware", Some((inst.truth(), &inst.dist)))] {
                let pi = mle_pis_adversarial(&inst.class, &data, truth)?;
                let loss = loss_exact(&pi, &inst.dist, inst.truth())?;
                rs.push(ctx.row(name, Num::Exact(loss), Some(floor.clone()), Direction::Ge, true));
            }
            Ok(rs)
        })?;
        rows.extend(out.into_iter().flatten());
    }
    if which == "unif" || which == "both" {
        for gamma in &gammas {
            let inst = mle_failure_unif(gamma)?;
            let s = inst.class.num_actions() / 2;
            let expected = Num::Exact(int(1) - Rational::new(1.into(), (s as i64).into()));
            for &m in &grid {
                let seed = derive_seed(cfg.seed, m as u64);
                let data = sample_dataset(&inst, m, seed)?;
                let report = mle_unif(&inst.class, &data);
                let unique_wrong = report.argmax_set == vec![0];
                let loss = loss_exact(&uniform_support_policy(inst.class.member(0)), &inst.dist, inst.truth())?;
                let ctx = RowCtx {
                    experiment: "run-mle-failure".into(),
                    instance_hash: inst.hash(),
                    learner: format!("mle-unif:gamma={}", format_rational(gamma)),
                    param_name: "m".into(),
                    param: m as u64,
                    trial: Some(0),
                    seed: Some(seed),
                };
                rows.push(ctx.row("loss", Num::Exact(loss), Some(expected.clone()), Direction::Eq, unique_wrong));
            }
        }
    }
    let mut out = ExperimentOutput::new("run-mle-failure", rows, &audit);
    out.extra.insert("config".into(), serde_json::to_value(cfg).expect("config serializes"));
    Ok(out)
}

/// Overlap of likelihood maximizers at the stated sample size, and the
/// positive control with uniform-on-support demonstrators.
pub fn run_mle_overlap(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let which = cfg.which.clone().unwrap_or_else(|| "both".into());
    let spec = cfg.instance.clone().unwrap_or_else(|| "random:S=2..256,X=3..10,Y=2..6".into());
    let eps = cfg.rational(&cfg.epsilon, "epsilon")?;
    let delta = cfg.rational(&cfg.delta, "delta")?;
    let (eps_f, delta_f) = (to_f64(&eps), to_f64(&delta));
    let audit = ModeAudit::new();
    let grid = if cfg.grid.is_empty() { vec![10, 30, 100] } else { cfg.grid.clone() };
    let mut rows = Vec::new();
    let aggregate = |rows: &mut Vec<ResultRow>, metric: &str, flags: &[bool], param: u64| {
        let frac = Rational::new((flags.iter().filter(|&&f| f).count() as i64).into(), (flags.len().max(1) as i64).into());
        let ctx = RowCtx {
            experiment: "run-mle-overlap".into(),
            instance_hash: spec.clone(),
            learner: "mle-unif".into(),
            param_name: "aggregate".into(),
            param,
            trial: None,
            seed: None,
        };
        rows.push(ctx.row(metric, Num::Exact(frac), Some(Num::Exact(&delta + Rational::new(1.into(), 20.into()))), Direction::Le, true));
    };
    if which == "overlap" || which == "both" {
        let out = par_map(cfg.worker_count(), cfg.trials, |trial| {
            let seed = derive_seed(cfg.seed, trial as u64);
            let inst = resolve_instance(&spec, seed)?;
            let size = inst.class.len() as f64;
            let m = (((size.ln() + (1.0 / delta_f).ln()) / eps_f).ceil() as usize).max(1);
            let data = sample_dataset(&inst, m, derive_seed(seed, 1))?;
            let report = mle_unif(&inst.class, &data);
            let mut worst = int(1);
            for &i in &report.argmax_set {
                let ov = overlap_probability(&uniform_support_policy(inst.class.member(i)), &inst.dist, inst.truth())?;
                worst = worst.min(ov);
            }
            let bad = worst < int(1) - &eps;
            let ctx = RowCtx {
                experiment: "run-mle-overlap".into(),
                instance_hash: inst.hash(),
                learner: "mle-unif".into(),
                param_name: "m".into(),
                param: m as u64,
                trial: Some(trial as u64),
                seed: Some(seed),
            };
            Ok((ctx.row("min_overlap", Num::Exact(worst), None, Direction::Info, true), bad))
        })?;
        let flags: Vec<bool> = out.iter().map(|(_, b)| *b).collect();
        rows.extend(out.into_iter().map(|(r, _)| r));
        aggregate(&mut rows, "overlap_failure_rate", &flags, 0);
    }
    if which == "positive" || which == "both" {
        for (gi, &m) in grid.iter().enumerate() {
            let out = par_map(cfg.worker_count(), cfg.trials, |trial| {
                let seed = derive_seed(cfg.seed ^ 0x0B5E_55ED, (gi as u64) << 32 | trial as u64);
                let mut inst = resolve_instance(&spec, seed)?;
                inst.demonstrator = DemonstratorSpec::UniformSupport;
                let data = sample_dataset(&inst, m, derive_seed(seed, 2))?;
                let report = mle_unif(&inst.class, &data);
                let bound = 6.0 * (2.0 * inst.class.len() as f64 / delta_f).ln() / m as f64;
                let mut worst = int(0);
                for &i in &report.argmax_set {
                    worst = worst.max(loss_exact(&uniform_support_policy(inst.class.member(i)), &inst.dist, inst.truth())?);
                }
                let bad = to_f64(&worst) > bound;
                let ctx = RowCtx {
                    experiment: "run-mle-overlap".into(),
                    instance_hash: inst.hash(),
                    learner: "mle-unif".into(),
                    param_name: "m".into(),
                    param: m as u64,
                    trial: Some(trial as u64),
                    seed: Some(seed),
                };
                Ok((ctx.row("positive_control_loss", Num::Exact(worst), None, Direction::Info, true), bad))
            })?;
            let flags: Vec<bool> = out.iter().map(|(_, b)| *b).collect();
            rows.extend(out.into_iter().map(|(r, _)| r));
            aggregate(&mut rows, "positive_control_failure_rate", &flags, m as u64);
        }
    }
    let mut out = ExperimentOutput::new("run-mle-overlap", rows, &audit);
    out.extra.insert("config".into(), serde_json::to_value(cfg).expect("config serializes"));
    Ok(out)
}

/// Suboptimal demonstrators: online weight monotonicity and per-hypothesis
/// regret, then the batch square-root bound over every hypothesis.
pub fn run_agnostic(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let spec = cfg.instance.clone().unwrap_or_else(|| "random:S=2..64,X=2..6,Y=2..5".into());
    let noise = cfg.rational(&cfg.noise, "noise")?;
    let delta = cfg.rational(&cfg.delta, "delta")?;
    let delta_f = to_f64(&delta);
    let params = match cfg.learner.as_deref() {
        Some(l) => match parse_learner(l)? {
            LearnerSpec::Weighted(p) => p,
            _ => return Err(config_err("the agnostic experiment needs a weighted learner")),
        },
        None => Hyperparams::agnostic(),
    };
    let learner = LearnerSpec::Weighted(params.clone());
    let audit = ModeAudit::new();
    let runs = cfg.runs.unwrap_or(100);
    let rounds = cfg.rounds.unwrap_or(60);
    let suboptimal = |inst: &mut ProblemInstance| {
        inst.demonstrator = DemonstratorSpec::suboptimal_mixture(inst.truth(), inst.class.num_actions(), &noise);
    };
    let online = par_map(cfg.worker_count(), runs, |trial| {
        let seed = derive_seed(cfg.seed, trial as u64);
        let mut inst = resolve_instance(&spec, seed)?;
        suboptimal(&mut inst);
        let opts = RunOptions { mode: mode_for(inst.class.len(), &audit), record_weights: true, seed };
        let run = run_online(&inst, &learner, SequenceSource::Sampled { m: rounds, seed }, &opts)?;
        let ctx = RowCtx {
            experiment: "run-agnostic".into(),
            instance_hash: inst.hash(),
            learner: learner.label(),
            param_name: "T".into(),
            param: rounds as u64,
            trial: Some(trial as u64),
            seed: Some(seed),
        };
        let s = &run.summary;
        let mut rows = vec![ctx.row("weight_monotone", Num::count(s.monotone_ok as u64), Some(Num::count(1)), Direction::Eq, true)];
        if let Some(ok) = s.regret_ok {
            let slack = s.regret_worst_slack.unwrap_or(f64::NEG_INFINITY);
            rows.push(ctx.row("regret_worst_slack", Num::Float(slack), Some(Num::Float(0.0)), Direction::Ge, ok));
        }
        Ok((rows, None))
    })?;
    let grid = if cfg.grid.is_empty() { vec![100] } else { cfg.grid.clone() };
    let mut rows: Vec<ResultRow> = online.into_iter().flat_map(|(r, _): TrialOut| r).collect();
    for (gi, &m) in grid.iter().enumerate() {
        let out = par_map(cfg.worker_count(), cfg.trials, |trial| {
            let seed = derive_seed(cfg.seed ^ 0xA6_0571C, (gi as u64) << 32 | trial as u64);
            let mut inst = resolve_instance(&spec, seed)?;
            suboptimal(&mut inst);
            let data = sample_dataset(&inst, m, derive_seed(seed, 3))?;
            let mix = train_o2b(Arc::clone(&inst.class), &data, params.clone(), mode_for(inst.class.len(), &audit))?;
            let demo_losses = inst.demonstrator.losses(&inst.class, &inst.dist, inst.truth())?;
            let slack_term = 10.0 * (((inst.class.len() as f64).ln() + (1.0 / delta_f).ln()) / m as f64).sqrt();
            let mut worst_slack = f64::INFINITY;
            for (i, sigma) in inst.class.members().iter().enumerate() {
                let l = to_f64(&expected_loss_exact(&mix, &inst.dist, sigma));
                let bound = 1.41 * to_f64(&demo_losses[i]) + slack_term;
                worst_slack = worst_slack.min(bound - l);
            }
            let ctx = RowCtx {
                experiment: "run-agnostic".into(),
                instance_hash: inst.hash(),
                learner: learner.label(),
                param_name: "m".into(),
                param: m as u64,
                trial: Some(trial as u64),
                seed: Some(seed),
            };
            Ok((ctx.row("sqrt_bound_worst_slack", Num::Float(worst_slack), None, Direction::Info, true), worst_slack < 0.0))
        })?;
        let flags: Vec<bool> = out.iter().map(|(_, b)| *b).collect();
        rows.extend(out.into_iter().map(|(r, _)| r));
        let frac = Rational::new((flags.iter().filter(|&&f| f).count() as i64).into(), (flags.len().max(1) as i64).into());
        let ctx = RowCtx {
            experiment: "run-agnostic".into(),
            instance_hash: spec.clone(),
            learner: learner.label(),
            param_name: "m".into(),
            param: m as u64,
            trial: None,
            seed: None,
        };
        rows.push(ctx.row("sqrt_bound_violation_rate", Num::Exact(frac), Some(Num::Exact(&delta + Rational::new(1.into(), 20.into()))), Direction::Le, true));
    }
    let mut out = ExperimentOutput::new("run-agnostic", rows, &audit);
    out.extra.insert("config".into(), serde_json::to_value(cfg).expect("config serializes"));
    Ok(out)
}

/// The planted lower-bound constructions: Majority online and statistical,
/// the revealing adversary, and the exhaustive k-list average.
pub fn run_lower_bounds(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let audit = ModeAudit::new();
    let mut rows = Vec::new();
    let ds = if cfg.d.is_empty() { vec![3, 5, 9, 33, 101] } else { cfg.d.clone() };
    for &d in &ds {
        let inst = majority_lb(d)?;
        let q = inst.class.num_contexts();
        let script = (0..q).map(|t| (ContextId(t), None)).collect();
        let run = run_online(&inst, &LearnerSpec::Majority, SequenceSource::Scripted(script), &RunOptions::default())?;
        let ctx = RowCtx {
            experiment: "run-lower-bounds".into(),
            instance_hash: inst.hash(),
            learner: "majority".into(),
            param_name: "d".into(),
            param: d as u64,
            trial: None,
            seed: None,
        };
        rows.push(ctx.row("online_mistakes", Num::count(run.summary.mistakes), Some(Num::count(q as u64)), Direction::Eq, true));
    }

    let stat_d = 33;
    let inst = majority_lb(stat_d)?;
    let q = inst.class.num_contexts();
    let grid: Vec<usize> = if cfg.grid.is_empty() { (1..=q / 2).collect() } else { cfg.grid.clone() };
    let jobs: Vec<(usize, usize)> = grid.iter().flat_map(|&m| (0..cfg.trials).map(move |t| (m, t))).collect();
    let hash = inst.hash();
    let stat = par_map(cfg.worker_count(), jobs.len(), |j| {
        let (m, trial) = jobs[j];
        let seed = derive_seed(cfg.seed, (m as u64) << 32 | trial as u64);
        let data = sample_dataset(&inst, m, seed)?;
        let policy = version_space_policy(&inst.class, &data, true);
        let loss = loss_exact(&policy, &inst.dist, inst.truth())?;
        let ctx = RowCtx {
            experiment: "run-lower-bounds".into(),
            instance_hash: hash.clone(),
            learner: "majority".into(),
            param_name: "m".into(),
            param: m as u64,
            trial: Some(trial as u64),
            seed: Some(seed),
        };
        Ok(ctx.row("statistical_loss", Num::Exact(loss), Some(Num::Exact(Rational::new(1.into(), 2.into()))), Direction::Ge, true))
    })?;
    rows.extend(stat);

    let ks = if cfg.k.is_empty() { vec![1, 2, 3, 5] } else { cfg.k.clone() };
    for &k in &ks {
        for d in [k + 1, (k + 1) * (k + 1), 100, 1000] {
            rows.extend(revealing_rows("run-lower-bounds", k, d, &audit)?);
        }
    }

    for (k, q, m) in [(1usize, 2usize, 1usize), (1, 3, 2), (2, 2, 1)] {
        let floor = Rational::new(1.into(), 2.into()) * pow_rational(&(int(1) - Rational::new(1.into(), (q as i64).into())), m);
        let ctx = RowCtx {
            experiment: "run-lower-bounds".into(),
            instance_hash: format!("passk_stat:k={k},q={q}"),
            learner: format!("passk-o2b:k={k}"),
            param_name: "m".into(),
            param: m as u64,
            trial: None,
            seed: None,
        };
        let avg = passk_stat_average_loss(k, q, m, |class, data| {
            let mix = train_o2b_passk(Arc::clone(class), data, k, EvalMode::Audited(Arc::clone(&audit))).expect("realizable data");
            Arc::new(mix).as_list_policy()
        })?;
        rows.push(ctx.row("average_list_loss", Num::Exact(avg), Some(Num::Exact(floor.clone())), Direction::Ge, true));
        let ctx = RowCtx { learner: "majority".into(), ..ctx };
        let avg = passk_stat_average_loss(k, q, m, |class, data| {
            let Policy::Deterministic(acts) = version_space_policy(class, data, true) else { unreachable!() };
            let lists = acts.into_iter().map(|a| first_k_with(a, k, class.num_actions())).collect();
            ListPolicy::DeterministicK(lists)
        })?;
        rows.push(ctx.row("average_list_loss", Num::Exact(avg), Some(Num::Exact(floor)), Direction::Ge, true));
    }
    let mut out = ExperimentOutput::new("run-lower-bounds", rows, &audit);
    out.extra.insert("config".into(), serde_json::to_value(cfg).expect("config serializes"));
    Ok(out)
}


/// `first` followed by the smallest other actions, `k` in total.
fn first_k_with(first: ActionId, k: usize, num_actions: usize) -> Vec<ActionId> {
    let mut list = vec![first];
    list.extend((0..num_actions).filter(|&y| y != first.0).take(k - 1).map(ActionId));
    list
}

fn pow_rational(r: &Rational, e: usize) -> Rational {
    (0..e).fold(int(1), |acc, _| acc * r)
}

/// Exact averages over the deterministic demonstrator prior for constant
/// and memorizing estimators.
pub fn run_cloning_report(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let audit = ModeAudit::new();
    let grid = if cfg.grid.is_empty() { vec![2] } else { cfg.grid.clone() };
    let mut rows = Vec::new();
    for &m in &grid {
        let inst = crate::instances::cloning_impossible(m)?;
        let report = cloning_report(m, &default_cloning_estimators())?;
        for r in report {
            let ctx = RowCtx {
                experiment: "run-cloning-report".into(),
                instance_hash: inst.hash(),
                learner: r.estimator.clone(),
                param_name: "m".into(),
                param: m as u64,
                trial: None,
                seed: None,
            };
            rows.push(ctx.row("mean_tv", Num::Exact(r.mean_tv), Some(Num::Exact(Rational::new(1.into(), 4.into()))), Direction::Ge, true));
            rows.push(ctx.row("mean_hellinger_sq", Num::Float(r.mean_hellinger_sq), None, Direction::Info, true));
            rows.push(ctx.row("loss", Num::Exact(r.loss), Some(Num::count(0)), Direction::Eq, true));
        }
    }
    let mut out = ExperimentOutput::new("run-cloning-report", rows, &audit);
    out.extra.insert("config".into(), serde_json::to_value(cfg).expect("config serializes"));
    Ok(out)
}

/// Mistakes against class size for several learners on random instances.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let sizes = if cfg.grid.is_empty() { vec![2, 4, 8, 16, 32, 64, 128, 256] } else { cfg.grid.clone() };
    let learners: Vec<LearnerSpec> = match &cfg.learner {
        Some(l) => l.split(';').map(parse_learner).collect::<Result<_, _>>()?,
        None => vec![LearnerSpec::Weighted(Hyperparams::realizable()), LearnerSpec::Majority, LearnerSpec::CommonIntersection],
    };
    let audit = ModeAudit::new();
    let jobs: Vec<(usize, usize, usize)> = sizes
        .iter()
        .flat_map(|&s| (0..learners.len()).flat_map(move |l| (0..cfg.trials).map(move |t| (s, l, t))))
        .collect();
    let results = par_map(cfg.worker_count(), jobs.len(), |j| {
        let (s, l, trial) = jobs[j];
        let seed = derive_seed(cfg.seed, ((s as u64) << 32) | trial as u64);
        let spec = cfg.instance.clone().unwrap_or_else(|| "random:X=6,Y=4".into());
        let inst = resolve_instance(&format!("{spec},S={s}"), seed)?;
        let mut local = cfg.clone();
        local.rounds = Some(cfg.rounds.unwrap_or(3 * s.min(32) + 8));
        online_trial(&local, "sweep", &inst, &learners[l], trial, seed, &audit)
    })?;
    collect_trials(cfg, "sweep", results, &audit)
}

/// Loads or generates an instance and reports its validation status.
pub fn validate_instance(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let spec = cfg.instance.clone().ok_or_else(|| config_err("validate-instance needs --instance"))?;
    let inst = resolve_instance(&spec, cfg.seed)?;
    let audit = ModeAudit::new();
    let ctx = RowCtx {
        experiment: "validate-instance".into(),
        instance_hash: inst.hash(),
        learner: String::new(),
        param_name: "S".into(),
        param: inst.class.len() as u64,
        trial: None,
        seed: None,
    };
    let demo_ok = inst.demonstrator.validate(inst.truth(), inst.class.num_actions()).is_ok();
    let rows = vec![ctx.row("valid", Num::count(1), Some(Num::count(1)), Direction::Eq, demo_ok)];
    let mut out = ExperimentOutput::new("validate-instance", rows, &audit);
    out.extra.insert(
        "instance".into(),
        json!({
            "contexts": inst.class.num_contexts(),
            "actions": inst.class.num_actions(),
            "hypotheses": inst.class.len(),
            "truth": inst.truth_index,
            "demonstrator": inst.demonstrator.kind(),
            "provenance": inst.provenance,
            "hash": inst.hash(),
        }),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("1..3,8").unwrap(), vec![1, 2, 3, 8]);
        assert_eq!(parse_grid("5").unwrap(), vec![5]);
        assert!(parse_grid("a").is_err());
    }

    #[test]
    fn learner_parsing() {
        assert_eq!(parse_learner("alg1:realizable").unwrap(), LearnerSpec::Weighted(Hyperparams::realizable()));
        assert_eq!(parse_learner("alg1:4/3,2/3").unwrap(), LearnerSpec::Weighted(Hyperparams::agnostic()));
        assert_eq!(parse_learner("passk:k=3").unwrap(), LearnerSpec::PassK(3));
        assert_eq!(parse_learner("ci").unwrap(), LearnerSpec::CommonIntersection);
        assert!(parse_learner("alg1:3,1").is_ok());
        assert!(parse_learner("bogus").is_err());
    }

    #[test]
    fn spec_ranges_are_seeded() {
        let a = resolve_spec("random:S=2..1024,X=2..8", 7).unwrap();
        assert_eq!(a, resolve_spec("random:S=2..1024,X=2..8", 7).unwrap());
        assert!(a.contains("seed=7"));
        assert_eq!(resolve_spec("majority_lb:d=5", 1).unwrap(), "majority_lb:d=5");
    }

    #[test]
    fn log_envelope_compares_exactly() {
        let env = Num::LogOver { base: 2, n: 8, m: 4 };
        assert_eq!(Num::Exact(Rational::new(3.into(), 4.into())).cmp_to(&env), Ordering::Equal);
        assert_eq!(Num::Exact(Rational::new(7.into(), 10.into())).cmp_to(&env), Ordering::Less);
        let env33 = Num::LogOver { base: 2, n: 33, m: 1 };
        assert_eq!(Num::Exact(int(5)).cmp_to(&env33), Ordering::Less);
        assert_eq!(Num::Exact(Rational::new(5045.into(), 1000.into())).cmp_to(&env33), Ordering::Greater);
    }

    #[test]
    fn single_row_curve_is_degenerate() {
        let ctx = RowCtx {
            experiment: "e".into(),
            instance_hash: "h".into(),
            learner: "l".into(),
            param_name: "m".into(),
            param: 3,
            trial: Some(0),
            seed: Some(1),
        };
        let rows = vec![ctx.row("loss", Num::Exact(Rational::new(1.into(), 3.into())), None, Direction::Info, true)];
        let curves = emit_curves(&rows);
        assert_eq!(curves.len(), 1);
        let p = &curves[0].points[0];
        assert_eq!((p.n, p.ci_low, p.ci_high), (1, p.mean, p.mean));
    }

    #[test]
    fn csv_round_trip_keeps_exact_strings() {
        let ctx = RowCtx {
            experiment: "e".into(),
            instance_hash: "h".into(),
            learner: "l".into(),
            param_name: "m".into(),
            param: 3,
            trial: None,
            seed: None,
        };
        let rows = vec![ctx.row("loss", Num::Exact(Rational::new(2.into(), 7.into())), Some(Num::Float(0.5)), Direction::Le, true)];
        let back = rows_from_csv(&rows_to_csv(&rows).unwrap()).unwrap();
        assert_eq!(back, rows);
        assert_eq!(parse_rational(&back[0].observed).unwrap(), Rational::new(2.into(), 7.into()));
    }
}
