//! The online protocol driver, demonstrators, dataset sampling and run
//! transcripts.
//!
//! Each round the driver shows the learner a context, takes its prediction,
//! scores it against the truth privately, then reveals a demonstrated label.
//! Learners never receive the mistake flag.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use num_traits::Zero;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::exact::{floor_log, format_rational, int, rng_from_seed, value_to_rational, Rational, RationalSampler, SeededRng};
use crate::instances::ProblemInstance;
use crate::model::{consistent_set, ActionId, ContextId, Dataset, ModelClass, SupportFunction};
use crate::passk::key_inequality;
use crate::policy::{loss_exact, ContextDistribution, Policy, PolicyError};
use crate::weights::{
    ci_from_consistent, majority_from_consistent, regret_check, EvalMode, Hyperparams, WeightError, WeightState,
    WeightValue,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("adaptive demonstrators can only be run through the online driver")]
    AdaptiveNotSamplable,
    #[error("round {round}: demonstrated label {y} is not correct at context {x}")]
    DemonstratorViolation { round: u64, x: usize, y: usize },
    #[error("invalid demonstrator: {0}")]
    InvalidDemonstrator(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("transcript i/o: {0}")]
    Io(String),
}

/// Label callback for adaptive demonstrators: sees the transcript so far,
/// the current context and the learner's current list.
pub type AdaptiveFn = dyn Fn(&[RoundRecord], ContextId, &[ActionId]) -> ActionId + Send + Sync;

#[derive(Clone)]
pub enum DemonstratorSpec {
    /// Smallest correct action.
    DeterministicMin,
    /// Uniform over the correct actions.
    UniformSupport,
    /// Explicit conditionals supported on the truth.
    Table(Vec<Vec<Rational>>),
    /// A deterministic correct policy drawn uniformly per dataset or run.
    RandomDeterministic,
    AdaptiveScript(Arc<AdaptiveFn>),
    /// Explicit conditionals that may put mass outside the truth.
    Suboptimal(Vec<Vec<Rational>>),
}

impl fmt::Debug for DemonstratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind())
    }
}

impl DemonstratorSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            DemonstratorSpec::DeterministicMin => "deterministic_min",
            DemonstratorSpec::UniformSupport => "uniform_support",
            DemonstratorSpec::Table(_) => "table",
            DemonstratorSpec::RandomDeterministic => "random_deterministic",
            DemonstratorSpec::AdaptiveScript(_) => "adaptive",
            DemonstratorSpec::Suboptimal(_) => "suboptimal",
        }
    }

    pub fn is_suboptimal(&self) -> bool {
        matches!(self, DemonstratorSpec::Suboptimal(_))
    }

    /// `(1 - eps)` uniform on the truth plus `eps` uniform on all actions.
    pub fn suboptimal_mixture(truth: &SupportFunction, num_actions: usize, eps: &Rational) -> Self {
        let one = int(1);
        let table = truth
            .per_context
            .iter()
            .map(|set| {
                let on = (&one - eps) / int(set.count() as i64);
                let off = eps / int(num_actions as i64);
                (0..num_actions).map(|y| if set.contains(y) { &on + &off } else { off.clone() }).collect()
            })
            .collect();
        DemonstratorSpec::Suboptimal(table)
    }

    /// Exact policy form, for demonstrators that have one.
    pub fn policy(&self, truth: &SupportFunction) -> Option<Policy> {
        match self {
            DemonstratorSpec::DeterministicMin => Some(Policy::Deterministic(
                truth.per_context.iter().map(|s| ActionId(s.min().expect("non-empty support"))).collect(),
            )),
            DemonstratorSpec::UniformSupport => Some(Policy::UniformSupport(truth.clone())),
            DemonstratorSpec::Table(t) | DemonstratorSpec::Suboptimal(t) => Some(Policy::Table(t.clone())),
            DemonstratorSpec::RandomDeterministic | DemonstratorSpec::AdaptiveScript(_) => None,
        }
    }

    /// Rows must be distributions; non-suboptimal tables must stay on the truth.
    pub fn validate(&self, truth: &SupportFunction, num_actions: usize) -> Result<(), SimError> {
        let table = match self {
            DemonstratorSpec::Table(t) | DemonstratorSpec::Suboptimal(t) => t,
            _ => return Ok(()),
        };
        if table.len() != truth.num_contexts() {
            return Err(SimError::InvalidDemonstrator("table has the wrong number of contexts".into()));
        }
        for (x, row) in table.iter().enumerate() {
            if row.len() != num_actions {
                return Err(SimError::InvalidDemonstrator(format!("row {x} has {} entries", row.len())));
            }
            if row.iter().any(|p| *p < Rational::zero()) || row.iter().sum::<Rational>() != int(1) {
                return Err(SimError::InvalidDemonstrator(format!("row {x} is not a distribution")));
            }
            if !self.is_suboptimal() {
                if let Some(y) = (0..num_actions).find(|&y| !row[y].is_zero() && !truth.per_context[x].contains(y)) {
                    return Err(SimError::InvalidDemonstrator(format!("row {x} puts mass on incorrect action {y}")));
                }
            }
        }
        Ok(())
    }

    /// Exact loss of the demonstrator against every member of the class.
    pub fn losses(&self, class: &ModelClass, dist: &ContextDistribution, truth: &SupportFunction) -> Result<Vec<Rational>, SimError> {
        let policy = self.policy(truth).ok_or(SimError::AdaptiveNotSamplable)?;
        class.members().iter().map(|s| Ok(loss_exact(&policy, dist, s)?)).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows = |t: &Vec<Vec<Rational>>| -> Vec<Vec<String>> { t.iter().map(|r| r.iter().map(format_rational).collect()).collect() };
        match self {
            DemonstratorSpec::Table(t) | DemonstratorSpec::Suboptimal(t) => json!({"kind": self.kind(), "probs": rows(t)}),
            _ => json!({"kind": self.kind()}),
        }
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, SimError> {
        let bad = |m: &str| SimError::InvalidDemonstrator(m.to_string());
        let table = || -> Result<Vec<Vec<Rational>>, SimError> {
            v["probs"]
                .as_array()
                .ok_or_else(|| bad("probs missing"))?
                .iter()
                .map(|row| {
                    row.as_array()
                        .ok_or_else(|| bad("probs rows must be arrays"))?
                        .iter()
                        .map(|e| value_to_rational(e).map_err(|e| bad(&e.to_string())))
                        .collect()
                })
                .collect()
        };
        match v["kind"].as_str().unwrap_or("deterministic_min") {
            "deterministic_min" => Ok(DemonstratorSpec::DeterministicMin),
            "uniform_support" => Ok(DemonstratorSpec::UniformSupport),
            "random_deterministic" => Ok(DemonstratorSpec::RandomDeterministic),
            "table" => Ok(DemonstratorSpec::Table(table()?)),
            "suboptimal" => Ok(DemonstratorSpec::Suboptimal(table()?)),
            "adaptive" => Err(bad("adaptive demonstrators are code, not data")),
            other => Err(bad(&format!("unknown demonstrator kind {other}"))),
        }
    }
}

/// Stateful label source for non-adaptive demonstrators.
struct Emitter {
    samplers: Option<Vec<RationalSampler>>,
    fixed: Option<Vec<usize>>,
    uniform: bool,
}

impl Emitter {
    fn new(spec: &DemonstratorSpec, truth: &SupportFunction, rng: &mut SeededRng) -> Result<Self, SimError> {
        Ok(match spec {
            DemonstratorSpec::DeterministicMin => Emitter {
                samplers: None,
                fixed: Some(truth.per_context.iter().map(|s| s.min().expect("non-empty support")).collect()),
                uniform: false,
            },
            DemonstratorSpec::UniformSupport => Emitter { samplers: None, fixed: None, uniform: true },
            DemonstratorSpec::Table(t) | DemonstratorSpec::Suboptimal(t) => {
                Emitter { samplers: Some(t.iter().map(|r| RationalSampler::new(r)).collect()), fixed: None, uniform: false }
            }
            DemonstratorSpec::RandomDeterministic => Emitter {
                samplers: None,
                fixed: Some(truth.per_context.iter().map(|s| pick_uniform(s.iter(), s.count(), rng)).collect()),
                uniform: false,
            },
            DemonstratorSpec::AdaptiveScript(_) => return Err(SimError::AdaptiveNotSamplable),
        })
    }

    fn emit(&self, truth: &SupportFunction, x: ContextId, rng: &mut SeededRng) -> ActionId {
        if let Some(f) = &self.fixed {
            return ActionId(f[x.0]);
        }
        if self.uniform {
            let s = truth.at(x);
            return ActionId(pick_uniform(s.iter(), s.count(), rng));
        }
        ActionId(self.samplers.as_ref().expect("sampler table")[x.0].sample(rng))
    }
}

fn pick_uniform(mut it: impl Iterator<Item = usize>, n: usize, rng: &mut SeededRng) -> usize {
    let i = rng.random_range(0..n);
    it.nth(i).expect("index within count")
}

/// `m` i.i.d. pairs: `x ~ D` exactly, then a label from the demonstrator.
pub fn sample_dataset(instance: &ProblemInstance, m: usize, seed: u64) -> Result<Dataset, SimError> {
    let mut rng = rng_from_seed(seed);
    let truth = instance.truth();
    let emitter = Emitter::new(&instance.demonstrator, truth, &mut rng)?;
    let mut data = Dataset::default();
    for _ in 0..m {
        let x = instance.dist.sample(&mut rng);
        let y = emitter.emit(truth, x, &mut rng);
        data.push(x, y);
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LearnerSpec {
    Weighted(Hyperparams),
    PassK(usize),
    Majority,
    CommonIntersection,
}

impl LearnerSpec {
    pub fn label(&self) -> String {
        match self {
            LearnerSpec::Weighted(p) if *p == Hyperparams::realizable() => "alg1:realizable".into(),
            LearnerSpec::Weighted(p) if *p == Hyperparams::agnostic() => "alg1:agnostic".into(),
            LearnerSpec::Weighted(p) => format!("alg1:{}/{}", format_rational(&p.alpha), format_rational(&p.beta)),
            LearnerSpec::PassK(k) => format!("passk:k={k}"),
            LearnerSpec::Majority => "majority".into(),
            LearnerSpec::CommonIntersection => "ci".into(),
        }
    }

    pub fn k(&self) -> usize {
        match self {
            LearnerSpec::PassK(k) => *k,
            _ => 1,
        }
    }

    /// Worst-case mistake count on realizable sequences, when one is known.
    pub fn mistake_bound(&self, class_size: usize) -> Option<u64> {
        match self {
            LearnerSpec::Weighted(p) if p.alpha == int(1) && p.beta.is_zero() => Some(class_size as u64 - 1),
            LearnerSpec::Weighted(p) if p.satisfies_guarantee() && p.alpha > int(1) => Some(floor_log_rational(&p.alpha, class_size as u64)),
            LearnerSpec::Weighted(_) => None,
            LearnerSpec::PassK(k) => Some(floor_log(*k as u64 + 1, class_size as u64) as u64),
            LearnerSpec::Majority | LearnerSpec::CommonIntersection => Some(class_size as u64 - 1),
        }
    }
}

/// Largest `j` with `alpha^j <= n`, for `alpha > 1`.
pub fn floor_log_rational(alpha: &Rational, n: u64) -> u64 {
    let n = int(n as i64);
    let mut power = alpha.clone();
    let mut j = 0;
    while power <= n {
        j += 1;
        power *= alpha;
    }
    j
}

/// Read-only view of the learner offered to adaptive adversaries.
pub trait Probe {
    fn class(&self) -> &ModelClass;
    /// The list the learner would emit at `x` in its current state.
    fn predict_at(&self, x: ContextId) -> Vec<ActionId>;
    /// Number of live hypotheses that contain `y` at `x`.
    fn alive_with(&self, x: ContextId, y: ActionId) -> usize;
}

pub trait Adversary: Send {
    /// Next context, or `None` to end the run.
    fn next_context(&mut self, history: &[RoundRecord], probe: &dyn Probe) -> Option<ContextId>;
    fn reveal(&mut self, history: &[RoundRecord], x: ContextId, prediction: &[ActionId], probe: &dyn Probe) -> ActionId;
    /// True when the truth is only fixed after the run.
    fn defers_truth(&self) -> bool {
        false
    }
    /// Truth index consistent with the revealed labels, for deferred adversaries.
    fn declared_truth(&self, _history: &[RoundRecord]) -> Option<usize> {
        None
    }
}

/// Presents contexts `0, 1, ...` once each and reveals the smallest action
/// missing from the learner's list. Against a product class every such
/// sequence is realizable; the truth is read off afterwards.
#[derive(Debug, Clone)]
pub struct RevealingAdversary {
    pub num_contexts: usize,
    pub num_actions: usize,
}

impl Adversary for RevealingAdversary {
    fn next_context(&mut self, history: &[RoundRecord], _probe: &dyn Probe) -> Option<ContextId> {
        (history.len() < self.num_contexts).then_some(ContextId(history.len()))
    }

    fn reveal(&mut self, _history: &[RoundRecord], _x: ContextId, prediction: &[ActionId], _probe: &dyn Probe) -> ActionId {
        ActionId((0..self.num_actions).find(|y| !prediction.iter().any(|p| p.0 == *y)).unwrap_or(0))
    }

    fn defers_truth(&self) -> bool {
        true
    }

    fn declared_truth(&self, history: &[RoundRecord]) -> Option<usize> {
        let mut f = vec![0usize; self.num_contexts];
        for r in history {
            f[r.x.0] = r.y.0;
        }
        Some(crate::instances::product_index(&f, self.num_actions))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelStrategy {
    Random,
    /// Label kept by the most live hypotheses.
    MaxKeep,
    /// Label kept by the fewest live hypotheses.
    MinKeep,
}

/// Randomized stress adversary with a fixed truth: prefers contexts where
/// the learner currently errs and chooses correct labels by a strategy.
pub struct SearchAdversary {
    truth: SupportFunction,
    rounds: usize,
    rng: SeededRng,
    greed: f64,
    labels: LabelStrategy,
}

impl SearchAdversary {
    pub fn new(truth: SupportFunction, rounds: usize, seed: u64, greed: f64, labels: LabelStrategy) -> Self {
        SearchAdversary { truth, rounds, rng: rng_from_seed(seed), greed, labels }
    }
}

impl Adversary for SearchAdversary {
    fn next_context(&mut self, history: &[RoundRecord], probe: &dyn Probe) -> Option<ContextId> {
        if history.len() >= self.rounds {
            return None;
        }
        let nx = probe.class().num_contexts();
        if self.rng.random_bool(self.greed) {
            let erring: Vec<usize> = (0..nx)
                .filter(|&x| probe.predict_at(ContextId(x)).iter().all(|y| !self.truth.allows(ContextId(x), *y)))
                .collect();
            if !erring.is_empty() {
                return Some(ContextId(erring[self.rng.random_range(0..erring.len())]));
            }
        }
        Some(ContextId(self.rng.random_range(0..nx)))
    }

    fn reveal(&mut self, _history: &[RoundRecord], x: ContextId, _prediction: &[ActionId], probe: &dyn Probe) -> ActionId {
        let options: Vec<usize> = self.truth.at(x).iter().collect();
        let pick = match self.labels {
            LabelStrategy::Random => options[self.rng.random_range(0..options.len())],
            LabelStrategy::MaxKeep => *options.iter().max_by_key(|&&y| (probe.alive_with(x, ActionId(y)), std::cmp::Reverse(y))).unwrap(),
            LabelStrategy::MinKeep => *options.iter().min_by_key(|&&y| (probe.alive_with(x, ActionId(y)), y)).unwrap(),
        };
        ActionId(pick)
    }
}

/// Scripted rounds: each context with an optional fixed label (the
/// demonstrator fills in `None`).
pub type Script = Vec<(ContextId, Option<ActionId>)>;

pub enum SequenceSource {
    /// `m` contexts drawn from the instance distribution with demonstrator labels.
    Sampled { m: usize, seed: u64 },
    /// Fixed contexts; a `None` label is drawn from the demonstrator.
    Scripted(Script),
    Adversarial(Box<dyn Adversary>),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub mode: EvalMode,
    /// Record exact total weights and marginals each round.
    pub record_weights: bool,
    /// Seed for demonstrator draws in sampled and scripted runs.
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { mode: EvalMode::Exact, record_weights: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: u64,
    pub x: ContextId,
    pub y_hat: Vec<ActionId>,
    pub y: ActionId,
    /// Whether every emitted action missed the truth; absent until a truth is known.
    pub mistake: Option<bool>,
    /// Total weight before this round's update, as an exact string.
    pub total_weight: Option<String>,
    pub marginals: Option<Vec<String>>,
    pub degenerate: bool,
    pub key_inequality: Option<bool>,
}

impl RoundRecord {
    fn to_json(&self) -> serde_json::Value {
        let mut v = json!({
            "t": self.t,
            "x": self.x.0,
            "y_hat": self.y_hat[0].0,
            "y": self.y.0,
        });
        let o = v.as_object_mut().expect("object");
        if self.y_hat.len() > 1 {
            o.insert("y_hat_list".into(), json!(self.y_hat.iter().map(|a| a.0).collect::<Vec<_>>()));
        }
        if let Some(m) = self.mistake {
            o.insert("mistake".into(), json!(m));
        }
        if let Some(w) = &self.total_weight {
            o.insert("W_t".into(), json!(w));
        }
        if let Some(m) = &self.marginals {
            o.insert("marginals".into(), json!(m));
        }
        if self.degenerate {
            o.insert("degenerate".into(), json!(true));
        }
        if let Some(k) = self.key_inequality {
            o.insert("key_inequality".into(), json!(k));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rounds: u64,
    pub mistakes: u64,
    pub bound: Option<u64>,
    pub slack: Option<i64>,
    /// Total weight never increased (checked only when recorded).
    pub monotone_ok: bool,
    pub degenerate_rounds: u64,
    pub key_inequality_violations: u64,
    /// Per-hypothesis regret inequality, for weighted learners with `alpha > 1`, `beta < 1`.
    pub regret_ok: Option<bool>,
    pub regret_worst_slack: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: Option<u64>,
    pub instance_hash: String,
    pub learner: String,
    pub truth_index: usize,
    pub rounds: Vec<RoundRecord>,
    pub summary: RunSummary,
    /// Final counters per hypothesis: own-prediction misses and label misses.
    pub ledger: Option<crate::weights::MistakeLedger>,
}

impl RunRecord {
    pub fn to_jsonl(&self) -> String {
        let mut out = json!({
            "header": true,
            "seed": self.seed,
            "instance_hash": self.instance_hash,
            "learner": self.learner,
            "truth": self.truth_index,
            "mistakes": self.summary.mistakes,
            "bound": self.summary.bound,
        })
        .to_string();
        out.push('\n');
        for r in &self.rounds {
            out.push_str(&r.to_json().to_string());
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), SimError> {
        let mut f = std::fs::File::create(path).map_err(|e| SimError::Io(e.to_string()))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| SimError::Io(e.to_string()))
    }

    /// Mistake flags recomputed from the transcript and a truth.
    pub fn recompute_mistakes(&self, truth: &SupportFunction) -> Vec<bool> {
        self.rounds.iter().map(|r| r.y_hat.iter().all(|y| !truth.allows(r.x, *y))).collect()
    }

    /// The played sequence as a script with fixed labels.
    pub fn script(&self) -> Script {
        self.rounds.iter().map(|r| (r.x, Some(r.y))).collect()
    }
}

/// Learner state inside the driver. Version-space learners keep their own
/// consistent list so they do not share code with the weighted learner.
enum Runtime {
    Weights { state: WeightState, k: usize, passk: bool },
    VersionSpace { class: Arc<ModelClass>, consistent: Vec<usize>, majority: bool },
}

impl Runtime {
    fn new(class: Arc<ModelClass>, learner: &LearnerSpec, mode: EvalMode) -> Result<Self, SimError> {
        Ok(match learner {
            LearnerSpec::Weighted(p) => Runtime::Weights { state: WeightState::new(class, p.clone(), mode)?, k: 1, passk: false },
            LearnerSpec::PassK(k) => Runtime::Weights { state: WeightState::new_passk(class, *k, mode)?, k: *k, passk: true },
            LearnerSpec::Majority => {
                let all = (0..class.len()).collect();
                Runtime::VersionSpace { class, consistent: all, majority: true }
            }
            LearnerSpec::CommonIntersection => {
                let all = (0..class.len()).collect();
                Runtime::VersionSpace { class, consistent: all, majority: false }
            }
        })
    }

    fn predict(&self, x: ContextId) -> Result<(Vec<ActionId>, bool), SimError> {
        Ok(match self {
            Runtime::Weights { state, k, passk } => {
                if *passk {
                    (state.predict_k_actions(x, *k)?, state.alive_count() == 0)
                } else {
                    let p = state.predict(x);
                    (vec![p.action], p.degenerate)
                }
            }
            Runtime::VersionSpace { class, consistent, majority } => {
                if *majority {
                    let p = majority_from_consistent(class, consistent, x);
                    (vec![p.action], p.degenerate)
                } else {
                    let p = ci_from_consistent(class, consistent, x);
                    (vec![p.action], p.non_realizable)
                }
            }
        })
    }

    fn marginals(&self, x: ContextId) -> Result<Option<Vec<String>>, SimError> {
        Ok(match self {
            Runtime::Weights { state, k, passk: true } => {
                Some(state.predict_k(x, *k)?.marginals.iter().map(|m| m.to_string()).collect())
            }
            _ => None,
        })
    }

    fn update(&mut self, x: ContextId, emitted: &[ActionId], y: ActionId) {
        match self {
            Runtime::Weights { state, passk, .. } => {
                if *passk {
                    state.update_k(x, emitted, y)
                } else {
                    state.update(x, emitted[0], y)
                }
            }
            Runtime::VersionSpace { class, consistent, .. } => consistent.retain(|&i| class.member(i).allows(x, y)),
        }
    }

    fn total_weight(&self) -> WeightValue {
        match self {
            Runtime::Weights { state, .. } => state.total_weight(),
            Runtime::VersionSpace { consistent, .. } => WeightValue::Exact(int(consistent.len() as i64)),
        }
    }

    fn guarantees_monotone(&self) -> bool {
        match self {
            Runtime::Weights { state, passk, .. } => *passk || state.params().satisfies_guarantee(),
            Runtime::VersionSpace { .. } => true,
        }
    }
}

impl Probe for Runtime {
    fn class(&self) -> &ModelClass {
        match self {
            Runtime::Weights { state, .. } => state.class(),
            Runtime::VersionSpace { class, .. } => class,
        }
    }

    fn predict_at(&self, x: ContextId) -> Vec<ActionId> {
        self.predict(x).map(|p| p.0).unwrap_or_default()
    }

    fn alive_with(&self, x: ContextId, y: ActionId) -> usize {
        match self {
            Runtime::Weights { state, .. } => {
                (0..state.class().len()).filter(|&i| state.is_alive(i) && state.class().member(i).allows(x, y)).count()
            }
            Runtime::VersionSpace { class, consistent, .. } => consistent.iter().filter(|&&i| class.member(i).allows(x, y)).count(),
        }
    }
}

fn weight_le(a: &WeightValue, b: &WeightValue) -> bool {
    match (a, b) {
        (WeightValue::Exact(x), WeightValue::Exact(y)) => x <= y,
        _ => a.to_f64() <= b.to_f64() * (1.0 + 1e-9),
    }
}

/// Runs the protocol: context, prediction, private scoring, label, update.
pub fn run_online(
    instance: &ProblemInstance,
    learner: &LearnerSpec,
    source: SequenceSource,
    opts: &RunOptions,
) -> Result<RunRecord, SimError> {
    let class = Arc::clone(&instance.class);
    let mut runtime = Runtime::new(Arc::clone(&class), learner, opts.mode.clone())?;
    let mut rng = rng_from_seed(opts.seed);
    let truth = instance.truth().clone();
    let suboptimal = instance.demonstrator.is_suboptimal();
    let adaptive = match &instance.demonstrator {
        DemonstratorSpec::AdaptiveScript(f) => Some(Arc::clone(f)),
        _ => None,
    };

    let (mut adversary, contexts): (Option<Box<dyn Adversary>>, Script) = match source {
        SequenceSource::Sampled { m, seed } => {
            let mut ctx_rng = rng_from_seed(seed);
            rng = rng_from_seed(seed ^ 0x5DEE_CE66_D1CE_4E5B);
            ((None), (0..m).map(|_| (instance.dist.sample(&mut ctx_rng), None)).collect())
        }
        SequenceSource::Scripted(list) => (None, list),
        SequenceSource::Adversarial(adv) => (Some(adv), Vec::new()),
    };
    let deferred = adversary.as_ref().is_some_and(|a| a.defers_truth());
    let emitter = match &adaptive {
        Some(_) => None,
        None => Some(Emitter::new(&instance.demonstrator, &truth, &mut rng)?),
    };

    let mut rounds: Vec<RoundRecord> = Vec::new();
    let mut monotone_ok = true;
    let mut key_violations = 0u64;
    let mut degenerate_rounds = 0u64;
    let mut prev_weight = opts.record_weights.then(|| runtime.total_weight());
    let mut t = 0u64;
    loop {
        let idx = t as usize;
        let (x, scripted_label) = match &mut adversary {
            Some(adv) => match adv.next_context(&rounds, &runtime) {
                Some(x) => (x, None),
                None => break,
            },
            None => match contexts.get(idx) {
                Some(&(x, y)) => (x, y),
                None => break,
            },
        };
        if x.0 >= class.num_contexts() {
            return Err(SimError::InvalidParameter(format!("context {} out of range", x.0)));
        }
        t += 1;
        let (emitted, degenerate) = runtime.predict(x)?;
        let marginals = if opts.record_weights { runtime.marginals(x)? } else { None };
        let mistake = (!deferred).then(|| emitted.iter().all(|y| !truth.allows(x, *y)));
        let y = match (&mut adversary, scripted_label, &adaptive) {
            (Some(adv), _, _) => adv.reveal(&rounds, x, &emitted, &runtime),
            (None, Some(y), _) => y,
            (None, None, Some(f)) => f(&rounds, x, &emitted),
            (None, None, None) => emitter.as_ref().expect("emitter").emit(&truth, x, &mut rng),
        };
        if y.0 >= class.num_actions() {
            return Err(SimError::InvalidParameter(format!("label {} out of range", y.0)));
        }
        if !deferred && !suboptimal && !truth.allows(x, y) {
            return Err(SimError::DemonstratorViolation { round: t, x: x.0, y: y.0 });
        }
        let key = match &runtime {
            Runtime::Weights { state, passk: true, .. } => {
                let holds = key_inequality(state, x, &emitted, y).holds;
                if !holds {
                    key_violations += 1;
                }
                Some(holds)
            }
            _ => None,
        };
        if degenerate {
            degenerate_rounds += 1;
        }
        let weight_str = prev_weight.as_ref().map(|w| w.to_string());
        runtime.update(x, &emitted, y);
        if let Some(prev) = &prev_weight {
            let now = runtime.total_weight();
            if runtime.guarantees_monotone() && !weight_le(&now, prev) {
                monotone_ok = false;
            }
            prev_weight = Some(now);
        }
        rounds.push(RoundRecord {
            t,
            x,
            y_hat: emitted,
            y,
            mistake,
            total_weight: weight_str,
            marginals,
            degenerate,
            key_inequality: key,
        });
    }

    let truth_index = if deferred {
        let idx = adversary.as_ref().and_then(|a| a.declared_truth(&rounds)).ok_or_else(|| {
            SimError::InvalidParameter("deferred adversary declared no truth".into())
        })?;
        let declared = class.member(idx);
        for r in &mut rounds {
            if !declared.allows(r.x, r.y) {
                return Err(SimError::DemonstratorViolation { round: r.t, x: r.x.0, y: r.y.0 });
            }
            r.mistake = Some(r.y_hat.iter().all(|y| !declared.allows(r.x, *y)));
        }
        idx
    } else {
        instance.truth_index
    };

    let mistakes = rounds.iter().filter(|r| r.mistake == Some(true)).count() as u64;
    let bound = learner.mistake_bound(class.len());
    let ledger = match &runtime {
        Runtime::Weights { state, passk: false, .. } => {
            let mut l = state.ledger();
            l.vs_truth = rounds.iter().map(|r| r.mistake == Some(true)).collect();
            Some(l)
        }
        _ => None,
    };
    let (regret_ok, regret_worst_slack) = match (&runtime, &ledger) {
        (Runtime::Weights { state, passk: false, .. }, Some(l)) if state.params().alpha > int(1) && state.params().beta < int(1) => {
            match regret_check(l, state.params(), class.len()) {
                Ok(r) => (Some(true), Some(r.worst_slack)),
                Err(WeightError::BoundViolated { .. }) => (Some(false), None),
                Err(e) => return Err(e.into()),
            }
        }
        _ => (None, None),
    };
    Ok(RunRecord {
        seed: Some(opts.seed),
        instance_hash: instance.hash(),
        learner: learner.label(),
        truth_index,
        summary: RunSummary {
            rounds: rounds.len() as u64,
            mistakes,
            bound,
            slack: bound.map(|b| b as i64 - mistakes as i64),
            monotone_ok,
            degenerate_rounds,
            key_inequality_violations: key_violations,
            regret_ok,
            regret_worst_slack,
        },
        rounds,
        ledger,
    })
}

/// Randomized search for a realizable sequence that maximizes the learner's
/// mistakes. Budget zero replays the cyclic script `x_t = (t - 1) mod |X|`
/// with demonstrator labels. The worst sequence found is replayed with full
/// recording and returned.
pub fn adversarial_search(
    instance: &ProblemInstance,
    learner: &LearnerSpec,
    rounds: usize,
    budget: usize,
    seed: u64,
    mode: EvalMode,
) -> Result<RunRecord, SimError> {
    let nx = instance.class.num_contexts();
    let baseline: Script = (0..rounds).map(|t| (ContextId(t % nx), None)).collect();
    let full = RunOptions { mode: mode.clone(), record_weights: true, seed };
    let mut best = run_online(instance, learner, SequenceSource::Scripted(baseline), &full)?;
    if budget == 0 {
        return Ok(best);
    }
    let light = RunOptions { mode, record_weights: false, seed };
    let strategies = [LabelStrategy::Random, LabelStrategy::MaxKeep, LabelStrategy::MinKeep];
    let mut best_script: Option<Script> = None;
    let mut best_mistakes = best.summary.mistakes;
    for i in 0..budget {
        let rollout_seed = crate::exact::derive_seed(seed, i as u64);
        let greed = [1.0, 0.9, 0.6, 0.3][i % 4];
        let strategy = strategies[(i / 4) % 3];
        let adv = SearchAdversary::new(instance.truth().clone(), rounds, rollout_seed, greed, strategy);
        let run = run_online(instance, learner, SequenceSource::Adversarial(Box::new(adv)), &light)?;
        if run.summary.mistakes > best_mistakes {
            best_mistakes = run.summary.mistakes;
            best_script = Some(run.script());
        }
    }
    if let Some(script) = best_script {
        best = run_online(instance, learner, SequenceSource::Scripted(script), &full)?;
    }
    Ok(best)
}

/// Deterministic batch policy of the majority or common-intersection rule
/// on the version space of `data`.
pub fn version_space_policy(class: &ModelClass, data: &Dataset, majority: bool) -> Policy {
    let cons = consistent_set(class, data);
    Policy::Deterministic(
        class
            .contexts()
            .map(|x| if majority { majority_from_consistent(class, &cons, x).action } else { ci_from_consistent(class, &cons, x).action })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::ratio;
    use crate::instances::{majority_lb, mle_failure_supp, passk_lb_online, random_instance, DistKind};

    #[test]
    fn rational_floor_log() {
        assert_eq!(floor_log_rational(&int(2), 1024), 10);
        assert_eq!(floor_log_rational(&int(2), 1023), 9);
        // (4/3)^4 = 256/81 <= 4 < (4/3)^5 = 1024/243.
        assert_eq!(floor_log_rational(&ratio(4, 3), 4), 4);
        assert_eq!(floor_log_rational(&int(2), 1), 0);
        assert_eq!(LearnerSpec::Weighted(Hyperparams::majority()).mistake_bound(7), Some(6));
    }

    #[test]
    fn sampled_dataset_is_seeded() {
        let inst = random_instance(4, 3, 6, ratio(1, 2), 9, DistKind::RandomSimplex).unwrap();
        let a = sample_dataset(&inst, 50, 1).unwrap();
        let b = sample_dataset(&inst, 50, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_dataset(&inst, 50, 2).unwrap());
        for &(x, y) in &a.pairs {
            assert!(inst.truth().allows(x, y));
        }
    }

    #[test]
    fn deterministic_min_labels_on_missing_mass_instance() {
        let inst = mle_failure_supp(4, &ratio(1, 2)).unwrap();
        let data = sample_dataset(&inst, 20, 3).unwrap();
        assert!(data.pairs.iter().all(|&(_, y)| y == ActionId(0)));
    }

    #[test]
    fn adaptive_cannot_be_sampled() {
        let mut inst = mle_failure_supp(2, &ratio(1, 2)).unwrap();
        inst.demonstrator = DemonstratorSpec::AdaptiveScript(Arc::new(|_h: &[RoundRecord], _x, _p: &[ActionId]| ActionId(0)));
        assert!(matches!(sample_dataset(&inst, 3, 0), Err(SimError::AdaptiveNotSamplable)));
    }

    #[test]
    fn majority_errs_every_round_on_planted_instance() {
        for d in [3usize, 5, 9] {
            let inst = majority_lb(d).unwrap();
            let q = inst.class.num_contexts();
            let script = (0..q).map(|t| (ContextId(t), None)).collect();
            let run = run_online(&inst, &LearnerSpec::Majority, SequenceSource::Scripted(script), &RunOptions::default()).unwrap();
            assert_eq!(run.summary.mistakes, q as u64);
        }
    }

    #[test]
    fn revealing_adversary_forces_mistakes() {
        let inst = passk_lb_online(1, 4).unwrap();
        let adv = RevealingAdversary { num_contexts: 2, num_actions: 2 };
        let run = run_online(&inst, &LearnerSpec::PassK(1), SequenceSource::Adversarial(Box::new(adv)), &RunOptions::default()).unwrap();
        assert_eq!(run.summary.mistakes, 2);
        assert_eq!(run.recompute_mistakes(inst.class.member(run.truth_index)), vec![true, true]);
    }

    #[test]
    fn off_support_label_is_rejected() {
        let inst = mle_failure_supp(2, &ratio(1, 2)).unwrap();
        let script = vec![(ContextId(0), Some(ActionId(1)))];
        let err = run_online(&inst, &LearnerSpec::Weighted(Hyperparams::realizable()), SequenceSource::Scripted(script), &RunOptions::default());
        assert!(matches!(err, Err(SimError::DemonstratorViolation { round: 1, x: 0, y: 1 })));
    }

    #[test]
    fn transcript_has_header_and_rounds() {
        let inst = majority_lb(5).unwrap();
        let run = run_online(
            &inst,
            &LearnerSpec::Weighted(Hyperparams::realizable()),
            SequenceSource::Sampled { m: 6, seed: 2 },
            &RunOptions::default(),
        )
        .unwrap();
        let text = run.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(header["instance_hash"], json!(inst.hash()));
        let first: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(first["W_t"], json!("5"));
    }

    #[test]
    fn budget_zero_is_cyclic_baseline() {
        let inst = majority_lb(9).unwrap();
        let run = adversarial_search(&inst, &LearnerSpec::Majority, 8, 0, 1, EvalMode::Exact).unwrap();
        let xs: Vec<usize> = run.rounds.iter().map(|r| r.x.0).collect();
        assert_eq!(xs, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(run.summary.mistakes, 4);
    }
}
