//! Mistake-unaware multiplicative weights over a finite model class.
//!
//! Every hypothesis carries integer counters instead of a materialized weight:
//! `a` counts rounds where the learner's own prediction fell outside the
//! hypothesis, `b` counts rounds where the revealed label did, and `c` counts
//! the extra boosts used by the k-list learner. The weight is
//! `alpha^a * beta^b * boost^c` with `0^0 = 1`.
//!
//! Exact mode compares tallies as integers over a shared denominator, so the
//! argmax is never decided by rounding. Log-float mode is a faster estimate
//! that is cross-checked against exact mode in audited runs.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact::{format_rational, int, ratio, to_f64, Rational};
use crate::model::{consistent_set, ActionId, ContextId, Dataset, ModelClass};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WeightError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("regret bound violated for hypothesis {sigma}: {m_alg} own-prediction misses with {m} label misses")]
    BoundViolated { sigma: usize, m_alg: u32, m: u32 },
    #[error("list size {k} must lie in 1..={num_actions}")]
    InvalidK { k: usize, num_actions: usize },
}

/// Update multipliers `(alpha, beta)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperparams {
    #[serde(with = "crate::exact::serde_rational")]
    pub alpha: Rational,
    #[serde(with = "crate::exact::serde_rational")]
    pub beta: Rational,
}

impl Hyperparams {
    pub fn new(alpha: Rational, beta: Rational) -> Result<Self, WeightError> {
        if alpha < Rational::zero() || beta < Rational::zero() {
            return Err(WeightError::InvalidHyperparams("alpha and beta must be non-negative".into()));
        }
        Ok(Hyperparams { alpha, beta })
    }

    /// Halve-and-eliminate: `(2, 0)`.
    pub fn realizable() -> Self {
        Hyperparams { alpha: int(2), beta: int(0) }
    }

    /// Soft update `(4/3, 2/3)` for possibly suboptimal demonstrators.
    pub fn agnostic() -> Self {
        Hyperparams { alpha: ratio(4, 3), beta: ratio(2, 3) }
    }

    /// Plain vote over the consistent hypotheses: `(1, 0)`.
    pub fn majority() -> Self {
        Hyperparams { alpha: int(1), beta: int(0) }
    }

    /// `alpha <= 2 - beta` and `alpha * beta <= 1`, the conditions under which
    /// the total weight can never increase.
    pub fn satisfies_guarantee(&self) -> bool {
        self.alpha <= int(2) - &self.beta && &self.alpha * &self.beta <= int(1)
    }

    pub fn label(&self) -> String {
        format!("({}, {})", format_rational(&self.alpha), format_rational(&self.beta))
    }
}

/// Agreement counters filled by [`EvalMode::Audited`] states.
#[derive(Debug, Default)]
pub struct ModeAudit {
    comparisons: AtomicU64,
    disagreements: AtomicU64,
}

impl ModeAudit {
    pub fn new() -> Arc<Self> {
        Arc::new(ModeAudit::default())
    }

    pub fn comparisons(&self) -> u64 {
        self.comparisons.load(Ordering::Relaxed)
    }

    pub fn disagreements(&self) -> u64 {
        self.disagreements.load(Ordering::Relaxed)
    }

    fn record(&self, agree: bool) {
        self.comparisons.fetch_add(1, Ordering::Relaxed);
        if !agree {
            self.disagreements.fetch_add(1, Ordering::Relaxed);
        }
    }
}

#[derive(Debug, Clone, Default)]
pub enum EvalMode {
    #[default]
    Exact,
    LogFloat,
    /// Evaluates both, answers with the exact result, and counts disagreements.
    Audited(Arc<ModeAudit>),
}

impl EvalMode {
    fn wants_exact(&self) -> bool {
        !matches!(self, EvalMode::LogFloat)
    }

    fn wants_log(&self) -> bool {
        !matches!(self, EvalMode::Exact)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Counters {
    pub a: u32,
    pub b: u32,
    pub c: u32,
}

/// Frozen counters at the start of a round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightSnapshot {
    pub round: u64,
    pub counters: Vec<Counters>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightValue {
    Exact(Rational),
    /// Natural logarithm of the value; `-inf` for zero.
    Log(f64),
}

impl WeightValue {
    pub fn to_f64(&self) -> f64 {
        match self {
            WeightValue::Exact(r) => to_f64(r),
            WeightValue::Log(l) => l.exp(),
        }
    }

    pub fn as_exact(&self) -> Option<&Rational> {
        match self {
            WeightValue::Exact(r) => Some(r),
            WeightValue::Log(_) => None,
        }
    }
}

impl fmt::Display for WeightValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightValue::Exact(r) => f.write_str(&format_rational(r)),
            WeightValue::Log(l) => write!(f, "exp({l})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub action: ActionId,
    /// Set when every hypothesis has weight zero and the default action was returned.
    pub degenerate: bool,
}

/// Per-hypothesis mistake counts relative to each hypothesis.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MistakeLedger {
    /// Rounds where the learner's prediction fell outside the hypothesis.
    pub m_alg: Vec<u32>,
    /// Rounds where the revealed label fell outside the hypothesis.
    pub m: Vec<u32>,
    /// Per-round mistake flags against a declared truth, when the driver has one.
    pub vs_truth: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretEntry {
    pub sigma: usize,
    pub m_alg: u32,
    pub m: u32,
    pub bound: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretReport {
    pub entries: Vec<RegretEntry>,
    pub worst_slack: f64,
}

/// Integer tally in the shared-denominator representation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tally {
    Small(u128),
    Big(BigUint),
}

impl Tally {
    fn to_biguint(&self) -> BigUint {
        match self {
            Tally::Small(v) => BigUint::from(*v),
            Tally::Big(v) => v.clone(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Tally::Small(v) => *v == 0,
            Tally::Big(v) => v.is_zero(),
        }
    }
}

#[derive(Debug, Clone)]
struct ExactCache {
    /// Per-hypothesis numerator when every one fits in 64 bits.
    small: Option<Vec<u64>>,
    /// Group index per hypothesis (`u32::MAX` when dead) and group numerators.
    group_of: Vec<u32>,
    group_w: Vec<BigUint>,
    /// Multiply numerators by this to recover true weights.
    scale: Rational,
}

#[derive(Debug, Clone)]
struct LogCache {
    lw: Vec<f64>,
    max: f64,
}

const LOG_TIE_TOLERANCE: f64 = 1e-12;

#[derive(Clone)]
pub struct WeightState {
    class: Arc<ModelClass>,
    params: Hyperparams,
    boost: u64,
    mode: EvalMode,
    counters: Vec<Counters>,
    alive: Vec<bool>,
    round: u64,
    exact: Option<ExactCache>,
    log: Option<LogCache>,
}

impl fmt::Debug for WeightState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WeightState")
            .field("params", &self.params.label())
            .field("boost", &self.boost)
            .field("round", &self.round)
            .field("alive", &self.alive.iter().filter(|a| **a).count())
            .finish()
    }
}

impl WeightState {
    /// Fresh state with unit weights; rejects multipliers under which the
    /// total weight could grow.
    pub fn new(class: Arc<ModelClass>, params: Hyperparams, mode: EvalMode) -> Result<Self, WeightError> {
        if !params.satisfies_guarantee() {
            return Err(WeightError::InvalidHyperparams(format!(
                "{} violates alpha <= 2 - beta and alpha * beta <= 1",
                params.label()
            )));
        }
        Ok(Self::new_unchecked(class, params, mode))
    }

    /// Fresh state without the monotonicity check, for replay and stress tooling.
    pub fn new_unchecked(class: Arc<ModelClass>, params: Hyperparams, mode: EvalMode) -> Self {
        Self::with_boost(class, params, 1, mode)
    }

    pub(crate) fn with_boost(class: Arc<ModelClass>, params: Hyperparams, boost: u64, mode: EvalMode) -> Self {
        let n = class.len();
        let mut state = WeightState {
            class,
            params,
            boost,
            mode,
            counters: vec![Counters::default(); n],
            alive: vec![true; n],
            round: 1,
            exact: None,
            log: None,
        };
        state.refresh();
        state
    }

    pub fn class(&self) -> &Arc<ModelClass> {
        &self.class
    }

    pub fn params(&self) -> &Hyperparams {
        &self.params
    }

    pub fn boost(&self) -> u64 {
        self.boost
    }

    pub fn mode(&self) -> &EvalMode {
        &self.mode
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn counters(&self) -> &[Counters] {
        &self.counters
    }

    pub fn is_alive(&self, sigma: usize) -> bool {
        self.alive[sigma]
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|a| **a).count()
    }

    fn weight_is_nonzero(&self, c: Counters) -> bool {
        (c.a == 0 || !self.params.alpha.is_zero()) && (c.b == 0 || !self.params.beta.is_zero())
    }

    /// Exact weight of a single hypothesis.
    pub fn weight(&self, sigma: usize) -> Rational {
        self.weight_of(self.counters[sigma])
    }

    /// Exact weight carried by a counter triple under this state's multipliers.
    pub fn weight_of(&self, c: Counters) -> Rational {
        pow_r(&self.params.alpha, c.a) * pow_r(&self.params.beta, c.b) * pow_r(&int(self.boost as i64), c.c)
    }

    fn refresh(&mut self) {
        for i in 0..self.counters.len() {
            self.alive[i] = self.weight_is_nonzero(self.counters[i]);
        }
        self.exact = if self.mode.wants_exact() { Some(self.build_exact()) } else { None };
        self.log = if self.mode.wants_log() { Some(self.build_log()) } else { None };
    }

    fn build_exact(&self) -> ExactCache {
        let n = self.counters.len();
        let alive: Vec<usize> = (0..n).filter(|&i| self.alive[i]).collect();
        if alive.is_empty() {
            return ExactCache { small: Some(vec![0; n]), group_of: vec![u32::MAX; n], group_w: vec![], scale: int(0) };
        }
        let min = |f: fn(&Counters) -> u32| alive.iter().map(|&i| f(&self.counters[i])).min().unwrap();
        let (amin, bmin, cmin) = (min(|c| c.a), min(|c| c.b), min(|c| c.c));
        let amax = alive.iter().map(|&i| self.counters[i].a).max().unwrap() - amin;
        let bmax = alive.iter().map(|&i| self.counters[i].b).max().unwrap() - bmin;

        let (p1, q1) = split(&self.params.alpha);
        let (p2, q2) = split(&self.params.beta);
        let boost = BigUint::from(self.boost);

        let mut group_index: HashMap<(u32, u32, u32), u32> = HashMap::new();
        let mut group_w: Vec<BigUint> = Vec::new();
        let mut group_of = vec![u32::MAX; n];
        for &i in &alive {
            let c = self.counters[i];
            let key = (c.a - amin, c.b - bmin, c.c - cmin);
            let g = *group_index.entry(key).or_insert_with(|| {
                let (a, b, cc) = key;
                let w = num_traits::pow(p1.clone(), a as usize)
                    * num_traits::pow(q1.clone(), (amax - a) as usize)
                    * num_traits::pow(p2.clone(), b as usize)
                    * num_traits::pow(q2.clone(), (bmax - b) as usize)
                    * num_traits::pow(boost.clone(), cc as usize);
                group_w.push(w);
                (group_w.len() - 1) as u32
            });
            group_of[i] = g;
        }
        let small = if group_w.iter().all(|w| w.bits() <= 64) {
            let gw: Vec<u64> = group_w.iter().map(|w| w.to_u64().unwrap()).collect();
            Some(group_of.iter().map(|&g| if g == u32::MAX { 0 } else { gw[g as usize] }).collect())
        } else {
            None
        };
        let denom = BigRational::from_integer(BigInt::from(
            num_traits::pow(q1, amax as usize) * num_traits::pow(q2, bmax as usize),
        ));
        let scale = pow_r(&self.params.alpha, amin)
            * pow_r(&self.params.beta, bmin)
            * pow_r(&int(self.boost as i64), cmin)
            / denom;
        ExactCache { small, group_of, group_w, scale }
    }

    fn build_log(&self) -> LogCache {
        let la = to_f64(&self.params.alpha).ln();
        let lb = to_f64(&self.params.beta).ln();
        let lc = (self.boost as f64).ln();
        let term = |k: u32, l: f64| if k == 0 { 0.0 } else { k as f64 * l };
        let lw: Vec<f64> = self
            .counters
            .iter()
            .zip(&self.alive)
            .map(|(c, &alive)| {
                if alive {
                    term(c.a, la) + term(c.b, lb) + term(c.c, lc)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        LogCache { lw, max }
    }

    /// Exact per-action tallies at `x` restricted to hypotheses with `include[σ]`.
    fn exact_tallies(&self, x: ContextId, include: Option<&[bool]>) -> Vec<Tally> {
        let cache = self.exact.as_ref().expect("exact cache present");
        let ny = self.class.num_actions();
        let members = self.class.members();
        let keep = |i: usize| self.alive[i] && include.is_none_or(|inc| inc[i]);
        match &cache.small {
            Some(w) => {
                let mut t = vec![0u128; ny];
                for (i, sigma) in members.iter().enumerate() {
                    if keep(i) {
                        let wi = w[i] as u128;
                        for y in sigma.at(x).iter() {
                            t[y] += wi;
                        }
                    }
                }
                t.into_iter().map(Tally::Small).collect()
            }
            None => {
                let groups = cache.group_w.len();
                let mut counts = vec![0u64; groups * ny];
                for (i, sigma) in members.iter().enumerate() {
                    if keep(i) {
                        let g = cache.group_of[i] as usize;
                        for y in sigma.at(x).iter() {
                            counts[g * ny + y] += 1;
                        }
                    }
                }
                (0..ny)
                    .map(|y| {
                        let mut acc = BigUint::zero();
                        for g in 0..groups {
                            let c = counts[g * ny + y];
                            if c > 0 {
                                acc += &cache.group_w[g] * c;
                            }
                        }
                        Tally::Big(acc)
                    })
                    .collect()
            }
        }
    }

    /// Shifted float tallies at `x`; values are relative to the largest weight.
    fn log_tallies(&self, x: ContextId, include: Option<&[bool]>) -> Vec<f64> {
        let cache = self.log.as_ref().expect("log cache present");
        let ny = self.class.num_actions();
        let mut sum = vec![0.0f64; ny];
        let mut comp = vec![0.0f64; ny];
        for (i, sigma) in self.class.members().iter().enumerate() {
            if !self.alive[i] || include.is_some_and(|inc| !inc[i]) {
                continue;
            }
            let v = (cache.lw[i] - cache.max).exp();
            for y in sigma.at(x).iter() {
                let s = sum[y] + v;
                if sum[y].abs() >= v.abs() {
                    comp[y] += (sum[y] - s) + v;
                } else {
                    comp[y] += (v - s) + sum[y];
                }
                sum[y] = s;
            }
        }
        sum.iter().zip(&comp).map(|(s, c)| s + c).collect()
    }

    fn exact_argmax(tallies: &[Tally], skip: &[bool]) -> usize {
        let mut best: Option<usize> = None;
        for (y, t) in tallies.iter().enumerate() {
            if skip[y] {
                continue;
            }
            if best.is_none_or(|b| *t > tallies[b]) {
                best = Some(y);
            }
        }
        best.expect("at least one candidate action")
    }

    fn log_argmax(tallies: &[f64], skip: &[bool]) -> usize {
        let vmax = tallies.iter().zip(skip).filter(|(_, s)| !**s).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        let threshold = vmax * (1.0 - LOG_TIE_TOLERANCE);
        (0..tallies.len()).find(|&y| !skip[y] && tallies[y] >= threshold).expect("at least one candidate action")
    }

    /// Weight-maximizing action at `x`, smallest index on ties.
    pub fn predict(&self, x: ContextId) -> Prediction {
        if self.alive_count() == 0 {
            return Prediction { action: ActionId(0), degenerate: true };
        }
        let skip = vec![false; self.class.num_actions()];
        let exact = self.exact.as_ref().map(|_| Self::exact_argmax(&self.exact_tallies(x, None), &skip));
        let log = self.log.as_ref().map(|_| Self::log_argmax(&self.log_tallies(x, None), &skip));
        let action = self.reconcile(exact, log);
        Prediction { action: ActionId(action), degenerate: false }
    }

    fn reconcile<T: PartialEq>(&self, exact: Option<T>, log: Option<T>) -> T {
        match (&self.mode, exact, log) {
            (EvalMode::Audited(audit), Some(e), Some(l)) => {
                audit.record(e == l);
                e
            }
            (_, Some(e), _) => e,
            (_, None, Some(l)) => l,
            _ => unreachable!("at least one evaluation mode is active"),
        }
    }

    /// Per-action tallies `Σ_{σ: y ∈ σ(x)} w(σ)` as values.
    pub fn tallies(&self, x: ContextId) -> Vec<WeightValue> {
        if let Some(cache) = &self.exact {
            self.exact_tallies(x, None).iter().map(|t| WeightValue::Exact(tally_value(t, &cache.scale))).collect()
        } else {
            let cache = self.log.as_ref().unwrap();
            self.log_tallies(x, None).iter().map(|v| WeightValue::Log(v.ln() + cache.max)).collect()
        }
    }

    /// Applies one round: `a += [ŷ ∉ σ(x)]`, `b += [y ∉ σ(x)]`.
    pub fn update(&mut self, x: ContextId, y_hat: ActionId, y: ActionId) {
        for (c, sigma) in self.counters.iter_mut().zip(self.class.members()) {
            let set = sigma.at(x);
            if !set.contains(y_hat.0) {
                c.a += 1;
            }
            if !set.contains(y.0) {
                c.b += 1;
            }
        }
        self.round += 1;
        self.refresh();
    }

    /// Sum of all weights.
    pub fn total_weight(&self) -> WeightValue {
        match &self.exact {
            Some(cache) => {
                let total = match &cache.small {
                    Some(w) => Tally::Small(w.iter().map(|&v| v as u128).sum()),
                    None => {
                        let mut counts = vec![0u64; cache.group_w.len()];
                        for &g in &cache.group_of {
                            if g != u32::MAX {
                                counts[g as usize] += 1;
                            }
                        }
                        Tally::Big(cache.group_w.iter().zip(&counts).map(|(w, &c)| w * c).sum())
                    }
                };
                WeightValue::Exact(tally_value(&total, &cache.scale))
            }
            None => {
                let cache = self.log.as_ref().unwrap();
                let s: f64 = cache.lw.iter().map(|l| (l - cache.max).exp()).sum();
                WeightValue::Log(if s == 0.0 { f64::NEG_INFINITY } else { cache.max + s.ln() })
            }
        }
    }

    /// Exact total weight regardless of mode (recomputed from the counters).
    pub fn total_weight_exact(&self) -> Rational {
        (0..self.counters.len()).filter(|&i| self.alive[i]).map(|i| self.weight(i)).sum()
    }

    pub fn snapshot(&self) -> WeightSnapshot {
        WeightSnapshot { round: self.round, counters: self.counters.clone() }
    }

    pub fn restore(&mut self, snapshot: &WeightSnapshot) {
        assert_eq!(snapshot.counters.len(), self.counters.len(), "snapshot for a different class");
        self.counters.clone_from(&snapshot.counters);
        self.round = snapshot.round;
        self.refresh();
    }

    pub fn ledger(&self) -> MistakeLedger {
        MistakeLedger {
            m_alg: self.counters.iter().map(|c| c.a).collect(),
            m: self.counters.iter().map(|c| c.b).collect(),
            vs_truth: Vec::new(),
        }
    }

    pub(crate) fn exact_scale(&self) -> Option<&Rational> {
        self.exact.as_ref().map(|c| &c.scale)
    }

    pub(crate) fn exact_tallies_masked(&self, x: ContextId, include: &[bool]) -> Vec<Tally> {
        self.exact_tallies(x, Some(include))
    }

    pub(crate) fn log_tallies_masked(&self, x: ContextId, include: &[bool]) -> Vec<f64> {
        self.log_tallies(x, Some(include))
    }

    pub(crate) fn log_max(&self) -> Option<f64> {
        self.log.as_ref().map(|c| c.max)
    }

    pub(crate) fn has_exact(&self) -> bool {
        self.exact.is_some()
    }

    pub(crate) fn has_log(&self) -> bool {
        self.log.is_some()
    }

    pub(crate) fn apply_round(&mut self, x: ContextId, f: impl Fn(&mut Counters, &crate::model::ActionSet)) {
        for (c, sigma) in self.counters.iter_mut().zip(self.class.members()) {
            f(c, sigma.at(x));
        }
        self.round += 1;
        self.refresh();
    }

    pub(crate) fn argmax_exact(tallies: &[Tally], skip: &[bool]) -> usize {
        Self::exact_argmax(tallies, skip)
    }

    pub(crate) fn argmax_log(tallies: &[f64], skip: &[bool]) -> usize {
        Self::log_argmax(tallies, skip)
    }

    pub(crate) fn reconcile_pub<T: PartialEq>(&self, exact: Option<T>, log: Option<T>) -> T {
        self.reconcile(exact, log)
    }
}

pub(crate) fn tally_value(t: &Tally, scale: &Rational) -> Rational {
    BigRational::from_integer(BigInt::from(t.to_biguint())) * scale
}

fn split(r: &Rational) -> (BigUint, BigUint) {
    (
        r.numer().to_biguint().expect("non-negative hyperparameter"),
        r.denom().to_biguint().expect("positive denominator"),
    )
}

fn pow_r(base: &Rational, e: u32) -> Rational {
    if e == 0 {
        Rational::one()
    } else {
        num_traits::pow(base.clone(), e as usize)
    }
}

/// Checks `alpha^{M_alg(σ)} * beta^{M(σ)} <= |S|` for every hypothesis, the
/// exact form of `M_alg <= (log|S| + M log(1/beta)) / log(alpha)`.
pub fn regret_check(ledger: &MistakeLedger, params: &Hyperparams, class_size: usize) -> Result<RegretReport, WeightError> {
    if params.alpha <= int(1) || params.beta >= int(1) {
        return Err(WeightError::InvalidHyperparams("regret bound needs alpha > 1 and beta < 1".into()));
    }
    let size = int(class_size as i64);
    let la = to_f64(&params.alpha).ln();
    let lb = to_f64(&params.beta).ln();
    let mut entries = Vec::with_capacity(ledger.m_alg.len());
    let mut worst = f64::INFINITY;
    for (sigma, (&m_alg, &m)) in ledger.m_alg.iter().zip(&ledger.m).enumerate() {
        let lhs = pow_r(&params.alpha, m_alg) * pow_r(&params.beta, m);
        if lhs > size {
            return Err(WeightError::BoundViolated { sigma, m_alg, m });
        }
        let bound = if m == 0 {
            (class_size as f64).ln() / la
        } else if params.beta.is_zero() {
            f64::INFINITY
        } else {
            ((class_size as f64).ln() - m as f64 * lb) / la
        };
        let slack = bound - m_alg as f64;
        worst = worst.min(slack);
        entries.push(RegretEntry { sigma, m_alg, m, bound, slack });
    }
    Ok(RegretReport { entries, worst_slack: worst })
}

fn argmax_counts(counts: &[usize]) -> usize {
    let mut best = 0;
    for (y, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = y;
        }
    }
    best
}

/// Majority vote among hypotheses consistent with `data`.
pub fn majority_predict(class: &ModelClass, data: &Dataset, x: ContextId) -> Prediction {
    majority_from_consistent(class, &consistent_set(class, data), x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CiPrediction {
    pub action: ActionId,
    pub in_intersection: bool,
    /// No hypothesis is consistent with the data.
    pub non_realizable: bool,
}

/// Smallest action shared by every consistent hypothesis; otherwise the
/// smallest action of the lowest-index consistent hypothesis.
pub fn common_intersection_predict(class: &ModelClass, data: &Dataset, x: ContextId) -> CiPrediction {
    let cons = consistent_set(class, data);
    ci_from_consistent(class, &cons, x)
}

pub(crate) fn ci_from_consistent(class: &ModelClass, cons: &[usize], x: ContextId) -> CiPrediction {
    let Some(&first) = cons.first() else {
        return CiPrediction { action: ActionId(0), in_intersection: false, non_realizable: true };
    };
    let mut inter = class.member(first).at(x).clone();
    for &i in &cons[1..] {
        inter = inter.intersection(class.member(i).at(x));
    }
    match inter.min() {
        Some(y) => CiPrediction { action: ActionId(y), in_intersection: true, non_realizable: false },
        None => CiPrediction {
            action: ActionId(class.member(first).at(x).min().expect("non-empty support")),
            in_intersection: false,
            non_realizable: false,
        },
    }
}

pub(crate) fn majority_from_consistent(class: &ModelClass, cons: &[usize], x: ContextId) -> Prediction {
    if cons.is_empty() {
        return Prediction { action: ActionId(0), degenerate: true };
    }
    let mut counts = vec![0usize; class.num_actions()];
    for &i in cons {
        for y in class.member(i).at(x).iter() {
            counts[y] += 1;
        }
    }
    Prediction { action: ActionId(argmax_counts(&counts)), degenerate: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActionSet, SupportFunction};

    fn class(nx: usize, ny: usize, members: Vec<Vec<Vec<usize>>>) -> Arc<ModelClass> {
        Arc::new(ModelClass::new(nx, ny, members.iter().map(|m| SupportFunction::from_lists(ny, m)).collect()).unwrap())
    }

    #[test]
    fn presets_and_validation() {
        let c = class(1, 2, vec![vec![vec![0]]; 8]);
        let s = WeightState::new(c.clone(), Hyperparams::realizable(), EvalMode::Exact).unwrap();
        assert_eq!(s.total_weight(), WeightValue::Exact(int(8)));
        assert!(WeightState::new(c.clone(), Hyperparams::agnostic(), EvalMode::Exact).is_ok());
        let bad = Hyperparams::new(int(3), int(1)).unwrap();
        assert!(matches!(WeightState::new(c, bad, EvalMode::Exact), Err(WeightError::InvalidHyperparams(_))));
    }

    #[test]
    fn fresh_vote_on_two_hypotheses() {
        let c = class(2, 2, vec![vec![vec![0], vec![0]], vec![vec![0, 1], vec![0, 1]]]);
        let s = WeightState::new(c, Hyperparams::realizable(), EvalMode::Exact).unwrap();
        assert_eq!(s.predict(ContextId(0)).action, ActionId(0));
        assert_eq!(s.tallies(ContextId(0)), vec![WeightValue::Exact(int(2)), WeightValue::Exact(int(1))]);
    }

    #[test]
    fn realizable_update_cases() {
        let c = class(1, 3, vec![vec![vec![0]], vec![vec![1]], vec![vec![1, 2]], vec![vec![0, 1]]]);
        let mut s = WeightState::new(c, Hyperparams::realizable(), EvalMode::Exact).unwrap();
        // Prediction 0, label 1.
        s.update(ContextId(0), ActionId(0), ActionId(1));
        assert!(!s.is_alive(0));
        assert_eq!(s.weight(1), int(2));
        assert_eq!(s.weight(2), int(2));
        assert_eq!(s.weight(3), int(1));
        assert_eq!(s.total_weight(), WeightValue::Exact(int(5)));
    }

    #[test]
    fn all_dead_is_flagged() {
        let c = class(1, 2, vec![vec![vec![0]]]);
        let mut s = WeightState::new(c, Hyperparams::realizable(), EvalMode::Exact).unwrap();
        s.update(ContextId(0), ActionId(0), ActionId(1));
        let p = s.predict(ContextId(0));
        assert!(p.degenerate);
        assert_eq!(p.action, ActionId(0));
        assert_eq!(s.total_weight(), WeightValue::Exact(int(0)));
    }

    #[test]
    fn agnostic_weights_reconstruct_and_big_path_agrees() {
        let c = class(2, 3, vec![vec![vec![0], vec![1]], vec![vec![1, 2], vec![0]], vec![vec![2], vec![0, 1, 2]]]);
        let mut exact = WeightState::new(c.clone(), Hyperparams::agnostic(), EvalMode::Exact).unwrap();
        let mut log = WeightState::new(c, Hyperparams::agnostic(), EvalMode::LogFloat).unwrap();
        let mut prev = exact.total_weight_exact();
        for t in 0..120u64 {
            let x = ContextId((t % 2) as usize);
            let y_hat = exact.predict(x).action;
            assert_eq!(log.predict(x).action, y_hat);
            let y = ActionId(((t * 7 + 3) % 3) as usize);
            exact.update(x, y_hat, y);
            log.update(x, y_hat, y);
            let total = exact.total_weight_exact();
            assert_eq!(exact.total_weight(), WeightValue::Exact(total.clone()));
            assert!(total <= prev);
            prev = total;
        }
        // After many rounds the numerators leave 64 bits.
        assert!(exact.exact.as_ref().unwrap().small.is_none());
    }

    #[test]
    fn regret_identity_and_violation() {
        let ledger = MistakeLedger { m_alg: vec![3, 0], m: vec![0, 0], vs_truth: vec![] };
        assert!(regret_check(&ledger, &Hyperparams::realizable(), 8).is_ok());
        assert!(matches!(
            regret_check(&ledger, &Hyperparams::realizable(), 7),
            Err(WeightError::BoundViolated { sigma: 0, .. })
        ));
        let single = MistakeLedger { m_alg: vec![2], m: vec![5], vs_truth: vec![] };
        let r = regret_check(&single, &Hyperparams::agnostic(), 1).unwrap();
        assert!(r.entries[0].bound >= 2.0);
    }

    #[test]
    fn majority_and_intersection() {
        let c = class(1, 2, vec![vec![vec![0]], vec![vec![0, 1]]]);
        let empty = Dataset::default();
        assert_eq!(majority_predict(&c, &empty, ContextId(0)).action, ActionId(0));
        let ci = common_intersection_predict(&c, &empty, ContextId(0));
        assert_eq!(ci, CiPrediction { action: ActionId(0), in_intersection: true, non_realizable: false });
        let disjoint = class(1, 3, vec![vec![vec![1, 2]], vec![vec![0, 2]], vec![vec![0, 1]]]);
        let ci = common_intersection_predict(&disjoint, &empty, ContextId(0));
        assert_eq!(ci.action, ActionId(1));
        assert!(!ci.in_intersection);
        let none = common_intersection_predict(&c, &Dataset::from_raw(&[(0, 1), (0, 0)]), ContextId(0));
        assert!(!none.non_realizable);
        let bad = class(1, 3, vec![vec![vec![0]]]);
        assert!(common_intersection_predict(&bad, &Dataset::from_raw(&[(0, 2)]), ContextId(0)).non_realizable);
    }

    #[test]
    fn audited_mode_counts_comparisons() {
        let audit = ModeAudit::new();
        let c = Arc::new(ModelClass::new(1, 2, vec![SupportFunction::constant(1, ActionSet::full(2))]).unwrap());
        let s = WeightState::new(c, Hyperparams::realizable(), EvalMode::Audited(audit.clone())).unwrap();
        s.predict(ContextId(0));
        assert_eq!(audit.comparisons(), 1);
        assert_eq!(audit.disagreements(), 0);
    }
}
