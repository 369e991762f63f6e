//! Context distributions, single-action and k-list policies, and exact or
//! Monte Carlo evaluation of loss and value.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use rand::Rng;
use serde_json::json;
use statrs::distribution::{Beta, ContinuousCDF};
use thiserror::Error;

use crate::batch::{BatchError, SnapshotMixture};
use crate::exact::{format_rational, rng_from_seed, value_to_rational, Rational, RationalSampler};
use crate::model::{ActionId, ContextId, RewardFunction, SupportFunction};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy has no exact action probabilities; use Monte Carlo evaluation")]
    InexactPolicy,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("malformed policy file: {0}")]
    Format(String),
    #[error(transparent)]
    Snapshot(#[from] BatchError),
}

/// Distribution over contexts with exact rational masses summing to one.
#[derive(Clone)]
pub struct ContextDistribution {
    probs: Vec<Rational>,
    sampler: RationalSampler,
}

impl fmt::Debug for ContextDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shown: Vec<String> = self.probs.iter().map(format_rational).collect();
        f.debug_struct("ContextDistribution").field("probs", &shown).finish()
    }
}

impl PartialEq for ContextDistribution {
    fn eq(&self, other: &Self) -> bool {
        self.probs == other.probs
    }
}

impl ContextDistribution {
    pub fn new(probs: Vec<Rational>) -> Result<Self, PolicyError> {
        if probs.is_empty() {
            return Err(PolicyError::InvalidDistribution("no contexts".into()));
        }
        if probs.iter().any(|p| p.is_negative()) {
            return Err(PolicyError::InvalidDistribution("negative mass".into()));
        }
        let total: Rational = probs.iter().sum();
        if !total.is_one() {
            return Err(PolicyError::InvalidDistribution(format!("masses sum to {}", format_rational(&total))));
        }
        let sampler = RationalSampler::new(&probs);
        Ok(ContextDistribution { probs, sampler })
    }

    pub fn uniform(n: usize) -> Self {
        let p = Rational::new(BigInt::one(), BigInt::from(n));
        Self::new(vec![p; n]).expect("uniform masses sum to one")
    }

    pub fn point_mass(n: usize, at: usize) -> Self {
        let probs = (0..n).map(|i| if i == at { Rational::one() } else { Rational::zero() }).collect();
        Self::new(probs).expect("point mass sums to one")
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, x: ContextId) -> &Rational {
        &self.probs[x.0]
    }

    pub fn probs(&self) -> &[Rational] {
        &self.probs
    }

    pub fn support(&self) -> impl Iterator<Item = ContextId> + '_ {
        self.probs.iter().enumerate().filter(|(_, p)| !p.is_zero()).map(|(i, _)| ContextId(i))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ContextId {
        ContextId(self.sampler.sample(rng))
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.probs.iter().map(format_rational).collect()
    }

    pub fn from_json_value(v: &serde_json::Value) -> Result<Self, PolicyError> {
        let arr = v.as_array().ok_or_else(|| PolicyError::Format("distribution must be an array".into()))?;
        let probs = arr
            .iter()
            .map(|e| value_to_rational(e).map_err(|e| PolicyError::Format(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(probs)
    }
}

/// Sampling-only policy supplied as a callback; it has no exact probabilities.
pub type SamplerFn = dyn Fn(ContextId, &mut dyn rand::RngCore) -> ActionId + Send + Sync;

#[derive(Clone)]
pub enum Policy {
    Deterministic(Vec<ActionId>),
    UniformSupport(SupportFunction),
    /// Explicit conditional distributions `table[x][y]`.
    Table(Vec<Vec<Rational>>),
    SnapshotMixture(Arc<SnapshotMixture>),
    Sampler(Arc<SamplerFn>),
}

impl fmt::Debug for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Deterministic(t) => f.debug_tuple("Deterministic").field(t).finish(),
            Policy::UniformSupport(s) => f.debug_tuple("UniformSupport").field(s).finish(),
            Policy::Table(t) => f.debug_tuple("Table").field(&t.len()).finish(),
            Policy::SnapshotMixture(m) => f.debug_tuple("SnapshotMixture").field(&m.num_snapshots()).finish(),
            Policy::Sampler(_) => f.write_str("Sampler"),
        }
    }
}

pub fn uniform_support_policy(sigma: &SupportFunction) -> Policy {
    Policy::UniformSupport(sigma.clone())
}

impl Policy {
    pub fn is_exact(&self) -> bool {
        !matches!(self, Policy::Sampler(_))
    }

    /// Exact conditional distribution over `num_actions` actions at `x`.
    pub fn action_probs(&self, x: ContextId, num_actions: usize) -> Result<Vec<Rational>, PolicyError> {
        let mut out = vec![Rational::zero(); num_actions];
        match self {
            Policy::Deterministic(table) => {
                let y = table.get(x.0).ok_or_else(|| dim(format!("context {} outside table", x.0)))?;
                *out.get_mut(y.0).ok_or_else(|| dim(format!("action {} outside space", y.0)))? = Rational::one();
            }
            Policy::UniformSupport(sigma) => {
                let set = sigma.per_context.get(x.0).ok_or_else(|| dim(format!("context {} outside support", x.0)))?;
                let n = set.count();
                if n == 0 {
                    return Err(PolicyError::InvalidDistribution(format!("empty support at context {}", x.0)));
                }
                let p = Rational::new(BigInt::one(), BigInt::from(n));
                for y in set.iter() {
                    *out.get_mut(y).ok_or_else(|| dim(format!("action {y} outside space")))? = p.clone();
                }
            }
            Policy::Table(table) => {
                let row = table.get(x.0).ok_or_else(|| dim(format!("context {} outside table", x.0)))?;
                if row.len() != num_actions {
                    return Err(dim(format!("table row has {} actions, expected {num_actions}", row.len())));
                }
                out.clone_from_slice(row);
            }
            Policy::SnapshotMixture(mix) => {
                if mix.k() != 1 {
                    return Err(dim("a k-list mixture is a list policy".into()));
                }
                let m = mix.num_snapshots();
                for (y, c) in mix.action_counts(x).into_iter().enumerate() {
                    if c > 0 {
                        *out.get_mut(y).ok_or_else(|| dim(format!("action {y} outside space")))? =
                            Rational::new(BigInt::from(c), BigInt::from(m));
                    }
                }
            }
            Policy::Sampler(_) => return Err(PolicyError::InexactPolicy),
        }
        Ok(out)
    }

    pub fn sample<R: rand::RngCore>(&self, x: ContextId, num_actions: usize, rng: &mut R) -> Result<ActionId, PolicyError> {
        match self {
            Policy::Sampler(f) => Ok(f(x, rng)),
            Policy::Deterministic(t) => Ok(t[x.0]),
            Policy::SnapshotMixture(mix) if mix.k() == 1 => {
                let t = rng.random_range(0..mix.num_snapshots());
                Ok(mix.predictions(t, x)[0])
            }
            _ => {
                let probs = self.action_probs(x, num_actions)?;
                Ok(ActionId(RationalSampler::new(&probs).sample(rng)))
            }
        }
    }

    /// JSON form. Mixtures must be saved with [`SnapshotMixture::save`] first
    /// and are written as a reference to that file.
    pub fn to_json(&self, mixture_file: Option<&Path>) -> Result<serde_json::Value, PolicyError> {
        Ok(match self {
            Policy::Deterministic(t) => json!({"kind": "deterministic", "actions": t}),
            Policy::UniformSupport(s) => json!({
                "kind": "uniform_support",
                "supports": s.per_context.iter().map(|a| a.to_vec()).collect::<Vec<_>>(),
            }),
            Policy::Table(t) => json!({
                "kind": "table",
                "probs": t.iter().map(|r| r.iter().map(format_rational).collect::<Vec<_>>()).collect::<Vec<_>>(),
            }),
            Policy::SnapshotMixture(mix) => {
                let path = mixture_file.ok_or_else(|| PolicyError::Format("mixture policies need a snapshot file path".into()))?;
                json!({"kind": "snapshot_mixture", "path": path.display().to_string(), "sha256": mix.content_hash()})
            }
            Policy::Sampler(_) => return Err(PolicyError::InexactPolicy),
        })
    }

    /// Reads a policy; mixtures are reloaded from their snapshot file, whose
    /// hash must match the recorded one. `class` is needed to rebuild them.
    pub fn from_json(
        v: &serde_json::Value,
        num_actions: usize,
        class: Option<Arc<crate::model::ModelClass>>,
    ) -> Result<Self, PolicyError> {
        let fmt = |m: &str| PolicyError::Format(m.to_string());
        match v["kind"].as_str().ok_or_else(|| fmt("missing kind"))? {
            "deterministic" => {
                let acts: Vec<ActionId> = serde_json::from_value(v["actions"].clone()).map_err(|e| fmt(&e.to_string()))?;
                Ok(Policy::Deterministic(acts))
            }
            "uniform_support" => {
                let lists: Vec<Vec<usize>> = serde_json::from_value(v["supports"].clone()).map_err(|e| fmt(&e.to_string()))?;
                Ok(Policy::UniformSupport(SupportFunction::from_lists(num_actions, &lists)))
            }
            "table" => {
                let rows = v["probs"].as_array().ok_or_else(|| fmt("probs must be an array"))?;
                let mut table = Vec::new();
                for row in rows {
                    let row = row.as_array().ok_or_else(|| fmt("probs rows must be arrays"))?;
                    let parsed = row
                        .iter()
                        .map(|e| value_to_rational(e).map_err(|e| fmt(&e.to_string())))
                        .collect::<Result<Vec<_>, _>>()?;
                    let total: Rational = parsed.iter().sum();
                    if !total.is_one() || parsed.iter().any(|p| p.is_negative()) {
                        return Err(PolicyError::InvalidDistribution("table row is not a distribution".into()));
                    }
                    table.push(parsed);
                }
                Ok(Policy::Table(table))
            }
            "snapshot_mixture" => {
                let path = v["path"].as_str().ok_or_else(|| fmt("missing path"))?;
                let hash = v["sha256"].as_str().ok_or_else(|| fmt("missing sha256"))?;
                let class = class.ok_or_else(|| fmt("a model class is required to load a mixture"))?;
                let mix = SnapshotMixture::load(Path::new(path), class, Some(hash))?;
                Ok(Policy::SnapshotMixture(Arc::new(mix)))
            }
            other => Err(fmt(&format!("unknown policy kind {other}"))),
        }
    }
}

fn dim(msg: String) -> PolicyError {
    PolicyError::DimensionMismatch(msg)
}

/// Distribution over ordered k-tuples of actions.
#[derive(Clone, Debug)]
pub enum ListPolicy {
    DeterministicK(Vec<Vec<ActionId>>),
    SnapshotMixtureK(Arc<SnapshotMixture>),
}

impl ListPolicy {
    /// Weighted tuples emitted at `x`; weights sum to one.
    pub fn tuples(&self, x: ContextId) -> Vec<(Rational, Vec<ActionId>)> {
        match self {
            ListPolicy::DeterministicK(t) => vec![(Rational::one(), t[x.0].clone())],
            ListPolicy::SnapshotMixtureK(mix) => {
                let m = mix.num_snapshots();
                let mut grouped: Vec<(usize, Vec<ActionId>)> = Vec::new();
                for t in 0..m {
                    let tuple = mix.predictions(t, x);
                    match grouped.iter_mut().find(|(_, g)| g.as_slice() == tuple) {
                        Some((c, _)) => *c += 1,
                        None => grouped.push((1, tuple.to_vec())),
                    }
                }
                grouped.into_iter().map(|(c, g)| (Rational::new(BigInt::from(c), BigInt::from(m)), g)).collect()
            }
        }
    }
}

fn check_dims(d: &ContextDistribution, truth_len: usize) -> Result<(), PolicyError> {
    if d.len() != truth_len {
        return Err(dim(format!("distribution over {} contexts, truth over {truth_len}", d.len())));
    }
    Ok(())
}

/// `Σ_x D(x) · Pr_{y∼π(·|x)}[y ∉ truth(x)]`, exactly.
pub fn loss_exact(policy: &Policy, d: &ContextDistribution, truth: &SupportFunction) -> Result<Rational, PolicyError> {
    check_dims(d, truth.num_contexts())?;
    let ny = truth.per_context[0].universe();
    let mut total = Rational::zero();
    for x in d.support() {
        let probs = policy.action_probs(x, ny)?;
        let miss: Rational = probs.iter().enumerate().filter(|(y, _)| !truth.at(x).contains(*y)).map(|(_, p)| p).sum();
        total += d.prob(x) * miss;
    }
    Ok(total)
}

/// `E_{x∼D, y∼π}[r(x, y)]`, exactly.
pub fn value_exact(policy: &Policy, d: &ContextDistribution, r: &RewardFunction) -> Result<Rational, PolicyError> {
    if d.len() != r.num_contexts() {
        return Err(dim("distribution and reward disagree on contexts".into()));
    }
    let mut total = Rational::zero();
    for x in d.support() {
        let probs = policy.action_probs(x, r.num_actions())?;
        let v: Rational = probs.iter().zip(r.row(x)).map(|(p, rv)| p * rv).sum();
        total += d.prob(x) * v;
    }
    Ok(total)
}

/// Best achievable value `E_x[max_y r(x, y)]`.
pub fn optimal_value(d: &ContextDistribution, r: &RewardFunction) -> Rational {
    d.support().map(|x| d.prob(x) * r.row_max(x)).sum()
}

/// Probability that every action of the emitted k-tuple misses `truth(x)`.
pub fn passk_loss_exact(mu: &ListPolicy, d: &ContextDistribution, truth: &SupportFunction) -> Result<Rational, PolicyError> {
    check_dims(d, truth.num_contexts())?;
    let mut total = Rational::zero();
    for x in d.support() {
        let miss: Rational =
            mu.tuples(x).into_iter().filter(|(_, t)| t.iter().all(|y| !truth.allows(x, *y))).map(|(p, _)| p).sum();
        total += d.prob(x) * miss;
    }
    Ok(total)
}

/// `E[max_i r(x, y^i)]` under the list policy.
pub fn passk_value_exact(mu: &ListPolicy, d: &ContextDistribution, r: &RewardFunction) -> Result<Rational, PolicyError> {
    if d.len() != r.num_contexts() {
        return Err(dim("distribution and reward disagree on contexts".into()));
    }
    let mut total = Rational::zero();
    for x in d.support() {
        let mut v = Rational::zero();
        for (p, tuple) in mu.tuples(x) {
            let best = tuple.iter().map(|y| r.get(x, *y)).max().cloned().unwrap_or_else(Rational::zero);
            v += p * best;
        }
        total += d.prob(x) * v;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub failures: u64,
    pub n: u64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl McEstimate {
    pub fn half_width(&self) -> f64 {
        (self.ci_high - self.ci_low) / 2.0
    }
}

/// Two-sided Clopper-Pearson interval at level `1 - alpha`.
pub fn clopper_pearson(failures: u64, n: u64, alpha: f64) -> (f64, f64) {
    assert!(n >= 1 && failures <= n);
    let (k, nf) = (failures as f64, n as f64);
    let low = if failures == 0 {
        0.0
    } else {
        Beta::new(k, nf - k + 1.0).expect("valid beta").inverse_cdf(alpha / 2.0)
    };
    let high = if failures == n {
        1.0
    } else {
        Beta::new(k + 1.0, nf - k).expect("valid beta").inverse_cdf(1.0 - alpha / 2.0)
    };
    (low, high)
}

/// Monte Carlo loss estimate from `n` seeded `(x, y)` draws with a 95% interval.
pub fn loss_mc(
    policy: &Policy,
    d: &ContextDistribution,
    truth: &SupportFunction,
    n: u64,
    seed: u64,
) -> Result<McEstimate, PolicyError> {
    check_dims(d, truth.num_contexts())?;
    if n == 0 {
        return Err(PolicyError::InvalidDistribution("at least one draw is required".into()));
    }
    let ny = truth.per_context[0].universe();
    let mut rng = rng_from_seed(seed);
    let samplers: Option<Vec<RationalSampler>> = if matches!(policy, Policy::Sampler(_)) {
        None
    } else {
        Some(
            (0..d.len())
                .map(|x| policy.action_probs(ContextId(x), ny).map(|p| RationalSampler::new(&p)))
                .collect::<Result<_, _>>()?,
        )
    };
    let mut failures = 0u64;
    for _ in 0..n {
        let x = d.sample(&mut rng);
        let y = match &samplers {
            Some(s) => ActionId(s[x.0].sample(&mut rng)),
            None => policy.sample(x, ny, &mut rng)?,
        };
        if !truth.allows(x, y) {
            failures += 1;
        }
    }
    let (ci_low, ci_high) = clopper_pearson(failures, n, 0.05);
    Ok(McEstimate { estimate: failures as f64 / n as f64, failures, n, ci_low, ci_high })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{int, ratio};
    use crate::model::ActionSet;

    fn sigma(lists: &[Vec<usize>], ny: usize) -> SupportFunction {
        SupportFunction::from_lists(ny, lists)
    }

    #[test]
    fn distribution_must_sum_to_one() {
        assert!(ContextDistribution::new(vec![ratio(1, 2), ratio(1, 3)]).is_err());
        assert!(ContextDistribution::new(vec![ratio(3, 2), ratio(-1, 2)]).is_err());
        assert!(ContextDistribution::new(vec![ratio(1, 2), ratio(1, 2)]).is_ok());
    }

    #[test]
    fn optimal_policy_has_zero_loss() {
        let truth = sigma(&[vec![0, 1], vec![2]], 3);
        let d = ContextDistribution::uniform(2);
        assert_eq!(loss_exact(&uniform_support_policy(&truth), &d, &truth).unwrap(), int(0));
    }

    #[test]
    fn uniform_support_wrong_hypothesis_loss() {
        // One context, four actions: sigma1 = {0, 1}, sigma2 = {0, 2, 3}.
        let s1 = sigma(&[vec![0, 1]], 4);
        let s2 = sigma(&[vec![0, 2, 3]], 4);
        let d = ContextDistribution::point_mass(1, 0);
        assert_eq!(loss_exact(&uniform_support_policy(&s1), &d, &s2).unwrap(), ratio(1, 2));
        let probs = uniform_support_policy(&s2).action_probs(ContextId(0), 4).unwrap();
        assert_eq!(probs, vec![ratio(1, 3), int(0), ratio(1, 3), ratio(1, 3)]);
    }

    #[test]
    fn table_loss_matches_enumeration() {
        let table = vec![
            vec![ratio(1, 2), ratio(1, 4), ratio(1, 8), ratio(1, 8)],
            vec![int(0), int(1), int(0), int(0)],
            vec![ratio(1, 3), ratio(1, 3), int(0), ratio(1, 3)],
        ];
        let truth = sigma(&[vec![0], vec![0, 2], vec![1, 3]], 4);
        let d = ContextDistribution::new(vec![ratio(1, 2), ratio(1, 3), ratio(1, 6)]).unwrap();
        let mut expected = int(0);
        for x in 0..3 {
            for y in 0..4 {
                if !truth.per_context[x].contains(y) {
                    expected += d.probs()[x].clone() * table[x][y].clone();
                }
            }
        }
        assert_eq!(loss_exact(&Policy::Table(table), &d, &truth).unwrap(), expected);
    }

    #[test]
    fn indicator_value_is_one_minus_loss() {
        let truth = sigma(&[vec![1], vec![0, 2]], 3);
        let pi = Policy::Table(vec![vec![ratio(1, 3), ratio(1, 3), ratio(1, 3)], vec![int(0), int(1), int(0)]]);
        let d = ContextDistribution::new(vec![ratio(1, 4), ratio(3, 4)]).unwrap();
        let r = RewardFunction::indicator(&truth, 3);
        assert_eq!(value_exact(&pi, &d, &r).unwrap(), int(1) - loss_exact(&pi, &d, &truth).unwrap());
    }

    #[test]
    fn passk_full_cover_and_k1_reduction() {
        let truth = sigma(&[vec![2], vec![0]], 3);
        let d = ContextDistribution::uniform(2);
        let all = ListPolicy::DeterministicK(vec![vec![ActionId(0), ActionId(1), ActionId(2)]; 2]);
        assert_eq!(passk_loss_exact(&all, &d, &truth).unwrap(), int(0));
        let single = ListPolicy::DeterministicK(vec![vec![ActionId(1)], vec![ActionId(0)]]);
        let pi = Policy::Deterministic(vec![ActionId(1), ActionId(0)]);
        assert_eq!(passk_loss_exact(&single, &d, &truth).unwrap(), loss_exact(&pi, &d, &truth).unwrap());
    }

    #[test]
    fn passk_value_uses_best_member() {
        let r = RewardFunction::new(vec![vec![ratio(1, 5), ratio(3, 5), int(1)]]).unwrap();
        let mu = ListPolicy::DeterministicK(vec![vec![ActionId(0), ActionId(1)]]);
        let d = ContextDistribution::point_mass(1, 0);
        assert_eq!(passk_value_exact(&mu, &d, &r).unwrap(), ratio(3, 5));
    }

    #[test]
    fn monte_carlo_is_seeded_and_bounded() {
        let truth = sigma(&[vec![0]], 2);
        let d = ContextDistribution::point_mass(1, 0);
        let zero = Policy::Deterministic(vec![ActionId(0)]);
        let est = loss_mc(&zero, &d, &truth, 1000, 3).unwrap();
        assert_eq!(est.failures, 0);
        assert!(est.ci_high < 3.7 / 1000.0);
        let half = Policy::UniformSupport(SupportFunction::constant(1, ActionSet::full(2)));
        let a = loss_mc(&half, &d, &truth, 5000, 11).unwrap();
        let b = loss_mc(&half, &d, &truth, 5000, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.ci_low <= 0.5 && 0.5 <= a.ci_high);
    }

    #[test]
    fn sampler_policy_is_inexact() {
        let truth = sigma(&[vec![0]], 2);
        let d = ContextDistribution::point_mass(1, 0);
        let pi = Policy::Sampler(Arc::new(|_x, _r: &mut dyn rand::RngCore| ActionId(1)));
        assert!(matches!(loss_exact(&pi, &d, &truth), Err(PolicyError::InexactPolicy)));
        let est = loss_mc(&pi, &d, &truth, 100, 0).unwrap();
        assert_eq!(est.estimate, 1.0);
    }

    #[test]
    fn policy_json_round_trip() {
        let pi = Policy::Table(vec![vec![ratio(1, 3), ratio(2, 3)]]);
        let v = pi.to_json(None).unwrap();
        let back = Policy::from_json(&v, 2, None).unwrap();
        assert_eq!(back.action_probs(ContextId(0), 2).unwrap(), vec![ratio(1, 3), ratio(2, 3)]);
        let det = Policy::Deterministic(vec![ActionId(1), ActionId(0)]);
        let back = Policy::from_json(&det.to_json(None).unwrap(), 2, None).unwrap();
        assert!(matches!(back, Policy::Deterministic(ref t) if t == &vec![ActionId(1), ActionId(0)]));
    }
}
