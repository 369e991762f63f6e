//! Constructors for the worked instances and lower-bound classes, plus
//! seeded random instances.

use std::sync::Arc;

use num_traits::{One, Zero};
use rand::Rng;
use serde_json::json;
use thiserror::Error;

use crate::exact::{ceil_div, floor_log, format_rational, int, rng_from_seed, sha256_hex, Rational};
use crate::model::{validate_class, ActionSet, ContextId, Dataset, ModelClass, ModelClassFile, ModelError, RewardClass, RewardFunction, SupportFunction};
use crate::policy::{passk_loss_exact, ContextDistribution, ListPolicy, PolicyError};
use crate::sim::{DemonstratorSpec, SimError};

/// Largest class any product constructor will materialize.
pub const DEFAULT_CAP: u64 = 1 << 20;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("instance would have {size} hypotheses, above the cap of {cap}")]
    InstanceTooLarge { size: String, cap: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("instance format: {0}")]
    Format(String),
    #[error("demonstrator: {0}")]
    Demonstrator(#[from] SimError),
}

#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub class: Arc<ModelClass>,
    pub dist: ContextDistribution,
    pub truth_index: usize,
    pub demonstrator: DemonstratorSpec,
    pub provenance: String,
}

impl ProblemInstance {
    pub fn new(
        class: ModelClass,
        dist: ContextDistribution,
        truth_index: usize,
        demonstrator: DemonstratorSpec,
        provenance: impl Into<String>,
    ) -> Result<Self, InstanceError> {
        let inst = ProblemInstance { class: Arc::new(class), dist, truth_index, demonstrator, provenance: provenance.into() };
        inst.validate()?;
        Ok(inst)
    }

    pub fn truth(&self) -> &SupportFunction {
        self.class.member(self.truth_index)
    }

    pub fn validate(&self) -> Result<(), InstanceError> {
        validate_class(&self.class)?;
        if self.truth_index >= self.class.len() {
            return Err(InstanceError::InvalidParameter(format!(
                "truth index {} out of range for {} hypotheses",
                self.truth_index,
                self.class.len()
            )));
        }
        if self.dist.len() != self.class.num_contexts() {
            return Err(InstanceError::InvalidParameter("distribution length differs from the context count".into()));
        }
        self.demonstrator.validate(self.truth(), self.class.num_actions())?;
        Ok(())
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self.class.to_file()).expect("class serializes");
        let o = v.as_object_mut().expect("object");
        o.insert("distribution".into(), json!(self.dist.to_strings()));
        o.insert("truth".into(), json!(self.truth_index));
        o.insert("demonstrator".into(), self.demonstrator.to_json());
        o.insert("provenance".into(), json!(self.provenance));
        v
    }

    pub fn to_json(&self) -> String {
        self.to_json_value().to_string()
    }

    pub fn from_json(text: &str) -> Result<Self, InstanceError> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| InstanceError::Format(e.to_string()))?;
        let file: ModelClassFile = serde_json::from_value(v.clone()).map_err(|e| InstanceError::Format(e.to_string()))?;
        let class = ModelClass::from_file(&file)?;
        let dist = match v.get("distribution") {
            Some(d) => ContextDistribution::from_json_value(d)?,
            None => ContextDistribution::uniform(class.num_contexts()),
        };
        let truth = v.get("truth").and_then(|t| t.as_u64()).unwrap_or(0) as usize;
        let demonstrator = match v.get("demonstrator") {
            Some(d) => DemonstratorSpec::from_json(d)?,
            None => DemonstratorSpec::DeterministicMin,
        };
        let provenance = v.get("provenance").and_then(|p| p.as_str()).unwrap_or("file").to_string();
        ProblemInstance::new(class, dist, truth, demonstrator, provenance)
    }

    /// SHA-256 of the serialized instance.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    /// Same class and distribution with another truth; keeps the demonstrator kind.
    pub fn with_truth(&self, truth_index: usize) -> Result<Self, InstanceError> {
        let inst = ProblemInstance { truth_index, ..self.clone() };
        inst.validate()?;
        Ok(inst)
    }
}

fn check_rate(gamma: &Rational) -> Result<(), InstanceError> {
    if *gamma <= Rational::zero() || *gamma >= Rational::one() {
        return Err(InstanceError::InvalidParameter(format!("gamma must lie strictly between 0 and 1, got {}", format_rational(gamma))));
    }
    Ok(())
}

/// Two hypotheses, `{0}` and `{0, 1}` everywhere, on `ceil(m / gamma)`
/// uniformly weighted contexts. The truth is `{0}` and labels are always 0.
pub fn mle_failure_supp(m: usize, gamma: &Rational) -> Result<ProblemInstance, InstanceError> {
    check_rate(gamma)?;
    if m == 0 {
        return Err(InstanceError::InvalidParameter("m must be at least 1".into()));
    }
    let q = ceil_div(m as u64, gamma) as usize;
    let class = ModelClass::new(
        q,
        2,
        vec![
            SupportFunction::named(vec![ActionSet::singleton(2, 0); q], "sigma0"),
            SupportFunction::named(vec![ActionSet::full(2); q], "sigma01"),
        ],
    )?;
    ProblemInstance::new(
        class,
        ContextDistribution::uniform(q),
        0,
        DemonstratorSpec::DeterministicMin,
        format!("missing-mass MLE failure, m={m}, gamma={}", format_rational(gamma)),
    )
}

/// One context, `2s` actions with `s = ceil(1/gamma)`. `sigma1 = {0, 1..s-1}`
/// has size `s`; the truth `sigma2 = {0, s..2s-1}` has size `s + 1`. The
/// demonstrator always plays the shared action 0.
pub fn mle_failure_unif(gamma: &Rational) -> Result<ProblemInstance, InstanceError> {
    check_rate(gamma)?;
    let s = ceil_div(1, gamma) as usize;
    let ny = 2 * s;
    let sigma1 = ActionSet::from_indices(ny, std::iter::once(0).chain(1..s));
    let sigma2 = ActionSet::from_indices(ny, std::iter::once(0).chain(s..ny));
    let class = ModelClass::new(
        1,
        ny,
        vec![SupportFunction::named(vec![sigma1], "sigma1"), SupportFunction::named(vec![sigma2], "sigma2")],
    )?;
    ProblemInstance::new(
        class,
        ContextDistribution::point_mass(1, 0),
        1,
        DemonstratorSpec::DeterministicMin,
        format!("uniform-support MLE failure, gamma={}", format_rational(gamma)),
    )
}

/// Size-`d` class on `q = floor((d-1)/2)` contexts where the truth is `{1}`
/// everywhere and two hypotheses veto label 1 at each coordinate.
pub fn majority_lb(d: usize) -> Result<ProblemInstance, InstanceError> {
    if d < 3 {
        return Err(InstanceError::InvalidParameter("d must be at least 3".into()));
    }
    let q = (d - 1) / 2;
    let mut members = vec![SupportFunction::named(vec![ActionSet::singleton(2, 1); q], "truth")];
    for t in 0..q {
        for j in 0..2 {
            let mut per = vec![ActionSet::full(2); q];
            per[t] = ActionSet::singleton(2, 0);
            members.push(SupportFunction::named(per, format!("veto{t}_{j}")));
        }
    }
    if (d - 1) % 2 == 1 {
        members.push(SupportFunction::named(vec![ActionSet::full(2); q], "neutral"));
    }
    let class = ModelClass::new(q, 2, members)?;
    ProblemInstance::new(
        class,
        ContextDistribution::uniform(q),
        0,
        DemonstratorSpec::DeterministicMin,
        format!("majority lower bound, d={d}"),
    )
}

/// Index of a function `f: X -> Y` in the product class, little-endian in `x`.
pub fn product_index(f: &[usize], num_actions: usize) -> usize {
    f.iter().rev().fold(0, |acc, &y| acc * num_actions + y)
}

/// All functions from `nx` contexts to `ny` actions as singleton supports,
/// ordered by `product_index`.
pub fn product_class(nx: usize, ny: usize, cap: u64) -> Result<ModelClass, InstanceError> {
    let size = (ny as u128).checked_pow(nx as u32).filter(|&s| s <= cap as u128);
    let size = match size {
        Some(s) => s as usize,
        None => {
            let shown = num_bigint::BigUint::from(ny).pow(nx as u32).to_string();
            return Err(InstanceError::InstanceTooLarge { size: shown, cap });
        }
    };
    let members = (0..size)
        .map(|mut idx| {
            let per = (0..nx)
                .map(|_| {
                    let y = idx % ny;
                    idx /= ny;
                    ActionSet::singleton(ny, y)
                })
                .collect();
            SupportFunction::new(per)
        })
        .collect();
    Ok(ModelClass::new(nx, ny, members)?)
}

/// Product class on `k + 1` actions and `floor(log_{k+1} d)` contexts. The
/// matching adversary is `sim::RevealingAdversary`.
pub fn passk_lb_online(k: usize, d: usize) -> Result<ProblemInstance, InstanceError> {
    passk_lb_online_capped(k, d, DEFAULT_CAP)
}

pub fn passk_lb_online_capped(k: usize, d: usize, cap: u64) -> Result<ProblemInstance, InstanceError> {
    if k == 0 || d < 2 {
        return Err(InstanceError::InvalidParameter("need k >= 1 and d >= 2".into()));
    }
    let ny = k + 1;
    let nx = floor_log(ny as u64, d as u64) as usize;
    if nx == 0 {
        return Err(InstanceError::InvalidParameter(format!("d={d} is below k+1={ny}, so there are no contexts")));
    }
    let class = product_class(nx, ny, cap)?;
    ProblemInstance::new(
        class,
        ContextDistribution::uniform(nx),
        0,
        DemonstratorSpec::DeterministicMin,
        format!("k-list online lower bound, k={k}, d={d}"),
    )
}

/// All functions from `q` contexts to `2k` actions, uniform contexts. The
/// stored truth is index 0; trials draw their own.
pub fn passk_lb_stat(k: usize, q: usize) -> Result<ProblemInstance, InstanceError> {
    if k == 0 || q == 0 {
        return Err(InstanceError::InvalidParameter("need k >= 1 and q >= 1".into()));
    }
    let class = product_class(q, 2 * k, DEFAULT_CAP)?;
    ProblemInstance::new(
        class,
        ContextDistribution::uniform(q),
        0,
        DemonstratorSpec::DeterministicMin,
        format!("k-list statistical lower bound, k={k}, q={q}"),
    )
}

/// `|Y| = 2`, both labels correct on `2m` uniform contexts, a single
/// hypothesis. Demonstrators are drawn from the deterministic policies.
pub fn cloning_impossible(m: usize) -> Result<ProblemInstance, InstanceError> {
    if m == 0 {
        return Err(InstanceError::InvalidParameter("m must be at least 1".into()));
    }
    let class = ModelClass::new(2 * m, 2, vec![SupportFunction::named(vec![ActionSet::full(2); 2 * m], "both")])?;
    ProblemInstance::new(
        class,
        ContextDistribution::uniform(2 * m),
        0,
        DemonstratorSpec::RandomDeterministic,
        format!("cloning impossibility, m={m}"),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistKind {
    Uniform,
    /// Normalized integer weights in `1..=16`.
    RandomSimplex,
}

fn random_support(ny: usize, density: &Rational, rng: &mut crate::exact::SeededRng) -> ActionSet {
    // Bernoulli(density) per action with an exact rational threshold.
    let numer = density.numer().to_string().parse::<u64>().unwrap_or(1);
    let denom = density.denom().to_string().parse::<u64>().unwrap_or(1);
    loop {
        let set = ActionSet::from_indices(ny, (0..ny).filter(|_| rng.random_range(0..denom) < numer).collect::<Vec<_>>());
        if !set.is_empty() {
            return set;
        }
    }
}

fn check_density(density: &Rational) -> Result<(), InstanceError> {
    if *density <= Rational::zero() || *density > Rational::one() {
        return Err(InstanceError::InvalidParameter("density must lie in (0, 1]".into()));
    }
    if density.denom().bits() > 63 {
        return Err(InstanceError::InvalidParameter("density denominator is too large".into()));
    }
    Ok(())
}

fn random_distribution(nx: usize, kind: DistKind, rng: &mut crate::exact::SeededRng) -> ContextDistribution {
    match kind {
        DistKind::Uniform => ContextDistribution::uniform(nx),
        DistKind::RandomSimplex => {
            let w: Vec<i64> = (0..nx).map(|_| rng.random_range(1..=16)).collect();
            let total: i64 = w.iter().sum();
            ContextDistribution::new(w.iter().map(|&v| Rational::new(v.into(), total.into())).collect()).expect("valid simplex point")
        }
    }
}

/// Random class with supports drawn at the given inclusion density, a
/// uniformly chosen truth and a deterministic-min demonstrator.
pub fn random_instance(
    num_x: usize,
    num_y: usize,
    num_s: usize,
    density: Rational,
    seed: u64,
    dist: DistKind,
) -> Result<ProblemInstance, InstanceError> {
    if num_x == 0 || num_y == 0 || num_s == 0 {
        return Err(InstanceError::InvalidParameter("sizes must be at least 1".into()));
    }
    check_density(&density)?;
    let mut rng = rng_from_seed(seed);
    let members = (0..num_s)
        .map(|_| SupportFunction::new((0..num_x).map(|_| random_support(num_y, &density, &mut rng)).collect()))
        .collect();
    let class = ModelClass::new(num_x, num_y, members)?;
    let truth = rng.random_range(0..num_s);
    let d = random_distribution(num_x, dist, &mut rng);
    ProblemInstance::new(
        class,
        d,
        truth,
        DemonstratorSpec::DeterministicMin,
        format!("random x={num_x} y={num_y} s={num_s} density={} seed={seed}", format_rational(&density)),
    )
}

/// Random bounded reward class: each entry is `j/4` for `j` in `0..=4`,
/// with at least one entry equal to 1 per row so every row has a best action.
pub fn random_reward_class(num_x: usize, num_y: usize, num_r: usize, seed: u64) -> Result<RewardClass, InstanceError> {
    if num_x == 0 || num_y == 0 || num_r == 0 {
        return Err(InstanceError::InvalidParameter("sizes must be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let members = (0..num_r)
        .map(|_| {
            let table = (0..num_x)
                .map(|_| {
                    let mut row: Vec<Rational> = (0..num_y).map(|_| Rational::new(rng.random_range(0..=4i64).into(), 4.into())).collect();
                    if rng.random_bool(0.5) {
                        let top = rng.random_range(0..num_y);
                        row[top] = int(1);
                    }
                    row
                })
                .collect();
            RewardFunction::new(table)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RewardClass::new(members)?)
}

/// Exact average k-list loss of a learner over a uniformly drawn truth from
/// the product class and every context sequence of length `m`. Labels are
/// the truth's values, so the dataset is determined by the contexts.
pub fn passk_stat_average_loss(
    k: usize,
    q: usize,
    m: usize,
    learner: impl Fn(&Arc<ModelClass>, &Dataset) -> ListPolicy,
) -> Result<Rational, InstanceError> {
    let inst = passk_lb_stat(k, q)?;
    let class = &inst.class;
    let sequences = (q as u128).checked_pow(m as u32).filter(|&n| n * class.len() as u128 <= 1 << 24).ok_or_else(|| {
        InstanceError::InstanceTooLarge { size: format!("{} truths x {q}^{m} sequences", class.len()), cap: 1 << 24 }
    })? as usize;
    let mut total = Rational::zero();
    for truth in class.members() {
        for mut code in 0..sequences {
            let mut data = Dataset::default();
            for _ in 0..m {
                let x = ContextId(code % q);
                code /= q;
                data.push(x, crate::model::ActionId(truth.at(x).min().expect("singleton")));
            }
            let mu = learner(class, &data);
            total += passk_loss_exact(&mu, &inst.dist, truth)?;
        }
    }
    Ok(total / int((class.len() * sequences) as i64))
}

/// Conditional label distribution on binary actions, as the probability of label 0.
pub type BinaryEstimator = dyn Fn(&Dataset, ContextId) -> Rational;

#[derive(Debug, Clone, PartialEq)]
pub struct CloningRow {
    pub estimator: String,
    /// Mean over the demonstrator prior and datasets of `E_x TV(pi_hat, pi*)`.
    pub mean_tv: Rational,
    /// Same average of the squared Hellinger distance `1 - sqrt(pi_hat(a|x))`.
    pub mean_hellinger_sq: f64,
    /// Loss of the estimator against the (only) hypothesis.
    pub loss: Rational,
}

/// Exact averages over all `2^{2m}` deterministic demonstrators and all
/// `(2m)^m` context sequences, for each named estimator.
pub fn cloning_report(m: usize, estimators: &[(String, Box<BinaryEstimator>)]) -> Result<Vec<CloningRow>, InstanceError> {
    let inst = cloning_impossible(m)?;
    let nx = 2 * m;
    if nx > 16 || (nx as u128).pow(m as u32) > 1 << 20 {
        return Err(InstanceError::InstanceTooLarge { size: format!("2^{nx} demonstrators"), cap: 1 << 20 });
    }
    let n_demos = 1usize << nx;
    let n_seq = nx.pow(m as u32);
    let per_x = Rational::new(1.into(), (nx as i64).into());
    let mut rows = Vec::new();
    for (name, est) in estimators {
        let mut tv = Rational::zero();
        let mut h2 = 0.0f64;
        let mut loss = Rational::zero();
        for demo in 0..n_demos {
            let f = |x: usize| (demo >> x) & 1;
            for mut code in 0..n_seq {
                let mut data = Dataset::default();
                for _ in 0..m {
                    let x = code % nx;
                    code /= nx;
                    data.push(ContextId(x), crate::model::ActionId(f(x)));
                }
                for x in 0..nx {
                    let p0 = est(&data, ContextId(x));
                    let p_true = if f(x) == 0 { p0.clone() } else { int(1) - &p0 };
                    tv += (int(1) - &p_true) * &per_x;
                    h2 += (1.0 - crate::exact::to_f64(&p_true).sqrt()) / nx as f64;
                    // Both labels are correct, so no estimator can lose.
                    let policy_probs = [p0.clone(), int(1) - &p0];
                    let correct: Rational = (0..2).filter(|&y| inst.truth().allows(ContextId(x), crate::model::ActionId(y))).map(|y| policy_probs[y].clone()).sum();
                    loss += (int(1) - correct) * &per_x;
                }
            }
        }
        let count = (n_demos * n_seq) as i64;
        rows.push(CloningRow {
            estimator: name.clone(),
            mean_tv: tv / int(count),
            mean_hellinger_sq: h2 / count as f64,
            loss: loss / int(count),
        });
    }
    Ok(rows)
}

/// Constant estimators at `p in {0, 1/4, 1/2, 3/4, 1}` and an empirical
/// memorizer that plays 1/2 on unseen contexts.
pub fn default_cloning_estimators() -> Vec<(String, Box<BinaryEstimator>)> {
    let mut out: Vec<(String, Box<BinaryEstimator>)> = [(0, 1), (1, 4), (1, 2), (3, 4), (1, 1)]
        .into_iter()
        .map(|(n, d)| {
            let p = Rational::new(n.into(), d.into());
            let est: Box<BinaryEstimator> = Box::new(move |_: &Dataset, _: ContextId| p.clone());
            (format!("constant:{}", format_rational(&Rational::new(n.into(), d.into()))), est)
        })
        .collect();
    out.push((
        "memorizer".to_string(),
        Box::new(|data: &Dataset, x: ContextId| {
            let labels: Vec<usize> = data.pairs.iter().filter(|(cx, _)| *cx == x).map(|(_, y)| y.0).collect();
            if labels.is_empty() {
                Rational::new(1.into(), 2.into())
            } else {
                Rational::new((labels.iter().filter(|&&y| y == 0).count() as i64).into(), (labels.len() as i64).into())
            }
        }),
    ));
    out
}

/// Parses generator specs like `majority_lb:d=33`, `random:S=64` or
/// `mle_supp:m=4,gamma=1/2`. Unset random parameters default to
/// `X=8, Y=4, density=1/2, seed=0`.
pub fn from_spec(spec: &str) -> Result<ProblemInstance, InstanceError> {
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let mut params = std::collections::HashMap::new();
    for kv in rest.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| InstanceError::Format(format!("expected key=value, got {kv}")))?;
        params.insert(k.trim().to_string(), v.trim().to_string());
    }
    let num = |key: &str, default: Option<usize>| -> Result<usize, InstanceError> {
        match params.get(key) {
            Some(v) => v.parse().map_err(|_| InstanceError::Format(format!("{key} must be an integer"))),
            None => default.ok_or_else(|| InstanceError::Format(format!("missing parameter {key}"))),
        }
    };
    let rat = |key: &str, default: Option<&str>| -> Result<Rational, InstanceError> {
        let text = params.get(key).map(|s| s.as_str()).or(default).ok_or_else(|| InstanceError::Format(format!("missing parameter {key}")))?;
        crate::exact::parse_rational(text).map_err(|e| InstanceError::Format(e.to_string()))
    };
    match kind {
        "majority_lb" => majority_lb(num("d", None)?),
        "mle_supp" => mle_failure_supp(num("m", None)?, &rat("gamma", None)?),
        "mle_unif" => mle_failure_unif(&rat("gamma", None)?),
        "passk_online" => passk_lb_online(num("k", None)?, num("d", None)?),
        "passk_stat" => passk_lb_stat(num("k", None)?, num("q", None)?),
        "cloning" => cloning_impossible(num("m", None)?),
        "random" => {
            let dist = match params.get("dist").map(|s| s.as_str()) {
                Some("simplex") => DistKind::RandomSimplex,
                _ => DistKind::Uniform,
            };
            random_instance(num("X", Some(8))?, num("Y", Some(4))?, num("S", Some(16))?, rat("density", Some("1/2"))?, num("seed", Some(0))? as u64, dist)
        }
        "file" => {
            let path = params.get("path").ok_or_else(|| InstanceError::Format("missing parameter path".into()))?;
            let text = std::fs::read_to_string(path).map_err(|e| InstanceError::Format(e.to_string()))?;
            ProblemInstance::from_json(&text)
        }
        other => Err(InstanceError::Format(format!("unknown instance generator {other}"))),
    }
}
