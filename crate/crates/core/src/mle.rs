//! Maximum-likelihood baselines.
//!
//! For uniform-on-support policies the likelihood of a dataset under `σ` is
//! `Π_i 1/|σ(x_i)|` when `σ` is consistent and zero otherwise, so comparing
//! likelihoods reduces to comparing the integer products `Π_i |σ(x_i)|`.

use num_bigint::{BigInt, BigUint};
use num_traits::{One, Zero};
use serde_json::json;
use thiserror::Error;

use crate::exact::Rational;
use crate::model::{consistent_set, ContextId, Dataset, ModelClass, SupportFunction};
use crate::policy::{ContextDistribution, Policy, PolicyError};

#[derive(Debug, Error)]
pub enum MleError {
    #[error("no hypothesis is consistent with the data")]
    EmptyVersionSpace,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MleReport {
    pub consistent: Vec<usize>,
    /// Consistent hypotheses with the smallest product, i.e. largest likelihood.
    pub argmax_set: Vec<usize>,
    /// `Π_i |σ(x_i)|` for each consistent hypothesis, aligned with `consistent`.
    pub products: Vec<BigUint>,
    pub non_realizable: bool,
}

impl MleReport {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "consistent": self.consistent,
            "argmax_set": self.argmax_set,
            "products": self.products.iter().map(|p| p.to_string()).collect::<Vec<_>>(),
            "non_realizable": self.non_realizable,
        })
    }
}

/// Likelihood maximizers over the uniform-on-support policies of the class.
pub fn mle_unif(class: &ModelClass, data: &Dataset) -> MleReport {
    let consistent = consistent_set(class, data);
    let products: Vec<BigUint> = consistent
        .iter()
        .map(|&i| {
            let sigma = class.member(i);
            // Multiply in u64 chunks and spill to big integers only when needed.
            let mut acc = BigUint::one();
            let mut chunk: u64 = 1;
            for &(x, _) in &data.pairs {
                let n = sigma.at(x).count() as u64;
                match chunk.checked_mul(n) {
                    Some(v) => chunk = v,
                    None => {
                        acc *= chunk;
                        chunk = n;
                    }
                }
            }
            acc * chunk
        })
        .collect();
    let best = products.iter().min().cloned();
    let argmax_set = match &best {
        Some(b) => consistent.iter().zip(&products).filter(|(_, p)| *p == b).map(|(&i, _)| i).collect(),
        None => Vec::new(),
    };
    MleReport { non_realizable: consistent.is_empty(), consistent, argmax_set, products }
}

/// A maximum-likelihood policy over all policies supported on some member:
/// the empirical label distribution on observed contexts and a deterministic
/// choice on unobserved ones.
///
/// Without a declared truth, each unobserved context gets the largest action
/// of the highest-index consistent hypothesis. With a declared truth and
/// distribution, the consistent hypothesis with the most unobserved mass
/// outside the truth is chosen, and each unobserved context gets its largest
/// action outside the truth when one exists. Either way the result stays
/// inside a single consistent hypothesis, so it is a genuine maximizer.
pub fn mle_pis_adversarial(
    class: &ModelClass,
    data: &Dataset,
    truth: Option<(&SupportFunction, &ContextDistribution)>,
) -> Result<Policy, MleError> {
    data.check_bounds(class.num_contexts(), class.num_actions())
        .map_err(|e| MleError::DimensionMismatch(e.to_string()))?;
    let cons = consistent_set(class, data);
    if cons.is_empty() {
        return Err(MleError::EmptyVersionSpace);
    }
    let ny = class.num_actions();
    let mut counts = vec![vec![0u64; ny]; class.num_contexts()];
    for &(x, y) in &data.pairs {
        counts[x.0][y.0] += 1;
    }
    let seen = |x: usize| counts[x].iter().any(|&c| c > 0);

    let chosen = match truth {
        None => *cons.last().expect("non-empty"),
        Some((t, d)) => {
            let mut best = cons[0];
            let mut best_mass = Rational::from_integer(BigInt::from(-1));
            for &i in &cons {
                let sigma = class.member(i);
                let mass: Rational = class
                    .contexts()
                    .filter(|x| !seen(x.0) && !sigma.at(*x).is_subset(t.at(*x)))
                    .map(|x| d.prob(x).clone())
                    .sum();
                if mass > best_mass {
                    best_mass = mass;
                    best = i;
                }
            }
            best
        }
    };
    let sigma = class.member(chosen);
    let table = (0..class.num_contexts())
        .map(|x| {
            let row = &counts[x];
            let total: u64 = row.iter().sum();
            if total > 0 {
                row.iter().map(|&c| Rational::new(BigInt::from(c), BigInt::from(total))).collect()
            } else {
                let support = sigma.at(ContextId(x));
                let pick = match truth {
                    Some((t, _)) => support.difference(t.at(ContextId(x))).max().or_else(|| support.max()),
                    None => support.max(),
                }
                .expect("non-empty support");
                (0..ny).map(|y| if y == pick { Rational::one() } else { Rational::zero() }).collect()
            }
        })
        .collect();
    Ok(Policy::Table(table))
}

/// `Pr_{x∼D}[∃ y ∈ truth(x) with π(y|x) > 0]`.
pub fn overlap_probability(policy: &Policy, d: &ContextDistribution, truth: &SupportFunction) -> Result<Rational, PolicyError> {
    if d.len() != truth.num_contexts() {
        return Err(PolicyError::DimensionMismatch("distribution and truth disagree on contexts".into()));
    }
    let ny = truth.per_context[0].universe();
    let mut total = Rational::zero();
    for x in d.support() {
        let probs = policy.action_probs(x, ny)?;
        if truth.at(x).iter().any(|y| !probs[y].is_zero()) {
            total += d.prob(x);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{int, ratio};
    use crate::model::ActionSet;
    use crate::policy::{loss_exact, uniform_support_policy};

    fn unif_instance() -> ModelClass {
        // One context, y* = 0, sigma1 = {0, 1}, sigma2 = {0, 2, 3}.
        ModelClass::new(
            1,
            4,
            vec![SupportFunction::from_lists(4, &[vec![0, 1]]), SupportFunction::from_lists(4, &[vec![0, 2, 3]])],
        )
        .unwrap()
    }

    #[test]
    fn smaller_support_wins_likelihood() {
        let c = unif_instance();
        for m in 1..10 {
            let data = Dataset::from_raw(&vec![(0, 0); m]);
            let r = mle_unif(&c, &data);
            assert_eq!(r.consistent, vec![0, 1]);
            assert_eq!(r.argmax_set, vec![0]);
            assert_eq!(r.products[0], BigUint::from(2u32).pow(m as u32));
            assert_eq!(r.products[1], BigUint::from(3u32).pow(m as u32));
        }
    }

    #[test]
    fn inconsistent_data_is_non_realizable() {
        let r = mle_unif(&unif_instance(), &Dataset::from_raw(&[(0, 1), (0, 2)]));
        assert!(r.non_realizable);
        assert!(r.argmax_set.is_empty());
    }

    #[test]
    fn products_survive_u64_overflow() {
        let c = ModelClass::new(1, 3, vec![SupportFunction::constant(1, ActionSet::full(3))]).unwrap();
        let r = mle_unif(&c, &Dataset::from_raw(&vec![(0, 0); 100]));
        assert_eq!(r.products[0], BigUint::from(3u32).pow(100));
    }

    #[test]
    fn adversarial_witness_on_missing_mass() {
        let q = 8;
        let c = ModelClass::new(
            q,
            2,
            vec![
                SupportFunction::constant(q, ActionSet::singleton(2, 0)),
                SupportFunction::constant(q, ActionSet::full(2)),
            ],
        )
        .unwrap();
        let data = Dataset::from_raw(&[(0, 0), (3, 0), (3, 0), (6, 0)]);
        let d = ContextDistribution::uniform(q);
        let truth = c.member(0);
        for t in [None, Some((truth, &d))] {
            let pi = mle_pis_adversarial(&c, &data, t).unwrap();
            // Three distinct contexts seen out of eight.
            assert_eq!(loss_exact(&pi, &d, truth).unwrap(), ratio(5, 8));
        }
    }

    #[test]
    fn empty_version_space_errors() {
        let c = unif_instance();
        assert!(matches!(mle_pis_adversarial(&c, &Dataset::from_raw(&[(0, 1), (0, 3)]), None), Err(MleError::EmptyVersionSpace)));
    }

    #[test]
    fn overlap_vs_loss() {
        let c = unif_instance();
        let d = ContextDistribution::point_mass(1, 0);
        let pi = uniform_support_policy(c.member(0));
        assert_eq!(overlap_probability(&pi, &d, c.member(1)).unwrap(), int(1));
        assert_eq!(loss_exact(&pi, &d, c.member(1)).unwrap(), ratio(1, 2));
    }
}
