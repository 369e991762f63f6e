//! Greedy top-k selection with `(k + 1)` boosting.
//!
//! The learner emits k actions per round. Each slot takes the action whose
//! hypotheses carry the most weight not already covered by earlier slots.
//! After the label arrives, hypotheses that exclude it are dropped and those
//! that contain it but were left uncovered by the list are multiplied by
//! `k + 1`; covered hypotheses keep their weight.

use std::collections::HashMap;
use std::sync::Arc;

use crate::exact::{int, Rational};
use crate::model::{ActionId, ContextId, ModelClass};
use crate::weights::{tally_value, Counters, EvalMode, Hyperparams, Tally, WeightError, WeightState, WeightValue};

/// One round's k-list.
#[derive(Debug, Clone, PartialEq)]
pub struct KSelection {
    pub actions: Vec<ActionId>,
    /// Hypotheses whose support at the context meets the list.
    pub covered: Vec<usize>,
    /// Uncovered weight captured by each slot, in selection order.
    pub marginals: Vec<WeightValue>,
}

impl WeightState {
    /// Fresh k-list learner: hypotheses are eliminated on contradiction and
    /// boosted by `k + 1` when uncovered but correct.
    pub fn new_passk(class: Arc<ModelClass>, k: usize, mode: EvalMode) -> Result<Self, WeightError> {
        if k == 0 || k > class.num_actions() {
            return Err(WeightError::InvalidK { k, num_actions: class.num_actions() });
        }
        Ok(WeightState::with_boost(class, Hyperparams::majority(), k as u64 + 1, mode))
    }

    fn check_passk(&self, k: usize) -> Result<(), WeightError> {
        let ny = self.class().num_actions();
        if k == 0 || k > ny {
            return Err(WeightError::InvalidK { k, num_actions: ny });
        }
        if self.params().beta != int(0) {
            return Err(WeightError::InvalidHyperparams("k-list selection requires beta = 0".into()));
        }
        Ok(())
    }

    fn covered_mask(&self, x: ContextId, actions: &[usize]) -> Vec<bool> {
        self.class().members().iter().map(|sigma| actions.iter().any(|&y| sigma.at(x).contains(y))).collect()
    }

    fn greedy_exact(&self, x: ContextId, k: usize) -> (Vec<usize>, Vec<Tally>) {
        let ny = self.class().num_actions();
        let mut uncovered = vec![true; self.class().len()];
        let mut used = vec![false; ny];
        let mut chosen = Vec::with_capacity(k);
        let mut marginals = Vec::with_capacity(k);
        for _ in 0..k {
            let tallies = self.exact_tallies_masked(x, &uncovered);
            let y = WeightState::argmax_exact(&tallies, &used);
            marginals.push(tallies[y].clone());
            used[y] = true;
            chosen.push(y);
            for (i, sigma) in self.class().members().iter().enumerate() {
                if sigma.at(x).contains(y) {
                    uncovered[i] = false;
                }
            }
        }
        (chosen, marginals)
    }

    fn greedy_log(&self, x: ContextId, k: usize) -> (Vec<usize>, Vec<f64>) {
        let ny = self.class().num_actions();
        let mut uncovered = vec![true; self.class().len()];
        let mut used = vec![false; ny];
        let mut chosen = Vec::with_capacity(k);
        let mut marginals = Vec::with_capacity(k);
        for _ in 0..k {
            let tallies = self.log_tallies_masked(x, &uncovered);
            let y = WeightState::argmax_log(&tallies, &used);
            marginals.push(tallies[y]);
            used[y] = true;
            chosen.push(y);
            for (i, sigma) in self.class().members().iter().enumerate() {
                if sigma.at(x).contains(y) {
                    uncovered[i] = false;
                }
            }
        }
        (chosen, marginals)
    }

    /// Actions only; skips building exact marginal values.
    pub fn predict_k_actions(&self, x: ContextId, k: usize) -> Result<Vec<ActionId>, WeightError> {
        self.check_passk(k)?;
        let exact = self.has_exact().then(|| self.greedy_exact(x, k).0);
        let log = self.has_log().then(|| self.greedy_log(x, k).0);
        Ok(self.reconcile_pub(exact, log).into_iter().map(ActionId).collect())
    }

    /// Greedy k-list at `x`. Ties go to the smallest action index; once every
    /// remaining marginal is zero the list is padded with the smallest unused
    /// indices.
    pub fn predict_k(&self, x: ContextId, k: usize) -> Result<KSelection, WeightError> {
        self.check_passk(k)?;
        let exact = self.has_exact().then(|| self.greedy_exact(x, k));
        let log = self.has_log().then(|| self.greedy_log(x, k));
        let actions = self.reconcile_pub(exact.as_ref().map(|e| e.0.clone()), log.as_ref().map(|l| l.0.clone()));
        let marginals = match (exact, log) {
            (Some((_, m)), _) => {
                let scale = self.exact_scale().expect("exact cache").clone();
                m.iter().map(|t| WeightValue::Exact(tally_value(t, &scale))).collect()
            }
            (None, Some((_, m))) => {
                let shift = self.log_max().unwrap_or(0.0);
                m.iter().map(|v| WeightValue::Log(v.ln() + shift)).collect()
            }
            (None, None) => unreachable!("at least one evaluation mode is active"),
        };
        let mask = self.covered_mask(x, &actions);
        let covered = (0..mask.len()).filter(|&i| mask[i] && self.is_alive(i)).collect();
        Ok(KSelection { actions: actions.into_iter().map(ActionId).collect(), covered, marginals })
    }

    /// Label update for the k-list learner.
    pub fn update_k(&mut self, x: ContextId, actions: &[ActionId], y: ActionId) {
        let list: Vec<usize> = actions.iter().map(|a| a.0).collect();
        self.apply_round(x, |c, set| {
            if !set.contains(y.0) {
                c.b += 1;
            } else if !list.iter().any(|&a| set.contains(a)) {
                c.c += 1;
            }
        });
    }
}

/// Outcome of the per-round coverage inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyInequality {
    /// `w(U \ A_y)`: covered weight on hypotheses that exclude the label.
    pub covered_wrong: Rational,
    /// `w(A_y \ U)`: uncovered weight on hypotheses that contain the label.
    pub uncovered_right: Rational,
    pub k: usize,
    pub holds: bool,
}

/// Checks `w(U \ A_y) >= k * w(A_y \ U)` exactly on the pre-update state.
pub fn key_inequality(state: &WeightState, x: ContextId, actions: &[ActionId], y: ActionId) -> KeyInequality {
    let k = actions.len();
    // Hypotheses with equal counters share a weight, so tally counts per counter triple.
    let mut wrong: HashMap<Counters, u64> = HashMap::new();
    let mut right: HashMap<Counters, u64> = HashMap::new();
    for (i, sigma) in state.class().members().iter().enumerate() {
        if !state.is_alive(i) {
            continue;
        }
        let set = sigma.at(x);
        let covered = actions.iter().any(|a| set.contains(a.0));
        let has_y = set.contains(y.0);
        if covered && !has_y {
            *wrong.entry(state.counters()[i]).or_default() += 1;
        } else if !covered && has_y {
            *right.entry(state.counters()[i]).or_default() += 1;
        }
    }
    let total = |m: &HashMap<Counters, u64>| -> Rational {
        m.iter().map(|(c, &n)| state.weight_of(*c) * int(n as i64)).sum()
    };
    let covered_wrong = total(&wrong);
    let uncovered_right = total(&right);
    let holds = covered_wrong >= &uncovered_right * int(k as i64);
    KeyInequality { covered_wrong, uncovered_right, k, holds }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SupportFunction;

    fn class(nx: usize, ny: usize, members: Vec<Vec<Vec<usize>>>) -> Arc<ModelClass> {
        Arc::new(ModelClass::new(nx, ny, members.iter().map(|m| SupportFunction::from_lists(ny, m)).collect()).unwrap())
    }

    #[test]
    fn k1_matches_weighted_predict() {
        let c = class(2, 3, vec![vec![vec![0], vec![2]], vec![vec![1, 2], vec![2]], vec![vec![1], vec![0, 1]]]);
        let s = WeightState::new_passk(c.clone(), 1, EvalMode::Exact).unwrap();
        let w = WeightState::new(c, Hyperparams::realizable(), EvalMode::Exact).unwrap();
        for x in 0..2 {
            assert_eq!(s.predict_k(ContextId(x), 1).unwrap().actions, vec![w.predict(ContextId(x)).action]);
        }
    }

    #[test]
    fn equal_singletons_pick_smallest_indices() {
        let c = class(1, 5, vec![vec![vec![4]], vec![vec![1]], vec![vec![3]]]);
        let s = WeightState::new_passk(c, 2, EvalMode::Exact).unwrap();
        let sel = s.predict_k(ContextId(0), 2).unwrap();
        assert_eq!(sel.actions, vec![ActionId(1), ActionId(3)]);
        assert_eq!(sel.covered, vec![1, 2]);
        assert_eq!(sel.marginals, vec![WeightValue::Exact(int(1)), WeightValue::Exact(int(1))]);
    }

    #[test]
    fn padding_uses_smallest_unused() {
        let c = class(1, 4, vec![vec![vec![2]]]);
        let s = WeightState::new_passk(c, 3, EvalMode::Exact).unwrap();
        let sel = s.predict_k(ContextId(0), 3).unwrap();
        assert_eq!(sel.actions, vec![ActionId(2), ActionId(0), ActionId(1)]);
        assert_eq!(sel.marginals[1], WeightValue::Exact(int(0)));
    }

    #[test]
    fn update_cases() {
        // sigma0 excludes the label, sigma1 contains it and is covered,
        // sigma2 contains it and is uncovered.
        let c = class(1, 4, vec![vec![vec![0]], vec![vec![1, 3]], vec![vec![3]]]);
        let mut s = WeightState::new_passk(c, 2, EvalMode::Exact).unwrap();
        let list = [ActionId(0), ActionId(1)];
        // This list is not the greedy one, and the coverage inequality fails for it.
        let ki = key_inequality(&s, ContextId(0), &list, ActionId(3));
        assert_eq!((ki.covered_wrong.clone(), ki.uncovered_right.clone()), (int(1), int(1)));
        assert!(!ki.holds);
        s.update_k(ContextId(0), &list, ActionId(3));
        assert!(!s.is_alive(0));
        assert_eq!(s.weight(1), int(1));
        assert_eq!(s.weight(2), int(3));
    }

    #[test]
    fn rejects_bad_k() {
        let c = class(1, 2, vec![vec![vec![0]]]);
        assert!(WeightState::new_passk(c.clone(), 0, EvalMode::Exact).is_err());
        assert!(WeightState::new_passk(c.clone(), 3, EvalMode::Exact).is_err());
        let agn = WeightState::new(c, Hyperparams::agnostic(), EvalMode::Exact).unwrap();
        assert!(agn.predict_k(ContextId(0), 1).is_err());
    }
}
