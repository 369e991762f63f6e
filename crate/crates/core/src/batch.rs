//! Online-to-batch conversion.
//!
//! The dataset is replayed once through an online learner. Before each round
//! the learner's counters are recorded, and the batch predictor is the
//! uniform mixture over the m recorded predictors.

use std::path::Path;
use std::sync::Arc;

use num_bigint::BigInt;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact::{sha256_hex, Rational};
use crate::model::{ActionId, ContextId, Dataset, ModelClass, SupportFunction};
use crate::policy::{ContextDistribution, ListPolicy, Policy};
use crate::weights::{Counters, EvalMode, Hyperparams, WeightError, WeightSnapshot, WeightState};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("training data is empty")]
    EmptyDataset,
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("data does not fit the class: {0}")]
    Dimension(String),
    #[error("snapshot file i/o: {0}")]
    Io(String),
    #[error("malformed snapshot file: {0}")]
    Format(String),
    #[error("snapshot file hash {found} does not match recorded {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("snapshot file was recorded for a different model class")]
    ClassMismatch,
}

/// Uniform mixture over per-round predictors, each stored as counters.
#[derive(Debug, Clone)]
pub struct SnapshotMixture {
    class: Arc<ModelClass>,
    params: Hyperparams,
    k: usize,
    boost: u64,
    snapshots: Vec<WeightSnapshot>,
    /// `table[t][x]`: the list emitted by snapshot `t` at context `x`.
    table: Vec<Vec<Vec<ActionId>>>,
    /// Maximal runs `(first, len)` of consecutive identical snapshots.
    runs: Vec<(usize, usize)>,
}

impl SnapshotMixture {
    pub fn class(&self) -> &Arc<ModelClass> {
        &self.class
    }

    pub fn params(&self) -> &Hyperparams {
        &self.params
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn boost(&self) -> u64 {
        self.boost
    }

    pub fn num_snapshots(&self) -> usize {
        self.snapshots.len()
    }

    pub fn snapshots(&self) -> &[WeightSnapshot] {
        &self.snapshots
    }

    /// List emitted by snapshot `t` (zero-based) at `x`.
    pub fn predictions(&self, t: usize, x: ContextId) -> &[ActionId] {
        &self.table[t][x.0]
    }

    /// Number of snapshots whose first action at `x` is each action.
    pub fn action_counts(&self, x: ContextId) -> Vec<usize> {
        let mut counts = vec![0usize; self.class.num_actions()];
        for &(first, len) in &self.runs {
            counts[self.table[first][x.0][0].0] += len;
        }
        counts
    }

    /// Deterministic predictor of snapshot `t`.
    pub fn snapshot_policy(&self, t: usize) -> Policy {
        Policy::Deterministic(self.table[t].iter().map(|l| l[0]).collect())
    }

    pub fn snapshot_list_policy(&self, t: usize) -> ListPolicy {
        ListPolicy::DeterministicK(self.table[t].clone())
    }

    pub fn as_policy(self: &Arc<Self>) -> Policy {
        Policy::SnapshotMixture(Arc::clone(self))
    }

    pub fn as_list_policy(self: &Arc<Self>) -> ListPolicy {
        ListPolicy::SnapshotMixtureK(Arc::clone(self))
    }

    fn fresh_state(&self, mode: EvalMode) -> WeightState {
        WeightState::with_boost(Arc::clone(&self.class), self.params.clone(), self.boost, mode)
    }

    /// Rebuilds a mixture from stored counters, recomputing every prediction.
    pub fn from_snapshots(
        class: Arc<ModelClass>,
        params: Hyperparams,
        k: usize,
        boost: u64,
        snapshots: Vec<WeightSnapshot>,
        mode: EvalMode,
    ) -> Result<Self, BatchError> {
        if snapshots.is_empty() {
            return Err(BatchError::EmptyDataset);
        }
        if snapshots.iter().any(|s| s.counters.len() != class.len()) {
            return Err(BatchError::ClassMismatch);
        }
        let mut mix = SnapshotMixture { class, params, k, boost, snapshots, table: Vec::new(), runs: Vec::new() };
        let mut state = mix.fresh_state(mode);
        let mut table: Vec<Vec<Vec<ActionId>>> = Vec::with_capacity(mix.snapshots.len());
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for (t, snap) in mix.snapshots.iter().enumerate() {
            if t > 0 && mix.snapshots[t - 1].counters == snap.counters {
                table.push(table[t - 1].clone());
                runs.last_mut().expect("run exists").1 += 1;
                continue;
            }
            state.restore(snap);
            table.push(predict_all(&state, k)?);
            runs.push((t, 1));
        }
        mix.table = table;
        mix.runs = runs;
        Ok(mix)
    }

    /// Canonical JSON form of the counters and header.
    pub fn to_file_json(&self) -> String {
        let file = SnapshotFile {
            class_hash: self.class.content_hash(),
            params: self.params.clone(),
            k: self.k,
            boost: self.boost,
            rounds: self
                .snapshots
                .iter()
                .map(|s| SnapshotRound {
                    round: s.round,
                    a: s.counters.iter().map(|c| c.a).collect(),
                    b: s.counters.iter().map(|c| c.b).collect(),
                    c: s.counters.iter().map(|c| c.c).collect(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("snapshot file serializes")
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_file_json().as_bytes())
    }

    /// Writes the snapshot file and returns its SHA-256.
    pub fn save(&self, path: &Path) -> Result<String, BatchError> {
        let text = self.to_file_json();
        std::fs::write(path, &text).map_err(|e| BatchError::Io(e.to_string()))?;
        Ok(sha256_hex(text.as_bytes()))
    }

    /// Reads a snapshot file, checking the content hash when one is given and
    /// that the file was recorded for `class`.
    pub fn load(path: &Path, class: Arc<ModelClass>, expected_hash: Option<&str>) -> Result<Self, BatchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BatchError::Io(e.to_string()))?;
        let found = sha256_hex(text.as_bytes());
        if let Some(expected) = expected_hash {
            if expected != found {
                return Err(BatchError::HashMismatch { expected: expected.to_string(), found });
            }
        }
        let file: SnapshotFile = serde_json::from_str(&text).map_err(|e| BatchError::Format(e.to_string()))?;
        if file.class_hash != class.content_hash() {
            return Err(BatchError::ClassMismatch);
        }
        let snapshots = file
            .rounds
            .iter()
            .map(|r| {
                if r.a.len() != r.b.len() || r.a.len() != r.c.len() {
                    return Err(BatchError::Format("counter arrays differ in length".into()));
                }
                let counters = (0..r.a.len()).map(|i| Counters { a: r.a[i], b: r.b[i], c: r.c[i] }).collect();
                Ok(WeightSnapshot { round: r.round, counters })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_snapshots(class, file.params, file.k, file.boost, snapshots, EvalMode::Exact)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotRound {
    round: u64,
    a: Vec<u32>,
    b: Vec<u32>,
    c: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotFile {
    class_hash: String,
    params: Hyperparams,
    k: usize,
    boost: u64,
    rounds: Vec<SnapshotRound>,
}

fn predict_all(state: &WeightState, k: usize) -> Result<Vec<Vec<ActionId>>, BatchError> {
    state
        .class()
        .contexts()
        .map(|x| {
            if state.boost() == 1 && k == 1 {
                Ok(vec![state.predict(x).action])
            } else {
                Ok(state.predict_k_actions(x, k)?)
            }
        })
        .collect()
}

fn check_data(class: &ModelClass, data: &Dataset) -> Result<(), BatchError> {
    if data.is_empty() {
        return Err(BatchError::EmptyDataset);
    }
    data.check_bounds(class.num_contexts(), class.num_actions()).map_err(|e| BatchError::Dimension(e.to_string()))
}

fn replay(mut state: WeightState, data: &Dataset, k: usize) -> Result<SnapshotMixture, BatchError> {
    let mut snapshots = Vec::with_capacity(data.len());
    let mut table: Vec<Vec<Vec<ActionId>>> = Vec::with_capacity(data.len());
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (t, &(x, y)) in data.pairs.iter().enumerate() {
        let snap = state.snapshot();
        if t > 0 && snapshots.last().is_some_and(|prev: &WeightSnapshot| prev.counters == snap.counters) {
            table.push(table[t - 1].clone());
            runs.last_mut().expect("run exists").1 += 1;
        } else {
            table.push(predict_all(&state, k)?);
            runs.push((t, 1));
        }
        let emitted = table[t][x.0].clone();
        snapshots.push(snap);
        if state.boost() == 1 && k == 1 {
            state.update(x, emitted[0], y);
        } else {
            state.update_k(x, &emitted, y);
        }
    }
    Ok(SnapshotMixture {
        class: Arc::clone(state.class()),
        params: state.params().clone(),
        k,
        boost: state.boost(),
        snapshots,
        table,
        runs,
    })
}

/// Runs the weighted learner once over `data` in the given order and returns
/// the uniform mixture of its per-round predictors.
pub fn train_o2b(
    class: Arc<ModelClass>,
    data: &Dataset,
    params: Hyperparams,
    mode: EvalMode,
) -> Result<SnapshotMixture, BatchError> {
    check_data(&class, data)?;
    let state = WeightState::new(class, params, mode)?;
    replay(state, data, 1)
}

/// Same conversion for the k-list learner.
pub fn train_o2b_passk(class: Arc<ModelClass>, data: &Dataset, k: usize, mode: EvalMode) -> Result<SnapshotMixture, BatchError> {
    check_data(&class, data)?;
    let state = WeightState::new_passk(class, k, mode)?;
    replay(state, data, k)
}

/// `(1/m) Σ_t L(π_t)` where `π_t` is the deterministic list of snapshot `t`
/// and a list errs when none of its actions is correct.
pub fn expected_loss_exact(mix: &SnapshotMixture, d: &ContextDistribution, truth: &SupportFunction) -> Rational {
    let m = mix.num_snapshots();
    let mut total = Rational::zero();
    for &(first, len) in &mix.runs {
        let mut loss = Rational::zero();
        for x in d.support() {
            if mix.table[first][x.0].iter().all(|y| !truth.allows(x, *y)) {
                loss += d.prob(x);
            }
        }
        total += loss * Rational::from_integer(BigInt::from(len));
    }
    total / Rational::from_integer(BigInt::from(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::int;
    use crate::model::ActionSet;
    use crate::policy::{loss_exact, passk_loss_exact};

    fn supp_class(q: usize) -> Arc<ModelClass> {
        Arc::new(
            ModelClass::new(
                q,
                2,
                vec![
                    SupportFunction::constant(q, ActionSet::singleton(2, 0)),
                    SupportFunction::constant(q, ActionSet::full(2)),
                ],
            )
            .unwrap(),
        )
    }

    #[test]
    fn single_snapshot_is_fresh_predictor() {
        let c = supp_class(3);
        let mix = train_o2b(c.clone(), &Dataset::from_raw(&[(1, 0)]), Hyperparams::realizable(), EvalMode::Exact).unwrap();
        let fresh = WeightState::new(c, Hyperparams::realizable(), EvalMode::Exact).unwrap();
        for x in 0..3 {
            assert_eq!(mix.predictions(0, ContextId(x)), &[fresh.predict(ContextId(x)).action]);
        }
    }

    #[test]
    fn all_zero_labels_give_constant_zero_policy() {
        let c = supp_class(8);
        let data = Dataset::from_raw(&[(0, 0), (3, 0), (0, 0), (5, 0)]);
        let mix = Arc::new(train_o2b(c, &data, Hyperparams::realizable(), EvalMode::Exact).unwrap());
        let pi = mix.as_policy();
        for x in 0..8 {
            let p = pi.action_probs(ContextId(x), 2).unwrap();
            assert_eq!(p, vec![int(1), int(0)]);
        }
    }

    #[test]
    fn mixture_identity_two_paths() {
        let c = Arc::new(
            ModelClass::new(
                2,
                3,
                vec![
                    SupportFunction::from_lists(3, &[vec![0], vec![1]]),
                    SupportFunction::from_lists(3, &[vec![1, 2], vec![1]]),
                    SupportFunction::from_lists(3, &[vec![2], vec![0, 2]]),
                ],
            )
            .unwrap(),
        );
        let data = Dataset::from_raw(&[(0, 2), (1, 0), (0, 2)]);
        let mix = Arc::new(train_o2b(c.clone(), &data, Hyperparams::realizable(), EvalMode::Exact).unwrap());
        let d = ContextDistribution::uniform(2);
        let truth = c.member(2);
        assert_eq!(expected_loss_exact(&mix, &d, truth), loss_exact(&mix.as_policy(), &d, truth).unwrap());
    }

    #[test]
    fn passk_mixture_matches_snapshot_average() {
        let c = Arc::new(
            ModelClass::new(
                2,
                4,
                vec![
                    SupportFunction::from_lists(4, &[vec![0], vec![3]]),
                    SupportFunction::from_lists(4, &[vec![1], vec![2]]),
                    SupportFunction::from_lists(4, &[vec![2], vec![1, 2]]),
                    SupportFunction::from_lists(4, &[vec![3], vec![0]]),
                ],
            )
            .unwrap(),
        );
        let data = Dataset::from_raw(&[(0, 2), (1, 1), (0, 2)]);
        let mix = Arc::new(train_o2b_passk(c.clone(), &data, 2, EvalMode::Exact).unwrap());
        let d = ContextDistribution::uniform(2);
        let truth = c.member(2);
        let mut avg = int(0);
        for t in 0..3 {
            avg += passk_loss_exact(&mix.snapshot_list_policy(t), &d, truth).unwrap();
        }
        avg /= int(3);
        assert_eq!(passk_loss_exact(&mix.as_list_policy(), &d, truth).unwrap(), avg);
        assert_eq!(expected_loss_exact(&mix, &d, truth), avg);
    }

    #[test]
    fn snapshot_file_round_trip_and_hash_check() {
        let c = supp_class(4);
        let data = Dataset::from_raw(&[(0, 0), (1, 1), (2, 0)]);
        let mix = train_o2b(c.clone(), &data, Hyperparams::agnostic(), EvalMode::Exact).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.json");
        let hash = mix.save(&path).unwrap();
        let back = SnapshotMixture::load(&path, c.clone(), Some(&hash)).unwrap();
        assert_eq!(back.snapshots(), mix.snapshots());
        for t in 0..3 {
            for x in 0..4 {
                assert_eq!(back.predictions(t, ContextId(x)), mix.predictions(t, ContextId(x)));
            }
        }
        assert!(matches!(SnapshotMixture::load(&path, c, Some("00")), Err(BatchError::HashMismatch { .. })));
        let other = supp_class(5);
        assert!(matches!(SnapshotMixture::load(&path, other, None), Err(BatchError::ClassMismatch)));
    }

    #[test]
    fn empty_data_rejected() {
        assert!(matches!(
            train_o2b(supp_class(2), &Dataset::default(), Hyperparams::realizable(), EvalMode::Exact),
            Err(BatchError::EmptyDataset)
        ));
    }
}
