//! Contexts, actions, support functions and finite model classes.
//!
//! A support function maps every context to the non-empty set of actions
//! that count as correct there. A model class is an ordered list of support
//! functions over shared context and action spaces; the position of a member
//! in that list is its identity everywhere else in the crate.

use std::fmt;

use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact::{format_rational, in_unit_interval, value_to_rational, Rational};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub usize);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("hypothesis {sigma} has an empty support at context {context}")]
    EmptySupport { sigma: usize, context: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("model class has no members")]
    EmptyClass,
    #[error("reward entry {value} at ({context}, {action}) of member {member} is outside [0, 1]")]
    RewardOutOfRange { member: usize, context: usize, action: usize, value: String },
    #[error("malformed class file: {0}")]
    Format(String),
}

/// Fixed-width bit vector over the action space.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ActionSet {
    words: Vec<u64>,
    len: usize,
}

impl ActionSet {
    pub fn empty(len: usize) -> Self {
        ActionSet { words: vec![0; len.div_ceil(64).max(1)], len }
    }

    pub fn full(len: usize) -> Self {
        let mut s = Self::empty(len);
        for y in 0..len {
            s.insert(y);
        }
        s
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::empty(len);
        for y in indices {
            s.insert(y);
        }
        s
    }

    pub fn singleton(len: usize, y: usize) -> Self {
        Self::from_indices(len, [y])
    }

    /// Width of the bit vector, i.e. |Y|.
    pub fn universe(&self) -> usize {
        self.len
    }

    pub fn insert(&mut self, y: usize) {
        assert!(y < self.len, "action {y} outside universe of size {}", self.len);
        self.words[y / 64] |= 1u64 << (y % 64);
    }

    pub fn remove(&mut self, y: usize) {
        if y < self.len {
            self.words[y / 64] &= !(1u64 << (y % 64));
        }
    }

    #[inline]
    pub fn contains(&self, y: usize) -> bool {
        y < self.len && (self.words[y / 64] >> (y % 64)) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    fn zip(&self, other: &Self, f: impl Fn(u64, u64) -> u64) -> Self {
        assert_eq!(self.len, other.len, "action sets over different universes");
        ActionSet {
            words: self.words.iter().zip(&other.words).map(|(&a, &b)| f(a, b)).collect(),
            len: self.len,
        }
    }

    pub fn union(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a | b)
    }

    pub fn intersection(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a & b)
    }

    pub fn difference(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a & !b)
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.words.iter().zip(&other.words).all(|(&a, &b)| a & !b == 0)
    }

    /// Members in increasing order.
    pub fn iter(&self) -> Ones<'_> {
        Ones { words: &self.words, index: 0, current: self.words[0] }
    }

    /// True when the two sets share at least one action.
    pub fn intersects(&self, other: &Self) -> bool {
        self.words.iter().zip(&other.words).any(|(&a, &b)| a & b != 0)
    }

    pub fn min(&self) -> Option<usize> {
        for (i, &w) in self.words.iter().enumerate() {
            if w != 0 {
                return Some(i * 64 + w.trailing_zeros() as usize);
            }
        }
        None
    }

    pub fn max(&self) -> Option<usize> {
        for (i, &w) in self.words.iter().enumerate().rev() {
            if w != 0 {
                return Some(i * 64 + 63 - w.leading_zeros() as usize);
            }
        }
        None
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }
}

pub struct Ones<'a> {
    words: &'a [u64],
    index: usize,
    current: u64,
}

impl Iterator for Ones<'_> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        loop {
            if self.current != 0 {
                let bit = self.current.trailing_zeros() as usize;
                self.current &= self.current - 1;
                return Some(self.index * 64 + bit);
            }
            self.index += 1;
            if self.index >= self.words.len() {
                return None;
            }
            self.current = self.words[self.index];
        }
    }
}

impl fmt::Debug for ActionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SupportFunction {
    pub per_context: Vec<ActionSet>,
    pub name: Option<String>,
}

impl SupportFunction {
    pub fn new(per_context: Vec<ActionSet>) -> Self {
        SupportFunction { per_context, name: None }
    }

    pub fn named(per_context: Vec<ActionSet>, name: impl Into<String>) -> Self {
        SupportFunction { per_context, name: Some(name.into()) }
    }

    /// The same support at every one of `num_contexts` contexts.
    pub fn constant(num_contexts: usize, set: ActionSet) -> Self {
        Self::new(vec![set; num_contexts])
    }

    pub fn from_lists(num_actions: usize, lists: &[Vec<usize>]) -> Self {
        Self::new(lists.iter().map(|l| ActionSet::from_indices(num_actions, l.iter().copied())).collect())
    }

    #[inline]
    pub fn at(&self, x: ContextId) -> &ActionSet {
        &self.per_context[x.0]
    }

    #[inline]
    pub fn allows(&self, x: ContextId, y: ActionId) -> bool {
        self.per_context[x.0].contains(y.0)
    }

    pub fn num_contexts(&self) -> usize {
        self.per_context.len()
    }

    /// Equality of support tables, ignoring names.
    pub fn same_table(&self, other: &Self) -> bool {
        self.per_context == other.per_context
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelClass {
    num_contexts: usize,
    num_actions: usize,
    members: Vec<SupportFunction>,
}

impl ModelClass {
    pub fn new(num_contexts: usize, num_actions: usize, members: Vec<SupportFunction>) -> Result<Self, ModelError> {
        let class = ModelClass { num_contexts, num_actions, members };
        validate_class(&class)?;
        Ok(class)
    }

    /// Builds a class without checking supports; pair with [`validate_class`].
    pub fn from_members_unchecked(num_contexts: usize, num_actions: usize, members: Vec<SupportFunction>) -> Self {
        ModelClass { num_contexts, num_actions, members }
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[SupportFunction] {
        &self.members
    }

    pub fn member(&self, index: usize) -> &SupportFunction {
        &self.members[index]
    }

    pub fn contexts(&self) -> impl Iterator<Item = ContextId> {
        (0..self.num_contexts).map(ContextId)
    }

    /// Serializable description in the class-file format.
    pub fn to_file(&self) -> ModelClassFile {
        ModelClassFile {
            num_contexts: self.num_contexts,
            num_actions: self.num_actions,
            members: self
                .members
                .iter()
                .map(|m| MemberFile { name: m.name.clone(), supports: m.per_context.iter().map(|s| s.to_vec()).collect() })
                .collect(),
        }
    }

    pub fn from_file(file: &ModelClassFile) -> Result<Self, ModelError> {
        let mut members = Vec::with_capacity(file.members.len());
        for (i, m) in file.members.iter().enumerate() {
            if m.supports.len() != file.num_contexts {
                return Err(ModelError::DimensionMismatch(format!(
                    "member {i} lists {} contexts, expected {}",
                    m.supports.len(),
                    file.num_contexts
                )));
            }
            let mut per_context = Vec::with_capacity(m.supports.len());
            for list in &m.supports {
                if let Some(&bad) = list.iter().find(|&&y| y >= file.num_actions) {
                    return Err(ModelError::DimensionMismatch(format!(
                        "member {i} uses action {bad} but only {} actions exist",
                        file.num_actions
                    )));
                }
                per_context.push(ActionSet::from_indices(file.num_actions, list.iter().copied()));
            }
            members.push(SupportFunction { per_context, name: m.name.clone() });
        }
        ModelClass::new(file.num_contexts, file.num_actions, members)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("class serializes")
    }

    /// SHA-256 of the canonical JSON form; names are included.
    pub fn content_hash(&self) -> String {
        crate::exact::sha256_hex(self.to_json().as_bytes())
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: ModelClassFile = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        Self::from_file(&file)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub supports: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelClassFile {
    pub num_contexts: usize,
    pub num_actions: usize,
    pub members: Vec<MemberFile>,
}

/// Checks that the class is non-empty, that all members share the declared
/// dimensions, and that no support is empty.
pub fn validate_class(class: &ModelClass) -> Result<(), ModelError> {
    if class.num_contexts == 0 || class.num_actions == 0 {
        return Err(ModelError::DimensionMismatch("context and action spaces must be non-empty".into()));
    }
    if class.members.is_empty() {
        return Err(ModelError::EmptyClass);
    }
    for (i, sigma) in class.members.iter().enumerate() {
        if sigma.per_context.len() != class.num_contexts {
            return Err(ModelError::DimensionMismatch(format!(
                "member {i} has {} contexts, expected {}",
                sigma.per_context.len(),
                class.num_contexts
            )));
        }
        for (x, set) in sigma.per_context.iter().enumerate() {
            if set.universe() != class.num_actions {
                return Err(ModelError::DimensionMismatch(format!(
                    "member {i} context {x} is over {} actions, expected {}",
                    set.universe(),
                    class.num_actions
                )));
            }
            if set.is_empty() {
                return Err(ModelError::EmptySupport { sigma: i, context: x });
            }
        }
    }
    Ok(())
}

/// Bounded reward table `r(x, y)` with exact entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewardFunction {
    table: Vec<Vec<Rational>>,
}

impl RewardFunction {
    pub fn new(table: Vec<Vec<Rational>>) -> Result<Self, ModelError> {
        if table.is_empty() || table[0].is_empty() {
            return Err(ModelError::DimensionMismatch("reward table must be non-empty".into()));
        }
        let width = table[0].len();
        for (x, row) in table.iter().enumerate() {
            if row.len() != width {
                return Err(ModelError::DimensionMismatch(format!("reward row {x} has {} entries, expected {width}", row.len())));
            }
            for (y, v) in row.iter().enumerate() {
                if !in_unit_interval(v) {
                    return Err(ModelError::RewardOutOfRange { member: 0, context: x, action: y, value: format_rational(v) });
                }
            }
        }
        Ok(RewardFunction { table })
    }

    pub fn num_contexts(&self) -> usize {
        self.table.len()
    }

    pub fn num_actions(&self) -> usize {
        self.table[0].len()
    }

    pub fn get(&self, x: ContextId, y: ActionId) -> &Rational {
        &self.table[x.0][y.0]
    }

    pub fn row(&self, x: ContextId) -> &[Rational] {
        &self.table[x.0]
    }

    pub fn row_max(&self, x: ContextId) -> &Rational {
        self.table[x.0].iter().max().expect("non-empty row")
    }

    /// 0/1 reward that is 1 exactly on the support of `sigma`.
    pub fn indicator(sigma: &SupportFunction, num_actions: usize) -> Self {
        let table = sigma
            .per_context
            .iter()
            .map(|s| (0..num_actions).map(|y| if s.contains(y) { Rational::one() } else { Rational::zero() }).collect())
            .collect();
        RewardFunction { table }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewardClass {
    members: Vec<RewardFunction>,
}

impl RewardClass {
    pub fn new(members: Vec<RewardFunction>) -> Result<Self, ModelError> {
        let first = members.first().ok_or(ModelError::EmptyClass)?;
        let (nx, ny) = (first.num_contexts(), first.num_actions());
        for (i, r) in members.iter().enumerate() {
            if r.num_contexts() != nx || r.num_actions() != ny {
                return Err(ModelError::DimensionMismatch(format!("reward member {i} has a different shape")));
            }
        }
        Ok(RewardClass { members })
    }

    pub fn members(&self) -> &[RewardFunction] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Parses `{"num_contexts", "num_actions", "members": [{"rewards": [[..]..]}]}`
    /// where entries are `"p/q"` strings or decimal numbers.
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        let fmt = |m: &str| ModelError::Format(m.to_string());
        let nx = v["num_contexts"].as_u64().ok_or_else(|| fmt("num_contexts missing"))? as usize;
        let ny = v["num_actions"].as_u64().ok_or_else(|| fmt("num_actions missing"))? as usize;
        let members = v["members"].as_array().ok_or_else(|| fmt("members missing"))?;
        let mut out = Vec::with_capacity(members.len());
        for (i, m) in members.iter().enumerate() {
            let rows = m["rewards"].as_array().ok_or_else(|| fmt("rewards missing"))?;
            if rows.len() != nx {
                return Err(ModelError::DimensionMismatch(format!("reward member {i} has {} rows", rows.len())));
            }
            let mut table = Vec::with_capacity(nx);
            for row in rows {
                let row = row.as_array().ok_or_else(|| fmt("reward row must be an array"))?;
                if row.len() != ny {
                    return Err(ModelError::DimensionMismatch(format!("reward member {i} row has {} entries", row.len())));
                }
                let parsed = row
                    .iter()
                    .map(|e| value_to_rational(e).map_err(|e| ModelError::Format(e.to_string())))
                    .collect::<Result<Vec<_>, _>>()?;
                table.push(parsed);
            }
            out.push(RewardFunction::new(table).map_err(|e| match e {
                ModelError::RewardOutOfRange { context, action, value, .. } => {
                    ModelError::RewardOutOfRange { member: i, context, action, value }
                }
                other => other,
            })?);
        }
        RewardClass::new(out)
    }

    pub fn to_json(&self) -> String {
        let members: Vec<serde_json::Value> = self
            .members
            .iter()
            .map(|r| {
                let rows: Vec<Vec<String>> = r.table.iter().map(|row| row.iter().map(format_rational).collect()).collect();
                serde_json::json!({ "rewards": rows })
            })
            .collect();
        let first = &self.members[0];
        serde_json::json!({
            "num_contexts": first.num_contexts(),
            "num_actions": first.num_actions(),
            "members": members,
        })
        .to_string()
    }
}

/// The full argmax set of every row.
pub fn support_of_reward(r: &RewardFunction) -> SupportFunction {
    let ny = r.num_actions();
    let per_context = r
        .table
        .iter()
        .map(|row| {
            let best = row.iter().max().expect("non-empty row");
            ActionSet::from_indices(ny, row.iter().enumerate().filter(|(_, v)| *v == best).map(|(y, _)| y))
        })
        .collect();
    SupportFunction::new(per_context)
}

/// Maps every reward function to its argmax support and drops repeated
/// tables, keeping the first occurrence.
pub fn reward_class_to_model_class(rewards: &RewardClass) -> ModelClass {
    let mut members: Vec<SupportFunction> = Vec::new();
    for r in rewards.members() {
        let sigma = support_of_reward(r);
        if !members.iter().any(|m| m.same_table(&sigma)) {
            members.push(sigma);
        }
    }
    let first = &rewards.members()[0];
    ModelClass::from_members_unchecked(first.num_contexts(), first.num_actions(), members)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub pairs: Vec<(ContextId, ActionId)>,
}

impl Dataset {
    pub fn new(pairs: Vec<(ContextId, ActionId)>) -> Self {
        Dataset { pairs }
    }

    pub fn from_raw(pairs: &[(usize, usize)]) -> Self {
        Dataset { pairs: pairs.iter().map(|&(x, y)| (ContextId(x), ActionId(y))).collect() }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn push(&mut self, x: ContextId, y: ActionId) {
        self.pairs.push((x, y));
    }

    pub fn check_bounds(&self, num_contexts: usize, num_actions: usize) -> Result<(), ModelError> {
        for (i, &(x, y)) in self.pairs.iter().enumerate() {
            if x.0 >= num_contexts || y.0 >= num_actions {
                return Err(ModelError::DimensionMismatch(format!("pair {i} = ({}, {}) out of range", x.0, y.0)));
            }
        }
        Ok(())
    }
}

/// Indices of members that contain every observed label, in canonical order.
pub fn consistent_set(class: &ModelClass, data: &Dataset) -> Vec<usize> {
    (0..class.len())
        .filter(|&i| {
            let sigma = class.member(i);
            data.pairs.iter().all(|&(x, y)| sigma.allows(x, y))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::ratio;

    fn thm_3_2_class(q: usize) -> ModelClass {
        ModelClass::new(
            q,
            2,
            vec![
                SupportFunction::constant(q, ActionSet::singleton(2, 0)),
                SupportFunction::constant(q, ActionSet::full(2)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn action_set_algebra() {
        let a = ActionSet::from_indices(70, [1, 3, 65]);
        let b = ActionSet::from_indices(70, [3, 4]);
        assert_eq!(a.union(&b).to_vec(), vec![1, 3, 4, 65]);
        assert_eq!(a.intersection(&b).to_vec(), vec![3]);
        assert_eq!(a.difference(&b).to_vec(), vec![1, 65]);
        assert_eq!(a.count(), 3);
        assert_eq!(a.min(), Some(1));
        assert_eq!(a.max(), Some(65));
        assert!(!a.contains(69));
        assert!(ActionSet::empty(5).is_empty());
        assert_eq!(ActionSet::full(5).count(), 5);
    }

    #[test]
    fn validate_accepts_minimal_support() {
        let c = ModelClass::new(3, 2, vec![SupportFunction::constant(3, ActionSet::singleton(2, 0))]);
        assert!(c.is_ok());
    }

    #[test]
    fn validate_reports_empty_support() {
        let mut lists = vec![vec![0]; 5];
        lists[3] = vec![];
        let bad = SupportFunction::from_lists(2, &lists);
        let good = SupportFunction::from_lists(2, &[vec![0], vec![1], vec![0], vec![1], vec![0]]);
        let err = ModelClass::new(5, 2, vec![good, bad]).unwrap_err();
        assert_eq!(err, ModelError::EmptySupport { sigma: 1, context: 3 });
    }

    #[test]
    fn validate_reports_dimension_mismatch() {
        let c = ModelClass::from_members_unchecked(2, 2, vec![SupportFunction::from_lists(2, &[vec![0]])]);
        assert!(matches!(validate_class(&c), Err(ModelError::DimensionMismatch(_))));
    }

    #[test]
    fn argmax_support_keeps_ties() {
        let r = RewardFunction::new(vec![vec![ratio(1, 5), ratio(9, 10), ratio(9, 10)], vec![ratio(0, 1); 3]]).unwrap();
        let s = support_of_reward(&r);
        assert_eq!(s.per_context[0].to_vec(), vec![1, 2]);
        assert_eq!(s.per_context[1].to_vec(), vec![0, 1, 2]);
    }

    #[test]
    fn reward_reduction_collapses_duplicates() {
        let r1 = RewardFunction::new(vec![vec![ratio(1, 2), ratio(1, 1)]]).unwrap();
        let r2 = RewardFunction::new(vec![vec![ratio(0, 1), ratio(1, 3)]]).unwrap();
        let rc = RewardClass::new(vec![r1.clone(), r2]).unwrap();
        assert_eq!(reward_class_to_model_class(&rc).len(), 1);
        assert_eq!(reward_class_to_model_class(&RewardClass::new(vec![r1]).unwrap()).len(), 1);
    }

    #[test]
    fn reward_out_of_range_rejected() {
        assert!(RewardFunction::new(vec![vec![ratio(3, 2)]]).is_err());
        assert!(RewardFunction::new(vec![vec![ratio(-1, 2)]]).is_err());
    }

    #[test]
    fn consistency_filtering() {
        let c = thm_3_2_class(4);
        assert_eq!(consistent_set(&c, &Dataset::default()), vec![0, 1]);
        assert_eq!(consistent_set(&c, &Dataset::from_raw(&[(0, 0), (2, 0)])), vec![0, 1]);
        assert_eq!(consistent_set(&c, &Dataset::from_raw(&[(0, 0), (1, 1)])), vec![1]);
    }

    #[test]
    fn class_json_round_trip() {
        let c = thm_3_2_class(3);
        let back = ModelClass::from_json(&c.to_json()).unwrap();
        assert_eq!(c, back);
        let text = r#"{"num_contexts":1,"num_actions":2,"members":[{"name":"a","supports":[[0]]},{"supports":[[0,1]]}]}"#;
        let parsed = ModelClass::from_json(text).unwrap();
        assert_eq!(parsed.member(0).name.as_deref(), Some("a"));
        assert_eq!(parsed.member(1).at(ContextId(0)).to_vec(), vec![0, 1]);
    }

    #[test]
    fn class_json_rejects_out_of_range_action() {
        let text = r#"{"num_contexts":1,"num_actions":2,"members":[{"supports":[[2]]}]}"#;
        assert!(matches!(ModelClass::from_json(text), Err(ModelError::DimensionMismatch(_))));
    }

    #[test]
    fn reward_json_parses_exact_decimals() {
        let text = r#"{"num_contexts":1,"num_actions":3,"members":[{"rewards":[["1/3", 0.1, "0.1"]]}]}"#;
        let rc = RewardClass::from_json(text).unwrap();
        let r = &rc.members()[0];
        assert_eq!(*r.get(ContextId(0), ActionId(1)), ratio(1, 10));
        assert_eq!(support_of_reward(r).per_context[0].to_vec(), vec![0]);
        let back = RewardClass::from_json(&rc.to_json()).unwrap();
        assert_eq!(back, rc);
    }
}
