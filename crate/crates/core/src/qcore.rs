//! Domain types for Q-functions, policies and trajectory data, plus exact
//! value-function computations on tabular instances.
//!
//! A tabular Q-function stores strictly positive values on a finite covariate
//! grid with weights summing to one; it is the exact oracle against which the
//! divergence identities are checked.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Finite, ordered action space with distinct integer labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSet {
    labels: Vec<i64>,
}

impl ActionSet {
    pub fn new(labels: Vec<i64>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Invalid(format!(
                "action set needs at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &l in &labels {
            if !seen.insert(l) {
                return Err(Error::Invalid(format!("duplicate action label {l}")));
            }
        }
        Ok(ActionSet { labels })
    }

    /// Cardinality of the action space.
    pub fn m(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn index_of(&self, label: i64) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }
}

/// Covariate vector; entries must be finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariatePoint(pub Vec<f64>);

impl CovariatePoint {
    pub fn new(x: Vec<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Invalid("covariate must have dimension >= 1".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite covariate entry in {x:?}")));
        }
        Ok(CovariatePoint(x))
    }

    pub fn scalar(x: f64) -> Self {
        CovariatePoint(vec![x])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// One grid point of a tabular Q-function: covariate, marginal weight and the
/// Q-values per action, in action-set order.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub x: CovariatePoint,
    pub weight: f64,
    pub q: Vec<f64>,
}

/// Exact Q-function on a finite covariate grid.
///
/// Weights represent the covariate distribution p(x) and must sum to one;
/// Q-values are strictly positive so that negative power indices stay defined.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularQFunction {
    actions: ActionSet,
    points: Vec<GridPoint>,
}

const WEIGHT_SUM_TOL: f64 = 1e-8;

impl TabularQFunction {
    pub fn new(actions: ActionSet, points: Vec<GridPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("tabular Q-function needs at least one grid point".into()));
        }
        let dim = points[0].x.dim();
        let mut wsum = 0.0;
        for (i, p) in points.iter().enumerate() {
            if p.x.dim() != dim {
                return Err(Error::Structural(format!(
                    "grid point {i} has covariate dimension {} but expected {dim}",
                    p.x.dim()
                )));
            }
            if !(p.weight >= 0.0) || !p.weight.is_finite() {
                return Err(Error::Invalid(format!("grid point {i} has invalid weight {}", p.weight)));
            }
            if p.q.len() != actions.m() {
                return Err(Error::Structural(format!(
                    "grid point {i} carries {} q-values for {} actions",
                    p.q.len(),
                    actions.m()
                )));
            }
            for (j, &v) in p.q.iter().enumerate() {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::Invalid(format!(
                        "q-value must be strictly positive and finite; point {i}, action {} has {v}",
                        actions.labels()[j]
                    )));
                }
            }
            wsum += p.weight;
        }
        if (wsum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Invalid(format!(
                "grid weights must sum to 1 within {WEIGHT_SUM_TOL}, got {wsum}"
            )));
        }
        Ok(TabularQFunction { actions, points })
    }

    /// Single-point helper with weight 1; `q` is in action-set order.
    pub fn single_point(actions: ActionSet, x: CovariatePoint, q: Vec<f64>) -> Result<Self> {
        TabularQFunction::new(actions, vec![GridPoint { x, weight: 1.0, q }])
    }

    pub fn actions(&self) -> &ActionSet {
        &self.actions
    }

    pub fn points(&self) -> &[GridPoint] {
        &self.points
    }

    pub fn m(&self) -> usize {
        self.actions.m()
    }

    /// Pointwise rescaling by a strictly positive per-point factor eta(x).
    pub fn scaled_by(&self, eta: &[f64]) -> Result<Self> {
        if eta.len() != self.points.len() {
            return Err(Error::Structural("eta length must match grid size".into()));
        }
        if eta.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::Invalid("eta must be strictly positive and finite".into()));
        }
        let points = self
            .points
            .iter()
            .zip(eta)
            .map(|(p, &e)| GridPoint {
                x: p.x.clone(),
                weight: p.weight,
                q: p.q.iter().map(|&v| v * e).collect(),
            })
            .collect();
        TabularQFunction::new(self.actions.clone(), points)
    }

    /// Checks the two instances share grid covariates and actions.
    pub fn check_same_grid(&self, other: &TabularQFunction) -> Result<()> {
        if self.actions != other.actions {
            return Err(Error::Structural("action sets differ".into()));
        }
        if self.points.len() != other.points.len() {
            return Err(Error::Structural(format!(
                "grid sizes differ: {} vs {}",
                self.points.len(),
                other.points.len()
            )));
        }
        for (i, (a, b)) in self.points.iter().zip(&other.points).enumerate() {
            if a.x != b.x {
                return Err(Error::Structural(format!("grid covariates differ at point {i}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = TabularQFile::from(self);
        serde_json::to_string_pretty(&file).expect("q-function serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: TabularQFile = serde_json::from_str(s)?;
        file.try_into()
    }
}

/// On-disk schema: `{ "actions": [..], "points": [ { "x": [..], "weight": w,
/// "q": { "<label>": v, ... } } ] }`.
#[derive(Debug, Serialize, Deserialize)]
struct TabularQFile {
    actions: Vec<i64>,
    points: Vec<TabularQFilePoint>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TabularQFilePoint {
    x: Vec<f64>,
    weight: f64,
    q: BTreeMap<String, f64>,
}

impl From<&TabularQFunction> for TabularQFile {
    fn from(t: &TabularQFunction) -> Self {
        TabularQFile {
            actions: t.actions.labels().to_vec(),
            points: t
                .points
                .iter()
                .map(|p| TabularQFilePoint {
                    x: p.x.0.clone(),
                    weight: p.weight,
                    q: t
                        .actions
                        .labels()
                        .iter()
                        .zip(&p.q)
                        .map(|(l, &v)| (l.to_string(), v))
                        .collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<TabularQFile> for TabularQFunction {
    type Error = Error;
    fn try_from(f: TabularQFile) -> Result<Self> {
        let actions = ActionSet::new(f.actions)?;
        let mut points = Vec::with_capacity(f.points.len());
        for (i, p) in f.points.into_iter().enumerate() {
            let mut q = Vec::with_capacity(actions.m());
            for &label in actions.labels() {
                let v = p.q.get(&label.to_string()).copied().ok_or_else(|| {
                    Error::Format(format!("point {i} missing q-value for action {label}"))
                })?;
                q.push(v);
            }
            points.push(GridPoint {
                x: CovariatePoint::new(p.x)?,
                weight: p.weight,
                q,
            });
        }
        TabularQFunction::new(actions, points)
    }
}

/// One stage of an observed trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub x: CovariatePoint,
    pub action: i64,
    pub reward: f64,
    pub propensity: f64,
}

/// Observed trajectory: one or more (x, a, y, p) stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub stages: Vec<Stage>,
}

impl Trajectory {
    pub fn validate(&self, index: usize) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidRecord {
                index,
                reason: "trajectory has no stages".into(),
            });
        }
        for (t, s) in self.stages.iter().enumerate() {
            if !(s.propensity > 0.0 && s.propensity <= 1.0) {
                return Err(Error::InvalidRecord {
                    index,
                    reason: format!("stage {t} propensity {} not in (0,1]", s.propensity),
                });
            }
            if !(s.reward >= 0.0) || !s.reward.is_finite() {
                return Err(Error::InvalidRecord {
                    index,
                    reason: format!("stage {t} reward {} must be finite and >= 0", s.reward),
                });
            }
        }
        Ok(())
    }

    /// History vector at stage `t` (0-based): prior (x, a) pairs flattened,
    /// followed by the current covariate.
    pub fn history(&self, t: usize) -> Vec<f64> {
        let mut h = Vec::new();
        for s in &self.stages[..t] {
            h.extend_from_slice(&s.x.0);
            h.push(s.action as f64);
        }
        h.extend_from_slice(&self.stages[t].x.0);
        h
    }
}

/// Collection of trajectories sharing stage count and per-stage covariate
/// dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    trajectories: Vec<Trajectory>,
    stages: usize,
}

impl TrajectoryDataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Invalid("dataset must contain at least one trajectory".into()));
        }
        let stages = trajectories[0].stages.len();
        let dims: Vec<usize> = trajectories[0].stages.iter().map(|s| s.x.dim()).collect();
        for (i, tr) in trajectories.iter().enumerate() {
            tr.validate(i)?;
            if tr.stages.len() != stages {
                return Err(Error::Structural(format!(
                    "trajectory {i} has {} stages, expected {stages}",
                    tr.stages.len()
                )));
            }
            for (t, s) in tr.stages.iter().enumerate() {
                if s.x.dim() != dims[t] {
                    return Err(Error::Structural(format!(
                        "trajectory {i} stage {t} covariate dimension {} differs from {}",
                        s.x.dim(),
                        dims[t]
                    )));
                }
            }
        }
        Ok(TrajectoryDataset { trajectories, stages })
    }

    /// Single-stage constructor from flat record columns.
    pub fn single_stage(
        xs: Vec<CovariatePoint>,
        actions: Vec<i64>,
        rewards: Vec<f64>,
        propensities: Vec<f64>,
    ) -> Result<Self> {
        let n = xs.len();
        if actions.len() != n || rewards.len() != n || propensities.len() != n {
            return Err(Error::Structural("record columns have mismatched lengths".into()));
        }
        let trajectories = xs
            .into_iter()
            .zip(actions)
            .zip(rewards.into_iter().zip(propensities))
            .enumerate()
            .map(|(i, ((x, action), (reward, propensity)))| Trajectory {
                id: i as u64,
                stages: vec![Stage { x, action, reward, propensity }],
            })
            .collect();
        TrajectoryDataset::new(trajectories)
    }

    pub fn n(&self) -> usize {
        self.trajectories.len()
    }

    pub fn stage_count(&self) -> usize {
        self.stages
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn is_single_stage(&self) -> bool {
        self.stages == 1
    }
}

/// Deterministic policy: covariate (or history features) to action label.
pub trait Policy {
    fn decide(&self, x: &CovariatePoint) -> i64;
}

impl<F: Fn(&CovariatePoint) -> i64> Policy for F {
    fn decide(&self, x: &CovariatePoint) -> i64 {
        self(x)
    }
}

/// Argmax of q(x, ·); ties break to the smallest action label.
pub fn greedy_policy(q: &TabularQFunction, x: &CovariatePoint) -> Result<i64> {
    let point = q
        .points()
        .iter()
        .find(|p| &p.x == x)
        .ok_or_else(|| Error::Structural(format!("covariate {x:?} not on the grid")))?;
    greedy_from_values(q.actions(), &point.q, x)
}

/// Argmax over explicit per-action values with smallest-label tie-breaking.
pub fn greedy_from_values(actions: &ActionSet, values: &[f64], x: &CovariatePoint) -> Result<i64> {
    let mut best: Option<(i64, f64)> = None;
    for (&label, &v) in actions.labels().iter().zip(values) {
        if !v.is_finite() {
            return Err(Error::Evaluation {
                point: x.0.clone(),
                action: label,
                reason: format!("non-finite q value {v}"),
            });
        }
        best = match best {
            None => Some((label, v)),
            Some((bl, bv)) => {
                if v > bv || (v == bv && label < bl) {
                    Some((label, v))
                } else {
                    Some((bl, bv))
                }
            }
        };
    }
    Ok(best.expect("action set is non-empty").0)
}

/// Ratio-constancy test for policy equivalence: true iff q1/q0 is constant
/// over actions at every grid point, up to relative tolerance `tol`.
pub fn policy_equivalent(q0: &TabularQFunction, q1: &TabularQFunction, tol: f64) -> Result<bool> {
    q0.check_same_grid(q1)?;
    for (p0, p1) in q0.points().iter().zip(q1.points()) {
        let eta = p1.q[0] / p0.q[0];
        for (&a, &b) in p0.q.iter().zip(&p1.q).skip(1) {
            let r = b / a;
            if (r - eta).abs() > tol * eta.abs().max(r.abs()).max(1e-300) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

pub const POLICY_EQUIV_TOL: f64 = 1e-9;

/// Exact expected value of policy `d` under the tabular truth:
/// sum over grid of weight * q(x, d(x)).
pub fn value_expected<P: Policy + ?Sized>(q: &TabularQFunction, d: &P) -> Result<f64> {
    let mut total = 0.0;
    for p in q.points() {
        let a = d.decide(&p.x);
        let idx = q
            .actions()
            .index_of(a)
            .ok_or_else(|| Error::Invalid(format!("policy returned unknown action {a}")))?;
        total += p.weight * p.q[idx];
    }
    Ok(total)
}

/// Inverse-probability-weighted value estimate on single-stage data:
/// (1/n) sum of I(A_i = d(X_i)) * Y_i / p_i.
pub fn value_ipw<P: Policy + ?Sized>(data: &TrajectoryDataset, d: &P) -> Result<f64> {
    if !data.is_single_stage() {
        return Err(Error::Structural("value_ipw requires single-stage data".into()));
    }
    let mut total = 0.0;
    for (i, tr) in data.trajectories().iter().enumerate() {
        let s = &tr.stages[0];
        if !(s.propensity > 0.0) {
            return Err(Error::InvalidRecord {
                index: i,
                reason: format!("propensity {} must be positive", s.propensity),
            });
        }
        if d.decide(&s.x) == s.action {
            total += s.reward / s.propensity;
        }
    }
    Ok(total / data.n() as f64)
}
