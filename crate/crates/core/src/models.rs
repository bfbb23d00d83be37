//! Parametric and semiparametric Q-function models.
//!
//! The multiplicative model is `Q(x, a) = exp{ f(x) + g(x, a, psi) }` with an
//! action-free nuisance component `f` and a linear-in-parameters policy
//! component `g(x, a, psi) = psi0 . s0(a) + s1(a)' Psi1 t(x)`. Only `g`
//! matters for the greedy policy; `f` is a nuisance.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qcore::{ActionSet, CovariatePoint, GridPoint, TabularQFunction};

/// Caller-supplied feature maps with fixed output dimensions.
pub struct CustomFeatures {
    pub s0: Box<dyn Fn(i64) -> Vec<f64> + Send + Sync>,
    pub s1: Box<dyn Fn(i64) -> Vec<f64> + Send + Sync>,
    pub t: Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    pub s0_dim: usize,
    pub s1_dim: usize,
    pub t_dim: usize,
}

/// Feature maps for the linear policy component.
#[derive(Clone)]
pub enum FeatureMaps {
    /// The simulation design: `s0(a) = [a]`, `s1(a) = [a]`, `t(x) = x`.
    /// Action labels are used numerically.
    LinearNumericAction { covariate_dim: usize },
    Custom(Arc<CustomFeatures>),
}

impl fmt::Debug for FeatureMaps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureMaps::LinearNumericAction { covariate_dim } => f
                .debug_struct("LinearNumericAction")
                .field("covariate_dim", covariate_dim)
                .finish(),
            FeatureMaps::Custom(c) => f
                .debug_struct("Custom")
                .field("s0_dim", &c.s0_dim)
                .field("s1_dim", &c.s1_dim)
                .field("t_dim", &c.t_dim)
                .finish(),
        }
    }
}

impl FeatureMaps {
    pub fn s0(&self, a: i64) -> Vec<f64> {
        match self {
            FeatureMaps::LinearNumericAction { .. } => vec![a as f64],
            FeatureMaps::Custom(c) => (c.s0)(a),
        }
    }

    pub fn s1(&self, a: i64) -> Vec<f64> {
        match self {
            FeatureMaps::LinearNumericAction { .. } => vec![a as f64],
            FeatureMaps::Custom(c) => (c.s1)(a),
        }
    }

    pub fn t(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FeatureMaps::LinearNumericAction { .. } => x.to_vec(),
            FeatureMaps::Custom(c) => (c.t)(x),
        }
    }

    pub fn s0_dim(&self) -> usize {
        match self {
            FeatureMaps::LinearNumericAction { .. } => 1,
            FeatureMaps::Custom(c) => c.s0_dim,
        }
    }

    pub fn s1_dim(&self) -> usize {
        match self {
            FeatureMaps::LinearNumericAction { .. } => 1,
            FeatureMaps::Custom(c) => c.s1_dim,
        }
    }

    pub fn t_dim(&self) -> usize {
        match self {
            FeatureMaps::LinearNumericAction { covariate_dim } => *covariate_dim,
            FeatureMaps::Custom(c) => c.t_dim,
        }
    }

    /// Action-averaged features `s_bar_j = m^{-1} sum_a s_j(a)`.
    pub fn s_bar(&self, actions: &ActionSet) -> (Vec<f64>, Vec<f64>) {
        let m = actions.m() as f64;
        let mut b0 = vec![0.0; self.s0_dim()];
        let mut b1 = vec![0.0; self.s1_dim()];
        for &a in actions.labels() {
            for (acc, v) in b0.iter_mut().zip(self.s0(a)) {
                *acc += v / m;
            }
            for (acc, v) in b1.iter_mut().zip(self.s1(a)) {
                *acc += v / m;
            }
        }
        (b0, b1)
    }

    fn preset_name(&self) -> Result<&'static str> {
        match self {
            FeatureMaps::LinearNumericAction { .. } => Ok("linear_numeric_action"),
            FeatureMaps::Custom(_) => Err(Error::Format(
                "custom feature maps have no file representation".into(),
            )),
        }
    }
}

/// Linear policy component `g(x, a, psi) = psi0 . s0(a) + s1(a)' Psi1 t(x)`.
///
/// The flat parameter layout is `[psi0, vec(Psi1) row-major]`.
#[derive(Debug, Clone)]
pub struct PolicyComponent {
    pub psi0: Vec<f64>,
    /// Row-major `s1_dim x t_dim` interaction matrix.
    pub psi1: Vec<f64>,
    pub features: FeatureMaps,
    pub actions: ActionSet,
}

impl PolicyComponent {
    pub fn new(
        psi0: Vec<f64>,
        psi1: Vec<f64>,
        features: FeatureMaps,
        actions: ActionSet,
    ) -> Result<Self> {
        if psi0.len() != features.s0_dim() {
            return Err(Error::Structural(format!(
                "psi0 has length {} but s0 has dimension {}",
                psi0.len(),
                features.s0_dim()
            )));
        }
        if psi1.len() != features.s1_dim() * features.t_dim() {
            return Err(Error::Structural(format!(
                "Psi1 has {} entries but s1 x t is {} x {}",
                psi1.len(),
                features.s1_dim(),
                features.t_dim()
            )));
        }
        Ok(PolicyComponent { psi0, psi1, features, actions })
    }

    /// Zero-parameter template with the given feature maps.
    pub fn template(features: FeatureMaps, actions: ActionSet) -> Self {
        let psi0 = vec![0.0; features.s0_dim()];
        let psi1 = vec![0.0; features.s1_dim() * features.t_dim()];
        PolicyComponent { psi0, psi1, features, actions }
    }

    pub fn param_dim(&self) -> usize {
        self.psi0.len() + self.psi1.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = self.psi0.clone();
        v.extend_from_slice(&self.psi1);
        v
    }

    pub fn with_params(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.param_dim() {
            return Err(Error::Structural(format!(
                "parameter vector has length {}, expected {}",
                theta.len(),
                self.param_dim()
            )));
        }
        let (p0, p1) = theta.split_at(self.psi0.len());
        Ok(PolicyComponent {
            psi0: p0.to_vec(),
            psi1: p1.to_vec(),
            features: self.features.clone(),
            actions: self.actions.clone(),
        })
    }
}

/// `g(x, a, psi)` for the linear component.
pub fn eval_g(pc: &PolicyComponent, x: &CovariatePoint, a: i64) -> Result<f64> {
    let grad = eval_g_gradient(pc, x, a)?;
    Ok(grad
        .iter()
        .zip(pc.params())
        .map(|(gi, ti)| gi * ti)
        .sum())
}

/// Gradient of `g` with respect to the flat parameter vector:
/// `[s0(a), vec(s1(a) t(x)') row-major]`. Independent of psi for this model.
pub fn eval_g_gradient(pc: &PolicyComponent, x: &CovariatePoint, a: i64) -> Result<Vec<f64>> {
    if pc.actions.index_of(a).is_none() {
        return Err(Error::Invalid(format!("action {a} not in the action set")));
    }
    let t = pc.features.t(&x.0);
    if t.len() != pc.features.t_dim() {
        return Err(Error::Structural(format!(
            "t(x) produced {} entries, expected {}",
            t.len(),
            pc.features.t_dim()
        )));
    }
    let s0 = pc.features.s0(a);
    let s1 = pc.features.s1(a);
    let mut grad = Vec::with_capacity(pc.param_dim());
    grad.extend_from_slice(&s0);
    for &s in &s1 {
        for &tv in &t {
            grad.push(s * tv);
        }
    }
    Ok(grad)
}

/// The action-free nuisance part of the log Q-model.
#[derive(Clone)]
pub enum NuisanceComponent {
    Absent,
    /// `f(x, alpha) = alpha . [x, 1]` (linear with intercept).
    ParametricLinear { alpha: Vec<f64> },
    /// Caller-supplied truth the working model need not be able to represent.
    FixedFunction(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl fmt::Debug for NuisanceComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NuisanceComponent::Absent => write!(f, "Absent"),
            NuisanceComponent::ParametricLinear { alpha } => {
                write!(f, "ParametricLinear {{ alpha: {alpha:?} }}")
            }
            NuisanceComponent::FixedFunction(_) => write!(f, "FixedFunction(..)"),
        }
    }
}

impl NuisanceComponent {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            NuisanceComponent::Absent => 0.0,
            NuisanceComponent::ParametricLinear { alpha } => Self::linear_basis(x)
                .iter()
                .zip(alpha)
                .map(|(b, a)| a * b)
                .sum(),
            NuisanceComponent::FixedFunction(f) => f(x),
        }
    }

    /// Basis for the parametric-linear kind: covariates then an intercept.
    pub fn linear_basis(x: &[f64]) -> Vec<f64> {
        let mut b = x.to_vec();
        b.push(1.0);
        b
    }

    pub fn alpha_dim(&self, covariate_dim: usize) -> usize {
        match self {
            NuisanceComponent::ParametricLinear { .. } => covariate_dim + 1,
            _ => 0,
        }
    }
}

/// Multiplicative Q-model `Q(x, a) = exp{ f(x) + g(x, a, psi) }`.
#[derive(Debug, Clone)]
pub struct ModelQFunction {
    pub nuisance: NuisanceComponent,
    pub policy_part: PolicyComponent,
}

impl ModelQFunction {
    pub fn log_q(&self, x: &CovariatePoint, a: i64) -> Result<f64> {
        Ok(self.nuisance.eval(&x.0) + eval_g(&self.policy_part, x, a)?)
    }

    pub fn q(&self, x: &CovariatePoint, a: i64) -> Result<f64> {
        Ok(self.log_q(x, a)?.exp())
    }

    /// Greedy action from the policy component alone; ties break to the
    /// smallest label.
    pub fn greedy(&self, x: &CovariatePoint) -> Result<i64> {
        let mut best: Option<(i64, f64)> = None;
        for &a in self.policy_part.actions.labels() {
            let g = eval_g(&self.policy_part, x, a)?;
            best = match best {
                None => Some((a, g)),
                Some((_, bv)) if g > bv => Some((a, g)),
                keep => keep,
            };
        }
        Ok(best.expect("non-empty action set").0)
    }
}

/// Exact tabulation of the model on a weighted grid.
pub fn to_tabular(model: &ModelQFunction, grid: &[(CovariatePoint, f64)]) -> Result<TabularQFunction> {
    let actions = model.policy_part.actions.clone();
    let mut points = Vec::with_capacity(grid.len());
    for (x, weight) in grid {
        let mut q = Vec::with_capacity(actions.m());
        for &a in actions.labels() {
            let v = model.q(x, a)?;
            if !v.is_finite() {
                return Err(Error::Evaluation {
                    point: x.0.clone(),
                    action: a,
                    reason: format!("exp overflow: log q = {}", model.log_q(x, a)?),
                });
            }
            q.push(v);
        }
        points.push(GridPoint { x: x.clone(), weight: *weight, q });
    }
    TabularQFunction::new(actions, points)
}

/// On-disk model schema:
/// `{ "psi0": [..], "Psi1": [[..]], "features": "<preset>", "actions": [..],
///    "nuisance": { "kind": ..., "alpha": [..] } }`.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    psi0: Vec<f64>,
    #[serde(rename = "Psi1")]
    psi1: Vec<Vec<f64>>,
    features: String,
    actions: Vec<i64>,
    covariate_dim: usize,
    nuisance: NuisanceFile,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum NuisanceFile {
    Absent,
    ParametricLinear { alpha: Vec<f64> },
}

impl ModelQFunction {
    pub fn to_json(&self) -> Result<String> {
        let preset = self.policy_part.features.preset_name()?;
        let t_dim = self.policy_part.features.t_dim();
        let psi1_rows: Vec<Vec<f64>> = self
            .policy_part
            .psi1
            .chunks(t_dim)
            .map(|r| r.to_vec())
            .collect();
        let nuisance = match &self.nuisance {
            NuisanceComponent::Absent => NuisanceFile::Absent,
            NuisanceComponent::ParametricLinear { alpha } => {
                NuisanceFile::ParametricLinear { alpha: alpha.clone() }
            }
            NuisanceComponent::FixedFunction(_) => {
                return Err(Error::Format(
                    "fixed-function nuisance has no file representation".into(),
                ))
            }
        };
        let file = ModelFile {
            psi0: self.policy_part.psi0.clone(),
            psi1: psi1_rows,
            features: preset.to_string(),
            actions: self.policy_part.actions.labels().to_vec(),
            covariate_dim: self.policy_part.features.t_dim(),
            nuisance,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.features != "linear_numeric_action" {
            return Err(Error::Format(format!("unknown feature preset {}", file.features)));
        }
        let features = FeatureMaps::LinearNumericAction { covariate_dim: file.covariate_dim };
        let actions = ActionSet::new(file.actions)?;
        let psi1: Vec<f64> = file.psi1.into_iter().flatten().collect();
        let policy_part = PolicyComponent::new(file.psi0, psi1, features, actions)?;
        let nuisance = match file.nuisance {
            NuisanceFile::Absent => NuisanceComponent::Absent,
            NuisanceFile::ParametricLinear { alpha } => NuisanceComponent::ParametricLinear { alpha },
        };
        Ok(ModelQFunction { nuisance, policy_part })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcore::{greedy_policy, policy_equivalent, POLICY_EQUIV_TOL};

    fn sim_actions() -> ActionSet {
        ActionSet::new(vec![1, 2, 3]).unwrap()
    }

    fn sim_component(psi1: f64, psi0: f64) -> PolicyComponent {
        PolicyComponent::new(
            vec![psi0],
            vec![psi1],
            FeatureMaps::LinearNumericAction { covariate_dim: 1 },
            sim_actions(),
        )
        .unwrap()
    }

    #[test]
    fn eval_g_simulation_case() {
        // g = x psi1 a + psi0 a with (psi1, psi0) = (2, -1), x = 1, a = 3.
        let pc = sim_component(2.0, -1.0);
        let g = eval_g(&pc, &CovariatePoint::scalar(1.0), 3).unwrap();
        assert!((g - 3.0).abs() < 1e-14);
    }

    #[test]
    fn eval_g_zero_params() {
        let pc = sim_component(0.0, 0.0);
        for a in 1..=3 {
            assert_eq!(eval_g(&pc, &CovariatePoint::scalar(1.7), a).unwrap(), 0.0);
        }
    }

    #[test]
    fn g_is_linear_in_features() {
        // Averaging the features over actions averages g.
        let pc = sim_component(1.3, -0.4);
        let x = CovariatePoint::scalar(0.8);
        let mean_g: f64 = (1..=3)
            .map(|a| eval_g(&pc, &x, a).unwrap())
            .sum::<f64>()
            / 3.0;
        let (b0, b1) = pc.features.s_bar(&pc.actions);
        let g_bar = pc.psi0[0] * b0[0] + pc.psi1[0] * b1[0] * 0.8;
        assert!((mean_g - g_bar).abs() < 1e-12);
    }

    #[test]
    fn gradient_simulation_case() {
        // Layout [psi0-block, Psi1-block]: (a, x*a) at x = 1.5, a = 2.
        let pc = sim_component(2.0, -1.0);
        let grad = eval_g_gradient(&pc, &CovariatePoint::scalar(1.5), 2).unwrap();
        assert_eq!(grad, vec![2.0, 3.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let pc = sim_component(0.7, -0.2);
        let x = CovariatePoint::scalar(1.1);
        let a = 2;
        let grad = eval_g_gradient(&pc, &x, a).unwrap();
        let theta = pc.params();
        let h = 1e-6;
        for k in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += h;
            tm[k] -= h;
            let gp = eval_g(&pc.with_params(&tp).unwrap(), &x, a).unwrap();
            let gm = eval_g(&pc.with_params(&tm).unwrap(), &x, a).unwrap();
            assert!((grad[k] - (gp - gm) / (2.0 * h)).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_same_action_difference_vanishes() {
        let pc = sim_component(0.7, -0.2);
        let x = CovariatePoint::scalar(2.3);
        let g1 = eval_g_gradient(&pc, &x, 2).unwrap();
        let g2 = eval_g_gradient(&pc, &x, 2).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn to_tabular_all_ones_when_zero() {
        let model = ModelQFunction {
            nuisance: NuisanceComponent::Absent,
            policy_part: sim_component(0.0, 0.0),
        };
        let grid = vec![(CovariatePoint::scalar(0.3), 0.5), (CovariatePoint::scalar(1.2), 0.5)];
        let tab = to_tabular(&model, &grid).unwrap();
        for p in tab.points() {
            for &v in &p.q {
                assert_eq!(v, 1.0);
            }
        }
    }

    #[test]
    fn to_tabular_simulation_truth_at_one() {
        // f = -x - 2 and g = (2x - 1)a give q(1, a) = exp(-3 + a).
        let model = ModelQFunction {
            nuisance: NuisanceComponent::ParametricLinear { alpha: vec![-1.0, -2.0] },
            policy_part: sim_component(2.0, -1.0),
        };
        let grid = vec![(CovariatePoint::scalar(1.0), 1.0)];
        let tab = to_tabular(&model, &grid).unwrap();
        for (i, &v) in tab.points()[0].q.iter().enumerate() {
            let a = (i + 1) as f64;
            assert!((v - (-3.0 + a).exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn nuisance_shift_preserves_policy() {
        let pc = sim_component(2.0, -1.0);
        let grid: Vec<(CovariatePoint, f64)> = (0..4)
            .map(|i| (CovariatePoint::scalar(0.5 * i as f64), 0.25))
            .collect();
        let with_f = ModelQFunction {
            nuisance: NuisanceComponent::ParametricLinear { alpha: vec![-1.0, -2.0] },
            policy_part: pc.clone(),
        };
        let without_f = ModelQFunction { nuisance: NuisanceComponent::Absent, policy_part: pc };
        let t1 = to_tabular(&with_f, &grid).unwrap();
        let t0 = to_tabular(&without_f, &grid).unwrap();
        assert!(policy_equivalent(&t0, &t1, POLICY_EQUIV_TOL).unwrap());
        for (x, _) in &grid {
            assert_eq!(greedy_policy(&t0, x).unwrap(), greedy_policy(&t1, x).unwrap());
        }
    }

    #[test]
    fn fixed_function_nuisance_evaluates() {
        let bump = NuisanceComponent::FixedFunction(Arc::new(|x: &[f64]| -(x[0] - 1.0).powi(2)));
        assert_eq!(bump.eval(&[1.0]), 0.0);
        assert!((bump.eval(&[2.0]) + 1.0).abs() < 1e-14);
    }

    #[test]
    fn to_tabular_reports_overflow_point() {
        let model = ModelQFunction {
            nuisance: NuisanceComponent::ParametricLinear { alpha: vec![500.0, 500.0] },
            policy_part: sim_component(0.0, 0.0),
        };
        let grid = vec![(CovariatePoint::scalar(1.0), 1.0)];
        match to_tabular(&model, &grid) {
            Err(crate::error::Error::Evaluation { point, .. }) => assert_eq!(point, vec![1.0]),
            other => panic!("expected evaluation error, got {other:?}"),
        }
    }

    #[test]
    fn model_json_round_trip() {
        let model = ModelQFunction {
            nuisance: NuisanceComponent::ParametricLinear { alpha: vec![-1.0, -2.0] },
            policy_part: sim_component(2.0, -1.0),
        };
        let s = model.to_json().unwrap();
        let back = ModelQFunction::from_json(&s).unwrap();
        assert_eq!(back.policy_part.psi0, vec![-1.0]);
        assert_eq!(back.policy_part.psi1, vec![2.0]);
        match back.nuisance {
            NuisanceComponent::ParametricLinear { alpha } => assert_eq!(alpha, vec![-1.0, -2.0]),
            other => panic!("unexpected nuisance {other:?}"),
        }
    }
}
