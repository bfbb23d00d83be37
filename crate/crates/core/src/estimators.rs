//! Loss functions and fitting: the minimum gamma-power and beta-power
//! divergence estimators, the maximum-likelihood Q-learning baseline,
//! propensity fitting, sandwich covariances and multi-stage backward
//! induction.
//!
//! The gamma-power loss depends on the policy component alone; adding any
//! action-constant term to `g` cancels between its numerator and denominator,
//! which is the mechanism behind semiparametric consistency. The beta-power
//! loss must carry the nuisance explicitly and pays for nuisance
//! misspecification with bias.
//!
//! Fitting protocol: a quasi-Newton run from the zero vector, rescued on
//! failure by a warm start at the maximum-likelihood estimate (beta only) and
//! then by seeded random restarts; the first converged candidate inside the
//! parameter domain cap wins. Minima escaping to infinity (a real feature of
//! negative-index power losses on small samples) are reported as
//! `converged = false`, never silently.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, norm_inf, Matrix};
use crate::models::{eval_g, eval_g_gradient, ModelQFunction, NuisanceComponent, PolicyComponent};
use crate::optim::{bfgs, BfgsOptions, nelder_mead, NelderMeadOptions};
use crate::qcore::{ActionSet, CovariatePoint, Stage, TrajectoryDataset};

/// Exponent guard: anything above this inside an exp() makes the loss +inf so
/// the line search backs off instead of overflowing.
const EXP_GUARD: f64 = 700.0;

/// Records with IPW weight y/p beyond this trigger a data-quality warning.
const WEIGHT_WARN: f64 = 1e12;

/// Jacobian condition number above this marks the fit unidentified.
const COND_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    GammaMde,
    BetaMde,
    Ml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    QuasiNewton,
    NelderMead,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub method: FitMethod,
    /// Power index: gamma or beta; ignored for ML.
    pub index: f64,
    pub optimizer: OptimizerKind,
    pub max_iters: usize,
    pub gradient_tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Estimates with any coordinate beyond this magnitude are treated as
    /// diverged-to-infinity rather than converged.
    pub domain_cap: f64,
}

impl FitConfig {
    pub fn new(method: FitMethod, index: f64) -> Self {
        FitConfig {
            method,
            index,
            optimizer: OptimizerKind::QuasiNewton,
            max_iters: 500,
            gradient_tol: 1e-8,
            restarts: 5,
            seed: 0,
            domain_cap: 50.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            FitMethod::GammaMde => {
                if self.index == 0.0 {
                    return Err(Error::SingularIndex {
                        index: 0.0,
                        hint: "gamma = 0 has no loss; use the nKL limit objects".into(),
                    });
                }
            }
            FitMethod::BetaMde => {
                // index 0 dispatches to the eKL loss inside the fit.
                if self.index == -1.0 {
                    return Err(Error::SingularIndex {
                        index: self.index,
                        hint: "beta = -1 is singular with no limit form".into(),
                    });
                }
            }
            FitMethod::Ml => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub method: FitMethod,
    pub index: f64,
    pub psi_hat: Vec<f64>,
    pub alpha_hat: Vec<f64>,
    #[serde(rename = "loss")]
    pub loss_at_optimum: f64,
    pub gradient_norm: f64,
    #[serde(rename = "covariance")]
    pub sandwich_covariance: Vec<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub diagnostics: Vec<String>,
}

impl FitResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit result serialization cannot fail")
    }

    /// Standard errors from the sandwich diagonal, in parameter order
    /// `[alpha, psi]` (or `[psi]` for the gamma fit).
    pub fn standard_errors(&self) -> Vec<f64> {
        self.sandwich_covariance
            .iter()
            .enumerate()
            .map(|(i, row)| row[i].max(0.0).sqrt())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Prepared single-stage data: per-record design vectors for the linear model.
// ---------------------------------------------------------------------------

/// Per-record features shared by all losses. The policy model is linear in
/// its parameters, so each loss only needs `G(x, a)` per action and the
/// nuisance basis.
pub struct Prepared {
    pub n: usize,
    pub m: usize,
    pub policy_dim: usize,
    pub alpha_dim: usize,
    pub y: Vec<f64>,
    pub p: Vec<f64>,
    /// ln(y/p); records with y = 0 use -inf and contribute zero weight.
    log_w: Vec<f64>,
    /// n x alpha_dim nuisance basis rows.
    basis: Vec<f64>,
    /// n x m x policy_dim policy gradient vectors.
    g_feat: Vec<f64>,
    /// Index of the observed action per record.
    obs: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Prepared {
    pub fn from_single_stage(
        data: &TrajectoryDataset,
        policy_template: &PolicyComponent,
        nuisance_template: &NuisanceComponent,
    ) -> Result<Self> {
        if !data.is_single_stage() {
            return Err(Error::Structural("expected single-stage data".into()));
        }
        let stages: Vec<&Stage> = data.trajectories().iter().map(|t| &t.stages[0]).collect();
        Prepared::from_stages(&stages, policy_template, nuisance_template)
    }

    /// Build from explicit stage records (used by the backward recursion with
    /// history features and pseudo-outcomes).
    pub fn from_records(
        records: &[(CovariatePoint, i64, f64, f64)],
        policy_template: &PolicyComponent,
        nuisance_template: &NuisanceComponent,
    ) -> Result<Self> {
        let owned: Vec<Stage> = records
            .iter()
            .map(|(x, a, y, p)| Stage { x: x.clone(), action: *a, reward: *y, propensity: *p })
            .collect();
        let refs: Vec<&Stage> = owned.iter().collect();
        Prepared::from_stages(&refs, policy_template, nuisance_template)
    }

    fn from_stages(
        stages: &[&Stage],
        policy_template: &PolicyComponent,
        nuisance_template: &NuisanceComponent,
    ) -> Result<Self> {
        let n = stages.len();
        let m = policy_template.actions.m();
        let policy_dim = policy_template.param_dim();
        let cov_dim = stages.first().map(|s| s.x.dim()).unwrap_or(0);
        let alpha_dim = nuisance_template.alpha_dim(cov_dim);
        let mut y = Vec::with_capacity(n);
        let mut p = Vec::with_capacity(n);
        let mut log_w = Vec::with_capacity(n);
        let mut basis = Vec::with_capacity(n * alpha_dim);
        let mut g_feat = Vec::with_capacity(n * m * policy_dim);
        let mut obs = Vec::with_capacity(n);
        let mut warnings = Vec::new();
        let mut heavy = 0usize;
        for (i, s) in stages.iter().enumerate() {
            if !(s.propensity > 0.0) {
                return Err(Error::InvalidRecord {
                    index: i,
                    reason: format!("propensity {} must be positive", s.propensity),
                });
            }
            if !(s.reward >= 0.0) || !s.reward.is_finite() {
                return Err(Error::InvalidRecord {
                    index: i,
                    reason: format!("reward {} must be finite and nonnegative", s.reward),
                });
            }
            let w = s.reward / s.propensity;
            if w > WEIGHT_WARN {
                heavy += 1;
            }
            y.push(s.reward);
            p.push(s.propensity);
            log_w.push(w.ln());
            if alpha_dim > 0 {
                basis.extend(NuisanceComponent::linear_basis(&s.x.0));
            }
            let oi = policy_template.actions.index_of(s.action).ok_or_else(|| {
                Error::InvalidRecord {
                    index: i,
                    reason: format!("action {} not in the action set", s.action),
                }
            })?;
            obs.push(oi);
            for &a in policy_template.actions.labels() {
                g_feat.extend(eval_g_gradient(policy_template, &s.x, a)?);
            }
        }
        if heavy > 0 {
            warnings.push(format!("{heavy} records carry IPW weight y/p above {WEIGHT_WARN:e}"));
        }
        Ok(Prepared {
            n,
            m,
            policy_dim,
            alpha_dim,
            y,
            p,
            log_w,
            basis,
            g_feat,
            obs,
            warnings,
        })
    }

    #[inline]
    fn g_row(&self, i: usize, a: usize) -> &[f64] {
        let start = (i * self.m + a) * self.policy_dim;
        &self.g_feat[start..start + self.policy_dim]
    }

    #[inline]
    fn basis_row(&self, i: usize) -> &[f64] {
        let start = i * self.alpha_dim;
        &self.basis[start..start + self.alpha_dim]
    }

    pub fn theta_dim(&self) -> usize {
        self.alpha_dim + self.policy_dim
    }
}

// ---------------------------------------------------------------------------
// Gamma-power loss and estimating function.
// ---------------------------------------------------------------------------

fn check_gamma_index(gamma: f64) -> Result<()> {
    if gamma == 0.0 || gamma == -1.0 {
        return Err(Error::SingularIndex {
            index: gamma,
            hint: "gamma in {0, -1} needs its dedicated limit form".into(),
        });
    }
    Ok(())
}

/// Gamma-power loss over prepared records:
/// `-(1/gamma) (1/n) sum_i (y_i/p_i) exp{gamma g_A} / [sum_a exp{(gamma+1) g_a}]^{gamma/(gamma+1)}`.
pub fn gamma_loss_prepared(prep: &Prepared, psi: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut g_all = vec![0.0; prep.m];
    for i in 0..prep.n {
        for a in 0..prep.m {
            g_all[a] = (gamma + 1.0) * dot(psi, prep.g_row(i, a));
        }
        let lse = log_sum_exp(&g_all);
        let g_obs = dot(psi, prep.g_row(i, prep.obs[i]));
        let expo = gamma * g_obs - gamma / (gamma + 1.0) * lse + prep.log_w[i];
        if expo > EXP_GUARD {
            return f64::INFINITY;
        }
        if expo.is_finite() {
            total += expo.exp();
        }
    }
    -total / (gamma * prep.n as f64)
}

/// Loss and gradient together; the gradient is the negated mean estimating
/// function.
pub fn gamma_loss_grad_prepared(prep: &Prepared, psi: &[f64], gamma: f64) -> (f64, Vec<f64>) {
    let d = prep.policy_dim;
    let mut loss = 0.0;
    let mut grad = vec![0.0; d];
    let mut z = vec![0.0; prep.m];
    for i in 0..prep.n {
        for a in 0..prep.m {
            z[a] = (gamma + 1.0) * dot(psi, prep.g_row(i, a));
        }
        let lse = log_sum_exp(&z);
        let g_obs = dot(psi, prep.g_row(i, prep.obs[i]));
        let expo = gamma * g_obs - gamma / (gamma + 1.0) * lse + prep.log_w[i];
        if expo > EXP_GUARD {
            return (f64::INFINITY, vec![f64::NAN; d]);
        }
        if !expo.is_finite() {
            continue;
        }
        let factor = expo.exp();
        loss += factor;
        let obs_row = prep.g_row(i, prep.obs[i]);
        for a in 0..prep.m {
            let w = (z[a] - lse).exp();
            let row = prep.g_row(i, a);
            for k in 0..d {
                grad[k] -= factor * w * (obs_row[k] - row[k]);
            }
        }
    }
    let n = prep.n as f64;
    for v in &mut grad {
        *v /= n;
    }
    (-loss / (gamma * n), grad)
}

/// Estimating function for one record at a regular index:
/// `(y/p) e^{gamma g_A} / R * sum_a w(a) [G(A) - G(a)]` with
/// `w(a) = exp{(gamma+1) g_a}` and `R = (sum_a w)^{gamma/(gamma+1)+1}`.
///
/// Equals minus the per-record gradient of the loss summand exactly
/// (proportionality constant 1).
pub fn gamma_estimating_function(
    pc: &PolicyComponent,
    x: &CovariatePoint,
    action: i64,
    y: f64,
    propensity: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    check_gamma_index(gamma)?;
    if !(propensity > 0.0) {
        return Err(Error::InvalidRecord {
            index: 0,
            reason: format!("propensity {propensity} must be positive"),
        });
    }
    let labels = pc.actions.labels().to_vec();
    let z: Vec<f64> = labels
        .iter()
        .map(|&a| eval_g(pc, x, a).map(|g| (gamma + 1.0) * g))
        .collect::<Result<_>>()?;
    let lse = log_sum_exp(&z);
    let g_obs = eval_g(pc, x, action)?;
    let factor = (y / propensity) * (gamma * g_obs - gamma / (gamma + 1.0) * lse).exp();
    let obs_grad = eval_g_gradient(pc, x, action)?;
    let mut out = vec![0.0; pc.param_dim()];
    for (j, &a) in labels.iter().enumerate() {
        let w = (z[j] - lse).exp();
        let row = eval_g_gradient(pc, x, a)?;
        for k in 0..out.len() {
            out[k] += factor * w * (obs_grad[k] - row[k]);
        }
    }
    Ok(out)
}

/// The unweighted gamma = -1 form:
/// `(y/p) e^{-g(A)} [s0(A) - s0_bar; (s1(A) - s1_bar) t(x)']`.
pub fn gamma_estimating_function_unweighted(
    pc: &PolicyComponent,
    x: &CovariatePoint,
    action: i64,
    y: f64,
    propensity: f64,
) -> Result<Vec<f64>> {
    let g_obs = eval_g(pc, x, action)?;
    let factor = (y / propensity) * (-g_obs).exp();
    let obs_grad = eval_g_gradient(pc, x, action)?;
    let m = pc.actions.m() as f64;
    let mut mean_grad = vec![0.0; pc.param_dim()];
    for &a in pc.actions.labels() {
        for (acc, v) in mean_grad.iter_mut().zip(eval_g_gradient(pc, x, a)?) {
            *acc += v / m;
        }
    }
    Ok(obs_grad
        .iter()
        .zip(&mean_grad)
        .map(|(o, b)| factor * (o - b))
        .collect())
}

/// Mean unweighted estimating function and its analytic Jacobian, for the
/// gamma = -1 root-finding fit.
fn unweighted_ee_prepared(prep: &Prepared, psi: &[f64]) -> (Vec<f64>, Matrix) {
    let d = prep.policy_dim;
    let mut mean = vec![0.0; d];
    let mut jac = Matrix::zeros(d, d);
    let m = prep.m as f64;
    let mut g_bar = vec![0.0; d];
    for i in 0..prep.n {
        for v in &mut g_bar {
            *v = 0.0;
        }
        for a in 0..prep.m {
            for (acc, v) in g_bar.iter_mut().zip(prep.g_row(i, a)) {
                *acc += v / m;
            }
        }
        let obs_row = prep.g_row(i, prep.obs[i]);
        let g_obs = dot(psi, obs_row);
        let expo = -g_obs + prep.log_w[i];
        let factor = if expo > EXP_GUARD { f64::INFINITY } else { expo.exp() };
        for k in 0..d {
            let ck = factor * (obs_row[k] - g_bar[k]);
            mean[k] += ck;
            for l in 0..d {
                jac[(k, l)] -= ck * obs_row[l];
            }
        }
    }
    let n = prep.n as f64;
    for v in &mut mean {
        *v /= n;
    }
    for v in &mut jac.data {
        *v /= n;
    }
    (mean, jac)
}

// ---------------------------------------------------------------------------
// Beta-power loss.
// ---------------------------------------------------------------------------

/// Beta-power loss over (alpha, psi), with the IPW weight on the outcome term:
/// `(1/n) sum_i [ -(y_i/p_i) e^{beta nu(A_i)}/beta + sum_a e^{(beta+1) nu(a)}/(beta+1) ]`
/// where `nu(a) = f(x_i, alpha) + g(x_i, a, psi)`.
///
/// This is the weighting whose population expectation is the beta-power cross
/// entropy `H_beta(Q_true, Q_theta)`, making the truth the population
/// minimizer under a correctly specified model.
pub fn beta_loss_prepared(prep: &Prepared, theta: &[f64], beta: f64) -> f64 {
    beta_loss_grad_impl(prep, theta, beta, false).0
}

pub fn beta_loss_grad_prepared(prep: &Prepared, theta: &[f64], beta: f64) -> (f64, Vec<f64>) {
    beta_loss_grad_impl(prep, theta, beta, true)
}

fn beta_loss_grad_impl(
    prep: &Prepared,
    theta: &[f64],
    beta: f64,
    want_grad: bool,
) -> (f64, Vec<f64>) {
    let ad = prep.alpha_dim;
    let pd = prep.policy_dim;
    let dim = ad + pd;
    let (alpha, psi) = theta.split_at(ad);
    let mut loss = 0.0;
    let mut grad = vec![0.0; dim];
    for i in 0..prep.n {
        let f_i = if ad > 0 { dot(alpha, prep.basis_row(i)) } else { 0.0 };
        let nu_obs = f_i + dot(psi, prep.g_row(i, prep.obs[i]));
        let e1 = beta * nu_obs + prep.log_w[i];
        if e1 > EXP_GUARD {
            return (f64::INFINITY, vec![f64::NAN; dim]);
        }
        let t1 = if e1.is_finite() { e1.exp() } else { 0.0 };
        loss -= t1 / beta;
        if want_grad {
            for (k, v) in prep.basis_row(i).iter().enumerate() {
                grad[k] -= t1 * v;
            }
            for (k, v) in prep.g_row(i, prep.obs[i]).iter().enumerate() {
                grad[ad + k] -= t1 * v;
            }
        }
        for a in 0..prep.m {
            let nu_a = f_i + dot(psi, prep.g_row(i, a));
            let e2 = (beta + 1.0) * nu_a;
            if e2 > EXP_GUARD {
                return (f64::INFINITY, vec![f64::NAN; dim]);
            }
            let t2 = e2.exp();
            loss += t2 / (beta + 1.0);
            if want_grad {
                for (k, v) in prep.basis_row(i).iter().enumerate() {
                    grad[k] += t2 * v;
                }
                for (k, v) in prep.g_row(i, a).iter().enumerate() {
                    grad[ad + k] += t2 * v;
                }
            }
        }
    }
    let n = prep.n as f64;
    for v in &mut grad {
        *v /= n;
    }
    (loss / n, grad)
}

/// The beta -> 0 limit of the beta-power loss (the eKL fit):
/// `(1/n) sum_i [ -(y_i/p_i) nu(A_i) + sum_a e^{nu(a)} ]`.
pub fn ekl_loss_grad_prepared(prep: &Prepared, theta: &[f64]) -> (f64, Vec<f64>) {
    let ad = prep.alpha_dim;
    let pd = prep.policy_dim;
    let dim = ad + pd;
    let (alpha, psi) = theta.split_at(ad);
    let mut loss = 0.0;
    let mut grad = vec![0.0; dim];
    for i in 0..prep.n {
        let f_i = if ad > 0 { dot(alpha, prep.basis_row(i)) } else { 0.0 };
        let w = self_weight(prep, i);
        let nu_obs = f_i + dot(psi, prep.g_row(i, prep.obs[i]));
        loss -= w * nu_obs;
        for (k, v) in prep.basis_row(i).iter().enumerate() {
            grad[k] -= w * v;
        }
        for (k, v) in prep.g_row(i, prep.obs[i]).iter().enumerate() {
            grad[ad + k] -= w * v;
        }
        for a in 0..prep.m {
            let nu_a = f_i + dot(psi, prep.g_row(i, a));
            if nu_a > EXP_GUARD {
                return (f64::INFINITY, vec![f64::NAN; dim]);
            }
            let t = nu_a.exp();
            loss += t;
            for (k, v) in prep.basis_row(i).iter().enumerate() {
                grad[k] += t * v;
            }
            for (k, v) in prep.g_row(i, a).iter().enumerate() {
                grad[ad + k] += t * v;
            }
        }
    }
    let n = prep.n as f64;
    for v in &mut grad {
        *v /= n;
    }
    (loss / n, grad)
}

fn self_weight(prep: &Prepared, i: usize) -> f64 {
    prep.y[i] / prep.p[i]
}

// ---------------------------------------------------------------------------
// Maximum-likelihood Q-learning baseline.
// ---------------------------------------------------------------------------

/// Canonical-form outcome family hook: the default is the exponential
/// distribution with a log link (mean Q = e^nu), matching the simulation
/// design.
pub trait OutcomeFamily: Send + Sync {
    fn neg_loglik(&self, y: f64, nu: f64) -> f64;
    fn d_neg_loglik_dnu(&self, y: f64, nu: f64) -> f64;
    fn mean(&self, nu: f64) -> f64;
}

/// Exponential outcome, log link: `-log p(y|nu) = nu + y e^{-nu}`.
pub struct ExponentialLogLink;

impl OutcomeFamily for ExponentialLogLink {
    fn neg_loglik(&self, y: f64, nu: f64) -> f64 {
        let e = -nu + if y > 0.0 { y.ln() } else { f64::NEG_INFINITY };
        if e > EXP_GUARD {
            return f64::INFINITY;
        }
        nu + if e.is_finite() { e.exp() } else { 0.0 }
    }

    fn d_neg_loglik_dnu(&self, y: f64, nu: f64) -> f64 {
        1.0 - y * (-nu).exp()
    }

    fn mean(&self, nu: f64) -> f64 {
        nu.exp()
    }
}

/// Poisson outcome, log link: `-log p(y|nu) = e^{nu} - y nu` (up to y!).
pub struct PoissonLogLink;

impl OutcomeFamily for PoissonLogLink {
    fn neg_loglik(&self, y: f64, nu: f64) -> f64 {
        if nu > EXP_GUARD {
            return f64::INFINITY;
        }
        nu.exp() - y * nu
    }

    fn d_neg_loglik_dnu(&self, y: f64, nu: f64) -> f64 {
        nu.exp() - y
    }

    fn mean(&self, nu: f64) -> f64 {
        nu.exp()
    }
}

/// Negative mean log-likelihood for the canonical GLM over (alpha, psi).
pub fn ml_loss_prepared<F: OutcomeFamily>(prep: &Prepared, theta: &[f64], family: &F) -> f64 {
    ml_loss_grad_prepared(prep, theta, family).0
}

pub fn ml_loss_grad_prepared<F: OutcomeFamily>(
    prep: &Prepared,
    theta: &[f64],
    family: &F,
) -> (f64, Vec<f64>) {
    let ad = prep.alpha_dim;
    let pd = prep.policy_dim;
    let dim = ad + pd;
    let (alpha, psi) = theta.split_at(ad);
    let mut loss = 0.0;
    let mut grad = vec![0.0; dim];
    for i in 0..prep.n {
        let f_i = if ad > 0 { dot(alpha, prep.basis_row(i)) } else { 0.0 };
        let nu = f_i + dot(psi, prep.g_row(i, prep.obs[i]));
        let l = family.neg_loglik(prep.y[i], nu);
        if !l.is_finite() {
            return (f64::INFINITY, vec![f64::NAN; dim]);
        }
        loss += l;
        let dl = family.d_neg_loglik_dnu(prep.y[i], nu);
        for (k, v) in prep.basis_row(i).iter().enumerate() {
            grad[k] += dl * v;
        }
        for (k, v) in prep.g_row(i, prep.obs[i]).iter().enumerate() {
            grad[ad + k] += dl * v;
        }
    }
    let n = prep.n as f64;
    for v in &mut grad {
        *v /= n;
    }
    (loss / n, grad)
}

/// ML estimating function for one record: `{y - Q(x, A)} dnu/dtheta`.
pub fn ml_estimating_function<F: OutcomeFamily>(
    model: &ModelQFunction,
    x: &CovariatePoint,
    action: i64,
    y: f64,
    family: &F,
) -> Result<Vec<f64>> {
    let nu = model.log_q(x, action)?;
    let resid = y - family.mean(nu);
    let mut out = NuisanceComponent::linear_basis(&x.0)
        .iter()
        .map(|b| resid * b)
        .collect::<Vec<f64>>();
    if !matches!(model.nuisance, NuisanceComponent::ParametricLinear { .. }) {
        out.clear();
    }
    out.extend(
        eval_g_gradient(&model.policy_part, x, action)?
            .iter()
            .map(|g| resid * g),
    );
    Ok(out)
}

// ---------------------------------------------------------------------------
// Generic fitting driver.
// ---------------------------------------------------------------------------

struct Candidate {
    theta: Vec<f64>,
    label: &'static str,
}

fn run_fit<LG>(
    loss_grad: LG,
    dim: usize,
    config: &FitConfig,
    warm: Option<Vec<f64>>,
) -> (crate::optim::OptimOutcome, Vec<String>, &'static str)
where
    LG: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let opts = BfgsOptions {
        max_iters: config.max_iters,
        gradient_tol: config.gradient_tol,
        ..Default::default()
    };
    let mut rng = StdRng::seed_from_u64(config.seed);
    let mut candidates = vec![Candidate { theta: vec![0.0; dim], label: "zero start" }];
    if config.restarts > 0 {
        if let Some(w) = warm {
            candidates.push(Candidate { theta: w, label: "ml warm start" });
        }
        for _ in 0..config.restarts {
            let theta: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            candidates.push(Candidate { theta, label: "random restart" });
        }
    }

    // Extended-value objective: +inf outside the parameter box, so the
    // search is an M-estimation over the compact domain. Losses whose sample
    // minimum has escaped to infinity wedge against the box face and fail
    // the line search instead of racing outward.
    let dim_cap = config.domain_cap;
    let boxed = |x: &[f64]| -> (f64, Vec<f64>) {
        if norm_inf(x) > dim_cap {
            (f64::INFINITY, vec![f64::NAN; x.len()])
        } else {
            loss_grad(x)
        }
    };

    let mut diagnostics = Vec::new();
    let mut best: Option<(crate::optim::OptimOutcome, &'static str)> = None;
    for cand in &candidates {
        let out = match config.optimizer {
            OptimizerKind::QuasiNewton => bfgs(&boxed, &cand.theta, &opts),
            OptimizerKind::NelderMead => {
                let f = |x: &[f64]| boxed(x).0;
                let nm = nelder_mead(&f, &cand.theta, &NelderMeadOptions {
                    max_iters: config.max_iters * 4,
                    ..Default::default()
                });
                nm
            }
        };
        // Strictly interior estimates only: fits that wedge against the box
        // face are minima escaping to infinity, not statistical optima.
        let in_cap = norm_inf(&out.x) < 0.99 * config.domain_cap;
        if out.converged && out.value.is_finite() && in_cap {
            return (out, diagnostics, cand.label);
        }
        if out.converged && !in_cap {
            diagnostics.push(format!(
                "{}: estimate wedged against the parameter domain cap {}",
                cand.label, config.domain_cap
            ));
        } else {
            diagnostics.push(format!("{}: stopped without convergence ({:?})", cand.label, out.reason));
        }
        let better = match &best {
            None => true,
            Some((b, _)) => out.value.is_finite() && out.value < b.value,
        };
        if better {
            best = Some((out, cand.label));
        }
    }
    let (mut out, label) = best.expect("at least one candidate ran");
    out.converged = false;
    (out, diagnostics, label)
}

fn psi_sandwich_result(
    prep: &Prepared,
    config: &FitConfig,
    outcome: crate::optim::OptimOutcome,
    mut diagnostics: Vec<String>,
    method: FitMethod,
    score: impl Fn(&[f64], usize) -> Vec<f64>,
) -> FitResult {
    let dim = outcome.x.len();
    let mut converged = outcome.converged;
    let mut cov = Vec::new();
    if converged {
        match sandwich_covariance(&score, &outcome.x, prep.n, dim) {
            Some((c, cond)) => {
                if cond > COND_LIMIT {
                    diagnostics.push(format!(
                        "estimating-function Jacobian condition number {cond:.3e} exceeds {COND_LIMIT:e}; parameters look unidentified"
                    ));
                    converged = false;
                }
                cov = (0..dim).map(|i| (0..dim).map(|j| c[(i, j)]).collect()).collect();
            }
            None => {
                diagnostics.push("estimating-function Jacobian is singular; no covariance".into());
                converged = false;
            }
        }
    }
    let ad = prep.alpha_dim;
    let (alpha_hat, psi_hat) = if method == FitMethod::GammaMde {
        (Vec::new(), outcome.x.clone())
    } else {
        let (a, p) = outcome.x.split_at(ad);
        (a.to_vec(), p.to_vec())
    };
    diagnostics.extend(prep.warnings.iter().cloned());
    FitResult {
        method,
        index: config.index,
        psi_hat,
        alpha_hat,
        loss_at_optimum: outcome.value,
        gradient_norm: outcome.gradient_norm,
        sandwich_covariance: cov,
        converged,
        iterations: outcome.iterations,
        diagnostics,
    }
}

/// Sample sandwich `J^{-1} I J^{-T} / n` with `I` the mean outer product of
/// per-record scores and `J` the central-difference Jacobian of the mean
/// score. Returns the covariance and the condition number of `J`.
pub fn sandwich_covariance(
    score: &impl Fn(&[f64], usize) -> Vec<f64>,
    theta: &[f64],
    n: usize,
    dim: usize,
) -> Option<(Matrix, f64)> {
    let mut i_mat = Matrix::zeros(dim, dim);
    for r in 0..n {
        let s = score(theta, r);
        for a in 0..dim {
            for b in 0..dim {
                i_mat[(a, b)] += s[a] * s[b];
            }
        }
    }
    for v in &mut i_mat.data {
        *v /= n as f64;
    }

    let mean_score = |t: &[f64]| -> Vec<f64> {
        let mut acc = vec![0.0; dim];
        for r in 0..n {
            for (a, v) in score(t, r).into_iter().enumerate() {
                acc[a] += v;
            }
        }
        for v in &mut acc {
            *v /= n as f64;
        }
        acc
    };
    let mut j = Matrix::zeros(dim, dim);
    for k in 0..dim {
        let h = 1e-5 * theta[k].abs().max(1.0);
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[k] += h;
        tm[k] -= h;
        let sp = mean_score(&tp);
        let sm = mean_score(&tm);
        for a in 0..dim {
            j[(a, k)] = (sp[a] - sm[a]) / (2.0 * h);
        }
    }
    let cond = j.condition_number();
    let j_inv = j.inverse()?;
    let cov = j_inv.matmul(&i_mat).matmul(&j_inv.transpose());
    let mut sym = Matrix::zeros(dim, dim);
    for a in 0..dim {
        for b in 0..dim {
            sym[(a, b)] = 0.5 * (cov[(a, b)] + cov[(b, a)]) / n as f64;
        }
    }
    Some((sym, cond))
}

/// Minimum gamma-power divergence fit of the policy parameters.
///
/// gamma = -1 is fitted by driving the unweighted estimating equation to zero
/// (the loss itself is singular there).
pub fn fit_gamma_mde(
    data: &TrajectoryDataset,
    pc_template: &PolicyComponent,
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate()?;
    let prep = Prepared::from_single_stage(data, pc_template, &NuisanceComponent::Absent)?;
    fit_gamma_prepared(&prep, config)
}

pub fn fit_gamma_prepared(prep: &Prepared, config: &FitConfig) -> Result<FitResult> {
    let gamma = config.index;
    let dim = prep.policy_dim;
    if gamma == -1.0 {
        let outcome = fit_unweighted_root(prep, config);
        let mut diagnostics = Vec::new();
        if !outcome.converged {
            diagnostics.push(format!(
                "estimating equation residual {:.3e}; no root found",
                outcome.gradient_norm
            ));
        }
        let score = |psi: &[f64], i: usize| per_record_unweighted(prep, psi, i);
        return Ok(psi_sandwich_result(prep, config, outcome, diagnostics, FitMethod::GammaMde, score));
    }

    check_gamma_index(gamma)?;
    let obj = |psi: &[f64]| gamma_loss_grad_prepared(prep, psi, gamma);
    let (outcome, diagnostics, _) = run_fit(obj, dim, config, None);
    let score = move |psi: &[f64], i: usize| per_record_gamma_score(prep, psi, i, gamma);
    Ok(psi_sandwich_result(prep, config, outcome, diagnostics, FitMethod::GammaMde, score))
}

fn per_record_gamma_score(prep: &Prepared, psi: &[f64], i: usize, gamma: f64) -> Vec<f64> {
    let d = prep.policy_dim;
    let mut z = vec![0.0; prep.m];
    for a in 0..prep.m {
        z[a] = (gamma + 1.0) * dot(psi, prep.g_row(i, a));
    }
    let lse = log_sum_exp(&z);
    let g_obs = dot(psi, prep.g_row(i, prep.obs[i]));
    let expo = gamma * g_obs - gamma / (gamma + 1.0) * lse + prep.log_w[i];
    let factor = if expo.is_finite() { expo.exp() } else { 0.0 };
    let obs_row = prep.g_row(i, prep.obs[i]);
    let mut out = vec![0.0; d];
    for a in 0..prep.m {
        let w = (z[a] - lse).exp();
        let row = prep.g_row(i, a);
        for k in 0..d {
            out[k] += factor * w * (obs_row[k] - row[k]);
        }
    }
    out
}

/// Damped Newton on the unweighted estimating equation, from the zero vector
/// and then from seeded random restarts. The exponential weights flatten the
/// equation far out, creating spurious asymptotic roots; steps are damped on
/// the residual norm and iterates leaving the parameter box are abandoned.
fn fit_unweighted_root(prep: &Prepared, config: &FitConfig) -> crate::optim::OptimOutcome {
    let dim = prep.policy_dim;
    let mut rng = StdRng::seed_from_u64(config.seed);
    let mut starts = vec![vec![0.0; dim]];
    for _ in 0..config.restarts {
        starts.push((0..dim).map(|_| rng.random_range(-3.0..3.0)).collect());
    }
    let mut best: Option<crate::optim::OptimOutcome> = None;
    for start in &starts {
        let mut x = start.clone();
        let (mut mean, mut jac) = unweighted_ee_prepared(prep, &x);
        let mut res = norm_inf(&mean);
        let mut iterations = 0;
        let mut ok = res.is_finite();
        while ok && res > 1e-10 && iterations < config.max_iters {
            iterations += 1;
            let Some(dir) = jac.solve(&mean) else {
                ok = false;
                break;
            };
            let mut t = 1.0;
            let mut advanced = false;
            for _ in 0..40 {
                let next: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi - t * di).collect();
                if norm_inf(&next) <= config.domain_cap {
                    let (mean_next, jac_next) = unweighted_ee_prepared(prep, &next);
                    let res_next = norm_inf(&mean_next);
                    if res_next.is_finite() && res_next < res {
                        x = next;
                        mean = mean_next;
                        jac = jac_next;
                        res = res_next;
                        advanced = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !advanced {
                ok = false;
            }
        }
        let converged = ok && res <= 1e-10 && norm_inf(&x) < 0.99 * config.domain_cap;
        let outcome = crate::optim::OptimOutcome {
            value: mean.iter().map(|v| v * v).sum(),
            gradient_norm: res,
            x,
            iterations,
            converged,
            reason: if converged {
                crate::optim::StopReason::GradientTol
            } else {
                crate::optim::StopReason::LineSearchFailed
            },
        };
        if outcome.converged {
            return outcome;
        }
        let better = best
            .as_ref()
            .map_or(true, |b| outcome.gradient_norm < b.gradient_norm);
        if better {
            best = Some(outcome);
        }
    }
    best.expect("at least one start ran")
}

fn per_record_unweighted(prep: &Prepared, psi: &[f64], i: usize) -> Vec<f64> {
    let d = prep.policy_dim;
    let m = prep.m as f64;
    let mut g_bar = vec![0.0; d];
    for a in 0..prep.m {
        for (acc, v) in g_bar.iter_mut().zip(prep.g_row(i, a)) {
            *acc += v / m;
        }
    }
    let obs_row = prep.g_row(i, prep.obs[i]);
    let g_obs = dot(psi, obs_row);
    let expo = -g_obs + prep.log_w[i];
    let factor = if expo.is_finite() { expo.exp() } else { 0.0 };
    (0..d).map(|k| factor * (obs_row[k] - g_bar[k])).collect()
}

/// Minimum beta-power divergence fit, jointly over (alpha, psi).
///
/// A failed zero start is rescued by a warm start at the maximum-likelihood
/// estimate before falling back to random restarts; for negative indices the
/// sample loss can genuinely lose its interior minimum, and those fits are
/// reported as non-converged.
pub fn fit_beta_mde(
    data: &TrajectoryDataset,
    model_template: &ModelQFunction,
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate()?;
    let prep = Prepared::from_single_stage(
        data,
        &model_template.policy_part,
        &model_template.nuisance,
    )?;
    fit_beta_prepared(&prep, config)
}

pub fn fit_beta_prepared(prep: &Prepared, config: &FitConfig) -> Result<FitResult> {
    let beta = config.index;
    let dim = prep.theta_dim();

    // First rescue candidate after a failed zero start: warm start at the
    // maximum-likelihood estimate. Skipped entirely when no rescues are
    // requested.
    let warm = if config.restarts == 0 {
        None
    } else {
        let family = ExponentialLogLink;
        let obj = |theta: &[f64]| ml_loss_grad_prepared(prep, theta, &family);
        let opts = BfgsOptions {
            max_iters: config.max_iters,
            gradient_tol: config.gradient_tol,
            ..Default::default()
        };
        let out = bfgs(&obj, &vec![0.0; dim], &opts);
        if out.converged && norm_inf(&out.x) <= config.domain_cap {
            Some(out.x)
        } else {
            None
        }
    };

    let (outcome, diagnostics, _) = if beta == 0.0 {
        let obj = |theta: &[f64]| ekl_loss_grad_prepared(prep, theta);
        run_fit(obj, dim, config, warm)
    } else {
        let obj = |theta: &[f64]| beta_loss_grad_prepared(prep, theta, beta);
        run_fit(obj, dim, config, warm)
    };

    let score = move |theta: &[f64], i: usize| per_record_beta_score(prep, theta, i, beta);
    Ok(psi_sandwich_result(prep, config, outcome, diagnostics, FitMethod::BetaMde, score))
}

fn per_record_beta_score(prep: &Prepared, theta: &[f64], i: usize, beta: f64) -> Vec<f64> {
    let ad = prep.alpha_dim;
    let dim = prep.theta_dim();
    let (alpha, psi) = theta.split_at(ad);
    let f_i = if ad > 0 { dot(alpha, prep.basis_row(i)) } else { 0.0 };
    let mut out = vec![0.0; dim];
    let push = |out: &mut Vec<f64>, prep: &Prepared, i: usize, a: usize, c: f64| {
        for (k, v) in prep.basis_row(i).iter().enumerate() {
            out[k] += c * v;
        }
        for (k, v) in prep.g_row(i, a).iter().enumerate() {
            out[ad + k] += c * v;
        }
    };
    if beta == 0.0 {
        let w = self_weight(prep, i);
        push(&mut out, prep, i, prep.obs[i], -w);
        for a in 0..prep.m {
            let nu_a = f_i + dot(psi, prep.g_row(i, a));
            push(&mut out, prep, i, a, nu_a.exp());
        }
        return out;
    }
    let nu_obs = f_i + dot(psi, prep.g_row(i, prep.obs[i]));
    let e1 = beta * nu_obs + prep.log_w[i];
    let t1 = if e1.is_finite() { e1.exp() } else { 0.0 };
    push(&mut out, prep, i, prep.obs[i], -t1);
    for a in 0..prep.m {
        let nu_a = f_i + dot(psi, prep.g_row(i, a));
        push(&mut out, prep, i, a, ((beta + 1.0) * nu_a).exp());
    }
    out
}

/// Maximum-likelihood (Q-learning) fit under the exponential/log-link family.
pub fn fit_ml(
    data: &TrajectoryDataset,
    model_template: &ModelQFunction,
    config: &FitConfig,
) -> Result<FitResult> {
    let prep = Prepared::from_single_stage(
        data,
        &model_template.policy_part,
        &model_template.nuisance,
    )?;
    fit_ml_prepared(&prep, config)
}

pub fn fit_ml_prepared(prep: &Prepared, config: &FitConfig) -> Result<FitResult> {
    let dim = prep.theta_dim();
    let family = ExponentialLogLink;
    let obj = |theta: &[f64]| ml_loss_grad_prepared(prep, theta, &family);
    let (outcome, diagnostics, _) = run_fit(obj, dim, config, None);
    let score = move |theta: &[f64], i: usize| {
        let ad = prep.alpha_dim;
        let (alpha, psi) = theta.split_at(ad);
        let f_i = if ad > 0 { dot(alpha, prep.basis_row(i)) } else { 0.0 };
        let nu = f_i + dot(psi, prep.g_row(i, prep.obs[i]));
        let dl = ExponentialLogLink.d_neg_loglik_dnu(prep.y[i], nu);
        let mut s = vec![0.0; dim];
        for (k, v) in prep.basis_row(i).iter().enumerate() {
            s[k] = dl * v;
        }
        for (k, v) in prep.g_row(i, prep.obs[i]).iter().enumerate() {
            s[ad + k] = dl * v;
        }
        s
    };
    Ok(psi_sandwich_result(prep, config, outcome, diagnostics, FitMethod::Ml, score))
}

// ---------------------------------------------------------------------------
// Propensity fitting: multinomial logit on covariates.
// ---------------------------------------------------------------------------

const PROPENSITY_CLAMP: f64 = 1e-6;

/// Multinomial-logit propensity model; the last action label is the
/// reference category.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    pub actions: ActionSet,
    /// (m - 1) x (d + 1) coefficients, row-major, intercept last.
    pub coef: Vec<f64>,
    pub covariate_dim: usize,
    pub warnings: Vec<String>,
}

impl PropensityModel {
    /// Fitted probabilities for each action, clamped into
    /// [1e-6, 1 - 1e-6] and renormalized.
    pub fn probabilities(&self, x: &CovariatePoint) -> Vec<f64> {
        let m = self.actions.m();
        let d = self.covariate_dim;
        let mut z = Vec::with_capacity(m);
        for k in 0..m - 1 {
            let row = &self.coef[k * (d + 1)..(k + 1) * (d + 1)];
            let mut v = row[d];
            for j in 0..d {
                v += row[j] * x.0[j];
            }
            z.push(v);
        }
        z.push(0.0);
        let lse = log_sum_exp(&z);
        let mut p: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        let mut renorm = false;
        for v in &mut p {
            if *v < PROPENSITY_CLAMP {
                *v = PROPENSITY_CLAMP;
                renorm = true;
            }
            if *v > 1.0 - PROPENSITY_CLAMP {
                *v = 1.0 - PROPENSITY_CLAMP;
                renorm = true;
            }
        }
        if renorm {
            let s: f64 = p.iter().sum();
            for v in &mut p {
                *v /= s;
            }
        }
        p
    }

    pub fn probability_of(&self, x: &CovariatePoint, action: i64) -> Result<f64> {
        let idx = self
            .actions
            .index_of(action)
            .ok_or_else(|| Error::Invalid(format!("action {action} not in the action set")))?;
        Ok(self.probabilities(x)[idx])
    }
}

/// Fit a multinomial-logit propensity model on single-stage data.
pub fn fit_propensity(data: &TrajectoryDataset, actions: &ActionSet) -> Result<PropensityModel> {
    if !data.is_single_stage() {
        return Err(Error::Structural("propensity fitting expects single-stage data".into()));
    }
    let n = data.n();
    let m = actions.m();
    let d = data.trajectories()[0].stages[0].x.dim();
    let mut counts = vec![0usize; m];
    let mut xs: Vec<&CovariatePoint> = Vec::with_capacity(n);
    let mut obs: Vec<usize> = Vec::with_capacity(n);
    for (i, tr) in data.trajectories().iter().enumerate() {
        let s = &tr.stages[0];
        let idx = actions.index_of(s.action).ok_or_else(|| Error::InvalidRecord {
            index: i,
            reason: format!("action {} not in the action set", s.action),
        })?;
        counts[idx] += 1;
        xs.push(&s.x);
        obs.push(idx);
    }
    for (idx, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::DegenerateData(format!(
                "action {} never observed",
                actions.labels()[idx]
            )));
        }
    }

    let dim = (m - 1) * (d + 1);
    let obj = |theta: &[f64]| {
        let mut loss = 0.0;
        let mut grad = vec![0.0; dim];
        let mut z = vec![0.0; m];
        for i in 0..n {
            for k in 0..m - 1 {
                let row = &theta[k * (d + 1)..(k + 1) * (d + 1)];
                let mut v = row[d];
                for j in 0..d {
                    v += row[j] * xs[i].0[j];
                }
                z[k] = v;
            }
            z[m - 1] = 0.0;
            let lse = log_sum_exp(&z);
            loss -= z[obs[i]] - lse;
            for k in 0..m - 1 {
                let pk = (z[k] - lse).exp();
                let resid = pk - if obs[i] == k { 1.0 } else { 0.0 };
                let row = &mut grad[k * (d + 1)..(k + 1) * (d + 1)];
                for j in 0..d {
                    row[j] += resid * xs[i].0[j];
                }
                row[d] += resid;
            }
        }
        let nf = n as f64;
        for v in &mut grad {
            *v /= nf;
        }
        (loss / nf, grad)
    };
    let out = bfgs(&obj, &vec![0.0; dim], &BfgsOptions { max_iters: 1000, ..Default::default() });
    if !out.converged {
        return Err(Error::DegenerateData(format!(
            "propensity fit failed to converge (reason {:?}); data may be separated",
            out.reason
        )));
    }
    let model = PropensityModel {
        actions: actions.clone(),
        coef: out.x,
        covariate_dim: d,
        warnings: Vec::new(),
    };
    // Separation shows up as fitted probabilities pinned at the clamp.
    let mut clamped = 0usize;
    for (i, x) in xs.iter().enumerate() {
        let p = model.probabilities(x);
        if p[obs[i]] <= PROPENSITY_CLAMP * 1.001 {
            clamped += 1;
        }
    }
    let mut model = model;
    if clamped > 0 {
        model.warnings.push(format!(
            "{clamped} observed records have fitted propensity at the {PROPENSITY_CLAMP:e} clamp; data look separated"
        ));
    }
    Ok(model)
}

/// Replace every stage propensity with the fitted model value.
pub fn fill_propensities(data: &TrajectoryDataset, model: &PropensityModel) -> Result<TrajectoryDataset> {
    let mut trajectories = data.trajectories().to_vec();
    for tr in &mut trajectories {
        for s in &mut tr.stages {
            s.propensity = model.probability_of(&s.x, s.action)?;
        }
    }
    TrajectoryDataset::new(trajectories)
}

// ---------------------------------------------------------------------------
// Multi-stage backward induction.
// ---------------------------------------------------------------------------

/// Templates for one stage of the backward recursion. The policy features
/// must be sized to that stage's history dimension.
#[derive(Debug, Clone)]
pub struct StageTemplate {
    pub policy: PolicyComponent,
    pub nuisance: NuisanceComponent,
}

/// Greedy policy induced by a fitted stage component.
#[derive(Debug, Clone)]
pub struct FittedStagePolicy {
    pub component: PolicyComponent,
}

impl FittedStagePolicy {
    pub fn decide(&self, history: &[f64]) -> Result<i64> {
        let x = CovariatePoint::new(history.to_vec())?;
        let mut best: Option<(i64, f64)> = None;
        for &a in self.component.actions.labels() {
            let g = eval_g(&self.component, &x, a)?;
            best = match best {
                None => Some((a, g)),
                Some((_, bv)) if g > bv => Some((a, g)),
                keep => keep,
            };
        }
        Ok(best.expect("non-empty action set").0)
    }
}

#[derive(Debug)]
pub struct BackwardFit {
    /// Per-stage gamma-power fits, stage 1 first.
    pub stage_fits: Vec<FitResult>,
    /// Per-stage ML fits used for the pseudo-outcome plug-in.
    pub ml_fits: Vec<FitResult>,
    /// Greedy policies from the gamma fits, stage 1 first.
    pub policies: Vec<FittedStagePolicy>,
    /// Count of pseudo-outcomes clamped at zero.
    pub pseudo_clamped: usize,
}

/// Backward induction over a multi-stage dataset: fit the final stage, then
/// roll pseudo-outcomes `y_t + Qhat_{t+1}(h_{t+1}, Dhat_{t+1}(h_{t+1}))`
/// toward stage 1.
///
/// The stage policy comes from the gamma-power fit; the plug-in Q value comes
/// from the ML fit (the gamma fit alone carries no nuisance scale).
pub fn fit_backward(
    data: &TrajectoryDataset,
    stage_templates: &[StageTemplate],
    config: &FitConfig,
) -> Result<BackwardFit> {
    let t_count = data.stage_count();
    if stage_templates.len() != t_count {
        return Err(Error::Structural(format!(
            "{} stage templates for {} stages",
            stage_templates.len(),
            t_count
        )));
    }
    let n = data.n();
    let mut stage_fits: Vec<Option<FitResult>> = vec![None; t_count];
    let mut ml_fits: Vec<Option<FitResult>> = vec![None; t_count];
    let mut policies: Vec<Option<FittedStagePolicy>> = vec![None; t_count];
    let mut pseudo_clamped = 0usize;

    // Pseudo-outcome per trajectory for the stage currently being fitted.
    let mut pseudo: Vec<f64> = data
        .trajectories()
        .iter()
        .map(|tr| tr.stages[t_count - 1].reward)
        .collect();

    for t in (0..t_count).rev() {
        let template = &stage_templates[t];
        let records: Vec<(CovariatePoint, i64, f64, f64)> = data
            .trajectories()
            .iter()
            .enumerate()
            .map(|(i, tr)| {
                let h = tr.history(t);
                let s = &tr.stages[t];
                Ok((CovariatePoint::new(h)?, s.action, pseudo[i], s.propensity))
            })
            .collect::<Result<_>>()?;

        let prep = Prepared::from_records(&records, &template.policy, &template.nuisance)?;
        let mut cfg_t = config.clone();
        cfg_t.seed = config.seed.wrapping_add(t as u64);
        let gfit = fit_gamma_prepared(&prep, &cfg_t)?;
        let mut cfg_ml = cfg_t.clone();
        cfg_ml.method = FitMethod::Ml;
        let mfit = fit_ml_prepared(&prep, &cfg_ml)?;

        let fitted_policy = FittedStagePolicy {
            component: template.policy.with_params(&gfit.psi_hat)?,
        };
        let ml_model = ModelQFunction {
            nuisance: NuisanceComponent::ParametricLinear { alpha: mfit.alpha_hat.clone() },
            policy_part: template.policy.with_params(&mfit.psi_hat)?,
        };

        if t > 0 {
            // Roll the pseudo-outcome down to stage t-1.
            for (i, tr) in data.trajectories().iter().enumerate() {
                let h = tr.history(t);
                let a_star = fitted_policy.decide(&h)?;
                let x = CovariatePoint::new(h)?;
                let q_plug = ml_model.q(&x, a_star)?;
                let mut v = tr.stages[t - 1].reward + q_plug;
                if v < 0.0 {
                    v = 0.0;
                    pseudo_clamped += 1;
                }
                pseudo[i] = v;
            }
        }
        stage_fits[t] = Some(gfit);
        ml_fits[t] = Some(mfit);
        policies[t] = Some(fitted_policy);
    }
    debug_assert_eq!(pseudo.len(), n);
    Ok(BackwardFit {
        stage_fits: stage_fits.into_iter().map(Option::unwrap).collect(),
        ml_fits: ml_fits.into_iter().map(Option::unwrap).collect(),
        policies: policies.into_iter().map(Option::unwrap).collect(),
        pseudo_clamped,
    })
}

// ---------------------------------------------------------------------------
// Dataset-level convenience wrappers over the prepared-record losses.
// ---------------------------------------------------------------------------

/// Gamma-power loss from a dataset at the given policy parameters.
pub fn gamma_loss(
    psi: &[f64],
    data: &TrajectoryDataset,
    pc_template: &PolicyComponent,
    gamma: f64,
) -> Result<f64> {
    check_gamma_index(gamma)?;
    let prep = Prepared::from_single_stage(data, pc_template, &NuisanceComponent::Absent)?;
    Ok(gamma_loss_prepared(&prep, psi, gamma))
}

/// Beta-power loss from a dataset at the given (alpha, psi).
pub fn beta_loss(
    alpha: &[f64],
    psi: &[f64],
    data: &TrajectoryDataset,
    model_template: &ModelQFunction,
    beta: f64,
) -> Result<f64> {
    if beta == 0.0 || beta == -1.0 {
        return Err(Error::SingularIndex {
            index: beta,
            hint: "beta in {0, -1} is singular; use the eKL loss for beta = 0".into(),
        });
    }
    let prep = Prepared::from_single_stage(
        data,
        &model_template.policy_part,
        &model_template.nuisance,
    )?;
    let mut theta = alpha.to_vec();
    theta.extend_from_slice(psi);
    Ok(beta_loss_prepared(&prep, &theta, beta))
}

/// Negative mean log-likelihood from a dataset at the given (alpha, psi).
pub fn ml_loss(
    alpha: &[f64],
    psi: &[f64],
    data: &TrajectoryDataset,
    model_template: &ModelQFunction,
) -> Result<f64> {
    let prep = Prepared::from_single_stage(
        data,
        &model_template.policy_part,
        &model_template.nuisance,
    )?;
    let mut theta = alpha.to_vec();
    theta.extend_from_slice(psi);
    Ok(ml_loss_prepared(&prep, &theta, &ExponentialLogLink))
}
