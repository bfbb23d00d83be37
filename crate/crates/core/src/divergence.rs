//! Power divergences on the space of Q-functions.
//!
//! The gamma-power divergence vanishes exactly on policy-equivalence classes
//! (Q-functions differing by a positive covariate-only factor), which is what
//! makes its minimization target the policy rather than the Q-values. The
//! beta-power divergence is the contrasting U-divergence instance that
//! distinguishes Q-functions inside an equivalence class.
//!
//! Singular power indices are dispatched to their exact limit forms: gamma = 0
//! to the normalized KL divergence, gamma = -1 to the geometric-mean limit,
//! beta = 0 to the extended KL divergence.
//!
//! All gamma-power computations run in the log domain with per-point
//! max-subtraction so that extreme indices (gamma = 200 for the value-gap
//! limit, gamma near -1 for the geometric-mean limit) stay finite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;
use crate::qcore::{greedy_from_values, policy_equivalent, TabularQFunction, POLICY_EQUIV_TOL};

/// Divergences within this rounding slack of zero are clamped to exactly 0;
/// anything more negative raises an internal-consistency error.
const NEG_CLAMP: f64 = 1e-12;

/// Divergence family selector with its power index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family", content = "index")]
pub enum DivergenceSpec {
    GammaPower(f64),
    BetaPower(f64),
    Ekl,
    Nkl,
}

impl DivergenceSpec {
    /// Evaluate the divergence, dispatching singular indices to their limit
    /// forms: gamma 0 -> nKL, gamma -1 -> geometric-mean limit, beta 0 -> eKL.
    pub fn evaluate(&self, q0: &TabularQFunction, q1: &TabularQFunction) -> Result<f64> {
        match *self {
            DivergenceSpec::GammaPower(g) if g == 0.0 => nkl_divergence(q0, q1),
            DivergenceSpec::GammaPower(g) if g == -1.0 => gm_limit_divergence(q0, q1),
            DivergenceSpec::GammaPower(g) => gamma_divergence(q0, q1, g),
            DivergenceSpec::BetaPower(b) if b == 0.0 => ekl_divergence(q0, q1),
            DivergenceSpec::BetaPower(b) if b == -1.0 => Err(Error::SingularIndex {
                index: -1.0,
                hint: "beta = -1 has no limit form in this family".into(),
            }),
            DivergenceSpec::BetaPower(b) => beta_divergence(q0, q1, b),
            DivergenceSpec::Ekl => ekl_divergence(q0, q1),
            DivergenceSpec::Nkl => nkl_divergence(q0, q1),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            DivergenceSpec::GammaPower(_) => "gamma_power",
            DivergenceSpec::BetaPower(_) => "beta_power",
            DivergenceSpec::Ekl => "ekl",
            DivergenceSpec::Nkl => "nkl",
        }
    }

    pub fn index(&self) -> Option<f64> {
        match *self {
            DivergenceSpec::GammaPower(g) => Some(g),
            DivergenceSpec::BetaPower(b) => Some(b),
            _ => None,
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma == 0.0 {
        return Err(Error::SingularIndex {
            index: 0.0,
            hint: "use nkl_divergence for the gamma -> 0 limit".into(),
        });
    }
    if gamma == -1.0 {
        return Err(Error::SingularIndex {
            index: -1.0,
            hint: "use gm_limit_divergence for the gamma -> -1 limit".into(),
        });
    }
    if !gamma.is_finite() {
        return Err(Error::Invalid(format!("gamma must be finite, got {gamma}")));
    }
    Ok(())
}

/// Per-point log of the cross-entropy integrand. With ln q0 and ln q1 over
/// actions, returns log of
/// `[sum_a q0 q1^gamma] / [sum_a q1^(1+gamma)]^(gamma/(1+gamma))`,
/// optionally shifted by `-log_shift` inside the same exponent so scaled
/// variants stay finite near gamma = -1.
fn cross_exponent(ln_q0: &[f64], ln_q1: &[f64], gamma: f64, log_shift: f64) -> f64 {
    let num: Vec<f64> = ln_q0.iter().zip(ln_q1).map(|(&a, &b)| a + gamma * b).collect();
    let den: Vec<f64> = ln_q1.iter().map(|&b| (1.0 + gamma) * b).collect();
    log_sum_exp(&num) - gamma / (1.0 + gamma) * log_sum_exp(&den) - log_shift
}

/// Gamma-power cross entropy
/// `H_gamma(Q0, Q1) = -(1/gamma) E[ sum_a Q0 Q1^gamma / (sum_a Q1^(1+gamma))^(gamma/(1+gamma)) ]`.
pub fn gamma_cross_entropy(q0: &TabularQFunction, q1: &TabularQFunction, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    q0.check_same_grid(q1)?;
    let mut total = 0.0;
    for (p0, p1) in q0.points().iter().zip(q1.points()) {
        let ln0: Vec<f64> = p0.q.iter().map(|v| v.ln()).collect();
        let ln1: Vec<f64> = p1.q.iter().map(|v| v.ln()).collect();
        total += p0.weight * cross_exponent(&ln0, &ln1, gamma, 0.0).exp();
    }
    Ok(-total / gamma)
}

fn clamp_nonnegative(d: f64, scale: f64) -> Result<f64> {
    let tol = NEG_CLAMP * scale.abs().max(1.0);
    if d < -tol {
        return Err(Error::Internal(format!(
            "divergence {d} is negative beyond the rounding tolerance {tol}"
        )));
    }
    Ok(d.max(0.0))
}

/// Gamma-power divergence `D_gamma(Q0, Q1) = H_gamma(Q0, Q1) - H_gamma(Q0, Q0)`.
///
/// Computed per grid point as a difference of exponentials sharing the
/// log-domain representation, so the kernel case (Q1 a covariate-only
/// rescaling of Q0) cancels to rounding noise.
pub fn gamma_divergence(q0: &TabularQFunction, q1: &TabularQFunction, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    q0.check_same_grid(q1)?;
    let mut total = 0.0;
    let mut scale = 0.0;
    for (p0, p1) in q0.points().iter().zip(q1.points()) {
        let ln0: Vec<f64> = p0.q.iter().map(|v| v.ln()).collect();
        let ln1: Vec<f64> = p1.q.iter().map(|v| v.ln()).collect();
        let e_cross = cross_exponent(&ln0, &ln1, gamma, 0.0);
        let e_diag = cross_exponent(&ln0, &ln0, gamma, 0.0);
        // exp(e_cross) - exp(e_diag) = exp(e_diag) * expm1(e_cross - e_diag)
        total += p0.weight * e_diag.exp() * (e_cross - e_diag).exp_m1();
        scale += p0.weight * e_diag.exp();
    }
    clamp_nonnegative(-total / gamma, scale / gamma)
}

/// Gamma-power divergence scaled by `m^(-1/(1+gamma))`, evaluated with the
/// scaling folded into the log-domain exponent. This is the quantity with a
/// finite limit as gamma -> -1 (the geometric-mean form); the unscaled
/// divergence itself overflows there.
pub fn gamma_divergence_gm_scaled(
    q0: &TabularQFunction,
    q1: &TabularQFunction,
    gamma: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    q0.check_same_grid(q1)?;
    let shift = (q0.m() as f64).ln() / (1.0 + gamma);
    let mut total = 0.0;
    for (p0, p1) in q0.points().iter().zip(q1.points()) {
        let ln0: Vec<f64> = p0.q.iter().map(|v| v.ln()).collect();
        let ln1: Vec<f64> = p1.q.iter().map(|v| v.ln()).collect();
        let e_cross = cross_exponent(&ln0, &ln1, gamma, shift);
        let e_diag = cross_exponent(&ln0, &ln0, gamma, shift);
        total += p0.weight * e_diag.exp() * (e_cross - e_diag).exp_m1();
    }
    Ok(-total / gamma)
}

/// Normalized KL divergence (the gamma -> 0 limit):
/// `E[ sum_a Q0 { log(Q0 / sum Q0) - log(Q1 / sum Q1) } ]`.
pub fn nkl_divergence(q0: &TabularQFunction, q1: &TabularQFunction) -> Result<f64> {
    q0.check_same_grid(q1)?;
    let mut total = 0.0;
    for (p0, p1) in q0.points().iter().zip(q1.points()) {
        let s0: f64 = p0.q.iter().sum();
        let s1: f64 = p1.q.iter().sum();
        let mut point = 0.0;
        for (&a, &b) in p0.q.iter().zip(&p1.q) {
            point += a * ((a / s0).ln() - (b / s1).ln());
        }
        total += p0.weight * point;
    }
    clamp_nonnegative(total, 1.0)
}

fn geometric_mean(q: &[f64]) -> f64 {
    let m = q.len() as f64;
    (q.iter().map(|v| v.ln()).sum::<f64>() / m).exp()
}

/// The gamma -> -1 limit of `m^(-1/(1+gamma)) D_gamma`:
/// `E[ (1/m) sum_a (Q0/Q1) GM_Q1(x) - GM_Q0(x) ]` with GM the per-point
/// geometric mean over actions.
pub fn gm_limit_divergence(q0: &TabularQFunction, q1: &TabularQFunction) -> Result<f64> {
    q0.check_same_grid(q1)?;
    let m = q0.m() as f64;
    let mut total = 0.0;
    for (p0, p1) in q0.points().iter().zip(q1.points()) {
        let gm0 = geometric_mean(&p0.q);
        let gm1 = geometric_mean(&p1.q);
        let ratio: f64 = p0.q.iter().zip(&p1.q).map(|(&a, &b)| a / b).sum();
        total += p0.weight * (ratio / m * gm1 - gm0);
    }
    clamp_nonnegative(total, 1.0)
}

/// For each gamma in the sequence, the pair (gamma * D_gamma, value gap):
/// the scaled divergence approaches `V0(D0) - V0(D1)` as gamma grows.
///
/// Requires a strict argmax for both instances at every grid point.
pub fn value_gap_limit(
    q0: &TabularQFunction,
    q1: &TabularQFunction,
    gamma_sequence: &[f64],
) -> Result<Vec<(f64, f64, f64)>> {
    q0.check_same_grid(q1)?;
    for q in [q0, q1] {
        for p in q.points() {
            let top = p.q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if p.q.iter().filter(|&&v| v == top).count() > 1 {
                return Err(Error::Degenerate(format!(
                    "tied argmax at covariate {:?}; the value-gap limit requires a strict maximizer",
                    p.x.0
                )));
            }
        }
    }
    let gap = {
        let mut v0 = 0.0;
        let mut v1 = 0.0;
        for (p0, p1) in q0.points().iter().zip(q1.points()) {
            let d0 = greedy_from_values(q0.actions(), &p0.q, &p0.x)?;
            let d1 = greedy_from_values(q1.actions(), &p1.q, &p1.x)?;
            let i0 = q0.actions().index_of(d0).expect("own label");
            let i1 = q0.actions().index_of(d1).expect("shared label");
            v0 += p0.weight * p0.q[i0];
            v1 += p0.weight * p0.q[i1];
        }
        v0 - v1
    };
    gamma_sequence
        .iter()
        .map(|&g| Ok((g, g * gamma_divergence(q0, q1, g)?, gap)))
        .collect()
}

/// Beta-power divergence `H_beta(Q0,Q1) - H_beta(Q0,Q0)` with
/// `H_beta(Q0,Q1) = E[ sum_a Q1^(beta+1)/(beta+1) - Q0 Q1^beta / beta ]`.
pub fn beta_divergence(q0: &TabularQFunction, q1: &TabularQFunction, beta: f64) -> Result<f64> {
    if beta == 0.0 {
        return ekl_divergence(q0, q1);
    }
    if beta == -1.0 {
        return Err(Error::SingularIndex {
            index: -1.0,
            hint: "beta = -1 is outside the beta-power family".into(),
        });
    }
    q0.check_same_grid(q1)?;
    let mut total = 0.0;
    for (p0, p1) in q0.points().iter().zip(q1.points()) {
        let mut point = 0.0;
        for (&a, &b) in p0.q.iter().zip(&p1.q) {
            point += (b.powf(beta + 1.0) - a.powf(beta + 1.0)) / (beta + 1.0)
                - a * (b.powf(beta) - a.powf(beta)) / beta;
        }
        total += p0.weight * point;
    }
    clamp_nonnegative(total, 1.0)
}

/// Extended KL divergence (the beta -> 0 limit):
/// `E[ sum_a Q0 log(Q0/Q1) + Q1 - Q0 ]`.
pub fn ekl_divergence(q0: &TabularQFunction, q1: &TabularQFunction) -> Result<f64> {
    q0.check_same_grid(q1)?;
    let mut total = 0.0;
    for (p0, p1) in q0.points().iter().zip(q1.points()) {
        let mut point = 0.0;
        for (&a, &b) in p0.q.iter().zip(&p1.q) {
            point += a * (a / b).ln() + b - a;
        }
        total += p0.weight * point;
    }
    clamp_nonnegative(total, 1.0)
}

/// Both sides of the harmonic-mean identity at gamma = -2:
/// the diagonal entropy `H_{-2}(Q,Q)` equals `(m/2) E[HM_Q(x)]` with
/// `HM_Q(x) = [m sum_a 1/Q(x,a)]^(-1)`.
pub fn harmonic_identity_check(q: &TabularQFunction) -> Result<(f64, f64)> {
    let lhs = gamma_cross_entropy(q, q, -2.0)?;
    let m = q.m() as f64;
    let mut rhs = 0.0;
    for p in q.points() {
        let hm = 1.0 / (m * p.q.iter().map(|v| 1.0 / v).sum::<f64>());
        rhs += p.weight * hm;
    }
    Ok((lhs, m / 2.0 * rhs))
}

/// Generator for a U-divergence: a strictly increasing convex `U` with
/// derivative `u`; the divergence needs `U` and the inverse of `u`.
pub trait UGenerator {
    fn big_u(&self, t: f64) -> f64;
    fn u_inverse(&self, q: f64) -> f64;
}

/// The beta-power generator `U(t) = (1 + beta t)^((beta+1)/beta) / (beta+1)`,
/// whose U-divergence is the beta-power divergence up to a term constant in
/// the second argument.
pub struct BetaGenerator(pub f64);

impl UGenerator for BetaGenerator {
    fn big_u(&self, t: f64) -> f64 {
        let b = self.0;
        (1.0 + b * t).powf((b + 1.0) / b) / (b + 1.0)
    }

    fn u_inverse(&self, q: f64) -> f64 {
        let b = self.0;
        (q.powf(b) - 1.0) / b
    }
}

/// U-divergence `H_U(Q0,Q1) - H_U(Q0,Q0)` with
/// `H_U(Q0,Q1) = E[ sum_a U(u^{-1}(Q1)) - Q0 u^{-1}(Q1) ]`.
pub fn u_divergence<G: UGenerator>(
    q0: &TabularQFunction,
    q1: &TabularQFunction,
    gen: &G,
) -> Result<f64> {
    q0.check_same_grid(q1)?;
    let mut total = 0.0;
    for (p0, p1) in q0.points().iter().zip(q1.points()) {
        let mut point = 0.0;
        for (&a, &b) in p0.q.iter().zip(&p1.q) {
            let xi1 = gen.u_inverse(b);
            let xi0 = gen.u_inverse(a);
            point += gen.big_u(xi1) - gen.big_u(xi0) - a * (xi1 - xi0);
        }
        total += p0.weight * point;
    }
    clamp_nonnegative(total, 1.0)
}

/// Result record emitted by the CLI for one divergence evaluation.
#[derive(Debug, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub family: String,
    pub index: Option<f64>,
    pub value: f64,
    pub lhs_entropy: Option<f64>,
    pub diag_entropy: Option<f64>,
}

/// Evaluate a spec and package the CLI-facing record. Cross and diagonal
/// entropies are reported for the plain gamma family where they are finite.
pub fn evaluate_record(
    spec: &DivergenceSpec,
    q0: &TabularQFunction,
    q1: &TabularQFunction,
) -> Result<DivergenceRecord> {
    let value = spec.evaluate(q0, q1)?;
    let (lhs, diag) = match *spec {
        DivergenceSpec::GammaPower(g) if g != 0.0 && g != -1.0 => (
            Some(gamma_cross_entropy(q0, q1, g)?),
            Some(gamma_cross_entropy(q0, q0, g)?),
        ),
        _ => (None, None),
    };
    Ok(DivergenceRecord {
        family: spec.family_name().to_string(),
        index: spec.index(),
        value,
        lhs_entropy: lhs,
        diag_entropy: diag,
    })
}

/// Distinguishability on the quotient: a vanishing gamma-power divergence
/// certifies policy equivalence.
pub fn implies_policy_equivalent(
    q0: &TabularQFunction,
    q1: &TabularQFunction,
    gamma: f64,
) -> Result<bool> {
    let d = gamma_divergence(q0, q1, gamma)?;
    if d <= 1e-10 {
        policy_equivalent(q0, q1, POLICY_EQUIV_TOL)
    } else {
        Ok(true)
    }
}
