//! Statistical integration tests: Monte Carlo unbiasedness of the estimating
//! functions, IPW value unbiasedness, population-loss checks, sandwich
//! stabilization and the two-stage backward induction scenario.

use qpower::estimators::*;
use qpower::models::{FeatureMaps, ModelQFunction, NuisanceComponent, PolicyComponent};
use qpower::qcore::*;
use qpower::simulate::*;

fn sim_template() -> PolicyComponent {
    PolicyComponent::template(
        FeatureMaps::LinearNumericAction { covariate_dim: 1 },
        ActionSet::new(vec![1, 2, 3]).unwrap(),
    )
}

/// Mean and standard error of each coordinate over rows.
fn mean_se(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for k in 0..dim {
            var[k] += (r[k] - mean[k]).powi(2) / (n - 1.0);
        }
    }
    let se = var.iter().map(|v| (v / n).sqrt()).collect();
    (mean, se)
}

#[test]
fn gamma_estimating_function_unbiased_at_truth() {
    // 1e5 records from the correct scenario; the mean estimating function at
    // the true psi must sit within 3 standard errors of zero.
    let config = ScenarioConfig { n: 100_000, ..Default::default() };
    let data = generate_correct(&config, 314).unwrap();
    let template = sim_template();
    let truth = [TRUE_PSI[1], TRUE_PSI[0]]; // internal layout [psi0, psi1]
    for gamma in [-1.5, 1.0] {
        let pc = template.with_params(&truth).unwrap();
        let rows: Vec<Vec<f64>> = data
            .trajectories()
            .iter()
            .map(|tr| {
                let s = &tr.stages[0];
                gamma_estimating_function(&pc, &s.x, s.action, s.reward, s.propensity, gamma)
                    .unwrap()
            })
            .collect();
        let (mean, se) = mean_se(&rows);
        for k in 0..mean.len() {
            assert!(
                mean[k].abs() < 3.0 * se[k],
                "gamma={gamma} coordinate {k}: mean {} vs 3se {}",
                mean[k],
                3.0 * se[k]
            );
        }
    }
}

#[test]
fn ml_estimating_function_unbiased_at_truth() {
    let config = ScenarioConfig { n: 100_000, ..Default::default() };
    let data = generate_correct(&config, 2718).unwrap();
    let model = ModelQFunction {
        nuisance: NuisanceComponent::ParametricLinear { alpha: TRUE_ALPHA.to_vec() },
        policy_part: sim_template().with_params(&[TRUE_PSI[1], TRUE_PSI[0]]).unwrap(),
    };
    let rows: Vec<Vec<f64>> = data
        .trajectories()
        .iter()
        .map(|tr| {
            let s = &tr.stages[0];
            ml_estimating_function(&model, &s.x, s.action, s.reward, &ExponentialLogLink).unwrap()
        })
        .collect();
    let (mean, se) = mean_se(&rows);
    for k in 0..mean.len() {
        assert!(
            mean[k].abs() < 3.0 * se[k],
            "coordinate {k}: mean {} vs 3se {}",
            mean[k],
            3.0 * se[k]
        );
    }
}

#[test]
fn ipw_value_is_unbiased_for_expected_value() {
    // Tabular truth on a 3-point grid; data simulated with known
    // propensities; the IPW estimate must match the exact value within 3
    // standard errors at 1e4 samples.
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Exp};

    let actions = ActionSet::new(vec![1, 2, 3]).unwrap();
    let grid = vec![
        GridPoint { x: CovariatePoint::scalar(0.0), weight: 0.3, q: vec![0.6, 1.8, 0.9] },
        GridPoint { x: CovariatePoint::scalar(1.0), weight: 0.5, q: vec![2.0, 0.4, 1.1] },
        GridPoint { x: CovariatePoint::scalar(2.0), weight: 0.2, q: vec![0.8, 0.9, 2.4] },
    ];
    let truth = TabularQFunction::new(actions, grid).unwrap();
    let policy = |x: &CovariatePoint| if x.0[0] < 1.5 { 2 } else { 3 };
    let exact = value_expected(&truth, &policy).unwrap();

    let n = 10_000;
    let mut rng = StdRng::seed_from_u64(5);
    let probs = [0.5, 0.3, 0.2];
    let mut xs = Vec::new();
    let mut acts = Vec::new();
    let mut ys = Vec::new();
    let mut ps = Vec::new();
    for _ in 0..n {
        let u: f64 = rng.random();
        let gi = if u < 0.3 { 0 } else if u < 0.8 { 1 } else { 2 };
        let point = &truth.points()[gi];
        let ua: f64 = rng.random();
        let ai = if ua < probs[0] { 0 } else if ua < probs[0] + probs[1] { 1 } else { 2 };
        let q = point.q[ai];
        let y = Exp::new(1.0 / q).unwrap().sample(&mut rng);
        xs.push(point.x.clone());
        acts.push((ai + 1) as i64);
        ys.push(y);
        ps.push(probs[ai]);
    }
    let data = TrajectoryDataset::single_stage(xs, acts, ys, ps).unwrap();
    let est = value_ipw(&data, &policy).unwrap();
    // SE of the IPW average, estimated from the terms themselves.
    let terms: Vec<f64> = data
        .trajectories()
        .iter()
        .map(|tr| {
            let s = &tr.stages[0];
            if policy(&s.x) == s.action { s.reward / s.propensity } else { 0.0 }
        })
        .collect();
    let m = terms.iter().sum::<f64>() / n as f64;
    let var = terms.iter().map(|t| (t - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let se = (var / n as f64).sqrt();
    assert!((est - exact).abs() < 3.0 * se, "est {est} exact {exact} se {se}");
}

#[test]
fn beta_population_loss_minimized_at_truth() {
    // Monte Carlo loss at the truth sits below the loss at perturbed
    // parameters on a large correct-scenario sample.
    let config = ScenarioConfig { n: 100_000, ..Default::default() };
    let data = generate_correct(&config, 99).unwrap();
    let model = ModelQFunction {
        nuisance: NuisanceComponent::ParametricLinear { alpha: vec![0.0, 0.0] },
        policy_part: sim_template(),
    };
    let truth_alpha = TRUE_ALPHA;
    let truth_psi = [TRUE_PSI[1], TRUE_PSI[0]];
    let at_truth = beta_loss(&truth_alpha, &truth_psi, &data, &model, -1.5).unwrap();
    for perturb in [
        [0.3, 0.0, 0.0, 0.0],
        [0.0, -0.3, 0.0, 0.0],
        [0.0, 0.0, 0.4, 0.0],
        [0.0, 0.0, 0.0, 0.3],
        [-0.2, 0.2, -0.2, 0.2],
    ] {
        let alpha = [truth_alpha[0] + perturb[0], truth_alpha[1] + perturb[1]];
        let psi = [truth_psi[0] + perturb[2], truth_psi[1] + perturb[3]];
        let loss = beta_loss(&alpha, &psi, &data, &model, -1.5).unwrap();
        assert!(loss > at_truth, "perturb {perturb:?}: {loss} <= {at_truth}");
    }
}

#[test]
fn gamma_loss_population_minimized_at_truth_even_misspecified() {
    // The gamma loss ignores the nuisance, so the true psi minimizes it in
    // the misspecified scenario as well.
    let config = ScenarioConfig { n: 100_000, ..Default::default() };
    let data = generate_misspecified(&config, 123).unwrap();
    let template = sim_template();
    let truth = [TRUE_PSI[1], TRUE_PSI[0]];
    let at_truth = gamma_loss(&truth, &data, &template, -1.5).unwrap();
    for perturb in [[0.3, 0.0], [0.0, 0.3], [-0.25, 0.25], [0.2, -0.2]] {
        let psi = [truth[0] + perturb[0], truth[1] + perturb[1]];
        let loss = gamma_loss(&psi, &data, &template, -1.5).unwrap();
        assert!(loss > at_truth, "perturb {perturb:?}: {loss} <= {at_truth}");
    }
}

#[test]
fn sandwich_diagonal_scaled_by_n_stabilizes() {
    let template = sim_template();
    let mut scaled: Vec<Vec<f64>> = Vec::new();
    for (n, seed) in [(500usize, 42u64), (2000, 43)] {
        let config = ScenarioConfig { n, ..Default::default() };
        let data = generate_correct(&config, seed).unwrap();
        let mut cfg = FitConfig::new(FitMethod::GammaMde, -1.5);
        cfg.seed = seed;
        let fit = fit_gamma_mde(&data, &template, &cfg).unwrap();
        assert!(fit.converged, "{:?}", fit.diagnostics);
        let diag: Vec<f64> = (0..2).map(|k| fit.sandwich_covariance[k][k] * n as f64).collect();
        scaled.push(diag);
    }
    for k in 0..2 {
        let ratio = scaled[0][k] / scaled[1][k];
        assert!(ratio > 0.5 && ratio < 2.0, "coordinate {k}: ratio {ratio}");
    }
}

#[test]
fn reported_standard_errors_cover_truth_in_one_fit() {
    let config = ScenarioConfig { n: 2000, ..Default::default() };
    let data = generate_correct(&config, 8).unwrap();
    let mut cfg = FitConfig::new(FitMethod::GammaMde, -1.5);
    cfg.seed = 8;
    let fit = fit_gamma_mde(&data, &sim_template(), &cfg).unwrap();
    assert!(fit.converged);
    let se = fit.standard_errors();
    let truth = [TRUE_PSI[1], TRUE_PSI[0]];
    for k in 0..2 {
        assert!(
            (fit.psi_hat[k] - truth[k]).abs() < 3.0 * se[k],
            "coordinate {k}: {} vs truth {} (se {})",
            fit.psi_hat[k],
            truth[k],
            se[k]
        );
    }
}

fn two_stage_templates() -> Vec<StageTemplate> {
    vec![
        StageTemplate {
            policy: PolicyComponent::template(
                FeatureMaps::LinearNumericAction { covariate_dim: 1 },
                ActionSet::new(vec![1, 2, 3]).unwrap(),
            ),
            nuisance: NuisanceComponent::ParametricLinear { alpha: vec![0.0, 0.0] },
        },
        StageTemplate {
            // Stage-2 history is [x1, a1, x2].
            policy: PolicyComponent::template(
                FeatureMaps::LinearNumericAction { covariate_dim: 3 },
                ActionSet::new(vec![1, 2, 3]).unwrap(),
            ),
            nuisance: NuisanceComponent::ParametricLinear { alpha: vec![0.0, 0.0, 0.0, 0.0] },
        },
    ]
}

#[test]
fn backward_induction_recovers_oracle_policies() {
    let data = generate_two_stage(2000, 616, false).unwrap();
    let mut config = FitConfig::new(FitMethod::GammaMde, -1.5);
    config.seed = 616;
    let fit = fit_backward(&data, &two_stage_templates(), &config).unwrap();
    for (t, f) in fit.stage_fits.iter().enumerate() {
        assert!(f.converged, "stage {t} did not converge: {:?}", f.diagnostics);
    }

    // Held-out histories; policies must agree with the oracle argmax on at
    // least 95% of them at every stage.
    let held = generate_two_stage(1000, 617, false).unwrap();
    let mut agree = [0usize; 2];
    for tr in held.trajectories() {
        let h1 = tr.history(0);
        if fit.policies[0].decide(&h1).unwrap() == TwoStageTruth::oracle_action(h1[0]) {
            agree[0] += 1;
        }
        let h2 = tr.history(1);
        if fit.policies[1].decide(&h2).unwrap() == TwoStageTruth::oracle_action(h2[2]) {
            agree[1] += 1;
        }
    }
    for (t, a) in agree.iter().enumerate() {
        assert!(*a >= 950, "stage {} agreement {}/1000", t + 1, a);
    }
}

#[test]
fn zero_second_stage_effect_matches_single_stage_fit() {
    // With g_2 = 0 in the truth, the backward stage-1 fit and the
    // single-stage fit on (x1, a1, y1 + y2) estimate the same quantity.
    let reps = 24;
    let n = 500;
    let mut diffs: Vec<Vec<f64>> = Vec::new();
    for rep in 0..reps {
        let data = generate_two_stage(n, 9000 + rep, true).unwrap();
        let mut config = FitConfig::new(FitMethod::GammaMde, -1.5);
        config.seed = 9000 + rep;
        let back = fit_backward(&data, &two_stage_templates(), &config).unwrap();
        let pooled = TrajectoryDataset::single_stage(
            data.trajectories().iter().map(|tr| tr.stages[0].x.clone()).collect(),
            data.trajectories().iter().map(|tr| tr.stages[0].action).collect(),
            data.trajectories()
                .iter()
                .map(|tr| tr.stages[0].reward + tr.stages[1].reward)
                .collect(),
            data.trajectories().iter().map(|tr| tr.stages[0].propensity).collect(),
        )
        .unwrap();
        let template = PolicyComponent::template(
            FeatureMaps::LinearNumericAction { covariate_dim: 1 },
            ActionSet::new(vec![1, 2, 3]).unwrap(),
        );
        let single = fit_gamma_mde(&pooled, &template, &config).unwrap();
        if back.stage_fits[0].converged && single.converged {
            diffs.push(
                back.stage_fits[0]
                    .psi_hat
                    .iter()
                    .zip(&single.psi_hat)
                    .map(|(a, b)| a - b)
                    .collect(),
            );
        }
    }
    assert!(diffs.len() >= reps as usize * 3 / 4);
    let (mean, se) = mean_se(&diffs);
    for k in 0..mean.len() {
        // The two procedures differ only through the plug-in continuation
        // value; their estimates must be statistically indistinguishable.
        assert!(
            mean[k].abs() < 3.0 * se[k].max(0.02),
            "coordinate {k}: mean diff {} vs se {}",
            mean[k],
            se[k]
        );
    }
}

#[test]
fn backward_clamps_negative_pseudo_outcomes() {
    // Exponential rewards are nonnegative, so nothing should be clamped.
    let data = generate_two_stage(300, 4, false).unwrap();
    let mut config = FitConfig::new(FitMethod::GammaMde, -1.5);
    config.seed = 4;
    let fit = fit_backward(&data, &two_stage_templates(), &config).unwrap();
    assert_eq!(fit.pseudo_clamped, 0);
}

#[test]
fn propensity_fit_recovers_uniform_design() {
    // The simulation design assigns actions uniformly with no covariate
    // dependence; fitted probabilities must sit within 3 SE of 1/3.
    let config = ScenarioConfig { n: 10_000, ..Default::default() };
    let data = generate_correct(&config, 21).unwrap();
    let actions = ActionSet::new(vec![1, 2, 3]).unwrap();
    let model = fit_propensity(&data, &actions).unwrap();
    let se = ((1.0 / 3.0) * (2.0 / 3.0) / config.n as f64).sqrt();
    for x in [0.2, 1.0, 1.8] {
        let p = model.probabilities(&CovariatePoint::scalar(x));
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 3.0 * se, "p = {v} at x = {x}");
        }
    }
}
