//! `qpower` command line: scenario simulation, policy fitting and divergence
//! evaluation on tabular Q-functions.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 internal/harness
//! error. All commands are deterministic given their flags.

mod io;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qpower::divergence::*;
use qpower::estimators::*;
use qpower::models::{FeatureMaps, NuisanceComponent, PolicyComponent};
use qpower::qcore::{ActionSet, TabularQFunction};
use qpower::simulate::*;

#[derive(Parser)]
#[command(name = "qpower", version, about = "Power-divergence policy estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the replication study and write JSON + CSV reports.
    Simulate(SimulateArgs),
    /// Fit a policy estimator on a trajectory CSV.
    Fit(FitArgs),
    /// Evaluate a divergence between two tabular Q-function files.
    Divergence(DivergenceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Correct,
    Misspecified,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Gamma,
    Beta,
    Ml,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "correct")]
    scenario: ScenarioArg,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 300)]
    reps: usize,
    #[arg(long, default_value_t = -1.5, allow_hyphen_values = true)]
    gamma: f64,
    #[arg(long, default_value_t = -1.5, allow_hyphen_values = true)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output stem; writes `<out>.json` and `<out>.csv`.
    #[arg(long)]
    out: String,
    #[arg(long, default_value_t = 0.5)]
    covariate_sd: f64,
    /// Comma-separated subset of gamma,beta,ml.
    #[arg(long, value_delimiter = ',', default_value = "gamma,beta")]
    methods: Vec<MethodArg>,
    /// Rescue restarts per fit after a failed zero start.
    #[arg(long, default_value_t = 0)]
    restarts: usize,
    /// Failure fraction above which the harness aborts.
    #[arg(long, default_value_t = 0.2)]
    max_failure_fraction: f64,
    /// Also write the first replication's dataset to this CSV path.
    #[arg(long)]
    dump_data: Option<String>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: String,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Power index (gamma or beta); ignored for ml.
    #[arg(long, default_value_t = -1.5, allow_hyphen_values = true)]
    index: f64,
    /// Feature preset for the policy component.
    #[arg(long, default_value = "linear_numeric_action")]
    features: String,
    #[arg(long)]
    out: String,
    /// Estimate propensities by multinomial logit instead of requiring a p column.
    #[arg(long, default_value_t = false)]
    fit_propensity: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Gamma,
    Beta,
    Ekl,
    Nkl,
}

#[derive(Clone, Copy, ValueEnum)]
enum LimitCheckArg {
    #[value(alias = "value_gap")]
    ValueGap,
    Gm,
    Hm,
}

#[derive(Args)]
struct DivergenceArgs {
    #[arg(long)]
    q0: String,
    #[arg(long)]
    q1: String,
    #[arg(long, value_enum, default_value = "gamma")]
    family: FamilyArg,
    #[arg(long, default_value_t = -1.5, allow_hyphen_values = true)]
    index: f64,
    /// Verify one of the limit identities and print both sides.
    #[arg(long, value_enum)]
    limit_check: Option<LimitCheckArg>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Usage and help go to stdout with success for --help/--version,
            // everything else is a usage error.
            use clap::error::ErrorKind;
            let _ = e.print();
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => std::process::exit(0),
                _ => std::process::exit(1),
            }
        }
    };
    let code = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Divergence(args) => cmd_divergence(args),
    };
    std::process::exit(code);
}

fn fail(code: i32, msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    code
}

fn cmd_simulate(args: SimulateArgs) -> i32 {
    if args.n == 0 || args.reps == 0 {
        return fail(1, "--n and --reps must be positive");
    }
    if !(args.covariate_sd > 0.0) {
        return fail(1, "--covariate-sd must be positive");
    }
    if args.methods.is_empty() {
        return fail(1, "--methods must name at least one of gamma,beta,ml");
    }
    let config = ScenarioConfig {
        scenario: match args.scenario {
            ScenarioArg::Correct => Scenario::Correct,
            ScenarioArg::Misspecified => Scenario::Misspecified,
        },
        n: args.n,
        reps: args.reps,
        gamma: args.gamma,
        beta: args.beta,
        seed: args.seed,
        covariate_sd: args.covariate_sd,
        methods: args
            .methods
            .iter()
            .map(|m| match m {
                MethodArg::Gamma => Method::Gamma,
                MethodArg::Beta => Method::Beta,
                MethodArg::Ml => Method::Ml,
            })
            .collect(),
        restarts: args.restarts,
        max_failure_fraction: args.max_failure_fraction,
    };

    if let Some(path) = &args.dump_data {
        let data = match config.scenario {
            Scenario::Correct => generate_correct(&config, config.seed),
            Scenario::Misspecified => generate_misspecified(&config, config.seed),
        };
        let data = match data {
            Ok(d) => d,
            Err(e) => return fail(2, e),
        };
        if let Err(e) = io::write_trajectories(path, &data) {
            return fail(2, e);
        }
    }

    let reports = match run_replications(&config) {
        Ok(r) => r,
        Err(e) => return fail(2, e),
    };
    if let Err(e) = std::fs::write(format!("{}.json", args.out), reports_to_json(&reports)) {
        return fail(2, e);
    }
    if let Err(e) = std::fs::write(format!("{}.csv", args.out), reports_to_csv(&reports)) {
        return fail(2, e);
    }
    for r in &reports {
        println!(
            "{}: mean psi = ({:.4}, {:.4}), rmse = ({:.4}, {:.4}), failures {}/{}",
            r.method.name(),
            r.mean[0],
            r.mean[1],
            r.rmse[0],
            r.rmse[1],
            r.failures,
            r.reps
        );
    }
    0
}

fn infer_actions(data: &qpower::qcore::TrajectoryDataset) -> Result<ActionSet, String> {
    let mut labels: Vec<i64> = data
        .trajectories()
        .iter()
        .flat_map(|tr| tr.stages.iter().map(|s| s.action))
        .collect();
    labels.sort_unstable();
    labels.dedup();
    ActionSet::new(labels).map_err(|e| e.to_string())
}

fn cmd_fit(args: FitArgs) -> i32 {
    if args.features != "linear_numeric_action" {
        return fail(1, format!("unknown feature preset {:?}", args.features));
    }
    let loaded = match io::read_trajectories(&args.data) {
        Ok(l) => l,
        Err(e) => return fail(1, e),
    };
    if !loaded.had_propensity && !args.fit_propensity {
        return fail(1, io::CsvError::MissingPropensity);
    }
    let actions = match infer_actions(&loaded.dataset) {
        Ok(a) => a,
        Err(e) => return fail(1, e),
    };
    let mut data = loaded.dataset;
    if args.fit_propensity {
        if data.stage_count() > 1 {
            return fail(1, "--fit-propensity supports single-stage data only");
        }
        let model = match fit_propensity(&data, &actions) {
            Ok(m) => m,
            Err(e) => return fail(2, e),
        };
        for w in &model.warnings {
            eprintln!("warning: {w}");
        }
        data = match fill_propensities(&data, &model) {
            Ok(d) => d,
            Err(e) => return fail(2, e),
        };
    }

    let (method, mut note) = match args.method {
        MethodArg::Gamma => (FitMethod::GammaMde, None),
        MethodArg::Beta => (
            FitMethod::BetaMde,
            (args.index == 0.0).then(|| "beta index 0 dispatched to the eKL loss".to_string()),
        ),
        MethodArg::Ml => (FitMethod::Ml, None),
    };
    let mut config = FitConfig::new(method, args.index);
    config.seed = args.seed;
    config.restarts = args.restarts;
    if let Err(e) = config.validate() {
        return fail(1, e);
    }

    if data.stage_count() > 1 {
        if method != FitMethod::GammaMde {
            return fail(1, "multi-stage fitting uses the gamma method");
        }
        let templates: Vec<StageTemplate> = (0..data.stage_count())
            .map(|t| {
                let hist_dim = data.trajectories()[0].history(t).len();
                StageTemplate {
                    policy: PolicyComponent::template(
                        FeatureMaps::LinearNumericAction { covariate_dim: hist_dim },
                        actions.clone(),
                    ),
                    nuisance: NuisanceComponent::ParametricLinear {
                        alpha: vec![0.0; hist_dim + 1],
                    },
                }
            })
            .collect();
        let fit = match fit_backward(&data, &templates, &config) {
            Ok(f) => f,
            Err(e) => return fail(2, e),
        };
        let stages: Vec<serde_json::Value> = fit
            .stage_fits
            .iter()
            .map(|f| serde_json::from_str(&f.to_json()).expect("fit json"))
            .collect();
        let out = serde_json::json!({
            "stages": stages,
            "pseudo_outcomes_clamped": fit.pseudo_clamped,
        });
        if let Err(e) = std::fs::write(&args.out, serde_json::to_string_pretty(&out).unwrap()) {
            return fail(2, e);
        }
        for (t, f) in fit.stage_fits.iter().enumerate() {
            println!(
                "stage {}: psi_hat = {:?}, converged = {}",
                t + 1,
                f.psi_hat,
                f.converged
            );
        }
        return 0;
    }

    let template = PolicyComponent::template(
        FeatureMaps::LinearNumericAction {
            covariate_dim: data.trajectories()[0].stages[0].x.dim(),
        },
        actions,
    );
    let result = match method {
        FitMethod::GammaMde => fit_gamma_mde(&data, &template, &config),
        FitMethod::BetaMde | FitMethod::Ml => {
            let model = qpower::models::ModelQFunction {
                nuisance: NuisanceComponent::ParametricLinear {
                    alpha: vec![0.0; data.trajectories()[0].stages[0].x.dim() + 1],
                },
                policy_part: template,
            };
            if method == FitMethod::BetaMde {
                fit_beta_mde(&data, &model, &config)
            } else {
                fit_ml(&data, &model, &config)
            }
        }
    };
    let result = match result {
        Ok(r) => r,
        Err(e) => return fail(2, e),
    };
    let mut json: serde_json::Value = serde_json::from_str(&result.to_json()).expect("fit json");
    if let Some(n) = note.take() {
        json["note"] = serde_json::Value::String(n);
    }
    if let Err(e) = std::fs::write(&args.out, serde_json::to_string_pretty(&json).unwrap()) {
        return fail(2, e);
    }
    println!(
        "psi_hat = {:?}, alpha_hat = {:?}, converged = {}",
        result.psi_hat, result.alpha_hat, result.converged
    );
    if !result.converged {
        eprintln!("warning: fit did not converge; see diagnostics in {}", args.out);
    }
    0
}

fn cmd_divergence(args: DivergenceArgs) -> i32 {
    let read = |path: &str| -> Result<TabularQFunction, String> {
        let s = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
        TabularQFunction::from_json(&s).map_err(|e| format!("{path}: {e}"))
    };
    let q0 = match read(&args.q0) {
        Ok(q) => q,
        Err(e) => return fail(1, e),
    };
    let q1 = match read(&args.q1) {
        Ok(q) => q,
        Err(e) => return fail(1, e),
    };
    let spec = match args.family {
        FamilyArg::Gamma => DivergenceSpec::GammaPower(args.index),
        FamilyArg::Beta => DivergenceSpec::BetaPower(args.index),
        FamilyArg::Ekl => DivergenceSpec::Ekl,
        FamilyArg::Nkl => DivergenceSpec::Nkl,
    };
    let record = match evaluate_record(&spec, &q0, &q1) {
        Ok(r) => r,
        Err(e) => return fail(1, e),
    };
    println!("{}", serde_json::to_string_pretty(&record).expect("record json"));

    if let Some(check) = args.limit_check {
        let outcome = match check {
            LimitCheckArg::ValueGap => value_gap_limit(&q0, &q1, &[10.0, 50.0, 200.0]).map(|rows| {
                serde_json::json!({
                    "check": "value_gap",
                    "rows": rows
                        .iter()
                        .map(|(g, scaled, gap)| serde_json::json!({
                            "gamma": g, "gamma_times_divergence": scaled, "value_gap": gap
                        }))
                        .collect::<Vec<_>>(),
                })
            }),
            LimitCheckArg::Gm => {
                let exact = gm_limit_divergence(&q0, &q1);
                let near = gamma_divergence_gm_scaled(&q0, &q1, -1.0 + 1e-3);
                exact.and_then(|e| near.map(|n| serde_json::json!({
                    "check": "gm",
                    "limit_form": e,
                    "scaled_divergence_near_minus_one": n,
                })))
            }
            LimitCheckArg::Hm => harmonic_identity_check(&q0).map(|(lhs, rhs)| {
                serde_json::json!({ "check": "hm", "lhs": lhs, "rhs": rhs })
            }),
        };
        match outcome {
            Ok(v) => println!("{}", serde_json::to_string_pretty(&v).expect("check json")),
            Err(e) => return fail(1, e),
        }
    }
    0
}
