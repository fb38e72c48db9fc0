//! Command-line front end: conditional-independence test, back-door vs
//! front-door comparison test, Monte Carlo benchmark, exact discrete
//! population oracle, and the graphical theorem verifier.

use std::fs;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fullmed::citest::{self, PartitionMethod, Sidedness, TestResult};
use fullmed::dag::{self, Claim};
use fullmed::data::{load_csv, CovariateSpec, Dataset, Schema, TrimRule};
use fullmed::lasso::{LambdaGrid, LearnerSpec};
use fullmed::oracle::{self, DiscretePopulation};
use fullmed::sim::{self, CiEngine, DgpConfig};
use fullmed::{bdfd, Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "fullmed",
    version,
    about = "Tests of full mediation and mediator exogeneity via double machine learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Test conditional mean independence of the outcome and treatment
    /// given mediators and covariates.
    TestCi(TestCiArgs),
    /// Compare back-door and front-door conditional means (discrete
    /// treatment and single discrete mediator).
    TestBdfd(TestBdfdArgs),
    /// Monte Carlo benchmark of the CI test on the built-in designs.
    Simulate(SimulateArgs),
    /// Exact computations on a discrete population definition.
    Oracle(OracleArgs),
    /// Re-verify the graphical identification theorems by exhaustive
    /// search over 4096 causal structures.
    VerifyDags(VerifyDagsArgs),
}

#[derive(Args, Debug, Serialize)]
struct SchemaArgs {
    /// Input CSV file with a header row.
    #[arg(long)]
    data: String,
    /// Outcome column name.
    #[arg(long)]
    outcome: String,
    /// Treatment column name (integer-coded).
    #[arg(long)]
    treatment: String,
    /// Comma-separated mediator column names.
    #[arg(long, value_delimiter = ',')]
    mediators: Vec<String>,
    /// Comma-separated covariate column names, or `all-remaining`.
    #[arg(long, default_value = "all-remaining", value_delimiter = ',')]
    covariates: Vec<String>,
}

impl SchemaArgs {
    fn load(&self) -> Result<Dataset> {
        let covariates = if self.covariates == ["all-remaining"] {
            CovariateSpec::AllRemaining
        } else {
            CovariateSpec::Columns(self.covariates.clone())
        };
        let schema = Schema {
            outcome: self.outcome.clone(),
            treatment: self.treatment.clone(),
            mediators: self.mediators.clone(),
            covariates,
        };
        load_csv(&self.data, &schema)
    }
}

#[derive(Args, Debug, Serialize)]
struct EngineArgs {
    /// Cross-fitting folds.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Independent fold-plan splits, median-aggregated.
    #[arg(long, default_value_t = 1)]
    splits: usize,
    /// Lower propensity trimming bound.
    #[arg(long, default_value_t = 0.05)]
    trim_lower: f64,
    /// Upper propensity trimming bound.
    #[arg(long, default_value_t = 0.95)]
    trim_upper: f64,
    /// Cross-validation folds for penalty selection.
    #[arg(long, default_value_t = 10)]
    cv_folds: usize,
    /// Length of the automatic penalty grid.
    #[arg(long, default_value_t = 100)]
    lambda_grid_len: usize,
    /// Disable feature standardization inside the learner.
    #[arg(long, default_value_t = false)]
    no_standardize: bool,
    /// Upper-tailed instead of two-sided p-value.
    #[arg(long, default_value_t = false)]
    one_sided: bool,
    /// Master seed; all randomness derives from it.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl EngineArgs {
    fn trim(&self) -> Result<TrimRule> {
        TrimRule::new(self.trim_lower, self.trim_upper)
    }
    fn learner(&self) -> LearnerSpec {
        LearnerSpec {
            lambda_grid: LambdaGrid::Auto {
                len: self.lambda_grid_len,
            },
            cv_folds: self.cv_folds,
            standardize: !self.no_standardize,
            ..LearnerSpec::default()
        }
    }
    fn sidedness(&self) -> Sidedness {
        if self.one_sided {
            Sidedness::OneSided
        } else {
            Sidedness::TwoSided
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
enum PartitionArg {
    /// One cell per sufficiently frequent treatment level.
    Discrete,
    /// Quantile-binned cells for many-valued treatments.
    Quantile,
}

#[derive(Args, Debug, Serialize)]
struct TestCiArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// How to partition a multivalued treatment into cells.
    #[arg(long, value_enum, default_value_t = PartitionArg::Discrete)]
    partition: PartitionArg,
    /// Minimum level probability before merging (discrete partition).
    #[arg(long, default_value_t = 0.01)]
    min_prob: f64,
    /// Number of quantile cells (quantile partition).
    #[arg(long, default_value_t = 2)]
    cells: usize,
    /// Write a JSON report here.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct TestBdfdArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Write a JSON report here.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// Built-in design: 1 = exogenous treatment, 2 = treatment depending
    /// on the mediator disturbance with strength `--lambda`.
    #[arg(long, default_value_t = 1)]
    dgp: u8,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Number of covariates.
    #[arg(long, default_value_t = 200)]
    p: usize,
    /// Mediator-outcome confounding strength.
    #[arg(long, default_value_t = 0.0)]
    delta: f64,
    /// Direct treatment effect on the outcome.
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    /// Treatment dependence on the mediator disturbance (design 2).
    #[arg(long, default_value_t = 0.25)]
    lambda: f64,
    /// Monte Carlo replications.
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Worker thread cap; default = machine parallelism.
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    engine: EngineArgs,
    /// Write a JSON report here.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[command(subcommand)]
    command: OracleCommand,
}

#[derive(Subcommand, Debug)]
enum OracleCommand {
    /// Check whether Y is mean/distribution independent of D given
    /// (M, X) in the population.
    CheckTi(PopArgs),
    /// Check whether back-door and front-door conditional distributions
    /// agree in the population.
    CheckBdfd(PopArgs),
    /// Exact average, controlled direct, natural direct and indirect
    /// effects.
    Effects(PopArgs),
    /// Search for a population where the back-door/front-door equality
    /// holds but conditional independence fails.
    FindCounterexample(FindArgs),
}

#[derive(Args, Debug, Serialize)]
struct PopArgs {
    /// Population definition file (JSON).
    #[arg(long)]
    pop: String,
    /// Write a JSON report here.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct FindArgs {
    /// Maximum candidate populations to try.
    #[arg(long, default_value_t = 10_000)]
    budget: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write the found population here as JSON.
    #[arg(long)]
    out: Option<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
enum TheoremArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Args, Debug, Serialize)]
struct VerifyDagsArgs {
    /// Which equivalence to check.
    #[arg(long, value_enum, default_value_t = TheoremArg::All)]
    theorem: TheoremArg,
    /// Print the edge list of every counterexample graph.
    #[arg(long, default_value_t = false)]
    list_counterexamples: bool,
    /// Write a JSON report here.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Serialize)]
struct Report<C: Serialize, R: Serialize> {
    config: C,
    result: R,
}

fn write_json<C: Serialize, R: Serialize>(
    out: &Option<String>,
    config: &C,
    result: &R,
) -> Result<()> {
    if let Some(path) = out {
        let doc = serde_json::to_string_pretty(&Report { config, result })
            .map_err(|e| Error::Internal(format!("serialization failed: {e}")))?;
        fs::write(path, doc)?;
    }
    Ok(())
}

fn print_test_result(r: &TestResult) {
    println!("theta_hat    {:>12.6}", r.theta_hat);
    println!("se           {:>12.6}", r.se);
    println!("t            {:>12.4}", r.t_stat);
    println!("p            {:>12.4}", r.p_value);
    println!("n            {:>12}", r.n);
    println!("n_effective  {:>12}", r.n_effective);
    if r.per_split.len() > 1 {
        println!("splits       {:>12} (median-aggregated)", r.per_split.len());
    }
}

fn cmd_test_ci(args: &TestCiArgs) -> Result<()> {
    let data = args.schema.load()?;
    let method = match args.partition {
        PartitionArg::Discrete => PartitionMethod::Discrete {
            min_prob: args.min_prob,
        },
        PartitionArg::Quantile => PartitionMethod::Quantile { cells: args.cells },
    };
    let partition = citest::partition_treatment(&data.d, method)?;
    let result = citest::run_test(
        &data,
        &partition,
        args.engine.folds,
        args.engine.splits,
        &args.engine.learner(),
        &args.engine.trim()?,
        args.engine.seed,
        args.engine.sidedness(),
    )?;
    println!(
        "Conditional independence test (H0: no direct effect, exogenous mediator)"
    );
    println!("treatment cells: {}", partition.cells.len());
    print_test_result(&result);
    write_json(&args.out, args, &result)
}

#[derive(Serialize)]
struct BdFdOutput {
    #[serde(flatten)]
    result: TestResult,
    level_diagnostics: Vec<bdfd::LevelDiagnostics>,
}

fn cmd_test_bdfd(args: &TestBdfdArgs) -> Result<()> {
    let data = args.schema.load()?;
    let (result, diagnostics) = bdfd::run_bdfd_test_with_diagnostics(
        &data,
        args.engine.folds,
        args.engine.splits,
        &args.engine.learner(),
        &args.engine.trim()?,
        args.engine.seed,
        args.engine.sidedness(),
    )?;
    println!("Back-door vs front-door comparison test (H0: both identify E[Y|D=d,X])");
    print_test_result(&result);
    for diag in &diagnostics {
        println!(
            "level {}: mean q_hat {:>10.6}  mean zeta_hat {:>10.6}",
            diag.level, diag.mean_q, diag.mean_zeta
        );
    }
    write_json(
        &args.out,
        args,
        &BdFdOutput {
            result,
            level_diagnostics: diagnostics,
        },
    )
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let lambda = match args.dgp {
        1 => {
            if args.lambda != 0.25 && args.lambda != 0.0 {
                return Err(Error::Argument(
                    "--lambda only applies to --dgp 2".into(),
                ));
            }
            0.0
        }
        2 => args.lambda,
        other => {
            return Err(Error::Argument(format!(
                "unknown design {other}; use --dgp 1 or --dgp 2"
            )))
        }
    };
    let base = DgpConfig {
        n: args.n,
        p: args.p,
        delta: args.delta,
        gamma: args.gamma,
        lambda,
        seed: args.engine.seed,
    };
    let engine = CiEngine {
        k_folds: args.engine.folds,
        n_splits: args.engine.splits,
        learner: args.engine.learner(),
        trim: args.engine.trim()?,
        sidedness: args.engine.sidedness(),
    };
    let report = sim::run_ci_monte_carlo(&base, args.reps, args.alpha, &engine)?;
    println!(
        "| n | p | delta | gamma | lambda | mean theta | sd theta | mean se | rej. rate |"
    );
    println!("|---|---|-------|-------|--------|------------|----------|---------|-----------|");
    println!(
        "| {} | {} | {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} |",
        args.n,
        args.p,
        args.delta,
        args.gamma,
        lambda,
        report.mean_theta,
        report.sd_theta,
        report.mean_se,
        report.rejection_rate
    );
    println!(
        "replications: {} completed, {} failed; mean effective n: {:.0}",
        report.reps_completed, report.reps_failed, report.mean_n_effective
    );
    write_json(&args.out, args, &report)
}

fn load_pop(path: &str) -> Result<DiscretePopulation> {
    let text = fs::read_to_string(path)?;
    DiscretePopulation::from_json(&text)
}

fn cmd_oracle(args: &OracleArgs) -> Result<()> {
    match &args.command {
        OracleCommand::CheckTi(p) => {
            let pop = load_pop(&p.pop)?;
            let joint = oracle::marginalize(&pop);
            let report = oracle::check_ti(&joint)?;
            println!(
                "conditional independence of Y and D given (M, X): {}",
                if report.holds { "holds" } else { "fails" }
            );
            println!("max deviation: {:.3e}", report.max_deviation);
            write_json(&p.out, p, &report)
        }
        OracleCommand::CheckBdfd(p) => {
            let pop = load_pop(&p.pop)?;
            let joint = oracle::marginalize(&pop);
            let report = oracle::check_bdfd(&joint)?;
            println!(
                "back-door/front-door agreement: {}",
                if report.holds { "holds" } else { "fails" }
            );
            println!("max deviation: {:.3e}", report.max_deviation);
            write_json(&p.out, p, &report)
        }
        OracleCommand::Effects(p) => {
            let pop = load_pop(&p.pop)?;
            let report = oracle::effects(&pop)?;
            println!("ATE          {:>12.6}", report.ate);
            for (m, cde) in report.cde.iter().enumerate() {
                println!("CDE(m={m})     {cde:>12.6}");
            }
            for d in 0..2 {
                println!("NDE(d={d})     {:>12.6}", report.nde[d]);
            }
            for d in 0..2 {
                println!("NIE(d={d})     {:>12.6}", report.nie[d]);
            }
            write_json(&p.out, p, &report)
        }
        OracleCommand::FindCounterexample(f) => {
            match oracle::find_bdfd_not_ti(f.budget, f.seed) {
                Some(pop) => {
                    let doc = pop.to_json();
                    if let Some(path) = &f.out {
                        fs::write(path, &doc)?;
                    }
                    println!(
                        "found a population where back-door/front-door agreement \
                         holds but conditional independence fails:"
                    );
                    println!("{doc}");
                    Ok(())
                }
                None => Err(Error::TestInfeasible(format!(
                    "no counterexample found within budget {}",
                    f.budget
                ))),
            }
        }
    }
}

fn cmd_verify_dags(args: &VerifyDagsArgs) -> Result<()> {
    let claim = match args.theorem {
        TheoremArg::One => Some(Claim::Theorem1),
        TheoremArg::Two => Some(Claim::Theorem2),
        TheoremArg::All => None,
    };
    let reports = dag::verify_all(claim)?;
    for (name, report) in &reports {
        let verdict = if report.counterexamples.is_empty() {
            "no counterexample".to_string()
        } else {
            format!("{} counterexample(s)", report.counterexamples.len())
        };
        println!(
            "{name}: {verdict} over {} graphs ({} satisfying the premises)",
            report.graphs_checked, report.premises_met
        );
        if args.list_counterexamples {
            for c in &report.counterexamples {
                let g = dag::Dag::from_masks(c.observed_mask, c.latent_mask);
                println!(
                    "-- graph obs={:#08b} lat={:#08b} (ti={}, claim side={}):",
                    c.observed_mask, c.latent_mask, c.ti, c.forward_failure
                );
                for line in dag::edge_list(&g).lines() {
                    println!("   {line}");
                }
            }
        }
    }
    write_json(&args.out, args, &reports)
}

/// Flat `key = value` config file: each key supplies a default for the
/// matching long flag unless that flag is already present on the
/// command line. Unknown keys are rejected by normal flag parsing.
fn apply_config_file(mut argv: Vec<String>) -> std::result::Result<Vec<String>, String> {
    let pos = match argv.iter().position(|a| a == "--config") {
        Some(p) => p,
        None => return Ok(argv),
    };
    if pos + 1 >= argv.len() {
        return Err("--config requires a file path".to_string());
    }
    let path = argv.remove(pos + 1);
    argv.remove(pos);
    let text =
        fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{path}:{}: expected key = value", lineno + 1))?;
        let flag = format!("--{}", key.trim());
        let value = value.trim();
        if argv.iter().any(|a| a == &flag) {
            continue;
        }
        match value {
            "true" => argv.push(flag),
            "false" => {}
            _ => {
                argv.push(flag);
                argv.push(value.to_string());
            }
        }
    }
    Ok(argv)
}

fn run() -> std::result::Result<(), u8> {
    let argv: Vec<String> = std::env::args().collect();
    let argv = apply_config_file(argv).map_err(|msg| {
        eprintln!("error: {msg}");
        1u8
    })?;
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return if code == 0 { Ok(()) } else { Err(code) };
        }
    };

    if let Command::Simulate(args) = &cli.command {
        if let Some(threads) = args.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .ok();
        }
    }

    let outcome = match &cli.command {
        Command::TestCi(args) => cmd_test_ci(args),
        Command::TestBdfd(args) => cmd_test_bdfd(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::VerifyDags(args) => cmd_verify_dags(args),
    };
    outcome.map_err(|e| {
        eprintln!("error: {e}");
        e.exit_code() as u8
    })
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
