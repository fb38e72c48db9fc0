//! Monte Carlo engine: synthetic data-generating processes with a binary
//! treatment, a scalar mediator, and correlated Gaussian covariates, plus a
//! replication harness that aggregates test results into summary reports.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::citest::{self, Sidedness, TestResult, TreatmentPartition};
use crate::data::{mix_seed, ColumnNames, Dataset, Matrix, TrimRule};
use crate::error::{Error, Result};
use crate::lasso::LearnerSpec;

/// Configuration of the synthetic structural model
///
/// ```text
/// D = 1{X'b + lambda*U2 + U1 > 0}
/// M = 0.5*D + X'b + delta*U1 + U2
/// Y = M + X'b + gamma*D + delta*U1 + U3
/// ```
///
/// with `U1, U2, U3` iid standard normal and `X ~ N(0, Sigma)`,
/// `Sigma[i][j] = 0.5^|i-j|`. `delta` injects mediator-outcome confounding,
/// `gamma` a direct treatment effect, and `lambda` treatment-mediator
/// confounding (zero in the baseline design).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub p: usize,
    pub delta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Argument("need n >= 10".into()));
        }
        if self.p < 1 {
            return Err(Error::Argument("need p >= 1".into()));
        }
        Ok(())
    }
}

/// Covariate coefficients `0.5 / i^2` for `i = 1..=p`.
pub fn beta_schedule(p: usize) -> Vec<f64> {
    (1..=p).map(|i| 0.5 / (i * i) as f64).collect()
}

/// Draw `n` rows from N(0, Sigma) with `Sigma[i][j] = 0.5^|i-j|`.
///
/// The Toeplitz kernel is the covariance of a stationary AR(1) process with
/// unit marginal variance, so rows are generated exactly by the recursion
/// `X_1 = Z_1`, `X_j = 0.5 X_{j-1} + sqrt(0.75) Z_j`.
pub fn gen_covariates(n: usize, p: usize, rng: &mut impl Rng) -> Matrix {
    let innov_sd = 0.75f64.sqrt();
    let mut x = Matrix::zeros(n, p);
    for i in 0..n {
        let mut prev: f64 = rng.sample(StandardNormal);
        x.set(i, 0, prev);
        for j in 1..p {
            let z: f64 = rng.sample(StandardNormal);
            prev = 0.5 * prev + innov_sd * z;
            x.set(i, j, prev);
        }
    }
    x
}

/// Generate one dataset from the structural model.
pub fn simulate(config: &DgpConfig) -> Result<Dataset> {
    config.validate()?;
    let DgpConfig {
        n,
        p,
        delta,
        gamma,
        lambda,
        seed,
    } = *config;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let x = gen_covariates(n, p, &mut rng);
    let beta = beta_schedule(p);

    let mut y = vec![0.0; n];
    let mut d = vec![0i64; n];
    let mut m_col = vec![0.0; n];
    for i in 0..n {
        let xb: f64 = (0..p).map(|j| beta[j] * x.get(i, j)).sum();
        let u1: f64 = rng.sample(StandardNormal);
        let u2: f64 = rng.sample(StandardNormal);
        let u3: f64 = rng.sample(StandardNormal);
        let di = i64::from(xb + lambda * u2 + u1 > 0.0);
        let mi = 0.5 * di as f64 + xb + delta * u1 + u2;
        y[i] = mi + xb + gamma * di as f64 + delta * u1 + u3;
        d[i] = di;
        m_col[i] = mi;
    }

    let names = ColumnNames {
        outcome: "y".to_string(),
        treatment: "d".to_string(),
        mediators: vec!["m".to_string()],
        covariates: (1..=p).map(|j| format!("x{j}")).collect(),
    };
    Dataset::new(y, d, Matrix::from_columns(vec![m_col])?, x, names)
}

/// Summary of a replication study; mirrors the usual Monte Carlo table
/// columns (mean estimate, spread, mean SE, rejection rate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub mean_theta: f64,
    pub sd_theta: f64,
    pub mean_se: f64,
    pub rejection_rate: f64,
    pub reps_completed: usize,
    pub reps_failed: usize,
    pub mean_n_effective: f64,
    pub alpha: f64,
}

/// Run `reps` replications of an arbitrary estimator and aggregate.
///
/// Each replication receives a seed derived from `(seed, rep)`, so the
/// report is independent of worker count and execution order. Failed
/// replications are excluded and counted.
pub fn run_monte_carlo<F>(reps: usize, alpha: f64, seed: u64, estimate_rep: F) -> Result<McReport>
where
    F: Fn(usize, u64) -> Result<TestResult> + Sync,
{
    if reps == 0 {
        return Err(Error::Argument("need at least one replication".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument("alpha must be in (0, 1)".into()));
    }
    let outcomes: Vec<Result<TestResult>> = (0..reps)
        .into_par_iter()
        .map(|rep| estimate_rep(rep, mix_seed(seed, rep as u64)))
        .collect();

    let ok: Vec<&TestResult> = outcomes.iter().filter_map(|r| r.as_ref().ok()).collect();
    let reps_failed = reps - ok.len();
    if ok.is_empty() {
        return Err(Error::TestInfeasible("every replication failed".into()));
    }
    let r = ok.len() as f64;
    let mean_theta = ok.iter().map(|t| t.theta_hat).sum::<f64>() / r;
    let sd_theta = if ok.len() > 1 {
        (ok.iter()
            .map(|t| (t.theta_hat - mean_theta).powi(2))
            .sum::<f64>()
            / (r - 1.0))
            .sqrt()
    } else {
        0.0
    };
    Ok(McReport {
        mean_theta,
        sd_theta,
        mean_se: ok.iter().map(|t| t.se).sum::<f64>() / r,
        rejection_rate: ok.iter().filter(|t| t.p_value < alpha).count() as f64 / r,
        reps_completed: ok.len(),
        reps_failed,
        mean_n_effective: ok.iter().map(|t| t.n_effective as f64).sum::<f64>() / r,
        alpha,
    })
}

/// Engine parameters for the conditional-independence test inside a
/// replication study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiEngine {
    pub k_folds: usize,
    pub n_splits: usize,
    pub learner: LearnerSpec,
    pub trim: TrimRule,
    pub sidedness: Sidedness,
}

impl Default for CiEngine {
    fn default() -> Self {
        CiEngine {
            k_folds: 5,
            n_splits: 1,
            learner: LearnerSpec::default(),
            trim: TrimRule::default(),
            sidedness: Sidedness::TwoSided,
        }
    }
}

/// Replication study of the conditional-independence test on the synthetic
/// model: per replication, draw a dataset and run the full test.
pub fn run_ci_monte_carlo(
    base: &DgpConfig,
    reps: usize,
    alpha: f64,
    engine: &CiEngine,
) -> Result<McReport> {
    base.validate()?;
    let partition = TreatmentPartition::binary();
    run_monte_carlo(reps, alpha, base.seed, |_, rep_seed| {
        let data = simulate(&DgpConfig {
            seed: rep_seed,
            ..*base
        })?;
        citest::run_test(
            &data,
            &partition,
            engine.k_folds,
            engine.n_splits,
            &engine.learner,
            &engine.trim,
            mix_seed(rep_seed, 0x73706c69),
            engine.sidedness,
        )
    })
}
