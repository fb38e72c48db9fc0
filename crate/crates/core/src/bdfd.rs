//! Test of back-door versus front-door conditional means: H0 states that
//! q(d, x) = E[Y | D=d, X=x] equals the front-door functional
//! zeta(d, x) = sum_m nu(m, x) f(m | d, x) with
//! nu(m, x) = sum_d' mu(m, x, d') f(d' | x). Requires discrete treatment
//! and a single discrete mediator.

use crate::citest::{p_value_from_t, Aggregation, Sidedness, SplitResult, TestResult};
use crate::data::{make_folds, mix_seed, Dataset, FoldPlan, TrimRule};
use crate::error::{Error, Result};
use crate::lasso::{self, Family, LearnerSpec};

/// Out-of-fold nuisances for the BD-FD comparison. All probability rows
/// are renormalized after clipping: `sum_d fd_hat[d][i] = 1` and
/// `sum_m fm_hat[d][m][i] = 1` per observation.
#[derive(Debug, Clone)]
pub struct BdFdNuisances {
    /// `q_hat[d][i]`: predicted E[Y | D=d, X_i].
    pub q_hat: Vec<Vec<f64>>,
    /// `mu_hat[d][m][i]`: predicted E[Y | M=m, X_i, D=d].
    pub mu_hat: Vec<Vec<Vec<f64>>>,
    /// `fd_hat[d][i]`: predicted P(D=d | X_i).
    pub fd_hat: Vec<Vec<f64>>,
    /// `fm_hat[d][m][i]`: predicted P(M=m | D=d, X_i).
    pub fm_hat: Vec<Vec<Vec<f64>>>,
    pub fold_of: Vec<usize>,
}

impl BdFdNuisances {
    pub fn n(&self) -> usize {
        self.fold_of.len()
    }
    pub fn n_d(&self) -> usize {
        self.q_hat.len()
    }
    pub fn n_m(&self) -> usize {
        self.mu_hat[0].len()
    }

    /// Largest deviation of any probability row sum from 1.
    pub fn normalization_error(&self) -> f64 {
        let mut err = 0.0f64;
        for i in 0..self.n() {
            let sd: f64 = (0..self.n_d()).map(|d| self.fd_hat[d][i]).sum();
            err = err.max((sd - 1.0).abs());
            for d in 0..self.n_d() {
                let sm: f64 = (0..self.n_m()).map(|m| self.fm_hat[d][m][i]).sum();
                err = err.max((sm - 1.0).abs());
            }
        }
        err
    }
}

/// The mediator must be a single integer-coded column; returns the sorted
/// distinct levels and each observation's level index.
pub fn mediator_levels(data: &Dataset) -> Result<(Vec<i64>, Vec<usize>)> {
    if data.m.ncols() != 1 {
        return Err(Error::Argument(
            "the back-door/front-door test needs exactly one mediator column".into(),
        ));
    }
    let raw: Vec<i64> = data
        .m
        .col(0)
        .iter()
        .map(|&v| {
            let r = v.round();
            if (v - r).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "mediator value {v} is not integer-coded"
                )));
            }
            Ok(r as i64)
        })
        .collect::<Result<_>>()?;
    let mut levels = raw.clone();
    levels.sort_unstable();
    levels.dedup();
    if levels.len() < 2 {
        return Err(Error::Validation("mediator takes fewer than 2 values".into()));
    }
    let idx = raw
        .iter()
        .map(|v| levels.binary_search(v).unwrap())
        .collect();
    Ok((levels, idx))
}

/// Cross-fit all BD-FD nuisances. Outcome models (q and mu) use the
/// squared-loss family on covariates only; treatment and mediator
/// propensities use one-versus-rest logistic fits renormalized per
/// observation.
pub fn crossfit_bdfd_nuisances(
    data: &Dataset,
    folds: &FoldPlan,
    spec: &LearnerSpec,
) -> Result<BdFdNuisances> {
    if folds.n != data.n() {
        return Err(Error::Argument("fold plan does not cover dataset".into()));
    }
    let n = data.n();
    let n_d = data.n_levels();
    let (_, midx) = mediator_levels(data)?;
    let n_m = midx.iter().max().unwrap() + 1;

    let mu_spec = LearnerSpec {
        family: Family::SquaredLoss,
        ..spec.clone()
    };
    let p_spec = LearnerSpec {
        family: Family::Logistic,
        ..spec.clone()
    };

    let mut q_hat = vec![vec![0.0; n]; n_d];
    let mut mu_hat = vec![vec![vec![0.0; n]; n_m]; n_d];
    let mut fd_hat = vec![vec![0.0; n]; n_d];
    let mut fm_hat = vec![vec![vec![0.0; n]; n_m]; n_d];

    for k in 0..folds.k {
        let train = folds.out_of_fold_indices(k);
        let eval = folds.fold_indices(k);
        let eval_x = data.x.select_rows(&eval);
        let train_x = data.x.select_rows(&train);

        for d in 0..n_d {
            let idx_d: Vec<usize> = train
                .iter()
                .copied()
                .filter(|&i| data.d[i] == d as i64)
                .collect();
            if idx_d.len() < 2 {
                return Err(Error::FoldDegeneracy {
                    fold: k,
                    cell: d,
                    message: format!("{} training observation(s) with this treatment", idx_d.len()),
                });
            }
            let x_d = data.x.select_rows(&idx_d);
            let y_d: Vec<f64> = idx_d.iter().map(|&i| data.y[i]).collect();
            let q_model = lasso::fit(&mu_spec, &x_d, &y_d, None)?;
            let preds = lasso::predict(&q_model, &eval_x)?;
            for (pos, &i) in eval.iter().enumerate() {
                q_hat[d][i] = preds[pos];
            }

            let d_target: Vec<f64> = train.iter().map(|&i| f64::from(data.d[i] == d as i64)).collect();
            let fd_model = lasso::fit(&p_spec, &train_x, &d_target, None)?;
            let preds = lasso::predict(&fd_model, &eval_x)?;
            for (pos, &i) in eval.iter().enumerate() {
                fd_hat[d][i] = preds[pos];
            }

            for m in 0..n_m {
                let idx_dm: Vec<usize> =
                    idx_d.iter().copied().filter(|&i| midx[i] == m).collect();
                if idx_dm.len() < 2 {
                    return Err(Error::FoldDegeneracy {
                        fold: k,
                        cell: d,
                        message: format!(
                            "{} training observation(s) with treatment {d} and mediator level {m}",
                            idx_dm.len()
                        ),
                    });
                }
                let x_dm = data.x.select_rows(&idx_dm);
                let y_dm: Vec<f64> = idx_dm.iter().map(|&i| data.y[i]).collect();
                let mu_model = lasso::fit(&mu_spec, &x_dm, &y_dm, None)?;
                let preds = lasso::predict(&mu_model, &eval_x)?;
                for (pos, &i) in eval.iter().enumerate() {
                    mu_hat[d][m][i] = preds[pos];
                }

                let m_target: Vec<f64> = idx_d.iter().map(|&i| f64::from(midx[i] == m)).collect();
                let fm_model = lasso::fit(&p_spec, &x_d, &m_target, None)?;
                let preds = lasso::predict(&fm_model, &eval_x)?;
                for (pos, &i) in eval.iter().enumerate() {
                    fm_hat[d][m][i] = preds[pos];
                }
            }
        }

        // Renormalize the one-versus-rest propensities per observation.
        for &i in &eval {
            let sd: f64 = (0..n_d).map(|d| fd_hat[d][i]).sum();
            for d in 0..n_d {
                fd_hat[d][i] /= sd;
            }
            for d in 0..n_d {
                let sm: f64 = (0..n_m).map(|m| fm_hat[d][m][i]).sum();
                for m in 0..n_m {
                    fm_hat[d][m][i] /= sm;
                }
            }
        }
    }

    Ok(BdFdNuisances {
        q_hat,
        mu_hat,
        fd_hat,
        fm_hat,
        fold_of: folds.assignment.clone(),
    })
}

/// nu(m, X_i) = sum_d mu(m, X_i, d) f(d | X_i).
pub fn nested_mean(b: &BdFdNuisances, i: usize, m: usize) -> f64 {
    (0..b.n_d()).map(|d| b.mu_hat[d][m][i] * b.fd_hat[d][i]).sum()
}

/// zeta(d, X_i) = sum_m nu(m, X_i) f(m | d, X_i).
pub fn zeta(b: &BdFdNuisances, i: usize, d: usize) -> f64 {
    (0..b.n_m())
        .map(|m| nested_mean(b, i, m) * b.fm_hat[d][m][i])
        .sum()
}

/// Back-door correction (Y_i - q(d, X_i)) 1{D_i = d} / f(d | X_i).
pub fn r_term(y: f64, d_obs: usize, b: &BdFdNuisances, i: usize, d: usize) -> f64 {
    if d_obs == d {
        (y - b.q_hat[d][i]) / b.fd_hat[d][i]
    } else {
        0.0
    }
}

/// Front-door correction: reweighted outcome residual plus the
/// inverse-propensity-scaled nested-mean recentering term.
pub fn s_term(y: f64, d_obs: usize, m_obs: usize, b: &BdFdNuisances, i: usize, d: usize) -> f64 {
    let resid = (y - b.mu_hat[d_obs][m_obs][i]) * b.fm_hat[d][m_obs][i] / b.fm_hat[d_obs][m_obs][i];
    let correction = if d_obs == d {
        let recentred: f64 = (0..b.n_m())
            .map(|m| b.fm_hat[d_obs][m][i] * nested_mean(b, i, m))
            .sum();
        (nested_mean(b, i, m_obs) - recentred) / b.fd_hat[d][i]
    } else {
        0.0
    };
    resid + correction
}

/// The theta-free part of the comparison score at observation i,
/// evaluated at the observed treatment level.
pub fn score_bdfd(y: f64, d_obs: usize, m_obs: usize, b: &BdFdNuisances, i: usize) -> f64 {
    let diff = b.q_hat[d_obs][i] - zeta(b, i, d_obs);
    let corr = r_term(y, d_obs, b, i, d_obs) - s_term(y, d_obs, m_obs, b, i, d_obs);
    diff * diff + 2.0 * diff * corr + diff + corr
}

/// Estimate the comparison target from a cross-fitted (or injected)
/// nuisance bundle. Trimming drops observations whose observed-level
/// treatment or mediator propensity is extreme.
pub fn estimate_bdfd_from_bundle(
    data: &Dataset,
    bundle: &BdFdNuisances,
    trim: &TrimRule,
    sidedness: Sidedness,
) -> Result<TestResult> {
    let n = data.n();
    if bundle.n() != n {
        return Err(Error::Argument("bundle does not match dataset".into()));
    }
    let (_, midx) = mediator_levels(data)?;
    let kept: Vec<usize> = (0..n)
        .filter(|&i| {
            let d = data.d[i] as usize;
            trim.keeps(bundle.fd_hat[d][i]) && trim.keeps(bundle.fm_hat[d][midx[i]][i])
        })
        .collect();
    if kept.len() < 2 {
        return Err(Error::TestInfeasible(format!(
            "only {} observation(s) remain after trimming",
            kept.len()
        )));
    }
    let scores: Vec<f64> = kept
        .iter()
        .map(|&i| score_bdfd(data.y[i], data.d[i] as usize, midx[i], bundle, i))
        .collect();
    let n_eff = scores.len();
    let theta_hat = scores.iter().sum::<f64>() / n_eff as f64;
    let var = scores
        .iter()
        .map(|s| (s - theta_hat) * (s - theta_hat))
        .sum::<f64>()
        / n_eff as f64;
    let se = (var / n_eff as f64).sqrt();
    if !(se > 0.0) {
        return Err(Error::TestInfeasible("zero score variance".into()));
    }
    let t_stat = theta_hat / se;
    Ok(TestResult {
        theta_hat,
        se,
        t_stat,
        p_value: p_value_from_t(t_stat, sidedness),
        n,
        n_effective: n_eff,
        per_split: vec![SplitResult { theta_hat, se }],
        aggregation: Aggregation::Single,
    })
}

/// Per-treatment-level means of the fitted back-door and front-door
/// conditional means, for reporting.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LevelDiagnostics {
    pub level: usize,
    pub mean_q: f64,
    pub mean_zeta: f64,
}

pub fn level_diagnostics(b: &BdFdNuisances) -> Vec<LevelDiagnostics> {
    let n = b.n() as f64;
    (0..b.n_d())
        .map(|d| LevelDiagnostics {
            level: d,
            mean_q: b.q_hat[d].iter().sum::<f64>() / n,
            mean_zeta: (0..b.n()).map(|i| zeta(b, i, d)).sum::<f64>() / n,
        })
        .collect()
}

/// Cross-fit and estimate in one step.
pub fn estimate_bdfd(
    data: &Dataset,
    folds: &FoldPlan,
    spec: &LearnerSpec,
    trim: &TrimRule,
    sidedness: Sidedness,
) -> Result<TestResult> {
    let bundle = crossfit_bdfd_nuisances(data, folds, spec)?;
    estimate_bdfd_from_bundle(data, &bundle, trim, sidedness)
}

/// Full test over repeated independent fold plans, median-aggregated.
/// Diagnostics are taken from the first split's nuisance bundle.
pub fn run_bdfd_test_with_diagnostics(
    data: &Dataset,
    k_folds: usize,
    n_splits: usize,
    spec: &LearnerSpec,
    trim: &TrimRule,
    seed: u64,
    sidedness: Sidedness,
) -> Result<(TestResult, Vec<LevelDiagnostics>)> {
    if n_splits == 0 {
        return Err(Error::Argument("need at least one split".into()));
    }
    let mut results = Vec::with_capacity(n_splits);
    let mut diagnostics = Vec::new();
    for s in 0..n_splits {
        let folds = make_folds(data.n(), k_folds, mix_seed(seed, s as u64))?;
        let bundle = crossfit_bdfd_nuisances(data, &folds, spec)?;
        if s == 0 {
            diagnostics = level_diagnostics(&bundle);
        }
        results.push(estimate_bdfd_from_bundle(data, &bundle, trim, sidedness)?);
    }
    let result = crate::citest::aggregate_splits(&results, sidedness)?;
    Ok((result, diagnostics))
}

/// Full test over repeated independent fold plans, median-aggregated.
pub fn run_bdfd_test(
    data: &Dataset,
    k_folds: usize,
    n_splits: usize,
    spec: &LearnerSpec,
    trim: &TrimRule,
    seed: u64,
    sidedness: Sidedness,
) -> Result<TestResult> {
    run_bdfd_test_with_diagnostics(data, k_folds, n_splits, spec, trim, seed, sidedness)
        .map(|(r, _)| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{self, PopShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Hand-built bundle for one observation: 2 treatments, 2 mediators.
    fn toy_bundle() -> BdFdNuisances {
        BdFdNuisances {
            q_hat: vec![vec![1.0], vec![2.0]],
            mu_hat: vec![vec![vec![1.0], vec![3.0]], vec![vec![2.0], vec![4.0]]],
            fd_hat: vec![vec![0.5], vec![0.5]],
            fm_hat: vec![vec![vec![0.75], vec![0.25]], vec![vec![0.25], vec![0.75]]],
            fold_of: vec![0],
        }
    }

    #[test]
    fn nested_mean_arithmetic() {
        let b = toy_bundle();
        // nu(m=0) = 0.5*1 + 0.5*2 = 1.5; nu(m=1) = 0.5*3 + 0.5*4 = 3.5.
        assert!((nested_mean(&b, 0, 0) - 1.5).abs() < 1e-15);
        assert!((nested_mean(&b, 0, 1) - 3.5).abs() < 1e-15);
    }

    #[test]
    fn nested_mean_constant_in_d_passes_through() {
        let mut b = toy_bundle();
        b.mu_hat = vec![vec![vec![2.0], vec![2.0]], vec![vec![2.0], vec![2.0]]];
        assert!((nested_mean(&b, 0, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zeta_arithmetic() {
        let b = toy_bundle();
        // zeta(d=0) = 0.75*1.5 + 0.25*3.5 = 2.0; zeta(d=1) = 0.25*1.5 + 0.75*3.5.
        assert!((zeta(&b, 0, 0) - 2.0).abs() < 1e-15);
        assert!((zeta(&b, 0, 1) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn r_term_indicator_and_residual() {
        let b = toy_bundle();
        assert_eq!(r_term(5.0, 1, &b, 0, 0), 0.0);
        // (5 - q(1)) / f(1|x) = 3 / 0.5.
        assert!((r_term(5.0, 1, &b, 0, 1) - 6.0).abs() < 1e-15);
        // Perfect fit: zero.
        assert_eq!(r_term(2.0, 1, &b, 0, 1), 0.0);
    }

    #[test]
    fn s_term_collapses_for_degenerate_mediator() {
        // Single mediator level: the ratio is 1 and the bracket vanishes.
        let b = BdFdNuisances {
            q_hat: vec![vec![1.0], vec![2.0]],
            mu_hat: vec![vec![vec![1.5]], vec![vec![2.5]]],
            fd_hat: vec![vec![0.4], vec![0.6]],
            fm_hat: vec![vec![vec![1.0]], vec![vec![1.0]]],
            fold_of: vec![0],
        };
        let s = s_term(3.0, 1, 0, &b, 0, 1);
        // Only the residual survives: 3 - mu(d=1, m=0) = 0.5.
        assert!((s - 0.5).abs() < 1e-15);
    }

    #[test]
    fn score_is_constant_when_q_matches_zeta_with_zero_residuals() {
        // Consistent bundle: mu constant in d and m, q equal to it.
        let c = 2.0;
        let b = BdFdNuisances {
            q_hat: vec![vec![c], vec![c]],
            mu_hat: vec![vec![vec![c], vec![c]], vec![vec![c], vec![c]]],
            fd_hat: vec![vec![0.5], vec![0.5]],
            fm_hat: vec![vec![vec![0.6], vec![0.4]], vec![vec![0.3], vec![0.7]]],
            fold_of: vec![0],
        };
        for d in 0..2 {
            for m in 0..2 {
                assert!(score_bdfd(c, d, m, &b, 0).abs() < 1e-15);
            }
        }
    }

    fn exact_bundle(
        joint: &oracle::JointTable,
        draw: &oracle::SampleDraw,
    ) -> BdFdNuisances {
        let n = draw.dataset.n();
        let (n_d, n_m) = (joint.n_d(), joint.n_m());
        let mut b = BdFdNuisances {
            q_hat: vec![vec![0.0; n]; n_d],
            mu_hat: vec![vec![vec![0.0; n]; n_m]; n_d],
            fd_hat: vec![vec![0.0; n]; n_d],
            fm_hat: vec![vec![vec![0.0; n]; n_m]; n_d],
            fold_of: vec![0; n],
        };
        for i in 0..n {
            let x = draw.x_idx[i];
            for d in 0..n_d {
                b.q_hat[d][i] = joint.q(d, x);
                b.fd_hat[d][i] = joint.f_d_given_x(d, x);
                for m in 0..n_m {
                    b.mu_hat[d][m][i] = joint.mu(m, x, d);
                    b.fm_hat[d][m][i] = joint.f_m_given_dx(m, d, x);
                }
            }
        }
        b
    }

    #[test]
    fn exact_nuisances_recover_true_target() {
        // theta_hat with injected exact nuisances must sit within a few
        // Monte Carlo standard errors of the exact population target.
        let mut rng = ChaCha12Rng::seed_from_u64(97);
        let pop = oracle::random_population(&mut rng, PopShape::default());
        let joint = oracle::marginalize(&pop);
        let theta_star = oracle::true_theta_bar(&joint);
        let draw = oracle::sample(&pop, 40_000, 13).unwrap();
        let b = exact_bundle(&joint, &draw);
        assert!(b.normalization_error() < 1e-12);
        let r = estimate_bdfd_from_bundle(
            &draw.dataset,
            &b,
            &TrimRule::default(),
            Sidedness::TwoSided,
        )
        .unwrap();
        assert!(
            (r.theta_hat - theta_star).abs() < 3.0 * r.se,
            "theta_hat {} target {} se {}",
            r.theta_hat,
            theta_star,
            r.se
        );
    }

    #[test]
    fn learned_nuisances_accept_ti_population() {
        let mut rng = ChaCha12Rng::seed_from_u64(101);
        let pop = oracle::random_ti_population(&mut rng, PopShape::default());
        let draw = oracle::sample(&pop, 3000, 29).unwrap();
        let r = run_bdfd_test(
            &draw.dataset,
            5,
            1,
            &LearnerSpec::default(),
            &TrimRule::default(),
            77,
            Sidedness::TwoSided,
        )
        .unwrap();
        assert!(
            r.theta_hat.abs() < 4.0 * r.se,
            "theta_hat {} se {}",
            r.theta_hat,
            r.se
        );
    }

    #[test]
    fn normalization_invariant_after_crossfit() {
        let mut rng = ChaCha12Rng::seed_from_u64(103);
        let pop = oracle::random_population(&mut rng, PopShape::default());
        let draw = oracle::sample(&pop, 600, 31).unwrap();
        let folds = make_folds(600, 5, 7).unwrap();
        let b = crossfit_bdfd_nuisances(&draw.dataset, &folds, &LearnerSpec::default()).unwrap();
        assert!(b.normalization_error() < 1e-8);
    }

    #[test]
    fn non_integer_mediator_rejected() {
        let cfg = crate::sim::DgpConfig {
            n: 50,
            p: 2,
            delta: 0.0,
            gamma: 0.0,
            lambda: 0.0,
            seed: 3,
        };
        let data = crate::sim::simulate(&cfg).unwrap();
        assert!(matches!(mediator_levels(&data), Err(Error::Validation(_))));
    }
}
