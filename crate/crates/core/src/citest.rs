//! Test of conditional mean independence between treatment and outcome
//! given mediators and covariates, via doubly robust scores with
//! cross-fitted nuisances.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{apply_trim, make_folds, mix_seed, Dataset, FoldPlan, TrimRule};
use crate::error::{Error, Result};
use crate::lasso::{self, Family, LearnerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PartitionMethod {
    /// One cell per observed level with empirical probability above
    /// `min_prob`; the rest merged into the nearest retained cell.
    Discrete { min_prob: f64 },
    /// `cells` cells at empirical quantile cut points.
    Quantile { cells: usize },
}

/// Disjoint level sets covering the observed treatment support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentPartition {
    pub cells: Vec<Vec<i64>>,
    pub method: PartitionMethod,
}

impl TreatmentPartition {
    /// The canonical two-cell partition `{0}, {1}` for a binary treatment.
    pub fn binary() -> Self {
        TreatmentPartition {
            cells: vec![vec![0], vec![1]],
            method: PartitionMethod::Discrete { min_prob: 0.0 },
        }
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn is_binary(&self) -> bool {
        self.cells.len() == 2
    }

    pub fn cell_of(&self, level: i64) -> Option<usize> {
        self.cells.iter().position(|c| c.contains(&level))
    }

    /// Cell index per observation; errors on a level outside the partition.
    pub fn cell_assignment(&self, d: &[i64]) -> Result<Vec<usize>> {
        d.iter()
            .map(|&lvl| {
                self.cell_of(lvl)
                    .ok_or_else(|| Error::Partition(format!("treatment level {lvl} not in partition")))
            })
            .collect()
    }
}

pub fn partition_treatment(d: &[i64], method: PartitionMethod) -> Result<TreatmentPartition> {
    let n = d.len();
    if n == 0 {
        return Err(Error::Argument("empty treatment vector".into()));
    }
    let mut levels: Vec<i64> = d.to_vec();
    levels.sort_unstable();
    levels.dedup();
    if levels.len() < 2 {
        return Err(Error::Partition("treatment is constant".into()));
    }
    let prob_of = |lvl: i64| d.iter().filter(|&&v| v == lvl).count() as f64 / n as f64;

    let cells = match method {
        PartitionMethod::Discrete { min_prob } => {
            let retained: Vec<i64> = levels
                .iter()
                .copied()
                .filter(|&l| prob_of(l) > min_prob)
                .collect();
            if retained.len() < 2 {
                return Err(Error::Partition(format!(
                    "only {} level(s) exceed the probability floor {min_prob}",
                    retained.len()
                )));
            }
            let mut cells: Vec<Vec<i64>> = retained.iter().map(|&l| vec![l]).collect();
            for &l in &levels {
                if !retained.contains(&l) {
                    // Merge into the nearest retained cell; ties toward the
                    // smaller level.
                    let target = retained
                        .iter()
                        .copied()
                        .min_by_key(|&r| ((r - l).abs(), r))
                        .unwrap();
                    let idx = retained.iter().position(|&r| r == target).unwrap();
                    cells[idx].push(l);
                }
            }
            for c in cells.iter_mut() {
                c.sort_unstable();
            }
            cells
        }
        PartitionMethod::Quantile { cells: want } => {
            if want < 2 {
                return Err(Error::Argument("quantile partition needs at least 2 cells".into()));
            }
            // Assign each level to a bin by the empirical CDF just below it.
            let mut cells: Vec<Vec<i64>> = vec![Vec::new(); want];
            let mut cum = 0.0;
            for &l in &levels {
                let bin = ((cum * want as f64) + 1e-9).floor() as usize;
                cells[bin.min(want - 1)].push(l);
                cum += prob_of(l);
            }
            let cells: Vec<Vec<i64>> = cells.into_iter().filter(|c| !c.is_empty()).collect();
            if cells.len() < 2 {
                return Err(Error::Partition(
                    "quantile partition collapsed to fewer than 2 cells".into(),
                ));
            }
            cells
        }
    };
    Ok(TreatmentPartition { cells, method })
}

/// Out-of-fold nuisance predictions, one column set per partition cell.
#[derive(Debug, Clone)]
pub struct NuisanceBundle {
    /// `mu_in[l][i]`: predicted E[Y | M_i, X_i, D in cell l].
    pub mu_in: Vec<Vec<f64>>,
    /// `mu_out[l][i]`: predicted E[Y | M_i, X_i, D not in cell l].
    pub mu_out: Vec<Vec<f64>>,
    /// `p_cell[l][i]`: predicted P(D in cell l | M_i, X_i).
    pub p_cell: Vec<Vec<f64>>,
    pub fold_of: Vec<usize>,
}

impl NuisanceBundle {
    pub fn n(&self) -> usize {
        self.fold_of.len()
    }
}

/// Fit all nuisances with out-of-fold cross-fitting.
///
/// The outcome models use the squared-loss family, the cell-membership
/// propensities the logistic family; both inherit grid, CV and tolerance
/// settings from `spec`.
pub fn crossfit_nuisances(
    data: &Dataset,
    partition: &TreatmentPartition,
    folds: &FoldPlan,
    spec: &LearnerSpec,
) -> Result<NuisanceBundle> {
    if folds.n != data.n() {
        return Err(Error::Argument("fold plan does not cover dataset".into()));
    }
    let n = data.n();
    let l_cells = partition.n_cells();
    let cell = partition.cell_assignment(&data.d)?;
    let features = data.mx_features()?;

    let mu_spec = LearnerSpec {
        family: Family::SquaredLoss,
        ..spec.clone()
    };
    let p_spec = LearnerSpec {
        family: Family::Logistic,
        ..spec.clone()
    };

    let mut mu_in = vec![vec![0.0; n]; l_cells];
    let mut mu_out = vec![vec![0.0; n]; l_cells];
    let mut p_cell = vec![vec![0.0; n]; l_cells];

    for k in 0..folds.k {
        let train = folds.out_of_fold_indices(k);
        let eval = folds.fold_indices(k);
        let eval_feats = features.select_rows(&eval);

        let mut in_models = Vec::with_capacity(l_cells);
        for l in 0..l_cells {
            let idx: Vec<usize> = train.iter().copied().filter(|&i| cell[i] == l).collect();
            if idx.len() < 2 {
                return Err(Error::FoldDegeneracy {
                    fold: k,
                    cell: l,
                    message: format!("{} training observation(s) in cell", idx.len()),
                });
            }
            let feats = features.select_rows(&idx);
            let y: Vec<f64> = idx.iter().map(|&i| data.y[i]).collect();
            in_models.push(lasso::fit(&mu_spec, &feats, &y, None)?);
        }
        for (l, model) in in_models.iter().enumerate() {
            let preds = lasso::predict(model, &eval_feats)?;
            for (pos, &i) in eval.iter().enumerate() {
                mu_in[l][i] = preds[pos];
            }
        }
        if l_cells == 2 {
            // The complement of one cell is exactly the other.
            for (pos, &i) in eval.iter().enumerate() {
                let _ = pos;
                mu_out[0][i] = mu_in[1][i];
                mu_out[1][i] = mu_in[0][i];
            }
        } else {
            for l in 0..l_cells {
                let idx: Vec<usize> = train.iter().copied().filter(|&i| cell[i] != l).collect();
                if idx.len() < 2 {
                    return Err(Error::FoldDegeneracy {
                        fold: k,
                        cell: l,
                        message: "complement training subset too small".into(),
                    });
                }
                let feats = features.select_rows(&idx);
                let y: Vec<f64> = idx.iter().map(|&i| data.y[i]).collect();
                let model = lasso::fit(&mu_spec, &feats, &y, None)?;
                let preds = lasso::predict(&model, &eval_feats)?;
                for (pos, &i) in eval.iter().enumerate() {
                    mu_out[l][i] = preds[pos];
                }
            }
        }

        // Cell-membership propensities.
        let train_feats = features.select_rows(&train);
        if l_cells == 2 {
            let target: Vec<f64> = train.iter().map(|&i| f64::from(cell[i] == 1)).collect();
            if target.iter().all(|&t| t == target[0]) {
                return Err(Error::FoldDegeneracy {
                    fold: k,
                    cell: 1,
                    message: "constant cell-membership target".into(),
                });
            }
            let model = lasso::fit(&p_spec, &train_feats, &target, None)?;
            let preds = lasso::predict(&model, &eval_feats)?;
            for (pos, &i) in eval.iter().enumerate() {
                p_cell[1][i] = preds[pos];
                p_cell[0][i] = 1.0 - preds[pos];
            }
        } else {
            for l in 0..l_cells {
                let target: Vec<f64> = train.iter().map(|&i| f64::from(cell[i] == l)).collect();
                if target.iter().all(|&t| t == target[0]) {
                    return Err(Error::FoldDegeneracy {
                        fold: k,
                        cell: l,
                        message: "constant cell-membership target".into(),
                    });
                }
                let model = lasso::fit(&p_spec, &train_feats, &target, None)?;
                let preds = lasso::predict(&model, &eval_feats)?;
                for (pos, &i) in eval.iter().enumerate() {
                    p_cell[l][i] = preds[pos];
                }
            }
        }
    }

    Ok(NuisanceBundle {
        mu_in,
        mu_out,
        p_cell,
        fold_of: folds.assignment.clone(),
    })
}

/// DR score for a binary treatment at one observation.
pub fn score_binary(y: f64, treated: bool, mu1: f64, mu0: f64, p: f64, theta: f64) -> f64 {
    let delta = mu1 - mu0;
    let r = if treated {
        (y - mu1) / p
    } else {
        -(y - mu0) / (1.0 - p)
    };
    delta * delta + 2.0 * delta * r + delta + r - theta
}

/// DR score for a multivalued treatment at one observation.
///
/// `cell` is the index of the observation's partition cell; the slices run
/// over cells.
pub fn score_multivalued(
    y: f64,
    cell: usize,
    mu_in: &[f64],
    mu_out: &[f64],
    p: &[f64],
    theta: f64,
) -> f64 {
    let mut s = -theta;
    for l in 0..mu_in.len() {
        let delta = mu_in[l] - mu_out[l];
        let r = if cell == l {
            (y - mu_in[l]) / p[l]
        } else {
            -(y - mu_out[l]) / (1.0 - p[l])
        };
        s += delta * delta + 2.0 * delta * r + delta + r;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sidedness {
    TwoSided,
    /// Upper-tailed alternative.
    OneSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub theta_hat: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Single,
    MedianOfSplits,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestResult {
    pub theta_hat: f64,
    pub se: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub n: usize,
    pub n_effective: usize,
    pub per_split: Vec<SplitResult>,
    pub aggregation: Aggregation,
}

pub fn p_value_from_t(t: f64, sidedness: Sidedness) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    match sidedness {
        Sidedness::TwoSided => 2.0 * normal.cdf(-t.abs()),
        Sidedness::OneSided => 1.0 - normal.cdf(t),
    }
}

/// Estimate the target parameter from a cross-fitted bundle.
///
/// The score is linear in theta, so the estimate is the mean of the
/// theta-free part over untrimmed observations.
pub fn estimate_from_bundle(
    data: &Dataset,
    partition: &TreatmentPartition,
    bundle: &NuisanceBundle,
    trim: &TrimRule,
    sidedness: Sidedness,
) -> Result<TestResult> {
    let n = data.n();
    if bundle.n() != n {
        return Err(Error::Argument("bundle does not match dataset".into()));
    }
    let cell = partition.cell_assignment(&data.d)?;
    let binary = partition.is_binary();

    // Trimming on out-of-fold propensities: binary uses the treated-cell
    // propensity, multivalued drops an observation when any cell propensity
    // is extreme.
    let kept: Vec<usize> = if binary {
        let (kept, _) = apply_trim(&bundle.p_cell[1], trim)?;
        kept
    } else {
        (0..n)
            .filter(|&i| (0..partition.n_cells()).all(|l| trim.keeps(bundle.p_cell[l][i])))
            .collect()
    };
    if kept.len() < 2 {
        return Err(Error::TestInfeasible(format!(
            "only {} observation(s) remain after trimming",
            kept.len()
        )));
    }

    let scores: Vec<f64> = kept
        .iter()
        .map(|&i| {
            if binary {
                score_binary(
                    data.y[i],
                    cell[i] == 1,
                    bundle.mu_in[1][i],
                    bundle.mu_in[0][i],
                    bundle.p_cell[1][i],
                    0.0,
                )
            } else {
                let mu_in: Vec<f64> = bundle.mu_in.iter().map(|c| c[i]).collect();
                let mu_out: Vec<f64> = bundle.mu_out.iter().map(|c| c[i]).collect();
                let p: Vec<f64> = bundle.p_cell.iter().map(|c| c[i]).collect();
                score_multivalued(data.y[i], cell[i], &mu_in, &mu_out, &p, 0.0)
            }
        })
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

/// Cross-fit nuisances and estimate in one step.
pub fn estimate(
    data: &Dataset,
    partition: &TreatmentPartition,
    folds: &FoldPlan,
    spec: &LearnerSpec,
    trim: &TrimRule,
    sidedness: Sidedness,
) -> Result<TestResult> {
    let bundle = crossfit_nuisances(data, partition, folds, spec)?;
    estimate_from_bundle(data, partition, &bundle, trim, sidedness)
}

/// Median-of-splits aggregation over repeated independent fold plans.
pub fn aggregate_splits(results: &[TestResult], sidedness: Sidedness) -> Result<TestResult> {
    if results.is_empty() {
        return Err(Error::Argument("no split results to aggregate".into()));
    }
    let n = results[0].n;
    if results.iter().any(|r| r.n != n) {
        return Err(Error::Argument("split results from mixed configurations".into()));
    }
    if results.len() == 1 {
        return Ok(results[0].clone());
    }
    let thetas: Vec<f64> = results.iter().map(|r| r.theta_hat).collect();
    let theta_agg = median(&thetas);
    let ses: Vec<f64> = results
        .iter()
        .map(|r| (r.se * r.se + (r.theta_hat - theta_agg).powi(2)).sqrt())
        .collect();
    let se_agg = median(&ses);
    let t_stat = theta_agg / se_agg;
    Ok(TestResult {
        theta_hat: theta_agg,
        se: se_agg,
        t_stat,
        p_value: p_value_from_t(t_stat, sidedness),
        n,
        n_effective: results.iter().map(|r| r.n_effective).min().unwrap_or(0),
        per_split: results
            .iter()
            .map(|r| SplitResult {
                theta_hat: r.theta_hat,
                se: r.se,
            })
            .collect(),
        aggregation: Aggregation::MedianOfSplits,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Full test run: `n_splits` independent fold plans, aggregated by median.
#[allow(clippy::too_many_arguments)]
pub fn run_test(
    data: &Dataset,
    partition: &TreatmentPartition,
    k_folds: usize,
    n_splits: usize,
    spec: &LearnerSpec,
    trim: &TrimRule,
    seed: u64,
    sidedness: Sidedness,
) -> Result<TestResult> {
    if n_splits == 0 {
        return Err(Error::Argument("need at least one split".into()));
    }
    let mut results = Vec::with_capacity(n_splits);
    for s in 0..n_splits {
        let folds = make_folds(data.n(), k_folds, mix_seed(seed, s as u64))?;
        results.push(estimate(data, partition, &folds, spec, trim, sidedness)?);
    }
    aggregate_splits(&results, sidedness)
}

/// Least-squares quadratic fit `a + b x + c x^2`; returns `(a, b, c)`.
pub fn fit_quadratic(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::Argument("quadratic fit needs at least 3 points".into()));
    }
    // Normal equations for the 3-parameter model.
    let n = xs.len() as f64;
    let (mut sx, mut sx2, mut sx3, mut sx4) = (0.0, 0.0, 0.0, 0.0);
    let (mut sy, mut sxy, mut sx2y) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let x2 = x * x;
        sx += x;
        sx2 += x2;
        sx3 += x2 * x;
        sx4 += x2 * x2;
        sy += y;
        sxy += x * y;
        sx2y += x2 * y;
    }
    let a_mat = [[n, sx, sx2], [sx, sx2, sx3], [sx2, sx3, sx4]];
    let rhs = [sy, sxy, sx2y];
    solve3(a_mat, rhs).ok_or_else(|| Error::Argument("singular quadratic fit".into()))
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<(f64, f64, f64)> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[pivot][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in 0..3 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..3 {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    Some((b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2]))
}

/// Sample-based orthogonality probe for the binary-treatment score.
///
/// Evaluates the mean score at perturbed nuisances `mu + eps * h`,
/// `p + eps * h_p` over the supplied observations and fits a quadratic in
/// `eps`. The linear coefficient should vanish for a Neyman-orthogonal
/// score at the true nuisances.
#[allow(clippy::too_many_arguments)]
pub struct ProbeInput<'a> {
    pub y: &'a [f64],
    pub treated: &'a [bool],
    pub mu1: &'a [f64],
    pub mu0: &'a [f64],
    pub p: &'a [f64],
    pub theta_star: f64,
    pub dmu1: &'a [f64],
    pub dmu0: &'a [f64],
    pub dp: &'a [f64],
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub eps: Vec<f64>,
    pub mean_score: Vec<f64>,
    pub intercept: f64,
    pub linear: f64,
    pub quadratic: f64,
}

pub fn orthogonality_probe(input: &ProbeInput<'_>, eps_grid: &[f64]) -> Result<ProbeReport> {
    let n = input.y.len();
    let mut means = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let mut acc = 0.0;
        for i in 0..n {
            let p = (input.p[i] + eps * input.dp[i]).clamp(1e-4, 1.0 - 1e-4);
            acc += score_binary(
                input.y[i],
                input.treated[i],
                input.mu1[i] + eps * input.dmu1[i],
                input.mu0[i] + eps * input.dmu0[i],
                p,
                input.theta_star,
            );
        }
        means.push(acc / n as f64);
    }
    let (a, b, c) = fit_quadratic(eps_grid, &means)?;
    Ok(ProbeReport {
        eps: eps_grid.to_vec(),
        mean_score: means,
        intercept: a,
        linear: b,
        quadratic: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn binary_partition_trivial() {
        let d = vec![0, 1, 0, 1, 1];
        let p = partition_treatment(&d, PartitionMethod::Discrete { min_prob: 0.05 }).unwrap();
        assert_eq!(p.cells, vec![vec![0], vec![1]]);
    }

    #[test]
    fn quantile_median_split() {
        let d = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let p = partition_treatment(&d, PartitionMethod::Quantile { cells: 2 }).unwrap();
        assert_eq!(p.cells, vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn discrete_merge_leaves_single_cell_error() {
        // P = (0.94, 0.03, 0.03) with floor 0.05: only level 0 retained.
        let mut d = vec![0i64; 94];
        d.extend(vec![1i64; 3]);
        d.extend(vec![2i64; 3]);
        let err = partition_treatment(&d, PartitionMethod::Discrete { min_prob: 0.05 }).unwrap_err();
        assert!(matches!(err, Error::Partition(_)));
    }

    #[test]
    fn discrete_merge_rule_hand_enumeration() {
        // P = (0.48, 0.48, 0.04): level 2 merges into its nearest retained
        // neighbor, level 1.
        let mut d = vec![0i64; 48];
        d.extend(vec![1i64; 48]);
        d.extend(vec![2i64; 4]);
        let p = partition_treatment(&d, PartitionMethod::Discrete { min_prob: 0.05 }).unwrap();
        assert_eq!(p.cells, vec![vec![0], vec![1, 2]]);
    }

    #[test]
    fn score_binary_perfect_fit_vanishes() {
        assert_eq!(score_binary(2.5, true, 2.5, 2.5, 0.4, 0.0), 0.0);
    }

    #[test]
    fn score_binary_plugin_cancellation() {
        // Constant contrast c with zero residuals and theta = c^2 + c.
        let c = 0.7;
        let y = 1.3;
        let s = score_binary(y, true, y, y - c, 0.5, c * c + c);
        assert!(s.abs() < 1e-12, "{s}");
    }

    #[test]
    fn score_theta_linearity() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..50 {
            let y = rng.gen::<f64>() * 4.0 - 2.0;
            let mu1 = rng.gen::<f64>();
            let mu0 = rng.gen::<f64>();
            let p = 0.2 + 0.6 * rng.gen::<f64>();
            let theta = rng.gen::<f64>();
            let t = rng.gen::<bool>();
            let a = score_binary(y, t, mu1, mu0, p, theta);
            let b = score_binary(y, t, mu1, mu0, p, 0.0) - theta;
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn multivalued_two_cell_expansion_matches_binary_terms() {
        // Expanding the two-cell score: term(l=1) + term(l=0) - theta
        // = 2*delta^2 + 4*delta*r - theta with the l=1 contrast and residual.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..200 {
            let y = rng.gen::<f64>() * 4.0 - 2.0;
            let mu1 = rng.gen::<f64>();
            let mu0 = rng.gen::<f64>();
            let p1 = 0.1 + 0.8 * rng.gen::<f64>();
            let theta = rng.gen::<f64>();
            let cell = usize::from(rng.gen::<bool>());
            let got = score_multivalued(
                y,
                cell,
                &[mu0, mu1],
                &[mu1, mu0],
                &[1.0 - p1, p1],
                theta,
            );
            let delta = mu1 - mu0;
            let r = if cell == 1 {
                (y - mu1) / p1
            } else {
                -(y - mu0) / (1.0 - p1)
            };
            let expect = 2.0 * delta * delta + 4.0 * delta * r - theta;
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn multivalued_all_equal_mu_zero_residuals() {
        let y = 1.0;
        let s = score_multivalued(y, 0, &[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0], &[0.3, 0.3, 0.4], 0.0);
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn aggregate_single_passthrough() {
        let r = TestResult {
            theta_hat: 0.3,
            se: 0.1,
            t_stat: 3.0,
            p_value: 0.0027,
            n: 100,
            n_effective: 95,
            per_split: vec![SplitResult {
                theta_hat: 0.3,
                se: 0.1,
            }],
            aggregation: Aggregation::Single,
        };
        let agg = aggregate_splits(&[r.clone()], Sidedness::TwoSided).unwrap();
        assert_eq!(agg.theta_hat, r.theta_hat);
        assert_eq!(agg.se, r.se);
    }

    #[test]
    fn aggregate_identical_results_is_identity() {
        let r = TestResult {
            theta_hat: 0.3,
            se: 0.1,
            t_stat: 3.0,
            p_value: 0.0027,
            n: 100,
            n_effective: 95,
            per_split: vec![],
            aggregation: Aggregation::Single,
        };
        let agg = aggregate_splits(&[r.clone(), r.clone(), r.clone()], Sidedness::TwoSided).unwrap();
        assert!((agg.theta_hat - 0.3).abs() < 1e-15);
        assert!((agg.se - 0.1).abs() < 1e-15);
    }

    #[test]
    fn aggregate_median_formula_hand_check() {
        let mk = |theta: f64| TestResult {
            theta_hat: theta,
            se: 1.0,
            t_stat: theta,
            p_value: 0.5,
            n: 10,
            n_effective: 10,
            per_split: vec![],
            aggregation: Aggregation::Single,
        };
        let agg =
            aggregate_splits(&[mk(1.0), mk(2.0), mk(3.0)], Sidedness::TwoSided).unwrap();
        assert!((agg.theta_hat - 2.0).abs() < 1e-15);
        assert!((agg.se - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn aggregate_mixed_n_rejected() {
        let mk = |n: usize| TestResult {
            theta_hat: 0.0,
            se: 1.0,
            t_stat: 0.0,
            p_value: 1.0,
            n,
            n_effective: n,
            per_split: vec![],
            aggregation: Aggregation::Single,
        };
        assert!(matches!(
            aggregate_splits(&[mk(10), mk(11)], Sidedness::TwoSided),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn quadratic_fit_recovers_coefficients() {
        let xs: Vec<f64> = (0..9).map(|i| -0.2 + 0.05 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| 1.5 - 0.3 * x + 2.0 * x * x).collect();
        let (a, b, c) = fit_quadratic(&xs, &ys).unwrap();
        assert!((a - 1.5).abs() < 1e-10);
        assert!((b + 0.3).abs() < 1e-10);
        assert!((c - 2.0).abs() < 1e-9);
    }
}
