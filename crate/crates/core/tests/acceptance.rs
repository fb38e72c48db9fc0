//! Acceptance gate: eleven end-to-end criteria with pinned tolerances.
//! Each test prints one machine-readable pass/fail line. The Monte Carlo
//! criteria (1-5) run the full estimation pipeline at desk scale (p = 50,
//! a shortened penalty grid and 5 CV folds) and take tens of minutes on a
//! single core.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use fullmed::bdfd;
use fullmed::citest::{self, NuisanceBundle, Sidedness, TreatmentPartition};
use fullmed::dag;
use fullmed::data::{Matrix, TrimRule};
use fullmed::lasso::{self, Family, LambdaGrid, LearnerSpec};
use fullmed::oracle::{self, JointTable, PopShape, SampleDraw};
use fullmed::sim::{self, CiEngine, DgpConfig};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {:02} {}: {} ({})",
        id,
        name,
        if pass { "PASS" } else { "FAIL" },
        detail
    );
    assert!(pass, "criterion {id} {name}: {detail}");
}

/// Desk-scale engine: full pipeline, shortened penalty search.
fn desk_engine() -> CiEngine {
    CiEngine {
        learner: LearnerSpec {
            cv_folds: 5,
            lambda_grid: LambdaGrid::Auto { len: 40 },
            ..LearnerSpec::default()
        },
        ..CiEngine::default()
    }
}

fn dgp(n: usize, delta: f64, gamma: f64, lambda: f64, seed: u64) -> DgpConfig {
    DgpConfig {
        n,
        p: 50,
        delta,
        gamma,
        lambda,
        seed,
    }
}

#[test]
fn criterion_01_size_under_joint_null() {
    let r = sim::run_ci_monte_carlo(&dgp(1000, 0.0, 0.0, 0.0, 101), 500, 0.05, &desk_engine())
        .unwrap();
    let pass = r.rejection_rate >= 0.02 && r.rejection_rate <= 0.09;
    report(
        1,
        "size-under-joint-null",
        pass,
        &format!(
            "rejection {:.3} in [0.02, 0.09], mean theta {:.3}, {} reps",
            r.rejection_rate, r.mean_theta, r.reps_completed
        ),
    );
}

#[test]
fn criterion_02_power_against_mediator_endogeneity() {
    let r = sim::run_ci_monte_carlo(&dgp(1000, 0.25, 0.0, 0.0, 102), 300, 0.05, &desk_engine())
        .unwrap();
    let pass = r.rejection_rate >= 0.90 && r.mean_theta >= 0.45 && r.mean_theta <= 0.70;
    report(
        2,
        "power-mediator-endogeneity",
        pass,
        &format!(
            "rejection {:.3} >= 0.90, mean theta {:.3} in [0.45, 0.70]",
            r.rejection_rate, r.mean_theta
        ),
    );
}

#[test]
fn criterion_03_power_against_direct_effects() {
    let large =
        sim::run_ci_monte_carlo(&dgp(4000, 0.0, 0.2, 0.0, 103), 200, 0.05, &desk_engine())
            .unwrap();
    let small =
        sim::run_ci_monte_carlo(&dgp(1000, 0.0, 0.2, 0.0, 113), 200, 0.05, &desk_engine())
            .unwrap();
    let pass = large.rejection_rate >= 0.95
        && small.rejection_rate >= 0.30
        && small.rejection_rate <= 0.75;
    report(
        3,
        "power-direct-effect",
        pass,
        &format!(
            "rejection {:.3} >= 0.95 at n=4000; {:.3} in [0.30, 0.75] at n=1000",
            large.rejection_rate, small.rejection_rate
        ),
    );
}

#[test]
fn criterion_04_blind_to_treatment_mediator_confounding() {
    let r = sim::run_ci_monte_carlo(&dgp(1000, 0.0, 0.0, 0.25, 104), 500, 0.05, &desk_engine())
        .unwrap();
    let pass = r.rejection_rate <= 0.09;
    report(
        4,
        "null-with-dm-confounding",
        pass,
        &format!("rejection {:.3} <= 0.09", r.rejection_rate),
    );
}

#[test]
fn criterion_05_retained_power_under_dm_confounding() {
    let r = sim::run_ci_monte_carlo(&dgp(1000, 1.0, 0.0, 0.25, 105), 200, 0.05, &desk_engine())
        .unwrap();
    let pass = r.rejection_rate >= 0.99 && r.mean_n_effective <= 0.85 * 1000.0;
    report(
        5,
        "power-with-dm-confounding",
        pass,
        &format!(
            "rejection {:.3} >= 0.99, mean effective n {:.0} <= 850",
            r.rejection_rate, r.mean_n_effective
        ),
    );
}

#[test]
fn criterion_06_exact_orthogonality_probe() {
    // Outcome-model perturbation with exact population arithmetic: the
    // mean score is a polynomial in the perturbation size whose linear
    // term vanishes by Neyman orthogonality.
    let mut rng = ChaCha12Rng::seed_from_u64(601);
    let pop = oracle::random_population(&mut rng, PopShape::default());
    let joint = oracle::marginalize(&pop);
    let (n_m, n_x) = (joint.n_m(), joint.n_x());
    let dmu1: Vec<Vec<f64>> = (0..n_m)
        .map(|m| (0..n_x).map(|x| 0.4 + 0.3 * (m as f64) - 0.2 * (x as f64)).collect())
        .collect();
    let dmu0: Vec<Vec<f64>> = (0..n_m)
        .map(|m| (0..n_x).map(|x| -0.3 + 0.2 * ((m + x) as f64)).collect())
        .collect();
    let dp = vec![vec![0.0; n_x]; n_m];
    let eps_grid: Vec<f64> = (-4..=4).map(|k| 0.025 * k as f64).collect();
    let probe = oracle::exact_orthogonality_probe(&joint, &dmu1, &dmu0, &dp, &eps_grid).unwrap();
    let linear_contribution = probe.linear.abs() * 0.1;
    let quadratic_contribution = probe.quadratic.abs() * 0.1 * 0.1;
    let pass =
        quadratic_contribution > 1e-6 && linear_contribution <= 1e-3 * quadratic_contribution;
    report(
        6,
        "exact-orthogonality-probe",
        pass,
        &format!(
            "|linear|*0.1 = {:.3e} <= 1e-3 * quadratic*0.01 = {:.3e}",
            linear_contribution,
            1e-3 * quadratic_contribution
        ),
    );
}

fn exact_ci_bundle(joint: &JointTable, draw: &SampleDraw) -> NuisanceBundle {
    let n = draw.dataset.n();
    let mut b = NuisanceBundle {
        mu_in: vec![vec![0.0; n]; 2],
        mu_out: vec![vec![0.0; n]; 2],
        p_cell: vec![vec![0.0; n]; 2],
        fold_of: vec![0; n],
    };
    for i in 0..n {
        let (m, x) = (draw.m_idx[i], draw.x_idx[i]);
        let p1 = joint.p_treated(m, x).unwrap();
        b.p_cell[1][i] = p1;
        b.p_cell[0][i] = 1.0 - p1;
        b.mu_in[1][i] = joint.mu(m, x, 1);
        b.mu_in[0][i] = joint.mu(m, x, 0);
        b.mu_out[1][i] = b.mu_in[0][i];
        b.mu_out[0][i] = b.mu_in[1][i];
    }
    b
}

fn exact_bdfd_bundle(joint: &JointTable, draw: &SampleDraw) -> bdfd::BdFdNuisances {
    let n = draw.dataset.n();
    let (n_d, n_m) = (joint.n_d(), joint.n_m());
    let mut b = bdfd::BdFdNuisances {
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
fn criterion_07_oracle_equivalence_with_true_nuisances() {
    let mut rng = ChaCha12Rng::seed_from_u64(701);
    let pop = oracle::random_population(&mut rng, PopShape::default());
    let joint = oracle::marginalize(&pop);
    let draw = oracle::sample(&pop, 100_000, 702).unwrap();
    let partition = TreatmentPartition::binary();
    let trim = TrimRule::default();

    let ci = citest::estimate_from_bundle(
        &draw.dataset,
        &partition,
        &exact_ci_bundle(&joint, &draw),
        &trim,
        Sidedness::TwoSided,
    )
    .unwrap();
    let theta_true = oracle::true_theta(&joint, &partition).unwrap();
    let ci_dev = (ci.theta_hat - theta_true).abs();
    let ci_ok = ci_dev <= 3.0 * ci.se;

    let bd = bdfd::estimate_bdfd_from_bundle(
        &draw.dataset,
        &exact_bdfd_bundle(&joint, &draw),
        &trim,
        Sidedness::TwoSided,
    )
    .unwrap();
    let theta_bar_true = oracle::true_theta_bar(&joint);
    let bd_dev = (bd.theta_hat - theta_bar_true).abs();
    let bd_ok = bd_dev <= 3.0 * bd.se;

    report(
        7,
        "oracle-equivalence",
        ci_ok && bd_ok,
        &format!(
            "CI |{:.4} - {:.4}| <= 3*{:.4}; BDFD |{:.4} - {:.4}| <= 3*{:.4}",
            ci.theta_hat, theta_true, ci.se, bd.theta_hat, theta_bar_true, bd.se
        ),
    );
}

#[test]
fn criterion_08_theorem_verification() {
    let start = Instant::now();
    let reports = dag::verify_all(None).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let t1 = &reports[0].1;
    let t2 = &reports[1].1;
    let sanity = &reports[2].1;
    let pass = t1.counterexamples.is_empty()
        && t2.counterexamples.is_empty()
        && t1.graphs_checked == 4096
        && t2.graphs_checked == 4096
        && !sanity.counterexamples.is_empty()
        && elapsed <= 10.0;
    report(
        8,
        "graphical-theorem-verification",
        pass,
        &format!(
            "0/0 counterexamples over 4096 graphs, sanity negative found {}, {:.2} s <= 10 s",
            sanity.counterexamples.len(),
            elapsed
        ),
    );
}

#[test]
fn criterion_09_population_corpus() {
    let mut rng = ChaCha12Rng::seed_from_u64(901);
    let mut ti_cases = 0usize;
    let mut forward_violations = 0usize;
    // 100 unconstrained populations plus 100 built to satisfy the
    // conditional-independence null, so the implication is exercised on
    // a non-vacuous set.
    for k in 0..200 {
        let pop = if k < 100 {
            oracle::random_population(&mut rng, PopShape::default())
        } else {
            oracle::random_ti_population(&mut rng, PopShape::default())
        };
        let joint = oracle::marginalize(&pop);
        if oracle::check_ti(&joint).unwrap().holds {
            ti_cases += 1;
            if !oracle::check_bdfd(&joint).unwrap().holds {
                forward_violations += 1;
            }
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(902);
    let mut bdfd_cases = 0usize;
    let mut reverse_violations = 0usize;
    for k in 0..200 {
        // Half exact nulls, half with a treatment-level deviation that
        // breaks both properties; the implication must never fail.
        let dev = if k % 2 == 0 { 0.0 } else { 0.1 };
        let pop = oracle::random_separable_population(&mut rng, PopShape::default(), dev);
        let joint = oracle::marginalize(&pop);
        if oracle::check_bdfd(&joint).unwrap().holds {
            bdfd_cases += 1;
            if !oracle::check_ti(&joint).unwrap().holds {
                reverse_violations += 1;
            }
        }
    }

    let pass = ti_cases >= 100
        && forward_violations == 0
        && bdfd_cases >= 50
        && reverse_violations == 0;
    report(
        9,
        "population-corpus",
        pass,
        &format!(
            "TI=>BDFD: 0 violations on {ti_cases} TI-true pops; \
             BDFD=>TI (separable): 0 violations on {bdfd_cases} BDFD-true pops"
        ),
    );
}

#[test]
fn criterion_10_bdfd_null_behavior() {
    let mut rng = ChaCha12Rng::seed_from_u64(1001);
    let pop = oracle::random_ti_population(&mut rng, PopShape::default());
    let spec = LearnerSpec {
        cv_folds: 5,
        lambda_grid: LambdaGrid::Auto { len: 40 },
        ..LearnerSpec::default()
    };
    let trim = TrimRule::default();
    let mut accepted = 0usize;
    let runs = 100usize;
    for run in 0..runs {
        let draw = oracle::sample(&pop, 5000, 7000 + run as u64).unwrap();
        let r = bdfd::run_bdfd_test(
            &draw.dataset,
            5,
            1,
            &spec,
            &trim,
            8000 + run as u64,
            Sidedness::TwoSided,
        )
        .unwrap();
        if r.p_value > 0.05 {
            accepted += 1;
        }
    }
    let pass = accepted >= 90;
    report(
        10,
        "bdfd-null-acceptance",
        pass,
        &format!("p > 0.05 in {accepted}/{runs} runs (need >= 90)"),
    );
}

/// Nested grid search for the penalized least-squares minimum: the
/// intercept is profiled out in closed form, the coefficients refined
/// over shrinking boxes.
fn grid_search_ls(x: &Matrix, y: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let n = x.nrows();
    let p = x.ncols();
    let objective = |beta: &[f64]| -> f64 {
        let mut resid: Vec<f64> = y.to_vec();
        for j in 0..p {
            let col = x.col(j);
            for i in 0..n {
                resid[i] -= beta[j] * col[i];
            }
        }
        let b0 = resid.iter().sum::<f64>() / n as f64;
        let sse: f64 = resid.iter().map(|r| (r - b0) * (r - b0)).sum();
        sse / (2.0 * n as f64) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    };
    let mut center = vec![0.0; p];
    let mut half_width = 4.0f64;
    for _ in 0..8 {
        let mut best = (f64::INFINITY, center.clone());
        let steps = 16i64;
        let mut beta = vec![0.0; p];
        let mut counters = vec![-steps; p];
        loop {
            for j in 0..p {
                beta[j] = center[j] + counters[j] as f64 * half_width / steps as f64;
            }
            let v = objective(&beta);
            if v < best.0 {
                best = (v, beta.clone());
            }
            // Odometer over the p-dimensional grid.
            let mut j = 0;
            loop {
                if j == p {
                    break;
                }
                counters[j] += 1;
                if counters[j] <= steps {
                    break;
                }
                counters[j] = -steps;
                j += 1;
            }
            if j == p {
                break;
            }
        }
        center = best.1;
        half_width /= steps as f64 / 2.0;
    }
    let mut resid: Vec<f64> = y.to_vec();
    for j in 0..p {
        let col = x.col(j);
        for i in 0..n {
            resid[i] -= center[j] * col[i];
        }
    }
    let b0 = resid.iter().sum::<f64>() / n as f64;
    (b0, center)
}

#[test]
fn criterion_11_learner_matches_grid_search_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(1101);
    let mut max_dev = 0.0f64;
    let mut max_kkt = 0.0f64;
    for problem in 0..20 {
        use rand::Rng;
        let n = 4 + (problem % 5);
        let p = 1 + (problem % 2);
        let cols: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let x = Matrix::from_columns(cols).unwrap();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lambda = rng.gen_range(0.01..0.5);

        let spec = LearnerSpec {
            family: Family::SquaredLoss,
            lambda_grid: LambdaGrid::Explicit(vec![lambda]),
            standardize: false,
            tol: 1e-12,
            ..LearnerSpec::default()
        };
        let model = lasso::fit(&spec, &x, &y, None).unwrap();
        let (b0, beta) = grid_search_ls(&x, &y, lambda);
        let mut dev = (model.intercept - b0).abs();
        for j in 0..p {
            dev = dev.max((model.coefficients[j] - beta[j]).abs());
        }
        max_dev = max_dev.max(dev);
        max_kkt = max_kkt.max(model.kkt_violation);
    }
    let pass = max_dev <= 1e-4 && max_kkt <= 1e-6;
    report(
        11,
        "learner-vs-grid-search",
        pass,
        &format!("max coefficient deviation {max_dev:.2e} <= 1e-4, max KKT violation {max_kkt:.2e}"),
    );
}
