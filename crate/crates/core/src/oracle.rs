//! Exact computation on small discrete structural models: ground-truth
//! causal effects, exact checks of conditional independence (TI) and of
//! back-door/front-door equivalence (BDFD), separability tests, witness
//! search for BDFD-without-TI, and exact target parameters for the
//! sample-level tests.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::citest::{fit_quadratic, score_binary, ProbeReport, TreatmentPartition};
use crate::data::{ColumnNames, Dataset, Matrix};
use crate::error::{Error, Result};

/// Deviations below this are floating-point noise; a condition "holds".
pub const HOLDS_TOL: f64 = 1e-9;
/// Deviations above this are genuine violations; a condition "fails".
pub const FAILS_TOL: f64 = 1e-2;

const MAX_SUPPORT: usize = 4;

/// A finite structural model over outcome Y, treatment D, mediator M,
/// covariate X, and a latent variable U.
///
/// Kernels are indexed `p_d[x][u][d]`, `p_m[d][x][u][m]`,
/// `p_y[d][m][x][u][y]`. The outcome support carries real values
/// (`y_values`); D, M, X, U are pure level indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePopulation {
    pub y_values: Vec<f64>,
    pub p_x: Vec<f64>,
    pub p_u: Vec<f64>,
    pub p_d: Vec<Vec<Vec<f64>>>,
    pub p_m: Vec<Vec<Vec<Vec<f64>>>>,
    pub p_y: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
}

fn check_simplex(row: &[f64], what: &str) -> Result<()> {
    if row.is_empty() || row.len() > MAX_SUPPORT {
        return Err(Error::Validation(format!(
            "{what}: support size {} outside 1..={MAX_SUPPORT}",
            row.len()
        )));
    }
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Validation(format!("{what}: negative or non-finite probability")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::Validation(format!("{what}: row sums to {s}, not 1")));
    }
    Ok(())
}

impl DiscretePopulation {
    pub fn n_y(&self) -> usize {
        self.y_values.len()
    }
    pub fn n_d(&self) -> usize {
        self.p_m.len()
    }
    pub fn n_m(&self) -> usize {
        self.p_y[0].len()
    }
    pub fn n_x(&self) -> usize {
        self.p_x.len()
    }
    pub fn n_u(&self) -> usize {
        self.p_u.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_simplex(&self.p_x, "P(X)")?;
        check_simplex(&self.p_u, "P(U)")?;
        let (nx, nu) = (self.n_x(), self.n_u());
        let nd = self.n_d();
        let nm = self.n_m();
        let ny = self.n_y();
        if ny > MAX_SUPPORT || nd > MAX_SUPPORT || nm > MAX_SUPPORT {
            return Err(Error::Validation("support size exceeds cap".into()));
        }
        if self.p_d.len() != nx || self.p_d.iter().any(|r| r.len() != nu) {
            return Err(Error::Validation("P(D|X,U) shape mismatch".into()));
        }
        for (x, row_x) in self.p_d.iter().enumerate() {
            for (u, row) in row_x.iter().enumerate() {
                if row.len() != nd {
                    return Err(Error::Validation("P(D|X,U) level count mismatch".into()));
                }
                check_simplex(row, &format!("P(D|X={x},U={u})"))?;
            }
        }
        if self.p_m.iter().any(|r| r.len() != nx) {
            return Err(Error::Validation("P(M|D,X,U) shape mismatch".into()));
        }
        for (d, rd) in self.p_m.iter().enumerate() {
            for (x, rx) in rd.iter().enumerate() {
                if rx.len() != nu {
                    return Err(Error::Validation("P(M|D,X,U) shape mismatch".into()));
                }
                for (u, row) in rx.iter().enumerate() {
                    if row.len() != nm {
                        return Err(Error::Validation("P(M|D,X,U) level count mismatch".into()));
                    }
                    check_simplex(row, &format!("P(M|D={d},X={x},U={u})"))?;
                }
            }
        }
        if self.p_y.len() != nd {
            return Err(Error::Validation("P(Y|D,M,X,U) shape mismatch".into()));
        }
        for (d, rd) in self.p_y.iter().enumerate() {
            if rd.len() != nm {
                return Err(Error::Validation("P(Y|D,M,X,U) shape mismatch".into()));
            }
            for (m, rm) in rd.iter().enumerate() {
                if rm.len() != nx || rm.iter().any(|r| r.len() != nu) {
                    return Err(Error::Validation("P(Y|D,M,X,U) shape mismatch".into()));
                }
                for (x, rx) in rm.iter().enumerate() {
                    for (u, row) in rx.iter().enumerate() {
                        if row.len() != ny {
                            return Err(Error::Validation("P(Y|D,M,X,U) level count mismatch".into()));
                        }
                        check_simplex(row, &format!("P(Y|D={d},M={m},X={x},U={u})"))?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let pop: DiscretePopulation = serde_json::from_str(text)
            .map_err(|e| Error::Validation(format!("population file: {e}")))?;
        pop.validate()?;
        Ok(pop)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("population serializes")
    }

    /// E[Y(d, m)]: intervene on both treatment and mediator.
    pub fn mean_po_dm(&self, d: usize, m: usize) -> f64 {
        let mut acc = 0.0;
        for (x, &px) in self.p_x.iter().enumerate() {
            for (u, &pu) in self.p_u.iter().enumerate() {
                let ey: f64 = self.p_y[d][m][x][u]
                    .iter()
                    .zip(&self.y_values)
                    .map(|(&p, &y)| p * y)
                    .sum();
                acc += px * pu * ey;
            }
        }
        acc
    }

    /// E[Y(d, M(d_m))]: treatment fixed at `d`, mediator drawn from its
    /// distribution under treatment `d_m`.
    pub fn mean_po_nested(&self, d: usize, d_m: usize) -> f64 {
        let mut acc = 0.0;
        for (x, &px) in self.p_x.iter().enumerate() {
            for (u, &pu) in self.p_u.iter().enumerate() {
                for (m, &pm) in self.p_m[d_m][x][u].iter().enumerate() {
                    let ey: f64 = self.p_y[d][m][x][u]
                        .iter()
                        .zip(&self.y_values)
                        .map(|(&p, &y)| p * y)
                        .sum();
                    acc += px * pu * pm * ey;
                }
            }
        }
        acc
    }
}

/// Average, controlled direct, natural direct, and natural indirect
/// effects for the 1-versus-0 treatment contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub ate: f64,
    /// `cde[m]` = E[Y(1,m) - Y(0,m)].
    pub cde: Vec<f64>,
    /// `nde[d]` = E[Y(1,M(d)) - Y(0,M(d))].
    pub nde: [f64; 2],
    /// `nie[d]` = E[Y(d,M(1)) - Y(d,M(0))].
    pub nie: [f64; 2],
}

pub fn effects(pop: &DiscretePopulation) -> Result<EffectReport> {
    if pop.n_d() < 2 {
        return Err(Error::Argument("effects need at least 2 treatment levels".into()));
    }
    let cde = (0..pop.n_m())
        .map(|m| pop.mean_po_dm(1, m) - pop.mean_po_dm(0, m))
        .collect();
    let nde = [
        pop.mean_po_nested(1, 0) - pop.mean_po_nested(0, 0),
        pop.mean_po_nested(1, 1) - pop.mean_po_nested(0, 1),
    ];
    let nie = [
        pop.mean_po_nested(0, 1) - pop.mean_po_nested(0, 0),
        pop.mean_po_nested(1, 1) - pop.mean_po_nested(1, 0),
    ];
    Ok(EffectReport {
        ate: pop.mean_po_nested(1, 1) - pop.mean_po_nested(0, 0),
        cde,
        nde,
        nie,
    })
}

/// Observational joint distribution P(Y, D, M, X), indexed `p[y][d][m][x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    pub y_values: Vec<f64>,
    pub p: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Exhaustive sum over the latent variable.
pub fn marginalize(pop: &DiscretePopulation) -> JointTable {
    let (ny, nd, nm, nx, nu) = (pop.n_y(), pop.n_d(), pop.n_m(), pop.n_x(), pop.n_u());
    let mut p = vec![vec![vec![vec![0.0; nx]; nm]; nd]; ny];
    for x in 0..nx {
        for u in 0..nu {
            let base = pop.p_x[x] * pop.p_u[u];
            for d in 0..nd {
                let pd = pop.p_d[x][u][d];
                for m in 0..nm {
                    let pm = pop.p_m[d][x][u][m];
                    for y in 0..ny {
                        p[y][d][m][x] += base * pd * pm * pop.p_y[d][m][x][u][y];
                    }
                }
            }
        }
    }
    JointTable {
        y_values: pop.y_values.clone(),
        p,
    }
}

impl JointTable {
    pub fn n_y(&self) -> usize {
        self.y_values.len()
    }
    pub fn n_d(&self) -> usize {
        self.p[0].len()
    }
    pub fn n_m(&self) -> usize {
        self.p[0][0].len()
    }
    pub fn n_x(&self) -> usize {
        self.p[0][0][0].len()
    }

    pub fn total_mass(&self) -> f64 {
        self.p
            .iter()
            .flatten()
            .flatten()
            .flatten()
            .sum()
    }

    pub fn p_dmx(&self, d: usize, m: usize, x: usize) -> f64 {
        (0..self.n_y()).map(|y| self.p[y][d][m][x]).sum()
    }

    pub fn p_mx(&self, m: usize, x: usize) -> f64 {
        (0..self.n_d()).map(|d| self.p_dmx(d, m, x)).sum()
    }

    pub fn p_dx(&self, d: usize, x: usize) -> f64 {
        (0..self.n_m()).map(|m| self.p_dmx(d, m, x)).sum()
    }

    pub fn p_x(&self, x: usize) -> f64 {
        (0..self.n_d()).map(|d| self.p_dx(d, x)).sum()
    }

    /// P(Y=y | D=d, M=m, X=x); 0 when the cell has no mass.
    pub fn p_y_given(&self, y: usize, d: usize, m: usize, x: usize) -> f64 {
        let mass = self.p_dmx(d, m, x);
        if mass > 0.0 {
            self.p[y][d][m][x] / mass
        } else {
            0.0
        }
    }

    /// mu(m, x, d) = E[Y | M=m, X=x, D=d]; 0 when the cell has no mass.
    pub fn mu(&self, m: usize, x: usize, d: usize) -> f64 {
        (0..self.n_y())
            .map(|y| self.y_values[y] * self.p_y_given(y, d, m, x))
            .sum()
    }

    /// q(d, x) = E[Y | D=d, X=x].
    pub fn q(&self, d: usize, x: usize) -> f64 {
        let mass = self.p_dx(d, x);
        if mass <= 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for m in 0..self.n_m() {
            for y in 0..self.n_y() {
                acc += self.y_values[y] * self.p[y][d][m][x];
            }
        }
        acc / mass
    }

    /// f(d | x) treatment propensity.
    pub fn f_d_given_x(&self, d: usize, x: usize) -> f64 {
        let px = self.p_x(x);
        if px > 0.0 {
            self.p_dx(d, x) / px
        } else {
            0.0
        }
    }

    /// f(m | d, x) mediator propensity.
    pub fn f_m_given_dx(&self, m: usize, d: usize, x: usize) -> f64 {
        let mass = self.p_dx(d, x);
        if mass > 0.0 {
            self.p_dmx(d, m, x) / mass
        } else {
            0.0
        }
    }

    /// nu(m, x) = sum_d mu(m, x, d) f(d | x).
    pub fn nu(&self, m: usize, x: usize) -> f64 {
        (0..self.n_d())
            .map(|d| self.mu(m, x, d) * self.f_d_given_x(d, x))
            .sum()
    }

    /// The front-door conditional mean: sum_m nu(m, x) f(m | d, x).
    pub fn zeta_fd(&self, d: usize, x: usize) -> f64 {
        (0..self.n_m())
            .map(|m| self.nu(m, x) * self.f_m_given_dx(m, d, x))
            .sum()
    }

    /// P(D=1 | M=m, X=x) for a binary treatment.
    pub fn p_treated(&self, m: usize, x: usize) -> Result<f64> {
        if self.n_d() != 2 {
            return Err(Error::Argument("propensity needs a binary treatment".into()));
        }
        let mass = self.p_mx(m, x);
        if mass <= 0.0 {
            return Ok(0.0);
        }
        Ok(self.p_dmx(1, m, x) / mass)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub holds: bool,
    pub max_deviation: f64,
}

fn classify(max_deviation: f64, what: &str) -> Result<CheckReport> {
    if max_deviation < HOLDS_TOL {
        Ok(CheckReport {
            holds: true,
            max_deviation,
        })
    } else if max_deviation > FAILS_TOL {
        Ok(CheckReport {
            holds: false,
            max_deviation,
        })
    } else {
        Err(Error::Validation(format!(
            "{what}: deviation {max_deviation:.3e} falls between the noise \
             threshold {HOLDS_TOL:.0e} and the violation threshold {FAILS_TOL:.0e}"
        )))
    }
}

/// Exact check that P(Y=y | D, M=m, X=x) is constant in D on every
/// positive-mass cell.
pub fn check_ti(joint: &JointTable) -> Result<CheckReport> {
    let mut dev = 0.0f64;
    for m in 0..joint.n_m() {
        for x in 0..joint.n_x() {
            let live: Vec<usize> = (0..joint.n_d())
                .filter(|&d| joint.p_dmx(d, m, x) > 0.0)
                .collect();
            for y in 0..joint.n_y() {
                for i in 0..live.len() {
                    for j in (i + 1)..live.len() {
                        let a = joint.p_y_given(y, live[i], m, x);
                        let b = joint.p_y_given(y, live[j], m, x);
                        dev = dev.max((a - b).abs());
                    }
                }
            }
        }
    }
    classify(dev, "TI check")
}

/// Exact check of back-door/front-door equivalence:
/// P(Y=y | D=d, X=x) = sum_m P(m|d,x) sum_d' P(y|d',m,x) P(d'|x).
pub fn check_bdfd(joint: &JointTable) -> Result<CheckReport> {
    let mut dev = 0.0f64;
    for x in 0..joint.n_x() {
        if joint.p_x(x) <= 0.0 {
            continue;
        }
        for d in 0..joint.n_d() {
            let mass = joint.p_dx(d, x);
            if mass <= 0.0 {
                continue;
            }
            for y in 0..joint.n_y() {
                let lhs = (0..joint.n_m())
                    .map(|m| joint.p[y][d][m][x])
                    .sum::<f64>()
                    / mass;
                let mut rhs = 0.0;
                for m in 0..joint.n_m() {
                    let fm = joint.f_m_given_dx(m, d, x);
                    if fm <= 0.0 {
                        continue;
                    }
                    let inner: f64 = (0..joint.n_d())
                        .map(|dp| joint.p_y_given(y, dp, m, x) * joint.f_d_given_x(dp, x))
                        .sum();
                    rhs += fm * inner;
                }
                dev = dev.max((lhs - rhs).abs());
            }
        }
    }
    classify(dev, "BDFD check")
}

/// Whether P(Y=y | D, M, X=x) decomposes additively into a treatment part
/// and a mediator part, for every (y, x): the double-centering interaction
/// residual of each |D| x |M| slice must vanish within `tol`.
pub fn check_separability(joint: &JointTable, tol: f64) -> Result<bool> {
    let (nd, nm) = (joint.n_d(), joint.n_m());
    for x in 0..joint.n_x() {
        if joint.p_x(x) <= 0.0 {
            continue;
        }
        for d in 0..nd {
            for m in 0..nm {
                if joint.p_dmx(d, m, x) <= 0.0 {
                    return Err(Error::Validation(
                        "separability check needs full (D, M) support".into(),
                    ));
                }
            }
        }
        for y in 0..joint.n_y() {
            let a: Vec<Vec<f64>> = (0..nd)
                .map(|d| (0..nm).map(|m| joint.p_y_given(y, d, m, x)).collect())
                .collect();
            let row_mean: Vec<f64> = a.iter().map(|r| r.iter().sum::<f64>() / nm as f64).collect();
            let col_mean: Vec<f64> = (0..nm)
                .map(|m| a.iter().map(|r| r[m]).sum::<f64>() / nd as f64)
                .collect();
            let grand = row_mean.iter().sum::<f64>() / nd as f64;
            for d in 0..nd {
                for m in 0..nm {
                    let resid = a[d][m] - row_mean[d] - col_mean[m] + grand;
                    if resid.abs() > tol {
                        return Ok(false);
                    }
                }
            }
        }
    }
    Ok(true)
}

/// Exact target parameter of the conditional-independence test with true
/// nuisances: the binary form E[Delta^2 + Delta] or the per-cell sum for a
/// multivalued partition.
pub fn true_theta(joint: &JointTable, partition: &TreatmentPartition) -> Result<f64> {
    let cells: Vec<Vec<usize>> = partition
        .cells
        .iter()
        .map(|c| c.iter().map(|&l| l as usize).collect())
        .collect();
    let mut theta = 0.0;
    for m in 0..joint.n_m() {
        for x in 0..joint.n_x() {
            let pmx = joint.p_mx(m, x);
            if pmx <= 0.0 {
                continue;
            }
            let cell_stats = |cell: &[usize], complement: bool| -> (f64, f64) {
                // (probability, conditional outcome mean) of D in/outside cell.
                let mut mass = 0.0;
                let mut ysum = 0.0;
                for d in 0..joint.n_d() {
                    if cell.contains(&d) != complement {
                        let pd = joint.p_dmx(d, m, x);
                        mass += pd;
                        ysum += pd * joint.mu(m, x, d);
                    }
                }
                (mass / pmx, if mass > 0.0 { ysum / mass } else { 0.0 })
            };
            if partition.is_binary() {
                let (_, mu1) = cell_stats(&cells[1], false);
                let (_, mu0) = cell_stats(&cells[0], false);
                let delta = mu1 - mu0;
                theta += pmx * (delta * delta + delta);
            } else {
                for cell in &cells {
                    let (_, mu_in) = cell_stats(cell, false);
                    let (_, mu_out) = cell_stats(cell, true);
                    let delta = mu_in - mu_out;
                    theta += pmx * (delta * delta + delta);
                }
            }
        }
    }
    Ok(theta)
}

/// Exact target parameter of the BD-FD comparison test:
/// E[(q(D,X) - zeta(D,X))^2 + (q(D,X) - zeta(D,X))] with the front-door
/// functional zeta(d,x) = sum_m nu(m,x) f(m|d,x).
pub fn true_theta_bar(joint: &JointTable) -> f64 {
    let mut theta = 0.0;
    for d in 0..joint.n_d() {
        for x in 0..joint.n_x() {
            let pdx = joint.p_dx(d, x);
            if pdx <= 0.0 {
                continue;
            }
            let diff = joint.q(d, x) - joint.zeta_fd(d, x);
            theta += pdx * (diff * diff + diff);
        }
    }
    theta
}

/// Exact orthogonality probe for the binary-treatment score: perturb the
/// true nuisances by `eps * (dmu1, dmu0, dp)` (functions of (m, x)) and
/// evaluate E[psi] exactly over the joint table for each eps.
pub fn exact_orthogonality_probe(
    joint: &JointTable,
    dmu1: &[Vec<f64>],
    dmu0: &[Vec<f64>],
    dp: &[Vec<f64>],
    eps_grid: &[f64],
) -> Result<ProbeReport> {
    if joint.n_d() != 2 {
        return Err(Error::Argument("probe needs a binary treatment".into()));
    }
    let theta_star = true_theta(joint, &TreatmentPartition::binary())?;
    let mut means = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let mut acc = 0.0;
        for m in 0..joint.n_m() {
            for x in 0..joint.n_x() {
                if joint.p_mx(m, x) <= 0.0 {
                    continue;
                }
                let mu1 = joint.mu(m, x, 1) + eps * dmu1[m][x];
                let mu0 = joint.mu(m, x, 0) + eps * dmu0[m][x];
                let p = joint.p_treated(m, x)? + eps * dp[m][x];
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::Argument(
                        "perturbed propensity leaves (0, 1); shrink eps or dp".into(),
                    ));
                }
                for d in 0..2 {
                    for y in 0..joint.n_y() {
                        let mass = joint.p[y][d][m][x];
                        if mass > 0.0 {
                            acc += mass
                                * score_binary(
                                    joint.y_values[y],
                                    d == 1,
                                    mu1,
                                    mu0,
                                    p,
                                    theta_star,
                                );
                        }
                    }
                }
            }
        }
        means.push(acc);
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

/// Support sizes for random population generators.
#[derive(Debug, Clone, Copy)]
pub struct PopShape {
    pub n_y: usize,
    pub n_d: usize,
    pub n_m: usize,
    pub n_x: usize,
    pub n_u: usize,
}

impl Default for PopShape {
    fn default() -> Self {
        PopShape {
            n_y: 2,
            n_d: 2,
            n_m: 2,
            n_x: 2,
            n_u: 2,
        }
    }
}

/// Random simplex with every component at least `floor`.
fn random_simplex(rng: &mut impl Rng, len: usize, floor: f64) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..len).map(|_| rng.gen::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        let row: Vec<f64> = raw.iter().map(|&v| v / s).collect();
        if row.iter().all(|&p| p >= floor) {
            return row;
        }
    }
}

/// Fully random population with all kernels bounded away from zero.
pub fn random_population(rng: &mut impl Rng, shape: PopShape) -> DiscretePopulation {
    let PopShape {
        n_y,
        n_d,
        n_m,
        n_x,
        n_u,
    } = shape;
    let floor = 0.05;
    DiscretePopulation {
        y_values: (0..n_y).map(|y| y as f64).collect(),
        p_x: random_simplex(rng, n_x, floor),
        p_u: random_simplex(rng, n_u, floor),
        p_d: (0..n_x)
            .map(|_| (0..n_u).map(|_| random_simplex(rng, n_d, floor)).collect())
            .collect(),
        p_m: (0..n_d)
            .map(|_| {
                (0..n_x)
                    .map(|_| (0..n_u).map(|_| random_simplex(rng, n_m, floor)).collect())
                    .collect()
            })
            .collect(),
        p_y: (0..n_d)
            .map(|_| {
                (0..n_m)
                    .map(|_| {
                        (0..n_x)
                            .map(|_| {
                                (0..n_u).map(|_| random_simplex(rng, n_y, floor)).collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect(),
    }
}

/// Random population on which TI holds exactly: the outcome kernel depends
/// only on (M, X), so Y is conditionally independent of both D and the
/// latent variable given (M, X).
pub fn random_ti_population(rng: &mut impl Rng, shape: PopShape) -> DiscretePopulation {
    let mut pop = random_population(rng, shape);
    for m in 0..shape.n_m {
        for x in 0..shape.n_x {
            let row = random_simplex(rng, shape.n_y, 0.05);
            for d in 0..shape.n_d {
                for u in 0..shape.n_u {
                    pop.p_y[d][m][x][u] = row.clone();
                }
            }
        }
    }
    pop
}

/// Random population whose observed outcome kernel is additively separable,
/// P(y | d, m, x) = base(y, x) + c(y, d, x) + e(y, m, x) with the
/// treatment and mediator parts each summing to zero over y. The treatment
/// part is scaled by `treatment_dev`; any nonzero value breaks TI.
pub fn random_separable_population(
    rng: &mut impl Rng,
    shape: PopShape,
    treatment_dev: f64,
) -> DiscretePopulation {
    let PopShape {
        n_y, n_d, n_m, n_x, ..
    } = shape;
    let shape = PopShape { n_u: 1, ..shape };
    let mut pop = random_population(rng, shape);

    // Centered perturbation over y levels with max amplitude `amp`.
    fn centered(rng: &mut impl Rng, n_y: usize, amp: f64) -> Vec<f64> {
        let raw: Vec<f64> = (0..n_y).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mean = raw.iter().sum::<f64>() / n_y as f64;
        let dev: Vec<f64> = raw.iter().map(|v| v - mean).collect();
        let maxabs = dev.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
        dev.iter().map(|v| v * amp / maxabs).collect()
    }

    for x in 0..n_x {
        let base = random_simplex(rng, n_y, 0.3);
        let c: Vec<Vec<f64>> = (0..n_d)
            .map(|_| centered(rng, n_y, treatment_dev))
            .collect();
        let e: Vec<Vec<f64>> = (0..n_m).map(|_| centered(rng, n_y, 0.05)).collect();
        for d in 0..n_d {
            for m in 0..n_m {
                for y in 0..n_y {
                    pop.p_y[d][m][x][0][y] = base[y] + c[d][y] + e[m][y];
                }
            }
        }
    }
    pop
}

/// Search for a population where back-door and front-door coincide exactly
/// while TI fails.
///
/// Construction: binary Y and D, three mediator levels, singleton X and U.
/// Starting from a TI-satisfying base P0(y | m), the treated outcome
/// kernel is shifted along the direction orthogonal to both mediator
/// propensity rows, which leaves both BDFD sums unchanged while breaking
/// the constancy of P(y | d, m) in d.
pub fn find_bdfd_not_ti(budget: usize, seed: u64) -> Option<DiscretePopulation> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for _ in 0..budget {
        let pi = 0.2 + 0.6 * rng.gen::<f64>();
        let fm0 = random_simplex(&mut rng, 3, 0.1);
        let fm1 = random_simplex(&mut rng, 3, 0.1);
        // Direction orthogonal to both propensity rows.
        let v = [
            fm0[1] * fm1[2] - fm0[2] * fm1[1],
            fm0[2] * fm1[0] - fm0[0] * fm1[2],
            fm0[0] * fm1[1] - fm0[1] * fm1[0],
        ];
        let vmax = v.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        if vmax < 1e-3 {
            continue;
        }
        let base: Vec<f64> = (0..3).map(|_| 0.35 + 0.3 * rng.gen::<f64>()).collect();
        // Scale the shift to clear the violation threshold while keeping
        // probabilities inside (0, 1).
        let margin = base
            .iter()
            .map(|&b| b.min(1.0 - b))
            .fold(f64::INFINITY, f64::min);
        let scale = 0.9 * margin / vmax;
        let shift: Vec<f64> = v.iter().map(|&x| x * scale).collect();
        if shift.iter().fold(0.0f64, |a, &x| a.max(x.abs())) <= 2.0 * FAILS_TOL {
            continue;
        }

        let p_y_control: Vec<Vec<f64>> = base.iter().map(|&b| vec![1.0 - b, b]).collect();
        let p_y_treated: Vec<Vec<f64>> = base
            .iter()
            .zip(&shift)
            .map(|(&b, &s)| vec![1.0 - b - s, b + s])
            .collect();
        let pop = DiscretePopulation {
            y_values: vec![0.0, 1.0],
            p_x: vec![1.0],
            p_u: vec![1.0],
            p_d: vec![vec![vec![1.0 - pi, pi]]],
            p_m: vec![
                vec![vec![fm0.clone()]],
                vec![vec![fm1.clone()]],
            ],
            p_y: vec![
                p_y_control.iter().map(|r| vec![vec![r.clone()]]).collect(),
                p_y_treated.iter().map(|r| vec![vec![r.clone()]]).collect(),
            ],
        };
        if pop.validate().is_err() {
            continue;
        }
        let joint = marginalize(&pop);
        let ti = match check_ti(&joint) {
            Ok(r) => r,
            Err(_) => continue,
        };
        let bdfd = match check_bdfd(&joint) {
            Ok(r) => r,
            Err(_) => continue,
        };
        if bdfd.holds && !ti.holds {
            return Some(pop);
        }
    }
    None
}

/// One sampled dataset plus the level indices needed to look up exact
/// nuisances per observation.
#[derive(Debug, Clone)]
pub struct SampleDraw {
    pub dataset: Dataset,
    pub y_idx: Vec<usize>,
    pub d: Vec<usize>,
    pub m_idx: Vec<usize>,
    pub x_idx: Vec<usize>,
}

fn sample_categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

/// Draw `n` iid observations. The covariate level is encoded as one-hot
/// dummies for levels 1.. (level 0 is the reference), the mediator as its
/// level index.
pub fn sample(pop: &DiscretePopulation, n: usize, seed: u64) -> Result<SampleDraw> {
    pop.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let nx = pop.n_x();
    let mut y = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    let mut m_col = Vec::with_capacity(n);
    let mut x = Matrix::zeros(n, nx.saturating_sub(1));
    let (mut y_idx, mut d_idx, mut m_idx, mut x_idx) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for i in 0..n {
        let xi = sample_categorical(&mut rng, &pop.p_x);
        let ui = sample_categorical(&mut rng, &pop.p_u);
        let di = sample_categorical(&mut rng, &pop.p_d[xi][ui]);
        let mi = sample_categorical(&mut rng, &pop.p_m[di][xi][ui]);
        let yi = sample_categorical(&mut rng, &pop.p_y[di][mi][xi][ui]);
        y.push(pop.y_values[yi]);
        d.push(di as i64);
        m_col.push(mi as f64);
        if xi > 0 {
            x.set(i, xi - 1, 1.0);
        }
        y_idx.push(yi);
        d_idx.push(di);
        m_idx.push(mi);
        x_idx.push(xi);
    }
    let names = ColumnNames {
        outcome: "y".to_string(),
        treatment: "d".to_string(),
        mediators: vec!["m".to_string()],
        covariates: (1..nx).map(|j| format!("x{j}")).collect(),
    };
    let dataset = Dataset::new(y, d, Matrix::from_columns(vec![m_col])?, x, names)?;
    Ok(SampleDraw {
        dataset,
        y_idx,
        d: d_idx,
        m_idx,
        x_idx,
    })
}
