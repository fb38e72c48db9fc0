//! Sparse linear (squared-loss) and logistic learners fitted by coordinate
//! descent, with cross-validated penalty selection.
//!
//! The squared-loss objective is `(1/2W) sum_i w_i (y_i - b0 - x_i'b)^2
//! + lambda * |b|_1` with `W = sum_i w_i`; the logistic objective replaces
//! the quadratic term with the weighted negative log-likelihood. The
//! intercept is never penalized.

use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{Error, Result};

pub const PROB_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    SquaredLoss,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LambdaGrid {
    /// `len` log-spaced values from lambda_max down to 0.001 * lambda_max.
    Auto { len: usize },
    /// Strictly positive, strictly decreasing values.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub family: Family,
    pub lambda_grid: LambdaGrid,
    pub cv_folds: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub standardize: bool,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        LearnerSpec {
            family: Family::SquaredLoss,
            lambda_grid: LambdaGrid::Auto { len: 100 },
            cv_folds: 10,
            max_iter: 100_000,
            tol: 1e-7,
            standardize: true,
        }
    }
}

impl LearnerSpec {
    pub fn with_family(family: Family) -> Self {
        LearnerSpec {
            family,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.tol <= 0.0 {
            return Err(Error::Argument("tol must be positive".into()));
        }
        match &self.lambda_grid {
            LambdaGrid::Auto { len } if *len == 0 => {
                Err(Error::Argument("lambda grid length must be positive".into()))
            }
            LambdaGrid::Explicit(grid) => {
                if grid.is_empty() {
                    return Err(Error::Argument("lambda grid is empty".into()));
                }
                if grid.iter().any(|&l| !(l > 0.0)) {
                    return Err(Error::Argument("lambda grid must be strictly positive".into()));
                }
                if grid.windows(2).any(|w| w[1] >= w[0]) {
                    return Err(Error::Argument("lambda grid must be strictly decreasing".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseModel {
    pub family: Family,
    /// Intercept and coefficients on the original feature scale.
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub lambda_selected: f64,
    pub feature_means: Option<Vec<f64>>,
    pub feature_scales: Option<Vec<f64>>,
    /// Max KKT residual of the fitted solution at `lambda_selected`,
    /// measured on the (standardized) training objective.
    pub kkt_violation: f64,
    /// Mean cross-validated loss per grid value, empty when CV was skipped.
    pub cv_losses: Vec<f64>,
    pub lambda_grid: Vec<f64>,
}

impl SparseModel {
    pub fn n_nonzero(&self) -> usize {
        self.coefficients.iter().filter(|&&b| b != 0.0).count()
    }
}

pub fn predict(model: &SparseModel, features: &Matrix) -> Result<Vec<f64>> {
    if features.ncols() != model.coefficients.len() {
        return Err(Error::Argument(format!(
            "feature count {} does not match model ({})",
            features.ncols(),
            model.coefficients.len()
        )));
    }
    let mut eta = vec![model.intercept; features.nrows()];
    for j in 0..features.ncols() {
        let b = model.coefficients[j];
        if b != 0.0 {
            for (e, &x) in eta.iter_mut().zip(features.col(j)) {
                *e += b * x;
            }
        }
    }
    match model.family {
        Family::SquaredLoss => Ok(eta),
        Family::Logistic => Ok(eta
            .into_iter()
            .map(|e| sigmoid(e).clamp(PROB_CLIP, 1.0 - PROB_CLIP))
            .collect()),
    }
}

pub fn fit(
    spec: &LearnerSpec,
    features: &Matrix,
    target: &[f64],
    weights: Option<&[f64]>,
) -> Result<SparseModel> {
    spec.validate()?;
    let n = features.nrows();
    let p = features.ncols();
    if n != target.len() {
        return Err(Error::Argument("target length does not match features".into()));
    }
    if n < 2 {
        return Err(Error::Argument("need at least 2 observations".into()));
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite target value".into()));
    }
    for j in 0..p {
        if features.col(j).iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite value in feature {j}")));
        }
    }
    let w: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::Argument("weight length does not match target".into()));
            }
            if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Argument("weights must be finite and nonnegative".into()));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Argument("weights sum to zero".into()));
            }
            w.to_vec()
        }
        None => vec![1.0; n],
    };
    if spec.family == Family::Logistic && target.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Argument("logistic target must be in {0, 1}".into()));
    }

    let wsum: f64 = w.iter().sum();
    let ybar = dot(&w, target) / wsum;

    // Degenerate logistic fit: constant target. Return the clipped constant
    // probability rather than diverging.
    if spec.family == Family::Logistic && (ybar <= 0.0 || ybar >= 1.0) {
        let pc = ybar.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        return Ok(SparseModel {
            family: Family::Logistic,
            intercept: logit(pc),
            coefficients: vec![0.0; p],
            lambda_selected: match &spec.lambda_grid {
                LambdaGrid::Auto { .. } => 0.0,
                LambdaGrid::Explicit(g) => g[0],
            },
            feature_means: None,
            feature_scales: None,
            kkt_violation: 0.0,
            cv_losses: Vec::new(),
            lambda_grid: Vec::new(),
        });
    }

    // Working copy of columns, standardized when requested.
    let mut cols: Vec<Vec<f64>> = (0..p).map(|j| features.col(j).to_vec()).collect();
    let mut means = vec![0.0; p];
    let mut scales = vec![1.0; p];
    if spec.standardize {
        for j in 0..p {
            let mu = dot(&w, &cols[j]) / wsum;
            let var = w
                .iter()
                .zip(&cols[j])
                .map(|(&wi, &x)| wi * (x - mu) * (x - mu))
                .sum::<f64>()
                / wsum;
            let sd = var.sqrt();
            means[j] = mu;
            if sd > 1e-12 {
                scales[j] = sd;
                for x in cols[j].iter_mut() {
                    *x = (*x - mu) / sd;
                }
            } else {
                // Constant column: center only; it can never enter the model.
                scales[j] = 1.0;
                for x in cols[j].iter_mut() {
                    *x -= mu;
                }
            }
        }
    }

    let grid = match &spec.lambda_grid {
        LambdaGrid::Explicit(g) => g.clone(),
        LambdaGrid::Auto { len } => {
            let lmax = lambda_max(&cols, target, &w, wsum, ybar);
            auto_grid(lmax, *len)
        }
    };

    // Cross-validated penalty selection (skipped for a single grid value).
    let cv_losses = if grid.len() > 1 {
        cross_validate(spec, &cols, target, &w, &grid)?
    } else {
        Vec::new()
    };
    let best = if cv_losses.is_empty() {
        0
    } else {
        argmin(&cv_losses)
    };

    // Final path fit on the full data down to the selected lambda.
    let mut state = CdState::new(n, p, target, &w, wsum, ybar, spec.family);
    for &lambda in &grid[..=best] {
        state.solve(&cols, &w, wsum, target, lambda, spec.tol, spec.max_iter)?;
    }
    let lambda_selected = grid[best];
    let kkt_violation = state.kkt_violation(&cols, &w, wsum, target, lambda_selected);

    // Map back to the original feature scale.
    let mut coefficients = vec![0.0; p];
    let mut intercept = state.b0;
    for j in 0..p {
        coefficients[j] = state.beta[j] / scales[j];
        if spec.standardize {
            intercept -= state.beta[j] * means[j] / scales[j];
        }
    }

    Ok(SparseModel {
        family: spec.family,
        intercept,
        coefficients,
        lambda_selected,
        feature_means: spec.standardize.then(|| means),
        feature_scales: spec.standardize.then(|| scales),
        kkt_violation,
        cv_losses,
        lambda_grid: grid,
    })
}

/// Smallest penalty zeroing all coefficients.
fn lambda_max(cols: &[Vec<f64>], target: &[f64], w: &[f64], wsum: f64, ybar: f64) -> f64 {
    let mut lmax = 0.0f64;
    for col in cols {
        let g: f64 = w
            .iter()
            .zip(col.iter().zip(target))
            .map(|(&wi, (&x, &y))| wi * x * (y - ybar))
            .sum::<f64>()
            / wsum;
        lmax = lmax.max(g.abs());
    }
    if lmax <= 0.0 {
        1e-3
    } else {
        lmax
    }
}

fn auto_grid(lmax: f64, len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![lmax];
    }
    let lmin = 1e-3 * lmax;
    let step = (lmin / lmax).ln() / (len as f64 - 1.0);
    (0..len).map(|k| lmax * (step * k as f64).exp()).collect()
}

fn cross_validate(
    spec: &LearnerSpec,
    cols: &[Vec<f64>],
    target: &[f64],
    w: &[f64],
    grid: &[f64],
) -> Result<Vec<f64>> {
    let n = target.len();
    let k = spec.cv_folds.clamp(2, n);
    let mut loss = vec![0.0; grid.len()];
    let mut loss_w = 0.0;
    for fold in 0..k {
        let train: Vec<usize> = (0..n).filter(|i| i % k != fold).collect();
        let valid: Vec<usize> = (0..n).filter(|i| i % k == fold).collect();
        if train.len() < 2 || valid.is_empty() {
            continue;
        }
        let t_cols: Vec<Vec<f64>> = cols
            .iter()
            .map(|c| train.iter().map(|&i| c[i]).collect())
            .collect();
        let t_y: Vec<f64> = train.iter().map(|&i| target[i]).collect();
        let t_w: Vec<f64> = train.iter().map(|&i| w[i]).collect();
        let t_wsum: f64 = t_w.iter().sum();
        if t_wsum <= 0.0 {
            continue;
        }
        let t_ybar = dot(&t_w, &t_y) / t_wsum;

        // Constant training target: evaluate the constant model on every
        // grid value for this fold.
        let constant = match spec.family {
            Family::Logistic => t_ybar <= 0.0 || t_ybar >= 1.0,
            Family::SquaredLoss => false,
        };

        let mut state = CdState::new(train.len(), cols.len(), &t_y, &t_w, t_wsum, t_ybar, spec.family);
        for (gi, &lambda) in grid.iter().enumerate() {
            if !constant {
                state.solve(&t_cols, &t_w, t_wsum, &t_y, lambda, spec.tol, spec.max_iter)?;
            }
            // Validation loss at this grid value.
            let mut l = 0.0;
            let mut lw = 0.0;
            for &i in &valid {
                let mut eta = if constant {
                    logit(t_ybar.clamp(PROB_CLIP, 1.0 - PROB_CLIP))
                } else {
                    state.b0
                };
                if !constant {
                    for (j, col) in cols.iter().enumerate() {
                        if state.beta[j] != 0.0 {
                            eta += state.beta[j] * col[i];
                        }
                    }
                }
                let li = match spec.family {
                    Family::SquaredLoss => {
                        let r = target[i] - eta;
                        r * r
                    }
                    Family::Logistic => {
                        let pr = sigmoid(eta).clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                        -(target[i] * pr.ln() + (1.0 - target[i]) * (1.0 - pr).ln())
                    }
                };
                l += w[i] * li;
                lw += w[i];
            }
            loss[gi] += l;
            if gi == 0 {
                loss_w += lw;
            }
        }
    }
    if loss_w <= 0.0 {
        return Err(Error::Argument("cross-validation produced no usable folds".into()));
    }
    for l in loss.iter_mut() {
        *l /= loss_w;
    }
    Ok(loss)
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Coordinate-descent state, warm-started across a lambda path.
struct CdState {
    beta: Vec<f64>,
    b0: f64,
    /// Residual `z - b0 - X beta` of the current working response.
    resid: Vec<f64>,
    family: Family,
}

impl CdState {
    fn new(
        n: usize,
        p: usize,
        target: &[f64],
        _w: &[f64],
        _wsum: f64,
        ybar: f64,
        family: Family,
    ) -> Self {
        let b0 = match family {
            Family::SquaredLoss => ybar,
            Family::Logistic => logit(ybar.clamp(PROB_CLIP, 1.0 - PROB_CLIP)),
        };
        let resid = match family {
            Family::SquaredLoss => target.iter().map(|&y| y - b0).collect(),
            // Rebuilt at every IRLS step.
            Family::Logistic => vec![0.0; n],
        };
        CdState {
            beta: vec![0.0; p],
            b0,
            resid,
            family,
        }
    }

    fn solve(
        &mut self,
        cols: &[Vec<f64>],
        w: &[f64],
        wsum: f64,
        target: &[f64],
        lambda: f64,
        tol: f64,
        max_iter: usize,
    ) -> Result<()> {
        match self.family {
            Family::SquaredLoss => {
                let xtx: Vec<f64> = cols
                    .iter()
                    .map(|c| w.iter().zip(c).map(|(&wi, &x)| wi * x * x).sum::<f64>() / wsum)
                    .collect();
                cd_weighted_ls(
                    cols,
                    &xtx,
                    w,
                    wsum,
                    lambda,
                    tol,
                    max_iter,
                    &mut self.beta,
                    &mut self.b0,
                    &mut self.resid,
                )
            }
            Family::Logistic => self.solve_logistic(cols, w, target, lambda, tol, max_iter),
        }
    }

    fn solve_logistic(
        &mut self,
        cols: &[Vec<f64>],
        w: &[f64],
        target: &[f64],
        lambda: f64,
        tol: f64,
        max_iter: usize,
    ) -> Result<()> {
        let n = target.len();
        const MAX_OUTER: usize = 40;
        const WMIN: f64 = 1e-5;
        // The quadratic majorization must stay normalized by the *base*
        // weight sum, not the sum of the IRLS weights: dividing by the
        // latter rescales the smooth loss relative to the penalty
        // (by roughly 1/[p(1-p)]) and shifts the entire solution path.
        let wsum: f64 = w.iter().sum();
        for _ in 0..MAX_OUTER {
            // Quadratic approximation at the current linear predictor.
            let mut eta = vec![self.b0; n];
            for (j, col) in cols.iter().enumerate() {
                if self.beta[j] != 0.0 {
                    for (e, &x) in eta.iter_mut().zip(col) {
                        *e += self.beta[j] * x;
                    }
                }
            }
            let mut wq = vec![0.0; n];
            let mut z = vec![0.0; n];
            for i in 0..n {
                let pr = sigmoid(eta[i]);
                let v = (pr * (1.0 - pr)).max(WMIN);
                wq[i] = w[i] * v;
                z[i] = eta[i] + (target[i] - pr) / v;
            }
            if wq.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Internal("zero IRLS weight sum".into()));
            }
            let xtx: Vec<f64> = cols
                .iter()
                .map(|c| wq.iter().zip(c).map(|(&wi, &x)| wi * x * x).sum::<f64>() / wsum)
                .collect();
            let beta_prev = self.beta.clone();
            let b0_prev = self.b0;
            self.resid = z
                .iter()
                .zip(&eta)
                .map(|(&zi, &ei)| zi - ei)
                .collect();
            cd_weighted_ls(
                cols,
                &xtx,
                &wq,
                wsum,
                lambda,
                tol,
                max_iter,
                &mut self.beta,
                &mut self.b0,
                &mut self.resid,
            )?;
            let mut delta = (self.b0 - b0_prev).abs();
            for j in 0..self.beta.len() {
                delta = delta.max((self.beta[j] - beta_prev[j]).abs());
            }
            if delta < tol.max(1e-9) {
                break;
            }
        }
        Ok(())
    }

    fn kkt_violation(
        &self,
        cols: &[Vec<f64>],
        w: &[f64],
        wsum: f64,
        target: &[f64],
        lambda: f64,
    ) -> f64 {
        let n = target.len();
        // Gradient of the smooth loss part at the current solution.
        let grad_src: Vec<f64> = match self.family {
            Family::SquaredLoss => self.resid.clone(),
            Family::Logistic => {
                let mut eta = vec![self.b0; n];
                for (j, col) in cols.iter().enumerate() {
                    if self.beta[j] != 0.0 {
                        for (e, &x) in eta.iter_mut().zip(col) {
                            *e += self.beta[j] * x;
                        }
                    }
                }
                eta.iter().zip(target).map(|(&e, &y)| y - sigmoid(e)).collect()
            }
        };
        let mut viol = 0.0f64;
        for (j, col) in cols.iter().enumerate() {
            let g = -w
                .iter()
                .zip(col.iter().zip(&grad_src))
                .map(|(&wi, (&x, &r))| wi * x * r)
                .sum::<f64>()
                / wsum;
            let vj = if self.beta[j] != 0.0 {
                (g + lambda * self.beta[j].signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            };
            viol = viol.max(vj);
        }
        // Intercept is unpenalized: its gradient must vanish too.
        let g0 = -w
            .iter()
            .zip(&grad_src)
            .map(|(&wi, &r)| wi * r)
            .sum::<f64>()
            / wsum;
        viol.max(g0.abs())
    }
}

/// One weighted-lasso solve by cyclic coordinate descent with an active set.
#[allow(clippy::too_many_arguments)]
fn cd_weighted_ls(
    cols: &[Vec<f64>],
    xtx: &[f64],
    w: &[f64],
    wsum: f64,
    lambda: f64,
    tol: f64,
    max_iter: usize,
    beta: &mut [f64],
    b0: &mut f64,
    resid: &mut [f64],
) -> Result<()> {
    let p = cols.len();
    let mut sweeps = 0usize;

    let sweep = |over: &[usize],
                 beta: &mut [f64],
                 b0: &mut f64,
                 resid: &mut [f64]|
     -> f64 {
        let mut maxd = 0.0f64;
        for &j in over {
            if xtx[j] <= 1e-12 {
                continue;
            }
            let g = w
                .iter()
                .zip(cols[j].iter().zip(resid.iter()))
                .map(|(&wi, (&x, &r))| wi * x * r)
                .sum::<f64>()
                / wsum;
            let num = g + xtx[j] * beta[j];
            let bnew = soft_threshold(num, lambda) / xtx[j];
            let delta = bnew - beta[j];
            if delta != 0.0 {
                for (r, &x) in resid.iter_mut().zip(&cols[j]) {
                    *r -= delta * x;
                }
                beta[j] = bnew;
                maxd = maxd.max(delta.abs());
            }
        }
        // Intercept update.
        let d0 = w
            .iter()
            .zip(resid.iter())
            .map(|(&wi, &r)| wi * r)
            .sum::<f64>()
            / wsum;
        if d0 != 0.0 {
            *b0 += d0;
            for r in resid.iter_mut() {
                *r -= d0;
            }
        }
        maxd.max(d0.abs())
    };

    let all: Vec<usize> = (0..p).collect();
    loop {
        let maxd = sweep(&all, beta, b0, resid);
        sweeps += 1;
        if maxd < tol || sweeps >= max_iter {
            return Ok(());
        }
        // Iterate on the active set until stable, then re-check all.
        let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
        loop {
            let maxd = sweep(&active, beta, b0, resid);
            sweeps += 1;
            if maxd < tol || sweeps >= max_iter {
                break;
            }
        }
        if sweeps >= max_iter {
            return Ok(());
        }
    }
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
