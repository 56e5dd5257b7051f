//! Penalized linear regression by cyclic coordinate descent.
//!
//! Minimises
//!
//! ```text
//! (1/2n) Σ (y_i − b0 − x_i'b)² + λ [ α ‖b‖₁ + (1 − α) ‖b‖₂² / 2 ]
//! ```
//!
//! with an unpenalized intercept. Columns are centred (and optionally scaled
//! to unit variance) once, after which every sweep works on the `p × p` Gram
//! matrix and the running gradient `r = c − G b`, so a sweep costs `O(p)` per
//! coordinate that moves rather than `O(n)`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Floor on `α` when deriving the largest grid value, so ridge grids stay finite.
const ALPHA_GRID_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaGrid {
    /// `n` values spaced geometrically from `λ_max` down to `min_ratio · λ_max`.
    Geometric { n: usize, min_ratio: f64 },
    /// Used as given; must be non-negative and sorted descending.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub grid: LambdaGrid,
    pub n_folds: usize,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            grid: LambdaGrid::Geometric { n: 50, min_ratio: 1e-3 },
            n_folds: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lambda {
    Fixed(f64),
    CrossValidated(CvConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// Elastic-net mixing: 1 is the lasso, 0 is ridge.
    pub alpha: f64,
    pub lambda: Lambda,
    pub max_iter: usize,
    pub tol: f64,
    pub standardize: bool,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda: Lambda::CrossValidated(CvConfig::default()),
            max_iter: 10_000,
            tol: 1e-7,
            standardize: true,
        }
    }
}

impl PenaltyConfig {
    pub fn lasso() -> Self {
        Self::default()
    }

    pub fn ridge() -> Self {
        Self { alpha: 0.0, ..Self::default() }
    }

    pub fn elastic_net(alpha: f64) -> Self {
        Self { alpha, ..Self::default() }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Lambda::Fixed(lambda);
        self
    }

    pub fn with_standardize(mut self, standardize: bool) -> Self {
        self.standardize = standardize;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidPenalty(format!("alpha = {} is outside [0, 1]", self.alpha)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidPenalty(format!("tol = {} must be positive", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidPenalty("max_iter must be positive".into()));
        }
        match &self.lambda {
            Lambda::Fixed(l) if !(*l >= 0.0) => {
                Err(Error::InvalidPenalty(format!("lambda = {l} must be non-negative")))
            }
            Lambda::CrossValidated(cv) => {
                if cv.n_folds < 2 {
                    return Err(Error::InvalidPenalty("cross-validation needs at least 2 folds".into()));
                }
                match &cv.grid {
                    LambdaGrid::Geometric { n, min_ratio } if *n == 0 || !(*min_ratio > 0.0 && *min_ratio <= 1.0) => {
                        Err(Error::InvalidPenalty("geometric grid needs n ≥ 1 and 0 < min_ratio ≤ 1".into()))
                    }
                    LambdaGrid::Explicit(grid) => check_grid(grid),
                    _ => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidPenalty("lambda grid is empty".into()));
    }
    if grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::InvalidPenalty("lambda grid values must be finite and non-negative".into()));
    }
    if grid.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::InvalidPenalty("lambda grid must be sorted descending".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    /// Coefficients on the original covariate scale.
    pub coefficients: Vec<f64>,
    pub alpha: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl LinearFit {
    /// A fixed linear function, e.g. a known nuisance or a zero fixture.
    pub fn from_coefficients(intercept: f64, coefficients: Vec<f64>) -> Self {
        let p = coefficients.len();
        Self {
            intercept,
            coefficients,
            alpha: 0.0,
            lambda: 0.0,
            iterations: 0,
            converged: true,
            x_mean: vec![0.0; p],
            x_scale: vec![1.0; p],
            warnings: Vec::new(),
        }
    }

    pub fn zero(p: usize) -> Self {
        Self::from_coefficients(0.0, vec![0.0; p])
    }

    pub fn n_features(&self) -> usize {
        self.coefficients.len()
    }

    pub fn predict_row(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.coefficients.len() {
            return Err(Error::DimensionMismatch {
                context: "nuisance::predict",
                expected: self.coefficients.len(),
                found: x.len(),
            });
        }
        Ok(self.intercept + x.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>())
    }
}

pub fn predict(fit: &LinearFit, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x.ncols() != fit.coefficients.len() {
        return Err(Error::DimensionMismatch {
            context: "nuisance::predict",
            expected: fit.coefficients.len(),
            found: x.ncols(),
        });
    }
    let mut out = vec![fit.intercept; x.nrows()];
    for (j, &b) in fit.coefficients.iter().enumerate() {
        if b != 0.0 {
            for (o, v) in out.iter_mut().zip(x.column(j).iter()) {
                *o += b * v;
            }
        }
    }
    Ok(out)
}

/// Centred and optionally scaled covariates with their Gram matrix `X̃'X̃ / n`.
pub(crate) struct Design {
    n: usize,
    p: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    xs: DMatrix<f64>,
    gram: DMatrix<f64>,
    warnings: Vec<String>,
}

/// Response-specific quantities on a design: `c = X̃'(y − ȳ)/n` and `‖y − ȳ‖²/n`.
pub(crate) struct Response {
    y_mean: f64,
    c: Vec<f64>,
    #[cfg_attr(not(test), allow(dead_code))]
    yy: f64,
}

impl Design {
    pub(crate) fn new(x: &DMatrix<f64>, standardize: bool) -> Result<Self> {
        let (n, p) = x.shape();
        if n == 0 {
            return Err(Error::InvalidPenalty("cannot fit a regression on zero observations".into()));
        }
        if p == 0 {
            return Err(Error::InvalidPenalty("cannot fit a regression with no covariates".into()));
        }
        let mut xs = x.clone();
        let mut mean = vec![0.0; p];
        let mut scale = vec![1.0; p];
        let mut warnings = Vec::new();
        for j in 0..p {
            let mut col = xs.column_mut(j);
            let m = col.iter().sum::<f64>() / n as f64;
            col.iter_mut().for_each(|v| *v -= m);
            mean[j] = m;
            if standardize {
                let sd = (col.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
                if sd > 1e-12 * (1.0 + m.abs()) {
                    col.iter_mut().for_each(|v| *v /= sd);
                    scale[j] = sd;
                } else {
                    warnings.push(format!("covariate {} is constant; scale clamped to 1", j + 1));
                }
            }
        }
        let mut gram = xs.transpose() * &xs;
        gram /= n as f64;
        Ok(Self { n, p, mean, scale, xs, gram, warnings })
    }

    pub(crate) fn response(&self, y: &[f64]) -> Result<Response> {
        if y.len() != self.n {
            return Err(Error::DimensionMismatch {
                context: "nuisance::fit",
                expected: self.n,
                found: y.len(),
            });
        }
        let n = self.n as f64;
        let y_mean = y.iter().sum::<f64>() / n;
        let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
        let c = (0..self.p)
            .map(|j| self.xs.column(j).iter().zip(&yc).map(|(a, b)| a * b).sum::<f64>() / n)
            .collect();
        let yy = yc.iter().map(|v| v * v).sum::<f64>() / n;
        Ok(Response { y_mean, c, yy })
    }

    /// Default grid for a response: geometric from `max_j |c_j| / max(α, 10⁻³)`.
    pub(crate) fn lambda_grid(&self, resp: &Response, alpha: f64, grid: &LambdaGrid) -> Vec<f64> {
        match grid {
            LambdaGrid::Explicit(values) => values.clone(),
            LambdaGrid::Geometric { n, min_ratio } => {
                let lmax = resp.c.iter().fold(0.0f64, |m, v| m.max(v.abs())) / alpha.max(ALPHA_GRID_FLOOR);
                if lmax == 0.0 || *n == 1 {
                    return vec![lmax];
                }
                let step = min_ratio.ln() / (*n as f64 - 1.0);
                (0..*n).map(|i| lmax * (step * i as f64).exp()).collect()
            }
        }
    }

    fn to_fit(&self, resp: &Response, b: &[f64], alpha: f64, lambda: f64, iterations: usize, converged: bool) -> LinearFit {
        let coefficients: Vec<f64> = b.iter().zip(&self.scale).map(|(b, s)| b / s).collect();
        let intercept = resp.y_mean - coefficients.iter().zip(&self.mean).map(|(b, m)| b * m).sum::<f64>();
        let mut warnings = self.warnings.clone();
        if !converged {
            let msg = format!("coordinate descent stopped after {iterations} sweeps without converging (lambda = {lambda:e})");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        LinearFit {
            intercept,
            coefficients,
            alpha,
            lambda,
            iterations,
            converged,
            x_mean: self.mean.clone(),
            x_scale: self.scale.clone(),
            warnings,
        }
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// `r += a · x`.
fn axpy(r: &mut [f64], x: &[f64], a: f64) {
    for (r, x) in r.iter_mut().zip(x) {
        *r += a * x;
    }
}

/// Coordinate-descent state for one response on one design.
pub(crate) struct CoordinateDescent<'a> {
    design: &'a Design,
    resp: &'a Response,
    b: Vec<f64>,
    /// `c − G b`, the negative gradient of the smooth part.
    r: Vec<f64>,
}

impl<'a> CoordinateDescent<'a> {
    pub(crate) fn new(design: &'a Design, resp: &'a Response) -> Self {
        Self { design, resp, b: vec![0.0; design.p], r: resp.c.clone() }
    }

    /// One cyclic pass; returns the largest absolute coefficient change.
    pub(crate) fn sweep(&mut self, l1: f64, l2: f64) -> f64 {
        let p = self.design.p;
        let g = self.design.gram.as_slice();
        let mut max_change = 0.0f64;
        for j in 0..p {
            let col = &g[j * p..(j + 1) * p];
            let gjj = col[j];
            let old = self.b[j];
            let denom = gjj + l2;
            let new = if denom > 0.0 { soft_threshold(self.r[j] + gjj * old, l1) / denom } else { 0.0 };
            let delta = new - old;
            if delta != 0.0 {
                self.b[j] = new;
                axpy(&mut self.r, col, -delta);
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    }

    fn refresh_gradient(&mut self) {
        let p = self.design.p;
        let g = self.design.gram.as_slice();
        self.r.copy_from_slice(&self.resp.c);
        for (j, &bj) in self.b.iter().enumerate() {
            if bj != 0.0 {
                axpy(&mut self.r, &g[j * p..(j + 1) * p], -bj);
            }
        }
    }

    /// Largest violation of the subgradient optimality conditions.
    pub(crate) fn kkt_residual(&self, l1: f64, l2: f64) -> f64 {
        self.b
            .iter()
            .zip(&self.r)
            .map(|(&b, &r)| {
                if b != 0.0 {
                    (-r + l1 * b.signum() + l2 * b).abs()
                } else {
                    (r.abs() - l1).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }

    /// Penalized objective on the standardized scale.
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn objective(&self, l1: f64, l2: f64) -> f64 {
        let cb: f64 = self.resp.c.iter().zip(&self.b).map(|(c, b)| c * b).sum();
        let br: f64 = self.b.iter().zip(&self.r).map(|(b, r)| b * r).sum();
        let l1_norm: f64 = self.b.iter().map(|b| b.abs()).sum();
        let l2_sq: f64 = self.b.iter().map(|b| b * b).sum();
        0.5 * self.resp.yy - 0.5 * cb - 0.5 * br + l1 * l1_norm + 0.5 * l2 * l2_sq
    }

    /// Sweeps until the largest coefficient change drops below `tol` and the
    /// KKT residual (on a freshly recomputed gradient) is at most `10 · tol`.
    pub(crate) fn solve(&mut self, lambda: f64, alpha: f64, tol: f64, max_iter: usize) -> (usize, bool) {
        let (l1, l2) = (lambda * alpha, lambda * (1.0 - alpha));
        for iter in 1..=max_iter {
            if self.sweep(l1, l2) < tol {
                self.refresh_gradient();
                if self.kkt_residual(l1, l2) <= 10.0 * tol {
                    return (iter, true);
                }
            }
        }
        self.refresh_gradient();
        (max_iter, false)
    }

    pub(crate) fn coefficients(&self) -> &[f64] {
        &self.b
    }
}

/// Fits along `lambdas` (descending) with warm starts; one fit per value.
fn fit_path(design: &Design, resp: &Response, lambdas: &[f64], cfg: &PenaltyConfig) -> Vec<LinearFit> {
    let mut cd = CoordinateDescent::new(design, resp);
    lambdas
        .iter()
        .map(|&lambda| {
            let (iters, converged) = cd.solve(lambda, cfg.alpha, cfg.tol, cfg.max_iter);
            design.to_fit(resp, cd.coefficients(), cfg.alpha, lambda, iters, converged)
        })
        .collect()
}

fn row_folds(n: usize, n_folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng::stream(seed, 0));
    let (base, extra) = (n / n_folds, n % n_folds);
    let mut start = 0;
    (0..n_folds)
        .map(|f| {
            let len = base + usize::from(f < extra);
            let mut fold = rows[start..start + len].to_vec();
            fold.sort_unstable();
            start += len;
            fold
        })
        .collect()
}

/// Mean held-out squared error for every grid value, averaged over folds, for each response.
fn cv_errors(
    x: &DMatrix<f64>,
    ys: &[&[f64]],
    grids: &[Vec<f64>],
    n_folds: usize,
    seed: u64,
    cfg: &PenaltyConfig,
) -> Result<Vec<Vec<f64>>> {
    let n = x.nrows();
    if n < n_folds {
        return Err(Error::InvalidPenalty(format!(
            "{n} observations cannot be split into {n_folds} cross-validation folds"
        )));
    }
    let folds = row_folds(n, n_folds, seed);
    let mut errors: Vec<Vec<f64>> = grids.iter().map(|g| vec![0.0; g.len()]).collect();
    let mut in_holdout = vec![false; n];
    for held in &folds {
        in_holdout.iter_mut().for_each(|v| *v = false);
        held.iter().for_each(|&i| in_holdout[i] = true);
        let train: Vec<usize> = (0..n).filter(|&i| !in_holdout[i]).collect();
        let design = Design::new(&x.select_rows(&train), cfg.standardize)?;
        let x_held = x.select_rows(held);
        for ((y, grid), err) in ys.iter().zip(grids).zip(errors.iter_mut()) {
            let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let resp = design.response(&y_train)?;
            for (fit, e) in fit_path(&design, &resp, grid, cfg).iter().zip(err.iter_mut()) {
                let pred = predict(fit, &x_held)?;
                let mse = held.iter().zip(&pred).map(|(&i, p)| (y[i] - p).powi(2)).sum::<f64>() / held.len() as f64;
                *e += mse / n_folds as f64;
            }
        }
    }
    Ok(errors)
}

/// Index of the smallest error; ties go to the earlier (larger) grid value.
fn argmin_first(errors: &[f64]) -> usize {
    let mut best = 0;
    for (i, &e) in errors.iter().enumerate() {
        if e < errors[best] {
            best = i;
        }
    }
    best
}

/// Picks `λ` from a descending `grid` by row-level K-fold cross-validation.
pub fn select_lambda_cv(
    x: &DMatrix<f64>,
    y: &[f64],
    grid: &[f64],
    n_folds: usize,
    seed: u64,
    cfg: &PenaltyConfig,
) -> Result<f64> {
    check_grid(grid)?;
    if n_folds < 2 {
        return Err(Error::InvalidPenalty("cross-validation needs at least 2 folds".into()));
    }
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch { context: "nuisance::select_lambda_cv", expected: x.nrows(), found: y.len() });
    }
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let errors = cv_errors(x, &[y], &[grid.to_vec()], n_folds, seed, cfg)?;
    Ok(grid[argmin_first(&errors[0])])
}

pub fn fit_elastic_net(x: &DMatrix<f64>, y: &[f64], cfg: &PenaltyConfig) -> Result<LinearFit> {
    Ok(fit_elastic_net_multi(x, &[y], cfg)?.pop().expect("one response"))
}

/// Fits several responses against the same covariates, sharing the design
/// across responses (and across cross-validation splits).
pub fn fit_elastic_net_multi(x: &DMatrix<f64>, ys: &[&[f64]], cfg: &PenaltyConfig) -> Result<Vec<LinearFit>> {
    cfg.validate()?;
    let design = Design::new(x, cfg.standardize)?;
    let responses = ys.iter().map(|y| design.response(y)).collect::<Result<Vec<_>>>()?;
    match &cfg.lambda {
        Lambda::Fixed(lambda) => Ok(responses
            .iter()
            .map(|resp| fit_path(&design, resp, &[*lambda], cfg).pop().expect("one fit"))
            .collect()),
        Lambda::CrossValidated(cv) => {
            let grids: Vec<Vec<f64>> = responses.iter().map(|r| design.lambda_grid(r, cfg.alpha, &cv.grid)).collect();
            for g in &grids {
                check_grid(g)?;
            }
            let errors = if grids.iter().all(|g| g.len() == 1) {
                grids.iter().map(|_| vec![0.0]).collect()
            } else {
                cv_errors(x, ys, &grids, cv.n_folds, cv.seed, cfg)?
            };
            Ok(responses
                .iter()
                .zip(&grids)
                .zip(&errors)
                .map(|((resp, grid), err)| {
                    let best = argmin_first(err);
                    fit_path(&design, resp, &grid[..=best], cfg).pop().expect("non-empty path")
                })
                .collect())
        }
    }
}
