//! Two-way clustered partially linear IV designs and Monte Carlo studies.
//!
//! Each primitive is a weighted sum of an idiosyncratic, a row and a column
//! component, e.g. `X_ij = (1 − ω₁ − ω₂) α_ij + ω₁ α_i + ω₂ α_j`, and
//!
//! ```text
//! Z = X'ξ₀ + V,   D = Z π₁₀ + X'π₂₀ + υ,   Y = D θ₀ + X'ζ₀ + ε,
//! ```
//!
//! with `ζ₀ = π₂₀ = ξ₀ = (0.5, 0.5², …, 0.5^p)`. The `α^X` components are
//! Toeplitz-correlated normals, `(α^ε, α^υ)` are correlated bivariate normals.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{MultiwayDataset, Observation, VariableSchema};
use crate::error::{Error, Result};
use crate::estimator::{run_dml, DmlConfig};
use crate::rng;

/// `(ω₁, ω₂)` for each primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpWeights {
    pub x: (f64, f64),
    pub eps: (f64, f64),
    pub ups: (f64, f64),
    pub v: (f64, f64),
}

impl DgpWeights {
    pub fn uniform(w1: f64, w2: f64) -> Self {
        Self { x: (w1, w2), eps: (w1, w2), ups: (w1, w2), v: (w1, w2) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpParams {
    pub n: usize,
    pub m: usize,
    pub dim_x: usize,
    pub theta0: f64,
    pub pi10: f64,
    pub s_x: f64,
    pub s_eps_ups: f64,
    pub weights: DgpWeights,
    pub seed: u64,
}

impl Default for DgpParams {
    fn default() -> Self {
        Self {
            n: 50,
            m: 50,
            dim_x: 100,
            theta0: 1.0,
            pi10: 1.0,
            s_x: 0.25,
            s_eps_ups: 0.25,
            weights: DgpWeights::uniform(0.25, 0.25),
            seed: 0,
        }
    }
}

impl DgpParams {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.dim_x == 0 {
            return Err(Error::Config("N, M and dim_x must be positive".into()));
        }
        if !(self.s_x >= 0.0 && self.s_x < 1.0) {
            return Err(Error::Config(format!("s_x = {} must lie in [0, 1)", self.s_x)));
        }
        if !(self.s_eps_ups.abs() < 1.0) {
            return Err(Error::Config(format!("s_eps_ups = {} must lie in (-1, 1)", self.s_eps_ups)));
        }
        let w = &self.weights;
        for (name, (a, b)) in [("x", w.x), ("eps", w.eps), ("ups", w.ups), ("v", w.v)] {
            if !(a.is_finite() && b.is_finite() && a + b <= 1.0) {
                return Err(Error::Config(format!("weights for {name} must be finite with ω₁ + ω₂ ≤ 1")));
            }
        }
        Ok(())
    }

    /// `(0.5, 0.5², …, 0.5^p)`.
    pub fn geometric_coefficients(&self) -> Vec<f64> {
        (1..=self.dim_x).map(|k| 0.5f64.powi(k as i32)).collect()
    }

    /// True `(g₁, g₂, m)` slope vectors: `m = ξ₀`, `g₂ = π₁₀ ξ₀ + π₂₀`, `g₁ = θ₀ g₂ + ζ₀`.
    pub fn oracle_coefficients(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let c = self.geometric_coefficients();
        let m = c.clone();
        let g2: Vec<f64> = c.iter().map(|v| self.pi10 * v + v).collect();
        let g1: Vec<f64> = g2.iter().zip(&c).map(|(g, v)| self.theta0 * g + v).collect();
        (g1, g2, m)
    }
}

/// Lower Cholesky factor of the Toeplitz matrix `[s^|r−c|]`.
pub fn toeplitz_cholesky(p: usize, s: f64) -> Result<DMatrix<f64>> {
    let cov = DMatrix::from_fn(p, p, |r, c| s.powi((r as i32 - c as i32).abs()));
    cov.cholesky()
        .map(|ch| ch.l())
        .ok_or_else(|| Error::Config(format!("Toeplitz covariance with s = {s} is not positive definite")))
}

fn correlated_normal(l: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let z = DVector::from_fn(l.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    l * z
}

fn bivariate(rho: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    (a, rho * a + (1.0 - rho * rho).sqrt() * b)
}

/// Raw component draws; cell `(i, j)` is stored at `i * m + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpComponents {
    pub n: usize,
    pub m: usize,
    pub x_cell: Vec<DVector<f64>>,
    pub x_row: Vec<DVector<f64>>,
    pub x_col: Vec<DVector<f64>>,
    pub eu_cell: Vec<(f64, f64)>,
    pub eu_row: Vec<(f64, f64)>,
    pub eu_col: Vec<(f64, f64)>,
    pub v_cell: Vec<f64>,
    pub v_row: Vec<f64>,
    pub v_col: Vec<f64>,
}

impl DgpComponents {
    /// Moves row component `i` to `perm[i]` (cells follow their row).
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let (n, m) = (self.n, self.m);
        let mut out = self.clone();
        for i in 0..n {
            let to = perm[i];
            out.x_row[to] = self.x_row[i].clone();
            out.eu_row[to] = self.eu_row[i];
            out.v_row[to] = self.v_row[i];
            for j in 0..m {
                out.x_cell[to * m + j] = self.x_cell[i * m + j].clone();
                out.eu_cell[to * m + j] = self.eu_cell[i * m + j];
                out.v_cell[to * m + j] = self.v_cell[i * m + j];
            }
        }
        out
    }
}

pub fn draw_components(params: &DgpParams) -> Result<DgpComponents> {
    params.validate()?;
    let l = toeplitz_cholesky(params.dim_x, params.s_x)?;
    let (n, m) = (params.n, params.m);
    let mut rng = rng::stream(params.seed, 0);
    let rng = &mut rng;
    let rho = params.s_eps_ups;
    let x_cell = (0..n * m).map(|_| correlated_normal(&l, rng)).collect();
    let x_row = (0..n).map(|_| correlated_normal(&l, rng)).collect();
    let x_col = (0..m).map(|_| correlated_normal(&l, rng)).collect();
    let eu_cell = (0..n * m).map(|_| bivariate(rho, rng)).collect();
    let eu_row = (0..n).map(|_| bivariate(rho, rng)).collect();
    let eu_col = (0..m).map(|_| bivariate(rho, rng)).collect();
    let v_cell = (0..n * m).map(|_| rng.sample(StandardNormal)).collect();
    let v_row = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let v_col = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    Ok(DgpComponents { n, m, x_cell, x_row, x_col, eu_cell, eu_row, eu_col, v_cell, v_row, v_col })
}

fn mix(w: (f64, f64), cell: f64, row: f64, col: f64) -> f64 {
    (1.0 - w.0 - w.1) * cell + w.0 * row + w.1 * col
}

/// Combines component draws into the observed `(Y, D, Z, X)`, one observation per cell.
pub fn assemble(params: &DgpParams, comps: &DgpComponents) -> Result<MultiwayDataset> {
    let (n, m, p) = (comps.n, comps.m, params.dim_x);
    let coef = params.geometric_coefficients();
    let w = &params.weights;
    let mut observations = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let c = i * m + j;
            let x: Vec<f64> = (0..p)
                .map(|k| mix(w.x, comps.x_cell[c][k], comps.x_row[i][k], comps.x_col[j][k]))
                .collect();
            let eps = mix(w.eps, comps.eu_cell[c].0, comps.eu_row[i].0, comps.eu_col[j].0);
            let ups = mix(w.ups, comps.eu_cell[c].1, comps.eu_row[i].1, comps.eu_col[j].1);
            let v = mix(w.v, comps.v_cell[c], comps.v_row[i], comps.v_col[j]);
            let xb: f64 = x.iter().zip(&coef).map(|(a, b)| a * b).sum();
            let z = xb + v;
            let d = z * params.pi10 + xb + ups;
            let y = d * params.theta0 + xb + eps;
            observations.push(Observation { cluster_index: vec![i, j], y, d, z, x });
        }
    }
    MultiwayDataset::new(vec![n, m], observations, VariableSchema::generic(2, p))
}

pub fn generate_dgp(params: &DgpParams) -> Result<MultiwayDataset> {
    assemble(params, &draw_components(params)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub n_reps: usize,
    pub n_failed: usize,
    pub failures: Vec<String>,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub coverage: f64,
    /// False when fewer than two replicates succeeded; `sd` is then reported as 0.
    pub sd_defined: bool,
    /// Mean of `σ̂² / C̲` (the squared standard error) across replicates.
    pub mean_variance_estimate: f64,
    pub mean_runtime_secs: f64,
    pub estimates: Vec<f64>,
    pub standard_errors: Vec<f64>,
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

struct Replicate {
    theta: f64,
    se: f64,
    covered: bool,
    secs: f64,
}

/// Monte Carlo study: a fresh dataset per replicate, one DML fit each.
pub fn monte_carlo(dgp: &DgpParams, dml: &DmlConfig, n_reps: usize, master_seed: u64) -> Result<McResult> {
    if n_reps == 0 {
        return Err(Error::Config("n_reps must be at least 1".into()));
    }
    dgp.validate()?;
    dml.validate()?;
    let theta0 = dgp.theta0;
    let outcomes: Vec<std::result::Result<Replicate, String>> = (0..n_reps)
        .into_par_iter()
        .map(|r| {
            let base = rng::split_seed(master_seed, r as u64);
            let start = Instant::now();
            let params = DgpParams { seed: rng::split_seed(base, 0), ..dgp.clone() };
            let config = DmlConfig { seed: rng::split_seed(base, 1), ..dml.clone() };
            let report = generate_dgp(&params)
                .and_then(|ds| run_dml(&ds, &config))
                .map_err(|e| format!("replicate {r}: {e}"))?;
            Ok(Replicate {
                theta: report.theta[0],
                se: report.se[0],
                covered: report.ci.lo[0] <= theta0 && theta0 <= report.ci.hi[0],
                secs: start.elapsed().as_secs_f64(),
            })
        })
        .collect();

    let failures: Vec<String> = outcomes.iter().filter_map(|o| o.as_ref().err().cloned()).collect();
    if failures.len() * 100 > n_reps {
        return Err(Error::TooManyFailures { failed: failures.len(), total: n_reps, first: failures[0].clone() });
    }
    for f in &failures {
        log::warn!("excluded {f}");
    }
    let ok: Vec<&Replicate> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let k = ok.len() as f64;
    let mean = compensated_sum(ok.iter().map(|r| r.theta)) / k;
    let sd_defined = ok.len() >= 2;
    let sd = if sd_defined {
        (compensated_sum(ok.iter().map(|r| (r.theta - mean).powi(2))) / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    let bias = mean - theta0;
    Ok(McResult {
        n_reps,
        n_failed: failures.len(),
        failures,
        bias,
        sd,
        rmse: (bias * bias + sd * sd).sqrt(),
        coverage: ok.iter().filter(|r| r.covered).count() as f64 / k,
        sd_defined,
        mean_variance_estimate: compensated_sum(ok.iter().map(|r| r.se * r.se)) / k,
        mean_runtime_secs: compensated_sum(ok.iter().map(|r| r.secs)) / k,
        estimates: ok.iter().map(|r| r.theta).collect(),
        standard_errors: ok.iter().map(|r| r.se).collect(),
    })
}
