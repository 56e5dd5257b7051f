//! Multiway DML point estimate, cluster-robust variance and confidence intervals.
//!
//! With folds `k ∈ [K]^ℓ` and `E_k[f] = |I_k|⁻¹ Σ_{cells j ∈ I_k} Σ_{obs in j} f`, where `|I_k|`
//! counts every cell of the fold including empty ones,
//!
//! ```text
//! Ĵ = K^-ℓ Σ_k E_k[ψᵃ],   θ̃ = −Ĵ⁻¹ K^-ℓ Σ_k E_k[ψᵇ],   σ̂² = Ĵ⁻¹ Γ̂ Ĵ⁻ᵀ,
//! Γ̂ = K^-ℓ Σ_k (min_i |I_{k_i}| / |I_k|²) Σ_i Σ_{j, j' ∈ I_k : j_i = j'_i} ψ_j ψ_j'ᵀ
//! ```
//!
//! and the reported standard error is `√(σ̂² / C̲)`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::crossfit::{make_fold_plan, FoldPlan};
use crate::data::MultiwayDataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::score::{fit_nuisance_pliv, LinearScore, NuisanceLearner, PlivNuisance, ScoreComponents};

/// Smallest singular value of `Ĵ` accepted as identified.
pub const SINGULAR_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Robustness {
    ZeroWay,
    /// Clustered along one dimension (0-based).
    OneWay(usize),
    Multiway,
}

impl fmt::Display for Robustness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Robustness::ZeroWay => write!(f, "zero"),
            Robustness::OneWay(dim) => write!(f, "one:{}", dim + 1),
            Robustness::Multiway => write!(f, "multi"),
        }
    }
}

impl FromStr for Robustness {
    type Err = Error;

    /// Accepts `zero`, `one:<dim>` (1-based) and `multi`, plus the `-way` spellings.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "zero" | "zero-way" | "0-way" | "iid" => return Ok(Robustness::ZeroWay),
            "multi" | "multiway" | "multi-way" | "two-way" | "2-way" => return Ok(Robustness::Multiway),
            _ => {}
        }
        let dim = s
            .strip_prefix("one-way:")
            .or_else(|| s.strip_prefix("one:"))
            .or_else(|| s.strip_prefix("1-way:"))
            .ok_or_else(|| Error::Config(format!("unknown robustness `{s}` (zero | one:<dim> | multi)")))?;
        match dim.parse::<usize>() {
            Ok(d) if d >= 1 => Ok(Robustness::OneWay(d - 1)),
            _ => Err(Error::Config(format!("invalid one-way dimension `{dim}` (1-based)"))),
        }
    }
}

impl Serialize for Robustness {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Robustness {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlConfig {
    pub k: usize,
    pub seed: u64,
    /// Number of rerandomized repetitions `S`.
    pub repetitions: usize,
    pub learner: NuisanceLearner,
    pub robustness: Robustness,
    pub aggregation: Aggregation,
    /// Confidence level `1 − a`.
    pub level: f64,
}

impl Default for DmlConfig {
    fn default() -> Self {
        Self {
            k: 2,
            seed: 0,
            repetitions: 1,
            learner: NuisanceLearner::Penalized(Default::default()),
            robustness: Robustness::Multiway,
            aggregation: Aggregation::Mean,
            level: 0.95,
        }
    }
}

impl DmlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("confidence level {} is outside (0, 1)", self.level)));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("K must be at least 2, got {}", self.k)));
        }
        if let NuisanceLearner::Penalized(cfg) = &self.learner {
            cfg.validate()?;
        }
        Ok(())
    }
}

/// Scores of one fold, evaluated with that fold's nuisance.
#[derive(Debug, Clone)]
pub struct FoldScores {
    /// `|I_k|`, cells in the fold (occupied or not).
    pub cell_count: usize,
    /// `min_i |I_{k_i}|`.
    pub min_group: usize,
    /// Cluster index of each observation.
    pub cells: Vec<Vec<usize>>,
    pub components: Vec<ScoreComponents>,
}

impl FoldScores {
    fn psi(&self, theta: &DVector<f64>) -> Vec<DVector<f64>> {
        self.components.iter().map(|c| c.evaluate(theta)).collect()
    }
}

/// Evaluates every observation's score with the nuisance of the fold that holds it.
/// `nuisances` is aligned with `plan.folds()`.
pub fn fold_scores<S: LinearScore>(dataset: &MultiwayDataset, plan: &FoldPlan, nuisances: &[S]) -> Result<Vec<FoldScores>> {
    if nuisances.len() != plan.n_folds() {
        return Err(Error::DimensionMismatch { context: "estimator::fold_scores", expected: plan.n_folds(), found: nuisances.len() });
    }
    let mut folds: Vec<FoldScores> = plan
        .folds()
        .iter()
        .map(|f| FoldScores {
            cell_count: plan.estimation_size(f),
            min_group: plan.min_group_size(f),
            cells: Vec::new(),
            components: Vec::new(),
        })
        .collect();
    for obs in dataset.observations() {
        let idx = plan.fold_linear(&plan.fold_of_cell(&obs.cluster_index));
        folds[idx].components.push(nuisances[idx].components(obs)?);
        folds[idx].cells.push(obs.cluster_index.clone());
    }
    Ok(folds)
}

fn score_dim(folds: &[FoldScores]) -> usize {
    folds.iter().flat_map(|f| f.components.first()).map(ScoreComponents::dim).next().unwrap_or(1)
}

/// `(K^-ℓ Σ_k E_k[ψᵃ], K^-ℓ Σ_k E_k[ψᵇ])`.
pub fn averaged_components(folds: &[FoldScores]) -> (DMatrix<f64>, DVector<f64>) {
    let dim = score_dim(folds);
    let mut a = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);
    for fold in folds {
        let mut fa = DMatrix::zeros(dim, dim);
        let mut fb = DVector::zeros(dim);
        for c in &fold.components {
            fa += &c.psi_a;
            fb += &c.psi_b;
        }
        a += fa / fold.cell_count as f64;
        b += fb / fold.cell_count as f64;
    }
    let n = folds.len() as f64;
    (a / n, b / n)
}

/// The empirical moment `K^-ℓ Σ_k E_k[ψ(W; θ, η̂_k)]`.
pub fn empirical_moment(folds: &[FoldScores], theta: &DVector<f64>) -> DVector<f64> {
    let (a, b) = averaged_components(folds);
    a * theta + b
}

fn invert_checked(j: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = j.clone().svd(true, true);
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    if sv.iter().any(|s| !(s.is_finite() && *s > SINGULAR_THRESHOLD)) {
        return Err(Error::DegenerateIdentification { singular_values: sv });
    }
    if j.nrows() == 1 {
        return Ok(DMatrix::from_element(1, 1, 1.0 / j[(0, 0)]));
    }
    svd.pseudo_inverse(0.0).map_err(|_| Error::DegenerateIdentification { singular_values: sv })
}

/// Closed-form root `θ̃ = −Ĵ⁻¹ b̄` of the linear moment, with `Ĵ`.
pub fn solve_theta(folds: &[FoldScores]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (j, b) = averaged_components(folds);
    let j_inv = invert_checked(&j)?;
    Ok((-(j_inv * b), j))
}

pub fn estimate_theta<S: LinearScore>(
    dataset: &MultiwayDataset,
    plan: &FoldPlan,
    nuisances: &[S],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    solve_theta(&fold_scores(dataset, plan, nuisances)?)
}

fn outer_sum(out: &mut DMatrix<f64>, sums: &[DVector<f64>], scale: f64) {
    for s in sums {
        *out += (s * s.transpose()) * scale;
    }
}

/// Slot per label in order of first appearance, so results do not depend on label values.
struct GroupSums {
    slot: HashMap<usize, usize>,
    sums: Vec<DVector<f64>>,
}

impl GroupSums {
    fn new() -> Self {
        Self { slot: HashMap::new(), sums: Vec::new() }
    }

    fn add(&mut self, label: usize, v: &DVector<f64>) {
        let next = self.sums.len();
        let idx = *self.slot.entry(label).or_insert(next);
        if idx == next {
            self.sums.push(v.clone());
        } else {
            self.sums[idx] += v;
        }
    }
}

/// Multiway meat `Γ̂`: per fold and dimension, outer products of score sums over
/// cells sharing that dimension's label (diagonal pairs included in every dimension).
pub fn gamma_multiway(folds: &[FoldScores], theta: &DVector<f64>) -> DMatrix<f64> {
    let dim = theta.len();
    let mut gamma = DMatrix::zeros(dim, dim);
    for fold in folds {
        let psi = fold.psi(theta);
        let n_dims = fold.cells.first().map_or(0, Vec::len);
        let scale = fold.min_group as f64 / (fold.cell_count as f64).powi(2);
        for d in 0..n_dims {
            let mut groups = GroupSums::new();
            for (cell, v) in fold.cells.iter().zip(&psi) {
                groups.add(cell[d], v);
            }
            outer_sum(&mut gamma, &groups.sums, scale);
        }
    }
    gamma / folds.len() as f64
}

/// Zero-way and one-way meats, on the same `C̲` reporting scale as [`gamma_multiway`].
///
/// Writing `θ̃ − θ ≈ −Ĵ⁻¹ Σ_obs w ψ` with `w = 1 / (K^ℓ |I_k|)`:
/// zero-way is `C̲ Σ_obs w² ψψᵀ`; one-way along dimension `i` is
/// `C̲ Σ_c T_c T_cᵀ` with `T_c = Σ_{obs with j_i = c} w ψ` summed across folds.
pub fn gamma_reference(folds: &[FoldScores], theta: &DVector<f64>, mode: Robustness, min_clusters: usize) -> Result<DMatrix<f64>> {
    let dim = theta.len();
    let n_folds = folds.len() as f64;
    let c = min_clusters as f64;
    let n_dims = folds.iter().flat_map(|f| f.cells.first()).map(Vec::len).next().unwrap_or(0);
    let mut gamma = DMatrix::zeros(dim, dim);
    match mode {
        Robustness::Multiway => return Ok(gamma_multiway(folds, theta)),
        Robustness::ZeroWay => {
            for fold in folds {
                let w = 1.0 / (n_folds * fold.cell_count as f64);
                let weighted: Vec<DVector<f64>> = fold.psi(theta).into_iter().map(|v| v * w).collect();
                outer_sum(&mut gamma, &weighted, c);
            }
        }
        Robustness::OneWay(d) => {
            if d >= n_dims {
                return Err(Error::Config(format!(
                    "one-way clustering dimension {} does not exist (dataset has {n_dims})",
                    d + 1
                )));
            }
            let mut groups = GroupSums::new();
            for fold in folds {
                let w = 1.0 / (n_folds * fold.cell_count as f64);
                for (cell, v) in fold.cells.iter().zip(fold.psi(theta)) {
                    groups.add(cell[d], &(v * w));
                }
            }
            outer_sum(&mut gamma, &groups.sums, c);
        }
    }
    Ok(gamma)
}

pub fn compute_gamma_multiway<S: LinearScore>(
    dataset: &MultiwayDataset,
    plan: &FoldPlan,
    nuisances: &[S],
    theta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    Ok(gamma_multiway(&fold_scores(dataset, plan, nuisances)?, theta))
}

pub fn compute_gamma_reference<S: LinearScore>(
    dataset: &MultiwayDataset,
    plan: &FoldPlan,
    nuisances: &[S],
    theta: &DVector<f64>,
    mode: Robustness,
) -> Result<DMatrix<f64>> {
    gamma_reference(&fold_scores(dataset, plan, nuisances)?, theta, mode, dataset.min_clusters())
}

/// Sandwich `Ĵ⁻¹ Γ̂ Ĵ⁻ᵀ`, symmetrised.
pub fn variance(jacobian: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let j_inv = invert_checked(jacobian)?;
    let s = &j_inv * gamma * j_inv.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// `Φ⁻¹(p)` for the standard normal.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// `[r'θ̃ ± Φ⁻¹(1 − a/2) √(r'σ̂²r / C̲)]`.
pub fn confidence_interval(
    theta: &DVector<f64>,
    sigma2: &DMatrix<f64>,
    min_clusters: usize,
    a: f64,
    r: &DVector<f64>,
) -> Result<(f64, f64)> {
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::Config(format!("significance level {a} is outside (0, 1)")));
    }
    if min_clusters == 0 {
        return Err(Error::Config("effective cluster count must be at least 1".into()));
    }
    let center = r.dot(theta);
    let var = (r.transpose() * sigma2 * r)[(0, 0)];
    if !(var > 0.0) {
        return Err(Error::NonPositiveVariance(var));
    }
    let half = normal_quantile(1.0 - a / 2.0) * (var / min_clusters as f64).sqrt();
    Ok((center - half, center + half))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, rows.first().map_or(0, Vec::len), |i, j| rows[i][j])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDiagnostic {
    /// 1-based fold index.
    pub fold: Vec<usize>,
    pub n_train: usize,
    pub n_eval: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionResult {
    pub plan_seed: u64,
    pub theta: Vec<f64>,
    pub jacobian: Vec<Vec<f64>>,
    pub meat: Vec<Vec<f64>>,
    pub sigma2: Vec<Vec<f64>>,
    /// Norm of the empirical moment at `θ̃`.
    pub moment_residual: f64,
    pub folds: Vec<FoldDiagnostic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub level: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub theta: Vec<f64>,
    pub se: Vec<f64>,
    pub ci: IntervalReport,
    pub sigma2: Vec<Vec<f64>>,
    /// Average over repetitions.
    pub jacobian: Vec<Vec<f64>>,
    /// Average over repetitions.
    pub meat: Vec<Vec<f64>>,
    pub robustness: Robustness,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "S")]
    pub s: usize,
    pub seed: u64,
    pub min_clusters: usize,
    pub n_obs: usize,
    pub per_repetition: Vec<RepetitionResult>,
    pub warnings: Vec<String>,
    pub config: DmlConfig,
}

impl EstimateReport {
    pub fn summary(&self) -> String {
        format!(
            "theta={:.6} se={:.6} ci=[{:.6}, {:.6}] (robustness={}, K={}, S={})",
            self.theta[0], self.se[0], self.ci.lo[0], self.ci.hi[0], self.robustness, self.k, self.s
        )
    }
}

/// One cross-fitted estimate on a fixed plan.
pub fn estimate_with_plan(
    dataset: &MultiwayDataset,
    plan: &FoldPlan,
    config: &DmlConfig,
) -> Result<(RepetitionResult, Vec<String>)> {
    let folds = plan.folds();
    let nuisances: Vec<PlivNuisance> = folds
        .par_iter()
        .map(|f| fit_nuisance_pliv(dataset, plan, f, &config.learner))
        .collect::<Result<_>>()?;
    let scores = fold_scores(dataset, plan, &nuisances)?;
    let (theta, jacobian) = solve_theta(&scores)?;
    let meat = gamma_reference(&scores, &theta, config.robustness, dataset.min_clusters())?;
    let sigma2 = variance(&jacobian, &meat)?;
    let moment_residual = empirical_moment(&scores, &theta).norm();
    let warnings = nuisances.iter().flat_map(PlivNuisance::warnings).collect();
    let folds = nuisances
        .iter()
        .zip(&scores)
        .map(|(n, s)| FoldDiagnostic {
            fold: n.fold.iter().map(|g| g + 1).collect(),
            n_train: n.n_train,
            n_eval: s.components.len(),
            converged: n.converged(),
        })
        .collect();
    Ok((
        RepetitionResult {
            plan_seed: plan.seed(),
            theta: theta.iter().copied().collect(),
            jacobian: to_rows(&jacobian),
            meat: to_rows(&meat),
            sigma2: to_rows(&sigma2),
            moment_residual,
            folds,
        },
        warnings,
    ))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn aggregate(values: Vec<f64>, how: Aggregation) -> f64 {
    match how {
        Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Aggregation::Median => median(&mut values.clone()),
    }
}

fn aggregate_matrices(ms: &[DMatrix<f64>], how: Aggregation) -> DMatrix<f64> {
    let (r, c) = ms[0].shape();
    DMatrix::from_fn(r, c, |i, j| aggregate(ms.iter().map(|m| m[(i, j)]).collect(), how))
}

/// Runs the estimator on the given plans (one per repetition) and aggregates.
pub fn run_dml_with_plans(dataset: &MultiwayDataset, config: &DmlConfig, plans: &[FoldPlan]) -> Result<EstimateReport> {
    config.validate()?;
    if plans.is_empty() {
        return Err(Error::Config("at least one fold plan is required".into()));
    }
    let runs: Vec<(RepetitionResult, Vec<String>)> = plans
        .par_iter()
        .map(|plan| {
            estimate_with_plan(dataset, plan, config)
                .map_err(|e| Error::Repetition { seed: plan.seed(), source: Box::new(e) })
        })
        .collect::<Result<_>>()?;

    let c = dataset.min_clusters();
    let thetas: Vec<DVector<f64>> = runs.iter().map(|(r, _)| DVector::from_vec(r.theta.clone())).collect();
    let dim = thetas[0].len();
    let theta = DVector::from_fn(dim, |i, _| aggregate(thetas.iter().map(|t| t[i]).collect(), config.aggregation));
    let adjusted: Vec<DMatrix<f64>> = runs
        .iter()
        .zip(&thetas)
        .map(|((r, _), t)| {
            let dev = t - &theta;
            from_rows(&r.sigma2) + (&dev * dev.transpose()) * c as f64
        })
        .collect();
    let sigma2 = aggregate_matrices(&adjusted, config.aggregation);
    let mean_of = |f: fn(&RepetitionResult) -> &Vec<Vec<f64>>| {
        aggregate_matrices(&runs.iter().map(|(r, _)| from_rows(f(r))).collect::<Vec<_>>(), Aggregation::Mean)
    };
    let jacobian = mean_of(|r| &r.jacobian);
    let meat = mean_of(|r| &r.meat);

    let a = 1.0 - config.level;
    let (mut lo, mut hi) = (Vec::with_capacity(dim), Vec::with_capacity(dim));
    for i in 0..dim {
        let r = DVector::from_fn(dim, |j, _| if i == j { 1.0 } else { 0.0 });
        let (l, h) = confidence_interval(&theta, &sigma2, c, a, &r)?;
        lo.push(l);
        hi.push(h);
    }
    let se = (0..dim).map(|i| (sigma2[(i, i)] / c as f64).sqrt()).collect();
    let mut warnings: Vec<String> = runs.iter().flat_map(|(_, w)| w.iter().cloned()).collect();
    warnings.dedup();

    Ok(EstimateReport {
        theta: theta.iter().copied().collect(),
        se,
        ci: IntervalReport { level: config.level, lo, hi },
        sigma2: to_rows(&sigma2),
        jacobian: to_rows(&jacobian),
        meat: to_rows(&meat),
        robustness: config.robustness,
        k: config.k,
        s: plans.len(),
        seed: config.seed,
        min_clusters: c,
        n_obs: dataset.n_obs(),
        per_repetition: runs.into_iter().map(|(r, _)| r).collect(),
        warnings,
        config: config.clone(),
    })
}

/// Seed of the fold plan for repetition `s`.
pub fn repetition_seed(seed: u64, s: usize) -> u64 {
    rng::split_seed(seed, s as u64)
}

/// Full multiway DML: `S` rerandomized plans, aggregated by mean or median with
/// the dispersion correction `σ̂²_s + C̲ (θ̃_s − θ̃)(θ̃_s − θ̃)ᵀ`.
pub fn run_dml(dataset: &MultiwayDataset, config: &DmlConfig) -> Result<EstimateReport> {
    config.validate()?;
    let plans = (0..config.repetitions)
        .map(|s| make_fold_plan(dataset.cluster_counts(), config.k, repetition_seed(config.seed, s)))
        .collect::<Result<Vec<_>>>()?;
    run_dml_with_plans(dataset, config, &plans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_fold(cells: Vec<Vec<usize>>, psi_b: &[f64], cell_count: usize, min_group: usize) -> FoldScores {
        FoldScores {
            cell_count,
            min_group,
            cells,
            components: psi_b.iter().map(|&b| ScoreComponents::scalar(0.0, b)).collect(),
        }
    }

    fn two_by_two() -> FoldScores {
        scalar_fold(vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]], &[1.0, 2.0, 3.0, 4.0], 4, 2)
    }

    #[test]
    fn multiway_meat_two_by_two() {
        let g = gamma_multiway(&[two_by_two()], &DVector::from_element(1, 0.0));
        assert_abs_diff_eq!(g[(0, 0)], 13.75, epsilon = 1e-12);
    }

    #[test]
    fn zero_scores_zero_meat() {
        let fold = scalar_fold(vec![vec![0, 0], vec![1, 1]], &[0.0, 0.0], 4, 2);
        assert_eq!(gamma_multiway(&[fold], &DVector::from_element(1, 0.0))[(0, 0)], 0.0);
    }

    #[test]
    fn zero_way_golden() {
        // C̲ Σ w² ψ² with w = 1/4, C̲ = 2: 2 · 30 / 16
        let g = gamma_reference(&[two_by_two()], &DVector::from_element(1, 0.0), Robustness::ZeroWay, 2).unwrap();
        assert_abs_diff_eq!(g[(0, 0)], 3.75, epsilon = 1e-12);
    }

    #[test]
    fn one_way_golden() {
        // rows: (1+2)², (3+4)²; columns: (1+3)², (2+4)²
        let theta = DVector::from_element(1, 0.0);
        let rows = gamma_reference(&[two_by_two()], &theta, Robustness::OneWay(0), 2).unwrap();
        assert_abs_diff_eq!(rows[(0, 0)], 2.0 * 58.0 / 16.0, epsilon = 1e-12);
        let cols = gamma_reference(&[two_by_two()], &theta, Robustness::OneWay(1), 2).unwrap();
        assert_abs_diff_eq!(cols[(0, 0)], 2.0 * 52.0 / 16.0, epsilon = 1e-12);
        assert!(gamma_reference(&[two_by_two()], &theta, Robustness::OneWay(2), 2).is_err());
    }

    #[test]
    fn single_observation_zero_way() {
        let fold = scalar_fold(vec![vec![0, 0]], &[3.0], 1, 1);
        let g = gamma_reference(&[fold], &DVector::from_element(1, 0.0), Robustness::ZeroWay, 1).unwrap();
        assert_abs_diff_eq!(g[(0, 0)], 9.0, epsilon = 1e-15);
    }

    #[test]
    fn one_way_equals_zero_way_with_singleton_groups() {
        let cells: Vec<Vec<usize>> = (0..5).map(|i| vec![i, i % 2]).collect();
        let fold = scalar_fold(cells, &[0.3, -1.2, 2.5, 0.7, -0.1], 10, 2);
        let theta = DVector::from_element(1, 0.0);
        let a = gamma_reference(std::slice::from_ref(&fold), &theta, Robustness::OneWay(0), 2).unwrap();
        let b = gamma_reference(&[fold], &theta, Robustness::ZeroWay, 2).unwrap();
        assert_abs_diff_eq!(a[(0, 0)], b[(0, 0)], epsilon = 1e-12);
    }

    #[test]
    fn scalar_sandwich() {
        let s = variance(&DMatrix::from_element(1, 1, -0.5), &DMatrix::from_element(1, 1, 13.75)).unwrap();
        assert_abs_diff_eq!(s[(0, 0)], 55.0, epsilon = 1e-12);
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(variance(&DMatrix::identity(2, 2), &g).unwrap(), g);
        assert!(matches!(
            variance(&DMatrix::zeros(1, 1), &g),
            Err(Error::DegenerateIdentification { .. })
        ));
    }

    #[test]
    fn interval_example() {
        let theta = DVector::from_element(1, 1.0);
        let s = DMatrix::from_element(1, 1, 4.0);
        let r = DVector::from_element(1, 1.0);
        let (lo, hi) = confidence_interval(&theta, &s, 100, 0.05, &r).unwrap();
        assert_abs_diff_eq!(lo, 1.0 - 1.959963984540054 * 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 1.0 + 1.959963984540054 * 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(lo, 0.60801, epsilon = 1e-5);

        let (lo, hi) = confidence_interval(&theta, &s, 100, 1.0 - 1e-15, &r).unwrap();
        assert_abs_diff_eq!(lo, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 1.0, epsilon = 1e-12);

        let (l2, h2) = confidence_interval(&theta, &s, 200, 0.05, &r).unwrap();
        assert_abs_diff_eq!((h2 - l2) * 2f64.sqrt(), 2.0 * 1.959963984540054 * 0.2, epsilon = 1e-12);

        assert!(matches!(
            confidence_interval(&theta, &DMatrix::zeros(1, 1), 100, 0.05, &r),
            Err(Error::NonPositiveVariance(_))
        ));
        assert!(confidence_interval(&theta, &s, 100, 0.0, &r).is_err());
    }

    #[test]
    fn quantile_accuracy() {
        assert_abs_diff_eq!(normal_quantile(0.975), 1.959963984540054, epsilon = 1e-12);
        assert_abs_diff_eq!(normal_quantile(0.5), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(normal_quantile(0.995), 2.5758293035489004, epsilon = 1e-12);
    }

    #[test]
    fn iv_ratio_with_zero_nuisance() {
        // (y, d, z) = (2,1,1), (4,2,1) in one fold of two cells
        let fold = FoldScores {
            cell_count: 2,
            min_group: 1,
            cells: vec![vec![0, 0], vec![0, 1]],
            components: vec![ScoreComponents::scalar(-1.0, 2.0), ScoreComponents::scalar(-2.0, 4.0)],
        };
        let (theta, j) = solve_theta(std::slice::from_ref(&fold)).unwrap();
        assert_abs_diff_eq!(theta[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(j[(0, 0)], -1.5, epsilon = 1e-15);
        assert!(empirical_moment(&[fold], &theta).norm() <= 1e-12);
    }

    #[test]
    fn robustness_parsing() {
        assert_eq!("two-way".parse::<Robustness>().unwrap(), Robustness::Multiway);
        assert_eq!("zero-way".parse::<Robustness>().unwrap(), Robustness::ZeroWay);
        assert_eq!("one:2".parse::<Robustness>().unwrap(), Robustness::OneWay(1));
        assert!("one:0".parse::<Robustness>().is_err());
        assert!("sideways".parse::<Robustness>().is_err());
        assert_eq!(Robustness::OneWay(0).to_string(), "one:1");
    }

    #[test]
    fn median_aggregation() {
        assert_eq!(aggregate(vec![3.0, 1.0, 2.0], Aggregation::Median), 2.0);
        assert_eq!(aggregate(vec![4.0, 1.0, 2.0, 3.0], Aggregation::Median), 2.5);
        assert_eq!(aggregate(vec![4.0, 1.0], Aggregation::Mean), 2.5);
    }
}
