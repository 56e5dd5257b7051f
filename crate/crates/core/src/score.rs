//! Linear orthogonal scores `ψ(w; θ, η) = ψᵃ(w; η) θ + ψᵇ(w; η)`.
//!
//! Only the partially linear IV score ships:
//! `ψ = (y − g₁(x) − θ (d − g₂(x))) (z − m(x))`, giving
//! `ψᵃ = −(d − g₂(x))(z − m(x))` and `ψᵇ = (y − g₁(x))(z − m(x))`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::crossfit::FoldPlan;
use crate::data::{MultiwayDataset, Observation};
use crate::error::{Error, Result};
use crate::nuisance::{fit_elastic_net_multi, Lambda, LinearFit, PenaltyConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreComponents {
    pub psi_a: DMatrix<f64>,
    pub psi_b: DVector<f64>,
}

impl ScoreComponents {
    pub fn scalar(psi_a: f64, psi_b: f64) -> Self {
        Self { psi_a: DMatrix::from_element(1, 1, psi_a), psi_b: DVector::from_element(1, psi_b) }
    }

    pub fn dim(&self) -> usize {
        self.psi_b.len()
    }

    /// `ψᵃ θ + ψᵇ`.
    pub fn evaluate(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.psi_a * theta + &self.psi_b
    }
}

/// A fitted nuisance for one fold, able to produce per-observation score components.
pub trait LinearScore {
    fn dim(&self) -> usize;
    fn components(&self, obs: &Observation) -> Result<ScoreComponents>;
}

/// How the three nuisance regressions are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceLearner {
    Penalized(PenaltyConfig),
    /// All nuisance predictions fixed at zero.
    Zero,
    /// Known linear nuisance functions `g₁(x) = x'g1`, `g₂(x) = x'g2`, `m(x) = x'm`.
    Oracle { g1: Vec<f64>, g2: Vec<f64>, m: Vec<f64> },
}

impl NuisanceLearner {
    pub fn name(&self) -> String {
        match self {
            NuisanceLearner::Penalized(cfg) if cfg.alpha == 1.0 => "lasso".into(),
            NuisanceLearner::Penalized(cfg) if cfg.alpha == 0.0 => "ridge".into(),
            NuisanceLearner::Penalized(cfg) => format!("enet(alpha={})", cfg.alpha),
            NuisanceLearner::Zero => "zero".into(),
            NuisanceLearner::Oracle { .. } => "oracle".into(),
        }
    }
}

/// Fitted `(ĝ₁, ĝ₂, m̂)` for one fold of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlivNuisance {
    pub g1: LinearFit,
    pub g2: LinearFit,
    pub m: LinearFit,
    pub fold: Vec<usize>,
    pub n_train: usize,
}

impl PlivNuisance {
    pub fn converged(&self) -> bool {
        self.g1.converged && self.g2.converged && self.m.converged
    }

    pub fn warnings(&self) -> impl Iterator<Item = String> + '_ {
        [("g1", &self.g1), ("g2", &self.g2), ("m", &self.m)]
            .into_iter()
            .flat_map(move |(name, fit)| {
                fit.warnings.iter().map(move |w| format!("fold {:?} {name}: {w}", self.fold))
            })
    }
}

/// PLIV score pieces from the realised nuisance predictions.
pub fn pliv_components(y: f64, d: f64, z: f64, g1: f64, g2: f64, m: f64) -> (f64, f64) {
    let v = z - m;
    (-(d - g2) * v, (y - g1) * v)
}

/// Direct evaluation of the PLIV score at `θ`.
pub fn pliv_score(y: f64, d: f64, z: f64, g1: f64, g2: f64, m: f64, theta: f64) -> f64 {
    (y - g1 - theta * (d - g2)) * (z - m)
}

impl LinearScore for PlivNuisance {
    fn dim(&self) -> usize {
        1
    }

    fn components(&self, obs: &Observation) -> Result<ScoreComponents> {
        score_components(obs, self)
    }
}

pub fn score_components(obs: &Observation, nuisance: &PlivNuisance) -> Result<ScoreComponents> {
    let g1 = nuisance.g1.predict_row(&obs.x)?;
    let g2 = nuisance.g2.predict_row(&obs.x)?;
    let m = nuisance.m.predict_row(&obs.x)?;
    let (a, b) = pliv_components(obs.y, obs.d, obs.z, g1, g2, m);
    Ok(ScoreComponents::scalar(a, b))
}

/// Rows of `dataset` whose cell lies in the training complement of `fold`.
pub fn training_rows(dataset: &MultiwayDataset, plan: &FoldPlan, fold: &[usize]) -> Vec<usize> {
    dataset
        .observations()
        .iter()
        .enumerate()
        .filter(|(_, o)| plan.in_training(fold, &o.cluster_index))
        .map(|(i, _)| i)
        .collect()
}

/// Fits `Y`, `D` and `Z` on `X` using every observation in the fold's training complement.
pub fn fit_nuisance_pliv(
    dataset: &MultiwayDataset,
    plan: &FoldPlan,
    fold: &[usize],
    learner: &NuisanceLearner,
) -> Result<PlivNuisance> {
    if dataset.cluster_counts() != plan.cluster_counts() {
        return Err(Error::InvalidFold("plan cluster counts do not match the dataset".into()));
    }
    let rows = training_rows(dataset, plan, fold);
    if rows.is_empty() {
        return Err(Error::FoldInfeasible { fold: fold.iter().map(|g| g + 1).collect() });
    }
    let p = dataset.n_covariates();
    let (g1, g2, m) = match learner {
        NuisanceLearner::Zero => (LinearFit::zero(p), LinearFit::zero(p), LinearFit::zero(p)),
        NuisanceLearner::Oracle { g1, g2, m } => {
            for v in [g1, g2, m] {
                if v.len() != p {
                    return Err(Error::DimensionMismatch { context: "score::oracle", expected: p, found: v.len() });
                }
            }
            (
                LinearFit::from_coefficients(0.0, g1.clone()),
                LinearFit::from_coefficients(0.0, g2.clone()),
                LinearFit::from_coefficients(0.0, m.clone()),
            )
        }
        NuisanceLearner::Penalized(cfg) => {
            let obs = dataset.observations();
            let x = DMatrix::from_fn(rows.len(), p, |r, c| obs[rows[r]].x[c]);
            let pick = |f: fn(&Observation) -> f64| rows.iter().map(|&i| f(&obs[i])).collect::<Vec<_>>();
            let (y, d, z) = (pick(|o| o.y), pick(|o| o.d), pick(|o| o.z));
            let mut cfg = cfg.clone();
            if let Lambda::CrossValidated(cv) = &mut cfg.lambda {
                cv.seed = rng::split_seed(rng::split_seed(cv.seed, plan.seed()), plan.fold_linear(fold) as u64);
            }
            let mut fits = fit_elastic_net_multi(&x, &[&y, &d, &z], &cfg)?.into_iter();
            let mut next = || fits.next().expect("three fits");
            (next(), next(), next())
        }
    };
    Ok(PlivNuisance { g1, g2, m, fold: fold.to_vec(), n_train: rows.len() })
}
