//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use mwdml::data::VariableSchema;
use mwdml::{FoldPlan, MultiwayDataset, Observation};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random dataset on a grid with the given counts. Every cell holds a number
/// of observations drawn from `per_cell`; every label is used at least once.
pub fn random_dataset(rng: &mut ChaCha8Rng, counts: &[usize], p: usize, per_cell: std::ops::RangeInclusive<usize>) -> MultiwayDataset {
    let n_cells: usize = counts.iter().product();
    let mut observations = Vec::new();
    let obs_at = |cell: Vec<usize>, rng: &mut ChaCha8Rng| {
        let x: Vec<f64> = (0..p).map(|_| gaussian(rng)).collect();
        let z = x.iter().sum::<f64>() * 0.3 + gaussian(rng);
        let d = 0.8 * z + 0.2 * x[0] + gaussian(rng);
        let y = 1.5 * d + 0.5 * x[0] + gaussian(rng);
        Observation { cluster_index: cell, y, d, z, x }
    };
    for linear in 0..n_cells {
        let cell = unravel(linear, counts);
        let reps = rng.gen_range(per_cell.clone());
        for _ in 0..reps {
            let o = obs_at(cell.clone(), rng);
            observations.push(o);
        }
    }
    // diagonal cells guarantee every label appears
    let longest = *counts.iter().max().unwrap();
    for t in 0..longest {
        let cell: Vec<usize> = counts.iter().map(|&c| t % c).collect();
        let o = obs_at(cell, rng);
        observations.push(o);
    }
    MultiwayDataset::new(counts.to_vec(), observations, VariableSchema::generic(counts.len(), p)).unwrap()
}

pub fn unravel(mut linear: usize, counts: &[usize]) -> Vec<usize> {
    let mut cell = vec![0; counts.len()];
    for d in (0..counts.len()).rev() {
        cell[d] = linear % counts[d];
        linear /= counts[d];
    }
    cell
}

/// Group of each label, read off the plan's group lists.
fn group_of(plan: &FoldPlan, dim: usize, label: usize) -> usize {
    plan.groups(dim).iter().position(|g| g.contains(&label)).unwrap()
}

fn in_fold(plan: &FoldPlan, fold: &[usize], cell: &[usize]) -> bool {
    cell.iter().enumerate().all(|(d, &c)| group_of(plan, d, c) == fold[d])
}

fn fold_size(plan: &FoldPlan, fold: &[usize]) -> (f64, f64) {
    let sizes: Vec<usize> = fold.iter().enumerate().map(|(d, &g)| plan.groups(d)[g].len()).collect();
    (sizes.iter().product::<usize>() as f64, *sizes.iter().min().unwrap() as f64)
}

/// Every fold of the plan, enumerated by nested counting.
pub fn all_folds(plan: &FoldPlan) -> Vec<Vec<usize>> {
    let dims = plan.n_dims();
    let k = plan.k();
    (0..k.pow(dims as u32)).map(|l| unravel(l, &vec![k; dims])).collect()
}

/// Nested-loop multiway meat for scalar scores `psi[obs]`: per fold, every
/// ordered pair of observations contributes once for each shared coordinate.
pub fn brute_force_gamma(dataset: &MultiwayDataset, plan: &FoldPlan, psi: &[f64]) -> f64 {
    let obs = dataset.observations();
    let folds = all_folds(plan);
    let mut total = 0.0;
    for fold in &folds {
        let (size, min_group) = fold_size(plan, fold);
        let members: Vec<usize> = (0..obs.len()).filter(|&i| in_fold(plan, fold, &obs[i].cluster_index)).collect();
        let mut acc = 0.0;
        for &a in &members {
            for &b in &members {
                let shared = (0..plan.n_dims())
                    .filter(|&d| obs[a].cluster_index[d] == obs[b].cluster_index[d])
                    .count();
                acc += psi[a] * psi[b] * shared as f64;
            }
        }
        total += min_group / (size * size) * acc;
    }
    total / folds.len() as f64
}

/// Fold-averaged empirical moment `θ ↦ K^-ℓ Σ_k |I_k|⁻¹ Σ_{obs ∈ k} ψ(θ)` for
/// per-observation linear scores `ψ = a θ + b`.
pub fn moment_fn<'a>(dataset: &'a MultiwayDataset, plan: &'a FoldPlan, a: &'a [f64], b: &'a [f64]) -> impl Fn(f64) -> f64 + 'a {
    let obs = dataset.observations();
    let folds = all_folds(plan);
    let per_fold: Vec<(f64, Vec<usize>)> = folds
        .iter()
        .map(|f| (fold_size(plan, f).0, (0..obs.len()).filter(|&i| in_fold(plan, f, &obs[i].cluster_index)).collect()))
        .collect();
    move |theta| {
        per_fold
            .iter()
            .map(|(size, members)| members.iter().map(|&i| a[i] * theta + b[i]).sum::<f64>() / size)
            .sum::<f64>()
            / per_fold.len() as f64
    }
}

/// Root of a monotone function on `[lo, hi]` by bisection.
pub fn bisection(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let (mut flo, fhi) = (f(lo), f(hi));
    assert!(flo * fhi <= 0.0, "root not bracketed: f({lo}) = {flo}, f({hi}) = {fhi}");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Random permutation of `0..n`.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Per-observation PLIV score pieces `(a, b)` with `ψ = a θ + b`, each
/// observation scored by the nuisance fitted without its fold.
pub fn observation_scores(
    dataset: &MultiwayDataset,
    plan: &FoldPlan,
    nuisances: &[mwdml::PlivNuisance],
) -> (Vec<f64>, Vec<f64>) {
    let folds = all_folds(plan);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for o in dataset.observations() {
        let f = folds.iter().position(|f| in_fold(plan, f, &o.cluster_index)).unwrap();
        let nu = nuisances.iter().find(|n| n.fold == folds[f]).unwrap();
        let g1 = nu.g1.intercept + nu.g1.coefficients.iter().zip(&o.x).map(|(c, x)| c * x).sum::<f64>();
        let g2 = nu.g2.intercept + nu.g2.coefficients.iter().zip(&o.x).map(|(c, x)| c * x).sum::<f64>();
        let m = nu.m.intercept + nu.m.coefficients.iter().zip(&o.x).map(|(c, x)| c * x).sum::<f64>();
        a.push(-(o.d - g2) * (o.z - m));
        b.push((o.y - g1) * (o.z - m));
    }
    (a, b)
}

/// Fits the nuisances of every fold, in plan order.
pub fn fit_all(dataset: &MultiwayDataset, plan: &FoldPlan, learner: &mwdml::NuisanceLearner) -> Vec<mwdml::PlivNuisance> {
    plan.folds().iter().map(|f| mwdml::score::fit_nuisance_pliv(dataset, plan, f, learner).unwrap()).collect()
}

/// Random regression problem with a sparse signal.
pub fn random_regression(rng: &mut ChaCha8Rng, n: usize, p: usize) -> (nalgebra::DMatrix<f64>, Vec<f64>) {
    let x = nalgebra::DMatrix::from_fn(n, p, |_, _| gaussian(rng));
    let beta: Vec<f64> = (0..p).map(|j| if j < 5 { 1.0 / (j + 1) as f64 } else { 0.0 }).collect();
    let y = (0..n).map(|i| (0..p).map(|j| x[(i, j)] * beta[j]).sum::<f64>() + 0.5 + gaussian(rng)).collect();
    (x, y)
}

/// Largest violation of the lasso optimality conditions, computed from raw
/// data for an unstandardized fit with unpenalized intercept.
pub fn lasso_kkt(x: &nalgebra::DMatrix<f64>, y: &[f64], fit: &mwdml::LinearFit, lambda: f64) -> f64 {
    let (n, p) = x.shape();
    let resid: Vec<f64> = (0..n)
        .map(|i| y[i] - fit.intercept - (0..p).map(|j| x[(i, j)] * fit.coefficients[j]).sum::<f64>())
        .collect();
    let mut worst = resid.iter().sum::<f64>().abs() / n as f64;
    for j in 0..p {
        let g = -(0..n).map(|i| x[(i, j)] * resid[i]).sum::<f64>() / n as f64;
        let b = fit.coefficients[j];
        let v = if b != 0.0 { (g + lambda * b.signum()).abs() } else { (g.abs() - lambda).max(0.0) };
        worst = worst.max(v);
    }
    worst
}

/// Ridge with unpenalized intercept: `(X̃'X̃/n + λI)⁻¹ X̃'ỹ/n` on centred data.
pub fn ridge_closed_form(x: &nalgebra::DMatrix<f64>, y: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let (n, p) = x.shape();
    let means: Vec<f64> = (0..p).map(|j| x.column(j).sum() / n as f64).collect();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let xc = nalgebra::DMatrix::from_fn(n, p, |i, j| x[(i, j)] - means[j]);
    let yc = nalgebra::DVector::from_fn(n, |i, _| y[i] - ybar);
    let a = xc.transpose() * &xc / n as f64 + nalgebra::DMatrix::identity(p, p) * lambda;
    let rhs = xc.transpose() * yc / n as f64;
    let beta = a.lu().solve(&rhs).unwrap();
    let intercept = ybar - beta.iter().zip(&means).map(|(b, m)| b * m).sum::<f64>();
    (intercept, beta.iter().copied().collect())
}
