//! `K^ℓ`-fold multiway cross fitting.
//!
//! Each cluster dimension is shuffled with its own seeded stream and sliced
//! into `K` contiguous groups, the first `C_i mod K` groups one larger. A fold
//! is a vector `k = (k_1, ..., k_ℓ)` of group ids; its estimation set is the
//! product of the chosen groups and its training set is the product of their
//! complements, so the two never share a cluster label in any dimension.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    cluster_counts: Vec<usize>,
    k: usize,
    seed: u64,
    /// `groups[dim][g]` lists the 0-based labels of group `g`, ascending.
    groups: Vec<Vec<Vec<usize>>>,
    /// `assignment[dim][label]` is the group holding `label`.
    assignment: Vec<Vec<usize>>,
}

#[derive(Serialize)]
struct PlanJson<'a> {
    k: usize,
    seed: u64,
    cluster_counts: &'a [usize],
    /// dimension -> K lists of 1-based labels
    groups: Vec<Vec<Vec<usize>>>,
}

pub fn make_fold_plan(cluster_counts: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("K must be at least 2, got {k}")));
    }
    if cluster_counts.is_empty() {
        return Err(Error::Config("at least one cluster dimension is required".into()));
    }
    let mut groups = Vec::with_capacity(cluster_counts.len());
    for (dim, &c) in cluster_counts.iter().enumerate() {
        if c < k {
            return Err(Error::InfeasiblePartition { dim: dim + 1, clusters: c, k });
        }
        let mut labels: Vec<usize> = (0..c).collect();
        labels.shuffle(&mut rng::stream(seed, dim as u64));
        let (base, extra) = (c / k, c % k);
        let mut start = 0;
        let mut dim_groups = Vec::with_capacity(k);
        for g in 0..k {
            let len = base + usize::from(g < extra);
            let mut group = labels[start..start + len].to_vec();
            group.sort_unstable();
            dim_groups.push(group);
            start += len;
        }
        groups.push(dim_groups);
    }
    Ok(FoldPlan::from_groups(cluster_counts.to_vec(), k, seed, groups))
}

impl FoldPlan {
    fn from_groups(cluster_counts: Vec<usize>, k: usize, seed: u64, groups: Vec<Vec<Vec<usize>>>) -> Self {
        let assignment = groups
            .iter()
            .zip(&cluster_counts)
            .map(|(dim_groups, &c)| {
                let mut a = vec![0; c];
                for (g, group) in dim_groups.iter().enumerate() {
                    for &label in group {
                        a[label] = g;
                    }
                }
                a
            })
            .collect();
        Self { cluster_counts, k, seed, groups, assignment }
    }

    pub fn n_dims(&self) -> usize {
        self.cluster_counts.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cluster_counts(&self) -> &[usize] {
        &self.cluster_counts
    }

    pub fn groups(&self, dim: usize) -> &[Vec<usize>] {
        &self.groups[dim]
    }

    pub fn group_of(&self, dim: usize, label: usize) -> usize {
        self.assignment[dim][label]
    }

    pub fn n_folds(&self) -> usize {
        self.k.pow(self.n_dims() as u32)
    }

    /// All folds of `[K]^ℓ` in lexicographic order (last dimension fastest).
    pub fn folds(&self) -> Vec<Vec<usize>> {
        (0..self.n_folds()).map(|i| self.fold_at(i)).collect()
    }

    pub fn fold_at(&self, mut linear: usize) -> Vec<usize> {
        let mut fold = vec![0; self.n_dims()];
        for slot in fold.iter_mut().rev() {
            *slot = linear % self.k;
            linear /= self.k;
        }
        fold
    }

    pub fn fold_linear(&self, fold: &[usize]) -> usize {
        fold.iter().fold(0, |acc, &g| acc * self.k + g)
    }

    fn check_fold(&self, fold: &[usize]) -> Result<()> {
        if fold.len() != self.n_dims() || fold.iter().any(|&g| g >= self.k) {
            return Err(Error::InvalidFold(format!(
                "fold {fold:?} is not in [{}]^{}",
                self.k,
                self.n_dims()
            )));
        }
        Ok(())
    }

    /// The fold whose estimation set contains `cell`.
    pub fn fold_of_cell(&self, cell: &[usize]) -> Vec<usize> {
        cell.iter().enumerate().map(|(dim, &j)| self.assignment[dim][j]).collect()
    }

    pub fn in_estimation(&self, fold: &[usize], cell: &[usize]) -> bool {
        cell.iter().enumerate().all(|(dim, &j)| self.assignment[dim][j] == fold[dim])
    }

    pub fn in_training(&self, fold: &[usize], cell: &[usize]) -> bool {
        cell.iter().enumerate().all(|(dim, &j)| self.assignment[dim][j] != fold[dim])
    }

    /// `|I_k|`, the number of cells (occupied or not) in the fold's estimation set.
    pub fn estimation_size(&self, fold: &[usize]) -> usize {
        fold.iter().enumerate().map(|(dim, &g)| self.groups[dim][g].len()).product()
    }

    /// `min_i |I_{k_i}|`.
    pub fn min_group_size(&self, fold: &[usize]) -> usize {
        fold.iter()
            .enumerate()
            .map(|(dim, &g)| self.groups[dim][g].len())
            .min()
            .unwrap_or(0)
    }

    /// Cartesian product of the fold's groups.
    pub fn estimation_cells(&self, fold: &[usize]) -> Result<Vec<Vec<usize>>> {
        self.check_fold(fold)?;
        let sets: Vec<Vec<usize>> =
            fold.iter().enumerate().map(|(dim, &g)| self.groups[dim][g].clone()).collect();
        Ok(cartesian(&sets))
    }

    /// Cartesian product of the complements of the fold's groups.
    pub fn training_cells(&self, fold: &[usize]) -> Result<Vec<Vec<usize>>> {
        self.check_fold(fold)?;
        let sets: Vec<Vec<usize>> = fold
            .iter()
            .enumerate()
            .map(|(dim, &g)| (0..self.cluster_counts[dim]).filter(|&j| self.assignment[dim][j] != g).collect())
            .collect();
        Ok(cartesian(&sets))
    }

    /// The plan obtained by renaming labels with `perms[dim][old] = new`.
    /// Group ids are kept, so fold `k` of the result covers the relabelled cells of fold `k` here.
    pub fn relabel(&self, perms: &[Vec<usize>]) -> Result<Self> {
        if perms.len() != self.n_dims()
            || perms.iter().zip(&self.cluster_counts).any(|(p, &c)| p.len() != c)
        {
            return Err(Error::InvalidFold("relabel: permutation shape mismatch".into()));
        }
        let groups = self
            .groups
            .iter()
            .zip(perms)
            .map(|(dim_groups, perm)| {
                dim_groups
                    .iter()
                    .map(|g| {
                        let mut out: Vec<usize> = g.iter().map(|&l| perm[l]).collect();
                        out.sort_unstable();
                        out
                    })
                    .collect()
            })
            .collect();
        Ok(Self::from_groups(self.cluster_counts.clone(), self.k, self.seed, groups))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let groups = self
            .groups
            .iter()
            .map(|dim| dim.iter().map(|g| g.iter().map(|l| l + 1).collect()).collect())
            .collect();
        serde_json::to_value(PlanJson {
            k: self.k,
            seed: self.seed,
            cluster_counts: &self.cluster_counts,
            groups,
        })
        .expect("plan serialises")
    }

    /// ASCII picture of a two-dimensional fold: `S` marks score (estimation)
    /// cells, `N` nuisance (training) cells and `.` everything else. Rows are
    /// dimension-1 labels, columns dimension-2 labels.
    pub fn render_fold(&self, fold: &[usize]) -> Result<String> {
        self.check_fold(fold)?;
        if self.n_dims() != 2 {
            return Err(Error::InvalidFold("grid rendering needs exactly two dimensions".into()));
        }
        let mut out = String::new();
        for i in 0..self.cluster_counts[0] {
            for j in 0..self.cluster_counts[1] {
                let cell = [i, j];
                let mark = if self.in_estimation(fold, &cell) {
                    'S'
                } else if self.in_training(fold, &cell) {
                    'N'
                } else {
                    '.'
                };
                out.push(mark);
            }
            out.push('\n');
        }
        Ok(out)
    }
}

fn cartesian(sets: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::with_capacity(sets.len())];
    for set in sets {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                set.iter().map(move |&v| {
                    let mut next = prefix.clone();
                    next.push(v);
                    next
                })
            })
            .collect();
    }
    out
}
