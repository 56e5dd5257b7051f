//! Multiway-clustered datasets.
//!
//! A dataset is a list of observations, each tagged with an `ℓ`-dimensional
//! cluster index. Cells (distinct index vectors) may hold zero, one or many
//! observations. Cluster labels are stored 0-based internally; the original
//! string labels are kept per dimension so reports and exports can use them.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// 0-based cluster label in each dimension.
    pub cluster_index: Vec<usize>,
    pub y: f64,
    pub d: f64,
    pub z: f64,
    pub x: Vec<f64>,
}

/// Column names for each role, in the order covariates are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSchema {
    pub index: Vec<String>,
    pub y: String,
    pub d: String,
    pub z: String,
    pub x: Vec<String>,
}

impl VariableSchema {
    /// Generic names `j1..jℓ`, `y`, `d`, `z`, `x1..xp`.
    pub fn generic(n_dims: usize, p: usize) -> Self {
        Self {
            index: (1..=n_dims).map(|i| format!("j{i}")).collect(),
            y: "y".into(),
            d: "d".into(),
            z: "z".into(),
            x: (1..=p).map(|i| format!("x{i}")).collect(),
        }
    }
}

/// How CSV columns map onto dataset roles.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMapping {
    pub index_cols: Vec<String>,
    pub y_col: String,
    pub d_col: String,
    pub z_col: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_cols: Option<Vec<String>>,
    /// Every header column starting with this prefix is a covariate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_prefix: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiwayDataset {
    cluster_counts: Vec<usize>,
    observations: Vec<Observation>,
    schema: VariableSchema,
    labels: Vec<Vec<String>>,
    max_occupancy: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n_obs: usize,
    pub n_dims: usize,
    pub cluster_counts: Vec<usize>,
    /// `C̲`, the smallest cluster count across dimensions.
    pub min_clusters: usize,
    /// `histogram[n]` is the number of cells holding exactly `n` observations.
    pub occupancy_histogram: Vec<u128>,
    pub empty_cells: u128,
    pub max_occupancy: usize,
    pub n_covariates: usize,
}

impl MultiwayDataset {
    /// Builds a dataset with labels `"1".."C_i"` in every dimension.
    pub fn new(
        cluster_counts: Vec<usize>,
        observations: Vec<Observation>,
        schema: VariableSchema,
    ) -> Result<Self> {
        let labels = cluster_counts
            .iter()
            .map(|&c| (1..=c).map(|l| l.to_string()).collect())
            .collect();
        Self::with_labels(cluster_counts, observations, schema, labels)
    }

    pub fn with_labels(
        cluster_counts: Vec<usize>,
        observations: Vec<Observation>,
        schema: VariableSchema,
        labels: Vec<Vec<String>>,
    ) -> Result<Self> {
        let mut ds = Self {
            cluster_counts,
            observations,
            schema,
            labels,
            max_occupancy: 0,
        };
        let report = ds.validate()?;
        ds.max_occupancy = report.max_occupancy;
        Ok(ds)
    }

    pub fn n_dims(&self) -> usize {
        self.cluster_counts.len()
    }

    pub fn cluster_counts(&self) -> &[usize] {
        &self.cluster_counts
    }

    /// `C̲ = min_i C_i`.
    pub fn min_clusters(&self) -> usize {
        self.cluster_counts.iter().copied().min().unwrap_or(0)
    }

    /// `N̄`, the largest cell occupancy.
    pub fn max_occupancy(&self) -> usize {
        self.max_occupancy
    }

    pub fn n_obs(&self) -> usize {
        self.observations.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.schema.x.len()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    /// Original label of dense cluster `id` in dimension `dim`.
    pub fn label(&self, dim: usize, id: usize) -> &str {
        &self.labels[dim][id]
    }

    pub fn labels(&self) -> &[Vec<String>] {
        &self.labels
    }

    /// Occupancy of every non-empty cell.
    pub fn cell_occupancy(&self) -> HashMap<Vec<usize>, usize> {
        let mut counts = HashMap::new();
        for obs in &self.observations {
            *counts.entry(obs.cluster_index.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// Checks every dataset invariant and summarises the cell structure.
    pub fn validate(&self) -> Result<ValidationReport> {
        let n_dims = self.cluster_counts.len();
        if n_dims == 0 {
            return Err(Error::Validation("at least one cluster dimension is required".into()));
        }
        if let Some(i) = self.cluster_counts.iter().position(|&c| c == 0) {
            return Err(Error::Validation(format!("dimension {} has no clusters", i + 1)));
        }
        if self.observations.is_empty() {
            return Err(Error::EmptyInput);
        }
        if self.labels.len() != n_dims
            || self.labels.iter().zip(&self.cluster_counts).any(|(l, &c)| l.len() != c)
        {
            return Err(Error::Validation("label table does not match cluster counts".into()));
        }
        if self.schema.index.len() != n_dims {
            return Err(Error::Validation(format!(
                "schema names {} index columns for {} dimensions",
                self.schema.index.len(),
                n_dims
            )));
        }
        let p = self.schema.x.len();
        for (row, obs) in self.observations.iter().enumerate() {
            if obs.cluster_index.len() != n_dims {
                return Err(Error::Validation(format!(
                    "observation {} has {} cluster indices, expected {}",
                    row + 1,
                    obs.cluster_index.len(),
                    n_dims
                )));
            }
            for (dim, (&j, &c)) in obs.cluster_index.iter().zip(&self.cluster_counts).enumerate() {
                if j >= c {
                    return Err(Error::Validation(format!(
                        "observation {}: index {} in dimension {} exceeds C = {}",
                        row + 1,
                        j + 1,
                        dim + 1,
                        c
                    )));
                }
            }
            if obs.x.len() != p {
                return Err(Error::Validation(format!(
                    "observation {} has {} covariates, expected {}",
                    row + 1,
                    obs.x.len(),
                    p
                )));
            }
            let finite = obs.y.is_finite()
                && obs.d.is_finite()
                && obs.z.is_finite()
                && obs.x.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Validation(format!(
                    "observation {} has a non-finite value",
                    row + 1
                )));
            }
        }

        let occupancy = self.cell_occupancy();
        let max_occupancy = occupancy.values().copied().max().unwrap_or(0);
        let total_cells: u128 = self.cluster_counts.iter().map(|&c| c as u128).product();
        let empty_cells = total_cells - occupancy.len() as u128;
        let mut histogram = vec![0u128; max_occupancy + 1];
        histogram[0] = empty_cells;
        for &n in occupancy.values() {
            histogram[n] += 1;
        }
        Ok(ValidationReport {
            n_obs: self.observations.len(),
            n_dims,
            cluster_counts: self.cluster_counts.clone(),
            min_clusters: self.min_clusters(),
            occupancy_histogram: histogram,
            empty_cells,
            max_occupancy,
            n_covariates: p,
        })
    }

    /// Applies `perms[i][old] = new` to the cluster labels of every dimension.
    /// Observation order is unchanged; the label table is permuted alongside.
    pub fn relabel(&self, perms: &[Vec<usize>]) -> Result<Self> {
        if perms.len() != self.n_dims() {
            return Err(Error::DimensionMismatch {
                context: "data::relabel",
                expected: self.n_dims(),
                found: perms.len(),
            });
        }
        for (perm, &c) in perms.iter().zip(&self.cluster_counts) {
            if !is_permutation(perm, c) {
                return Err(Error::Validation("relabel: not a permutation".into()));
            }
        }
        let observations = self
            .observations
            .iter()
            .map(|obs| Observation {
                cluster_index: obs
                    .cluster_index
                    .iter()
                    .zip(perms)
                    .map(|(&j, perm)| perm[j])
                    .collect(),
                ..obs.clone()
            })
            .collect();
        let labels = self
            .labels
            .iter()
            .zip(perms)
            .map(|(labels, perm)| {
                let mut out = labels.clone();
                for (old, &new) in perm.iter().enumerate() {
                    out[new] = labels[old].clone();
                }
                out
            })
            .collect();
        Self::with_labels(self.cluster_counts.clone(), observations, self.schema.clone(), labels)
    }

    /// Writes the dataset as CSV using the schema's column names and the
    /// original cluster labels. Floats use the shortest round-trip form.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.schema.index.iter().map(String::as_str).collect();
        header.extend([self.schema.y.as_str(), &self.schema.d, &self.schema.z]);
        header.extend(self.schema.x.iter().map(String::as_str));
        w.write_record(&header)?;
        for obs in &self.observations {
            let mut rec: Vec<String> = obs
                .cluster_index
                .iter()
                .enumerate()
                .map(|(dim, &j)| self.labels[dim][j].clone())
                .collect();
            rec.extend([obs.y, obs.d, obs.z].iter().map(f64::to_string));
            rec.extend(obs.x.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// The column mapping that [`load_dataset`] needs to read back [`write_csv`] output.
    pub fn column_mapping(&self) -> ColumnMapping {
        ColumnMapping {
            index_cols: self.schema.index.clone(),
            y_col: self.schema.y.clone(),
            d_col: self.schema.d.clone(),
            z_col: self.schema.z.clone(),
            x_cols: Some(self.schema.x.clone()),
            x_prefix: None,
        }
    }
}

fn is_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    perm.iter().all(|&v| v < n && !std::mem::replace(&mut seen[v], true))
}

fn find_column(header: &csv::StringRecord, name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

/// Reads a CSV with a header row into a validated dataset.
///
/// Cluster labels in each index column are re-encoded to dense ids in order
/// of first appearance; the original strings are retained.
pub fn load_dataset<R: Read>(source: R, mapping: &ColumnMapping) -> Result<MultiwayDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let header = reader.headers()?.clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(Error::EmptyInput);
    }
    if mapping.index_cols.is_empty() {
        return Err(Error::Config("index_cols must name at least one column".into()));
    }

    let index_pos = mapping
        .index_cols
        .iter()
        .map(|c| find_column(&header, c))
        .collect::<Result<Vec<_>>>()?;
    let y_pos = find_column(&header, &mapping.y_col)?;
    let d_pos = find_column(&header, &mapping.d_col)?;
    let z_pos = find_column(&header, &mapping.z_col)?;
    let x_names: Vec<String> = match (&mapping.x_cols, &mapping.x_prefix) {
        (Some(cols), None) => cols.clone(),
        (None, Some(prefix)) => header
            .iter()
            .filter(|h| h.starts_with(prefix.as_str()))
            .map(str::to_string)
            .collect(),
        (Some(_), Some(_)) => {
            return Err(Error::Config("give either x_cols or x_prefix, not both".into()))
        }
        (None, None) => return Err(Error::Config("one of x_cols or x_prefix is required".into())),
    };
    if x_names.is_empty() {
        return Err(Error::Config("no covariate columns selected".into()));
    }
    let x_pos = x_names
        .iter()
        .map(|c| find_column(&header, c))
        .collect::<Result<Vec<_>>>()?;

    let n_dims = index_pos.len();
    let mut encoders: Vec<HashMap<String, usize>> = vec![HashMap::new(); n_dims];
    let mut labels: Vec<Vec<String>> = vec![Vec::new(); n_dims];
    let mut observations = Vec::new();

    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let num = |pos: usize| -> Result<f64> {
            let raw = record.get(pos).unwrap_or("");
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row,
                column: header[pos].to_string(),
                value: raw.to_string(),
            })
        };
        let mut cluster_index = Vec::with_capacity(n_dims);
        for (dim, &pos) in index_pos.iter().enumerate() {
            let raw = record.get(pos).unwrap_or("").to_string();
            let next = labels[dim].len();
            let id = *encoders[dim].entry(raw.clone()).or_insert_with(|| {
                labels[dim].push(raw);
                next
            });
            cluster_index.push(id);
        }
        observations.push(Observation {
            cluster_index,
            y: num(y_pos)?,
            d: num(d_pos)?,
            z: num(z_pos)?,
            x: x_pos.iter().map(|&p| num(p)).collect::<Result<_>>()?,
        });
    }
    if observations.is_empty() {
        return Err(Error::EmptyInput);
    }

    let cluster_counts = labels.iter().map(Vec::len).collect();
    let schema = VariableSchema {
        index: mapping.index_cols.clone(),
        y: mapping.y_col.clone(),
        d: mapping.d_col.clone(),
        z: mapping.z_col.clone(),
        x: x_names,
    };
    MultiwayDataset::with_labels(cluster_counts, observations, schema, labels)
}
