//! The `mwdml` command-line tool.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 for
//! numerical failures (singular Jacobian, non-positive variance, too many
//! failed Monte Carlo replicates).

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::crossfit::make_fold_plan;
use crate::data::{load_dataset, ColumnMapping};
use crate::error::{Error, Result};
use crate::estimator::{run_dml, Aggregation, DmlConfig, EstimateReport, Robustness};
use crate::nuisance::{CvConfig, Lambda, LambdaGrid, PenaltyConfig};
use crate::score::NuisanceLearner;
use crate::simulate::{monte_carlo, DgpParams, DgpWeights};

#[derive(Debug, Parser)]
#[command(name = "mwdml", version, about = "Multiway cluster-robust double/debiased machine learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate θ on a CSV dataset.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo grid.
    Simulate(SimulateArgs),
    /// Preview a fold plan.
    Partition(PartitionArgs),
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// zero | one:<dim> | multi
    #[arg(long)]
    pub robustness: Option<String>,
    /// lasso | ridge | enet | zero
    #[arg(long)]
    pub learner: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, conflicts_with = "cv")]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub cv: bool,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    /// Cluster counts per dimension, e.g. `4,4`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub counts: Vec<usize>,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Learner block shared by the estimate and simulate configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerSpec {
    pub kind: String,
    /// Mixing for `enet`; ignored otherwise.
    pub alpha: f64,
    /// Fixed penalty; cross-validation when absent.
    pub lambda: Option<f64>,
    pub cv_folds: usize,
    pub cv_seed: u64,
    pub grid_size: usize,
    pub min_ratio: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub standardize: bool,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        let p = PenaltyConfig::default();
        let cv = CvConfig::default();
        let (grid_size, min_ratio) = match cv.grid {
            LambdaGrid::Geometric { n, min_ratio } => (n, min_ratio),
            LambdaGrid::Explicit(_) => unreachable!("default grid is geometric"),
        };
        Self {
            kind: "lasso".into(),
            alpha: 0.5,
            lambda: None,
            cv_folds: cv.n_folds,
            cv_seed: cv.seed,
            grid_size,
            min_ratio,
            max_iter: p.max_iter,
            tol: p.tol,
            standardize: p.standardize,
        }
    }
}

impl LearnerSpec {
    pub fn to_learner(&self) -> Result<NuisanceLearner> {
        let alpha = match self.kind.as_str() {
            "lasso" => 1.0,
            "ridge" => 0.0,
            "enet" | "elastic_net" | "elastic-net" => self.alpha,
            "zero" => return Ok(NuisanceLearner::Zero),
            other => return Err(Error::Config(format!("unknown learner `{other}` (lasso | ridge | enet | zero)"))),
        };
        let lambda = match self.lambda {
            Some(l) => Lambda::Fixed(l),
            None => Lambda::CrossValidated(CvConfig {
                grid: LambdaGrid::Geometric { n: self.grid_size, min_ratio: self.min_ratio },
                n_folds: self.cv_folds,
                seed: self.cv_seed,
            }),
        };
        let cfg = PenaltyConfig { alpha, lambda, max_iter: self.max_iter, tol: self.tol, standardize: self.standardize };
        cfg.validate()?;
        Ok(NuisanceLearner::Penalized(cfg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmlSection {
    pub k: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub robustness: Robustness,
    pub aggregation: Aggregation,
    pub level: f64,
}

impl Default for DmlSection {
    fn default() -> Self {
        let d = DmlConfig::default();
        Self { k: d.k, repetitions: d.repetitions, seed: d.seed, robustness: d.robustness, aggregation: d.aggregation, level: d.level }
    }
}

impl DmlSection {
    fn to_config(&self, learner: NuisanceLearner) -> DmlConfig {
        DmlConfig {
            k: self.k,
            seed: self.seed,
            repetitions: self.repetitions,
            learner,
            robustness: self.robustness,
            aggregation: self.aggregation,
            level: self.level,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateFile {
    pub data: ColumnMapping,
    #[serde(default)]
    pub dml: DmlSection,
    #[serde(default)]
    pub learner: LearnerSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub n: usize,
    pub m: usize,
    pub dim_x: usize,
    pub k: usize,
    pub learners: Vec<String>,
}

/// DGP settings shared by every grid entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpSection {
    pub theta0: f64,
    pub pi10: f64,
    pub s_x: f64,
    pub s_eps_ups: f64,
    pub weights: DgpWeights,
}

impl Default for DgpSection {
    fn default() -> Self {
        let d = DgpParams::default();
        Self { theta0: d.theta0, pi10: d.pi10, s_x: d.s_x, s_eps_ups: d.s_eps_ups, weights: d.weights }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateFile {
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dgp: DgpSection,
    /// `k` here is ignored; each grid entry sets its own.
    #[serde(default)]
    pub dml: DmlSection,
    #[serde(default)]
    pub learner: LearnerSpec,
    pub grid: Vec<GridEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "C")]
    pub c_min: usize,
    pub dim_x: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub learner: String,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub cover: f64,
    pub reps: usize,
    pub failed: usize,
}

#[derive(Serialize)]
struct EstimateArtifact<'a> {
    data: String,
    columns: &'a ColumnMapping,
    #[serde(flatten)]
    report: &'a EstimateReport,
}

#[derive(Serialize)]
struct SimulateArtifact<'a> {
    config: &'a SimulateFile,
    rows: &'a [TableRow],
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn init_threads(flag: Option<usize>) {
    let threads = flag.or_else(|| std::env::var("MWDML_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn write_out(path: &Path, contents: &str) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

/// Resolves the estimate configuration: file values first, flags on top.
pub fn resolve_estimate(args: &EstimateArgs) -> Result<EstimateFile> {
    let mut file: EstimateFile = read_toml(&args.config)?;
    if let Some(k) = args.k {
        file.dml.k = k;
    }
    if let Some(s) = args.s {
        file.dml.repetitions = s;
    }
    if let Some(seed) = args.seed {
        file.dml.seed = seed;
    }
    if let Some(r) = &args.robustness {
        file.dml.robustness = r.parse()?;
    }
    if let Some(level) = args.level {
        file.dml.level = level;
    }
    if let Some(l) = &args.learner {
        file.learner.kind = l.clone();
    }
    if let Some(a) = args.alpha {
        file.learner.alpha = a;
    }
    if let Some(l) = args.lambda {
        file.learner.lambda = Some(l);
    }
    if args.cv {
        file.learner.lambda = None;
    }
    Ok(file)
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<EstimateReport> {
    init_threads(args.threads);
    let file = resolve_estimate(args)?;
    let config = file.dml.to_config(file.learner.to_learner()?);
    config.validate()?;
    let source = File::open(&args.data)
        .map_err(|e| Error::Config(format!("cannot open data {}: {e}", args.data.display())))?;
    let dataset = load_dataset(source, &file.data)?;
    let report = run_dml(&dataset, &config)?;
    println!("{}", report.summary());
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if let Some(out) = &args.out {
        let artifact = EstimateArtifact { data: args.data.display().to_string(), columns: &file.data, report: &report };
        write_out(out, &serde_json::to_string_pretty(&artifact)?)?;
    }
    Ok(report)
}

pub fn resolve_simulate(args: &SimulateArgs) -> Result<SimulateFile> {
    let mut file: SimulateFile = read_toml(&args.config)?;
    if let Some(r) = args.reps {
        file.reps = r;
    }
    if let Some(s) = args.seed {
        file.seed = s;
    }
    if file.reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    for (i, g) in file.grid.iter().enumerate() {
        if g.n < g.k || g.m < g.k || g.k < 2 {
            return Err(Error::Config(format!(
                "grid entry {}: N = {}, M = {} cannot be split into K = {} folds",
                i + 1,
                g.n,
                g.m,
                g.k
            )));
        }
        for l in &g.learners {
            LearnerSpec { kind: l.clone(), ..file.learner.clone() }.to_learner()?;
        }
    }
    Ok(file)
}

pub fn table_csv(rows: &[TableRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<Vec<TableRow>> {
    init_threads(args.threads);
    let file = resolve_simulate(args)?;
    let mut rows = Vec::new();
    for (gi, g) in file.grid.iter().enumerate() {
        for (li, name) in g.learners.iter().enumerate() {
            let learner = LearnerSpec { kind: name.clone(), ..file.learner.clone() }.to_learner()?;
            let dml = DmlConfig { k: g.k, ..file.dml.to_config(learner) };
            let dgp = DgpParams {
                n: g.n,
                m: g.m,
                dim_x: g.dim_x,
                theta0: file.dgp.theta0,
                pi10: file.dgp.pi10,
                s_x: file.dgp.s_x,
                s_eps_ups: file.dgp.s_eps_ups,
                weights: file.dgp.weights.clone(),
                seed: 0,
            };
            let seed = crate::rng::split_seed(crate::rng::split_seed(file.seed, gi as u64), li as u64);
            let res = monte_carlo(&dgp, &dml, file.reps, seed)?;
            log::info!("N={} M={} p={} K={} {}: {:.3}s per replicate", g.n, g.m, g.dim_x, g.k, name, res.mean_runtime_secs);
            rows.push(TableRow {
                n: g.n,
                m: g.m,
                c_min: g.n.min(g.m),
                dim_x: g.dim_x,
                k: g.k,
                learner: name.clone(),
                bias: res.bias,
                sd: res.sd,
                rmse: res.rmse,
                cover: res.coverage,
                reps: res.n_reps,
                failed: res.n_failed,
            });
        }
    }
    let csv = table_csv(&rows)?;
    print!("{csv}");
    if let Some(out) = &args.out {
        let text = if out.extension().is_some_and(|e| e == "csv") {
            csv
        } else {
            serde_json::to_string_pretty(&SimulateArtifact { config: &file, rows: &rows })?
        };
        write_out(out, &text)?;
    }
    Ok(rows)
}

/// Plan JSON followed, for two dimensions up to 40×40, by one grid per fold.
pub fn partition_text(args: &PartitionArgs) -> Result<String> {
    let plan = make_fold_plan(&args.counts, args.k, args.seed)?;
    let mut out = serde_json::to_string_pretty(&plan.to_json())?;
    out.push('\n');
    for dim in 0..plan.n_dims() {
        let sizes: Vec<String> = plan.groups(dim).iter().map(|g| g.len().to_string()).collect();
        out.push_str(&format!("dimension {} group sizes: {{{}}}\n", dim + 1, sizes.join(",")));
    }
    if plan.n_dims() == 2 && args.counts.iter().all(|&c| c <= 40) {
        for fold in plan.folds() {
            let label: Vec<String> = fold.iter().map(|g| (g + 1).to_string()).collect();
            out.push_str(&format!("\nfold ({}): S = score, N = nuisance\n", label.join(",")));
            out.push_str(&plan.render_fold(&fold)?);
        }
    }
    Ok(out)
}

pub fn cmd_partition(args: &PartitionArgs) -> Result<()> {
    print!("{}", partition_text(args)?);
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numerical() {
        2
    } else {
        1
    }
}

pub fn run_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Estimate(a) => cmd_estimate(a).map(|_| ()),
        Command::Simulate(a) => cmd_simulate(a).map(|_| ()),
        Command::Partition(a) => cmd_partition(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    run_with_args(std::env::args_os())
}
