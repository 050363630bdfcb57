//! Configuration, orchestration, persistence and result emission.
//!
//! An experiment is described by a declarative TOML document:
//!
//! ```toml
//! kind = "toy-mse"
//! seed = 42
//! workers = 4
//! format = "csv"
//!
//! [params]
//! d = 2
//! l = 64
//! sigma2 = 1.0
//!
//! [sweep]
//! l = [16, 32, 64]
//! ```
//!
//! `run` executes one cell, `sweep` the Cartesian product of the sweep
//! axes with per-cell seeds derived from the master seed and the cell
//! coordinates. Result rows go to `results.csv` or `results.jsonl`; every
//! row carries the config hash, and a `manifest.json` records provenance.
//! Re-running an identical config reproduces the result files
//! byte-for-byte (worker count does not enter the stream derivations).

use crate::bounds;
use crate::channel::{
    generate_instance, lambda_for_channel, ChannelSpec, ElementArray, Instance, LambdaMethod,
    TruthMode,
};
use crate::estimator::{self, EstimatorOptions};
use crate::gibbs::{self, GibbsParams};
use crate::grid::{Boundary, GridGraph};
use crate::multiscale::{self, BlockSchedule, SyncOptions};
use crate::paths::{self, PathMeasureKind};
use crate::rng;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown experiment kind '{0}'")]
    UnknownKind(String),
    #[error("failed to parse config: {0}")]
    Parse(String),
    #[error("invalid parameters for '{kind}': {message}")]
    InvalidParams { kind: String, message: String },
    #[error("a seed is required for the stochastic experiment '{0}'")]
    SeedRequired(String),
    #[error("sweep axis '{0}' does not name a parameter of this experiment")]
    UnknownSweepAxis(String),
    #[error("sweep axis '{0}' must be a non-empty array of scalars")]
    BadSweepAxis(String),
    #[error("sweep has {cells} cells, exceeding the budget of {budget}")]
    SweepTooLarge { cells: usize, budget: usize },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("instance file is version {got}, this build reads version {want}")]
    VersionMismatch { got: u32, want: u32 },
    #[error("instance payload checksum mismatch (file corrupted?)")]
    ChecksumMismatch,
    #[error("instance payload malformed: {0}")]
    BadPayload(String),
    #[error(transparent)]
    Module(#[from] ModuleError),
}

/// Umbrella over the per-module error types so validation failures
/// surface with their own messages.
#[derive(Debug, Error)]
pub enum ModuleError {
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Channel(#[from] crate::channel::ChannelError),
    #[error(transparent)]
    Estimator(#[from] crate::estimator::EstimatorError),
    #[error(transparent)]
    Multiscale(#[from] crate::multiscale::MultiscaleError),
    #[error(transparent)]
    Gibbs(#[from] crate::gibbs::GibbsError),
    #[error(transparent)]
    Bounds(#[from] crate::bounds::BoundsError),
}

const SWEEP_BUDGET: usize = 4096;
const INSTANCE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Jsonl,
}

/// The parsed experiment document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfigDoc {
    pub kind: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub format: OutputFormat,
    /// Kind-specific parameters.
    #[serde(default = "empty_table")]
    pub params: toml::Table,
    /// Optional sweep axes: parameter name -> list of values.
    #[serde(default)]
    pub sweep: Option<toml::Table>,
}

fn empty_table() -> toml::Table {
    toml::Table::new()
}

impl ConfigDoc {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Default document for a kind, used when the CLI runs without a
    /// config file.
    pub fn default_for(kind: &str) -> Result<Self, ExperimentError> {
        let params = default_params_table(kind)?;
        Ok(Self {
            kind: kind.to_string(),
            seed: None,
            workers: None,
            format: OutputFormat::Csv,
            params,
            sweep: None,
        })
    }

    /// Apply a `key=value` override onto the params table. The key must
    /// already exist; the value is parsed as TOML.
    pub fn set_param(&mut self, key: &str, value: &str) -> Result<(), ExperimentError> {
        if !self.params.contains_key(key) {
            return Err(ExperimentError::UnknownSweepAxis(key.to_string()));
        }
        let parsed: toml::Value = format!("v = {value}")
            .parse::<toml::Table>()
            .map_err(|e| ExperimentError::Parse(format!("override '{key}={value}': {e}")))
            .map(|mut t| t.remove("v").unwrap())?;
        self.params.insert(key.to_string(), parsed);
        Ok(())
    }

    /// Short hex hash of the experiment's semantic content: kind, seed,
    /// params and sweep. Execution details (worker count, output format)
    /// do not change what is computed, so they stay out of the hash.
    pub fn config_hash(&self) -> String {
        let sweep = self.sweep.as_ref().filter(|t| !t.is_empty());
        let canon = serde_json::to_string(&(&self.kind, self.seed, &self.params, sweep))
            .expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        hex_string(&digest)[..16].to_string()
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

fn default_params_table(kind: &str) -> Result<toml::Table, ExperimentError> {
    let text = match kind {
        "toy-mse" => {
            "d = 1\nl = 64\nsigma2 = 1.0\nempirical = false\nn_trials = 200\n"
        }
        "generate" => {
            "extents = [16, 16]\nboundary = \"free\"\np = 0.05\ntruth = \"haar\"\nfile = \"instance.json\"\n"
        }
        "estimate-path" => {
            "extent = 9\np = 0.02\nmode = \"diagonal\"\nn = 4\nn_paths = 256\nmeasure = \"uniform\"\nspread = 0.25\ninstances = 20\n"
        }
        "estimate-multiscale" => {
            "side = 64\np = 0.01\nschedule = [1, 8]\ninstances = 5\npairs = 100\ndmin = 16\ndmax = 32\ntruth = \"haar\"\n"
        }
        "gibbs" => {
            "dims = 2\np_grid = [0.05, 0.10, 0.15]\nsizes = [16, 32]\ninstances = 8\nsweeps = 600\nburn_in = 150\nstride = 4\n"
        }
        "percolation" => {
            "d = 2\np_open = 0.45\nextent = 64\ndistances = [4, 8, 16]\ntrials = 200\n"
        }
        "spinwave" => {
            "l_values = [16, 32, 64]\nfamily = \"von-mises\"\nconcentration = 2.0\neps = 0.5\nwidth = 0.8\n"
        }
        "eit-diag" => {
            "measure = \"uniform\"\nspread = 0.25\nn = 8\nn_pairs = 5000\n"
        }
        "lambda-calib" => {
            "m = 2\nsigmas = [0.0, 0.5, 1.0]\nmc_samples = 20000\n"
        }
        other => return Err(ExperimentError::UnknownKind(other.to_string())),
    };
    Ok(text.parse().expect("default params parse"))
}

/// One table cell.
#[derive(Clone, Debug, PartialEq)]
pub enum CellValue {
    Int(i64),
    Float(f64),
    Text(String),
    Bool(bool),
}

impl std::fmt::Display for CellValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CellValue::Int(x) => write!(f, "{x}"),
            CellValue::Float(x) => write!(f, "{x}"),
            CellValue::Text(s) => write!(f, "{s}"),
            CellValue::Bool(b) => write!(f, "{b}"),
        }
    }
}

impl CellValue {
    fn to_json(&self) -> String {
        match self {
            CellValue::Int(x) => x.to_string(),
            CellValue::Float(x) => {
                if x.is_finite() {
                    // serde_json prints floats with the same shortest
                    // round-trip representation as Display
                    serde_json::Number::from_f64(*x)
                        .map(|n| n.to_string())
                        .unwrap_or_else(|| "null".into())
                } else {
                    "null".into()
                }
            }
            CellValue::Text(s) => serde_json::to_string(s).unwrap(),
            CellValue::Bool(b) => b.to_string(),
        }
    }
}

/// Tidy long-format result table.
#[derive(Clone, Debug, Default)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<CellValue>>,
}

impl ResultTable {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<CellValue>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    fn to_csv(&self, hash: &str) -> String {
        let mut out = String::new();
        out.push_str("config_hash,");
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(hash);
            for cell in row {
                out.push(',');
                out.push_str(&cell.to_string());
            }
            out.push('\n');
        }
        out
    }

    fn to_jsonl(&self, hash: &str) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str("{\"config_hash\":\"");
            out.push_str(hash);
            out.push('"');
            for (col, cell) in self.columns.iter().zip(row) {
                out.push(',');
                out.push_str(&serde_json::to_string(col).unwrap());
                out.push(':');
                out.push_str(&cell.to_json());
            }
            out.push_str("}\n");
        }
        out
    }

    /// Prepend fixed columns (used by sweeps to tag cells).
    fn prefixed(self, names: &[String], values: &[CellValue]) -> ResultTable {
        let mut columns = names.to_vec();
        columns.extend(self.columns);
        let rows = self
            .rows
            .into_iter()
            .map(|row| {
                let mut r = values.to_vec();
                r.extend(row);
                r
            })
            .collect();
        ResultTable { columns, rows }
    }
}

/// Everything a run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub table: ResultTable,
    pub result_file: PathBuf,
    pub manifest_file: PathBuf,
    pub extra_files: Vec<PathBuf>,
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, contents)
        .map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}

/// Execute a config document into `out_dir`.
pub fn run(doc: &ConfigDoc, out_dir: &Path) -> Result<RunOutput, ExperimentError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|source| ExperimentError::Io { path: out_dir.to_path_buf(), source })?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(doc.workers.unwrap_or(0))
        .build()
        .map_err(|e| ExperimentError::Parse(e.to_string()))?;

    let hash = doc.config_hash();
    let (table, extra_files) = pool.install(|| -> Result<_, ExperimentError> {
        match &doc.sweep {
            None => execute_kind(doc, &doc.params, doc.seed, out_dir),
            Some(sweep) => {
                let axes: Vec<(String, Vec<toml::Value>)> = sweep
                    .iter()
                    .map(|(k, v)| {
                        let arr = v
                            .as_array()
                            .filter(|a| !a.is_empty())
                            .ok_or_else(|| ExperimentError::BadSweepAxis(k.clone()))?;
                        Ok((k.clone(), arr.clone()))
                    })
                    .collect::<Result<_, ExperimentError>>()?;
                if axes.is_empty() {
                    return execute_kind(doc, &doc.params, doc.seed, out_dir);
                }
                for (k, _) in &axes {
                    if !doc.params.contains_key(k) {
                        return Err(ExperimentError::UnknownSweepAxis(k.clone()));
                    }
                }
                let cells: usize = axes.iter().map(|(_, v)| v.len()).product();
                if cells > SWEEP_BUDGET {
                    return Err(ExperimentError::SweepTooLarge { cells, budget: SWEEP_BUDGET });
                }
                let master = doc.seed;
                let mut merged: Option<ResultTable> = None;
                let mut extras = Vec::new();
                let mut index = vec![0usize; axes.len()];
                for cell in 0..cells {
                    let mut params = doc.params.clone();
                    let mut names = Vec::new();
                    let mut values = Vec::new();
                    for (axis, (name, choices)) in index.iter().zip(&axes) {
                        params.insert(name.clone(), choices[*axis].clone());
                        names.push(name.clone());
                        values.push(toml_to_cell(&choices[*axis]));
                    }
                    let cell_seed = master
                        .map(|s| rng::mix(&[s, 0x5eed, cell as u64]));
                    let (t, mut e) = execute_kind(doc, &params, cell_seed, out_dir)?;
                    let t = t.prefixed(&names, &values);
                    extras.append(&mut e);
                    merged = Some(match merged {
                        None => t,
                        Some(mut acc) => {
                            debug_assert_eq!(acc.columns, t.columns);
                            acc.rows.extend(t.rows);
                            acc
                        }
                    });
                    // odometer
                    for (axis, (_, choices)) in index.iter_mut().zip(&axes) {
                        *axis += 1;
                        if *axis < choices.len() {
                            break;
                        }
                        *axis = 0;
                    }
                }
                Ok((merged.unwrap_or_default(), extras))
            }
        }
    })?;

    let result_file = match doc.format {
        OutputFormat::Csv => {
            let path = out_dir.join("results.csv");
            write_file(&path, &table.to_csv(&hash))?;
            path
        }
        OutputFormat::Jsonl => {
            let path = out_dir.join("results.jsonl");
            write_file(&path, &table.to_jsonl(&hash))?;
            path
        }
    };
    let manifest = serde_json::json!({
        "config_hash": hash,
        "kind": doc.kind,
        "seed": doc.seed,
        "workers": doc.workers,
        "rows": table.rows.len(),
        "version": env!("CARGO_PKG_VERSION"),
        "timestamp": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        "files": extra_files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    let manifest_file = out_dir.join("manifest.json");
    write_file(&manifest_file, &serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(RunOutput { table, result_file, manifest_file, extra_files })
}

fn toml_to_cell(v: &toml::Value) -> CellValue {
    match v {
        toml::Value::Integer(x) => CellValue::Int(*x),
        toml::Value::Float(x) => CellValue::Float(*x),
        toml::Value::Boolean(b) => CellValue::Bool(*b),
        other => CellValue::Text(other.to_string()),
    }
}

fn params_from<T: serde::de::DeserializeOwned>(
    kind: &str,
    table: &toml::Table,
) -> Result<T, ExperimentError> {
    table
        .clone()
        .try_into()
        .map_err(|e| ExperimentError::InvalidParams { kind: kind.into(), message: e.to_string() })
}

fn require_seed(kind: &str, seed: Option<u64>) -> Result<u64, ExperimentError> {
    seed.ok_or_else(|| ExperimentError::SeedRequired(kind.to_string()))
}

fn invalid(kind: &str, message: impl Into<String>) -> ExperimentError {
    ExperimentError::InvalidParams { kind: kind.into(), message: message.into() }
}

fn execute_kind(
    doc: &ConfigDoc,
    params: &toml::Table,
    seed: Option<u64>,
    out_dir: &Path,
) -> Result<(ResultTable, Vec<PathBuf>), ExperimentError> {
    match doc.kind.as_str() {
        "toy-mse" => run_toy_mse(params, seed),
        "generate" => run_generate(params, seed, out_dir),
        "estimate-path" => run_estimate_path(params, seed),
        "estimate-multiscale" => run_multiscale(params, seed),
        "gibbs" => run_gibbs(params, seed, out_dir),
        "percolation" => run_percolation(params, seed),
        "spinwave" => run_spinwave(params),
        "eit-diag" => run_eit(params, seed),
        "lambda-calib" => run_lambda_calib(params, seed),
        other => Err(ExperimentError::UnknownKind(other.to_string())),
    }
}

// ---------------------------------------------------------------- toy-mse

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ToyMseParams {
    d: usize,
    l: usize,
    sigma2: f64,
    #[serde(default)]
    empirical: bool,
    #[serde(default = "default_n_trials")]
    n_trials: usize,
}

fn default_n_trials() -> usize {
    200
}

fn run_toy_mse(
    table: &toml::Table,
    seed: Option<u64>,
) -> Result<(ResultTable, Vec<PathBuf>), ExperimentError> {
    let p: ToyMseParams = params_from("toy-mse", table)?;
    let exact = bounds::toy_mse(p.l, p.d, p.sigma2).map_err(ModuleError::from)?;
    let mut t = ResultTable::new(&[
        "d",
        "l",
        "sigma2",
        "mse",
        "eigen_sum",
        "empirical_mse",
        "empirical_stderr",
        "n_trials",
    ]);
    let (emp, se, nt) = if p.empirical {
        let s = require_seed("toy-mse (empirical)", seed)?;
        let (m, e) =
            bounds::toy_mse_empirical(p.l, p.d, p.sigma2, p.n_trials, s).map_err(ModuleError::from)?;
        (m, e, p.n_trials as i64)
    } else {
        (f64::NAN, f64::NAN, 0)
    };
    t.push(vec![
        CellValue::Int(p.d as i64),
        CellValue::Int(p.l as i64),
        CellValue::Float(p.sigma2),
        CellValue::Float(exact.mse),
        CellValue::Float(exact.eigen_sum),
        CellValue::Float(emp),
        CellValue::Float(se),
        CellValue::Int(nt),
    ]);
    Ok((t, Vec::new()))
}

// ---------------------------------------------------------------- generate

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateParams {
    extents: Vec<usize>,
    #[serde(default = "default_boundary")]
    boundary: String,
    /// Z2 flip probability; the general channels are reachable through
    /// the library API and the instance file format.
    p: f64,
    #[serde(default = "default_truth")]
    truth: String,
    #[serde(default = "default_instance_file")]
    file: String,
}

fn default_boundary() -> String {
    "free".into()
}

fn default_truth() -> String {
    "haar".into()
}

fn default_instance_file() -> String {
    "instance.json".into()
}

fn parse_boundary(kind: &str, s: &str) -> Result<Boundary, ExperimentError> {
    match s {
        "free" => Ok(Boundary::Free),
        "torus" => Ok(Boundary::Torus),
        other => Err(invalid(kind, format!("boundary must be 'free' or 'torus', got '{other}'"))),
    }
}

fn parse_truth(kind: &str, s: &str) -> Result<TruthMode, ExperimentError> {
    match s {
        "haar" => Ok(TruthMode::HaarRandom),
        "identity" => Ok(TruthMode::AllIdentity),
        other => Err(invalid(kind, format!("truth must be 'haar' or 'identity', got '{other}'"))),
    }
}

fn run_generate(
    table: &toml::Table,
    seed: Option<u64>,
    out_dir: &Path,
) -> Result<(ResultTable, Vec<PathBuf>), ExperimentError> {
    let p: GenerateParams = params_from("generate", table)?;
    let seed = require_seed("generate", seed)?;
    if !(0.0..0.5).contains(&p.p) {
        return Err(invalid("generate", format!("p must lie in [0, 1/2), got {}", p.p)));
    }
    let graph = GridGraph::build(&p.extents, parse_boundary("generate", &p.boundary)?)
        .map_err(ModuleError::from)?;
    let inst = generate_instance(
        &graph,
        ChannelSpec::Z2Flip { p: p.p },
        parse_truth("generate", &p.truth)?,
        seed,
    )
    .map_err(ModuleError::from)?;
    let path = out_dir.join(&p.file);
    save_instance(&inst, &path)?;
    let mut t = ResultTable::new(&["n_vertices", "n_edges", "lambda", "agreement_rate", "file"]);
    t.push(vec![
        CellValue::Int(graph.vertex_count() as i64),
        CellValue::Int(graph.edge_count() as i64),
        CellValue::Float(1.0 - 2.0 * p.p),
        CellValue::Float(inst.edge_agreement_rate().unwrap_or(f64::NAN)),
        CellValue::Text(p.file.clone()),
    ]);
    Ok((t, vec![path]))
}

// ------------------------------------------------------------ estimate-path

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimatePathParams {
    extent: usize,
    p: f64,
    mode: String,
    n: usize,
    n_paths: usize,
    #[serde(default = "default_measure")]
    measure: String,
    #[serde(default = "default_spread")]
    spread: f64,
    instances: usize,
}

fn default_measure() -> String {
    "uniform".into()
}

fn default_spread() -> f64 {
    0.25
}

fn parse_measure(kind: &str, name: &str, spread: f64) -> Result<PathMeasureKind, ExperimentError> {
    match name {
        "uniform" | "uniform-monotone" => Ok(PathMeasureKind::UniformMonotone),
        "hierarchical" | "hierarchical-split" => {
            Ok(PathMeasureKind::HierarchicalSplit { spread })
        }
        other => Err(invalid(kind, format!("unknown path measure '{other}'"))),
    }
}

fn run_estimate_path(
    table: &toml::Table,
    seed: Option<u64>,
) -> Result<(ResultTable, Vec<PathBuf>), ExperimentError> {
    let p: EstimatePathParams = params_from("estimate-path", table)?;
    let seed = require_seed("estimate-path", seed)?;
    if !(0.0..0.5).contains(&p.p) {
        return Err(invalid("estimate-path", format!("p must lie in [0, 1/2), got {}", p.p)));
    }
    let measure = parse_measure("estimate-path", &p.measure, p.spread)?;
    let lambda = 1.0 - 2.0 * p.p;
    let graph =
        GridGraph::build(&[p.extent, p.extent, p.extent], Boundary::Free).map_err(ModuleError::from)?;
    let opts = EstimatorOptions::new(p.n_paths, measure, lambda);
    let mut t = ResultTable::new(&[
        "instance",
        "mode",
        "n",
        "lambda",
        "misalignment",
        "projected_misalignment",
        "success",
    ]);
    use rayon::prelude::*;
    let rows: Vec<Result<Vec<CellValue>, ExperimentError>> = (0..p.instances)
        .into_par_iter()
        .map(|i| {
            let inst_seed = rng::mix(&[seed, 0x1a57, i as u64]);
            let inst = generate_instance(
                &graph,
                ChannelSpec::Z2Flip { p: p.p },
                TruthMode::HaarRandom,
                inst_seed,
            )
            .map_err(ModuleError::from)?;
            let mut r = estimator::estimator_stream(seed, i as u64);
            let rep = match p.mode.as_str() {
                "diagonal" => estimator::estimate_diagonal(&inst, &[0, 0, 0], p.n, &opts, &mut r),
                "axis" => estimator::estimate_axis(&inst, &[0, 0, 0], 0, 1, p.n, &opts, &mut r),
                "pair" => {
                    let target = [p.n, p.n / 2, p.n / 2];
                    estimator::estimate_pair(&inst, &[0, 0, 0], &target, &opts, &mut r)
                }
                other => {
                    return Err(invalid(
                        "estimate-path",
                        format!("mode must be diagonal|axis|pair, got '{other}'"),
                    ))
                }
            }
            .map_err(ModuleError::from)?;
            Ok(vec![
                CellValue::Int(i as i64),
                CellValue::Text(p.mode.clone()),
                CellValue::Int(p.n as i64),
                CellValue::Float(lambda),
                CellValue::Float(rep.misalignment.unwrap_or(f64::NAN)),
                CellValue::Float(rep.projected_misalignment.unwrap_or(f64::NAN)),
                CellValue::Bool(rep.exact_success(&inst, 1e-9).unwrap_or(false)),
            ])
        })
        .collect();
    for row in rows {
        t.push(row?);
    }
    Ok((t, Vec::new()))
}

// ------------------------------------------------------ estimate-multiscale

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MultiscaleParams {
    side: usize,
    p: f64,
    schedule: Vec<usize>,
    instances: usize,
    pairs: usize,
    dmin: usize,
    dmax: usize,
    #[serde(default = "default_truth")]
    truth: String,
}

fn run_multiscale(
    table: &toml::Table,
    seed: Option<u64>,
) -> Result<(ResultTable, Vec<PathBuf>), ExperimentError> {
    let p: MultiscaleParams = params_from("estimate-multiscale", table)?;
    let seed = require_seed("estimate-multiscale", seed)?;
    if !(0.0..0.5).contains(&p.p) {
        return Err(invalid(
            "estimate-multiscale",
            format!("p must lie in [0, 1/2), got {}", p.p),
        ));
    }
    let truth = parse_truth("estimate-multiscale", &p.truth)?;
    let schedule = BlockSchedule::from_sides(p.schedule.clone());
    let graph = GridGraph::build(&[p.side, p.side], Boundary::Free).map_err(ModuleError::from)?;
    schedule.validate(p.side).map_err(ModuleError::from)?;
    use rayon::prelude::*;
    let rows: Vec<Result<Vec<CellValue>, ExperimentError>> = (0..p.instances)
        .into_par_iter()
        .map(|i| {
            let inst_seed = rng::mix(&[seed, 0x3517, i as u64]);
            let inst =
                generate_instance(&graph, ChannelSpec::Z2Flip { p: p.p }, truth, inst_seed)
                    .map_err(ModuleError::from)?;
            let tree = multiscale::synchronize_all(&inst, &schedule, &SyncOptions::default())
                .map_err(ModuleError::from)?;
            let pairs = multiscale::sample_pairs(&inst, p.dmin, p.dmax, p.pairs, inst_seed);
            let res = multiscale::recover_pairs(&inst, &tree, &pairs);
            let diag = res.levels.last().copied();
            Ok(vec![
                CellValue::Int(i as i64),
                CellValue::Float(res.success_rate.unwrap_or(f64::NAN)),
                CellValue::Int(res.levels.iter().map(|l| l.incoherent_quartets as i64).sum()),
                CellValue::Int(res.levels.iter().map(|l| l.h_failures as i64).sum()),
                CellValue::Int(res.levels.iter().map(|l| l.excluded_blocks as i64).sum()),
                CellValue::Int(diag.map_or(0, |d| d.block_side as i64)),
            ])
        })
        .collect();
    let mut t = ResultTable::new(&[
        "instance",
        "success_rate",
        "incoherent_quartets",
        "h_failures",
        "excluded_blocks",
        "top_block_side",
    ]);
    for row in rows {
        t.push(row?);
    }
    Ok((t, Vec::new()))
}

// -------------------------------------------------------------------- gibbs

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GibbsScanParams {
    dims: usize,
    p_grid: Vec<f64>,
    sizes: Vec<usize>,
    instances: usize,
    sweeps: usize,
    burn_in: usize,
    stride: usize,
}

fn run_gibbs(
    table: &toml::Table,
    seed: Option<u64>,
    out_dir: &Path,
) -> Result<(ResultTable, Vec<PathBuf>), ExperimentError> {
    let p: GibbsScanParams = params_from("gibbs", table)?;
    let seed = require_seed("gibbs", seed)?;
    let params = GibbsParams {
        beta: None,
        sweeps: p.sweeps,
        burn_in: p.burn_in,
        stride: p.stride,
        seed,
        init: gibbs::ChainInit::Planted,
    };
    let (scan, cube) =
        gibbs::phase_scan(p.dims, &p.p_grid, &p.sizes, p.instances, &params)
            .map_err(ModuleError::from)?;
    let mut t = ResultTable::new(&["p", "l", "overlap", "stderr", "n_instances"]);
    for row in &scan.rows {
        t.push(vec![
            CellValue::Float(row.p),
            CellValue::Int(row.l as i64),
            CellValue::Float(row.overlap),
            CellValue::Float(row.stderr),
            CellValue::Int(row.n_instances as i64),
        ]);
    }
    let mut extras = Vec::new();
    if let Some(crossing) = gibbs::crossing_estimate(&p.p_grid, &p.sizes, &cube, seed) {
        let path = out_dir.join("crossing.json");
        write_file(&path, &serde_json::to_string_pretty(&crossing).unwrap())?;
        extras.push(path);
    }
    Ok((t, extras))
}

// -------------------------------------------------------------- percolation

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PercolationParams {
    d: usize,
    p_open: f64,
    extent: usize,
    distances: Vec<usize>,
    trials: usize,
}

fn run_percolation(
    table: &toml::Table,
    seed: Option<u64>,
) -> Result<(ResultTable, Vec<PathBuf>), ExperimentError> {
    let p: PercolationParams = params_from("percolation", table)?;
    let seed = require_seed("percolation", seed)?;
    let rep = bounds::percolation_probe(p.d, p.p_open, p.extent, &p.distances, p.trials, seed)
        .map_err(ModuleError::from)?;
    let mut t = ResultTable::new(&["p_open", "distance", "connect_probability", "stderr", "p_c"]);
    for row in &rep.rows {
        t.push(vec![
            CellValue::Float(p.p_open),
            CellValue::Int(row.distance as i64),
            CellValue::Float(row.connect_probability),
            CellValue::Float(row.stderr),
            CellValue::Float(bounds::percolation_threshold(p.d).unwrap_or(f64::NAN)),
        ]);
    }
    Ok((t, Vec::new()))
}

// ----------------------------------------------------------------- spinwave

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpinwaveParams {
    l_values: Vec<usize>,
    family: String,
    #[serde(default = "default_concentration")]
    concentration: f64,
    #[serde(default = "default_eps")]
    eps: f64,
    #[serde(default = "default_width")]
    width: f64,
}

fn default_concentration() -> f64 {
    2.0
}

fn default_eps() -> f64 {
    0.5
}

fn default_width() -> f64 {
    0.8
}

fn parse_density(kind: &str, p: &SpinwaveParams) -> Result<crate::channel::DensitySpec, ExperimentError> {
    use crate::channel::DensitySpec;
    let d = match p.family.as_str() {
        "von-mises" => DensitySpec::VonMises { concentration: p.concentration },
        "wrapped-gaussian" => DensitySpec::WrappedGaussian { width: p.width },
        "uniform-mixture" => DensitySpec::UniformMixture { eps: p.eps },
        other => return Err(invalid(kind, format!("unknown density family '{other}'"))),
    };
    d.validate()
        .map_err(|e| invalid(kind, e.to_string()))?;
    Ok(d)
}

fn run_spinwave(table: &toml::Table) -> Result<(ResultTable, Vec<PathBuf>), ExperimentError> {
    let p: SpinwaveParams = params_from("spinwave", table)?;
    let density = parse_density("spinwave", &p)?;
    let mut t = ResultTable::new(&[
        "l",
        "energy",
        "energy_times_log",
        "kappa_hat",
        "bound",
        "dominant_term",
    ]);
    for &l in &p.l_values {
        let extent = 2 * l + 3;
        let sw = bounds::spin_wave_profile(l, extent).map_err(ModuleError::from)?;
        let nr = bounds::nonrecovery_bound(l, &density, extent).map_err(ModuleError::from)?;
        t.push(vec![
            CellValue::Int(l as i64),
            CellValue::Float(sw.energy),
            CellValue::Float(sw.energy_times_log),
            CellValue::Float(nr.kappa_hat),
            CellValue::Float(nr.bound),
            CellValue::Float(nr.dominant_term),
        ]);
    }
    Ok((t, Vec::new()))
}

// ----------------------------------------------------------------- eit-diag

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EitDiagParams {
    measure: String,
    #[serde(default = "default_spread")]
    spread: f64,
    n: usize,
    n_pairs: usize,
}

fn run_eit(
    table: &toml::Table,
    seed: Option<u64>,
) -> Result<(ResultTable, Vec<PathBuf>), ExperimentError> {
    let p: EitDiagParams = params_from("eit-diag", table)?;
    let seed = require_seed("eit-diag", seed)?;
    if p.n % 2 != 0 {
        return Err(invalid("eit-diag", format!("n must be even, got {}", p.n)));
    }
    if p.n_pairs < 1000 {
        return Err(invalid("eit-diag", "n_pairs must be at least 1000"));
    }
    let measure = parse_measure("eit-diag", &p.measure, p.spread)?;
    let rep = paths::eit_diagnostic(measure, p.n, p.n_pairs, seed);
    let mut t = ResultTable::new(&["n", "k", "p_geq", "beta_hat", "mean_intersections"]);
    for row in &rep.tail {
        t.push(vec![
            CellValue::Int(p.n as i64),
            CellValue::Int(row.k as i64),
            CellValue::Float(row.p_geq),
            CellValue::Float(rep.beta_hat),
            CellValue::Float(rep.mean_intersections),
        ]);
    }
    Ok((t, Vec::new()))
}

// ------------------------------------------------------------- lambda-calib

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LambdaCalibParams {
    m: usize,
    sigmas: Vec<f64>,
    mc_samples: usize,
}

fn run_lambda_calib(
    table: &toml::Table,
    seed: Option<u64>,
) -> Result<(ResultTable, Vec<PathBuf>), ExperimentError> {
    let p: LambdaCalibParams = params_from("lambda-calib", table)?;
    let seed = require_seed("lambda-calib", seed)?;
    let mut t = ResultTable::new(&["m", "sigma", "lambda", "stderr", "method"]);
    for (i, &sigma) in p.sigmas.iter().enumerate() {
        let channel = ChannelSpec::OrthGaussian { m: p.m, sigma, project: true };
        let est = lambda_for_channel(&channel, p.mc_samples, rng::mix(&[seed, i as u64]))
            .map_err(ModuleError::from)?;
        let (stderr, method) = match est.method {
            LambdaMethod::MonteCarlo { stderr, .. } => (stderr, "monte-carlo"),
            LambdaMethod::ClosedForm => (0.0, "closed-form"),
            LambdaMethod::Quadrature => (0.0, "quadrature"),
        };
        t.push(vec![
            CellValue::Int(p.m as i64),
            CellValue::Float(sigma),
            CellValue::Float(est.value),
            CellValue::Float(stderr),
            CellValue::Text(method.into()),
        ]);
    }
    Ok((t, Vec::new()))
}

// ---------------------------------------------------------------- instances

#[derive(Serialize, Deserialize)]
struct InstanceFile {
    version: u32,
    extents: Vec<usize>,
    boundary: Boundary,
    channel: ChannelSpec,
    truth_mode: TruthMode,
    seed: u64,
    observations_in_group: bool,
    truth_b64: String,
    observations_b64: String,
    checksum: String,
}

fn encode_array(arr: &ElementArray) -> Vec<u8> {
    match arr {
        ElementArray::Signs(v) => v.iter().map(|&s| s as u8).collect(),
        ElementArray::Angles(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ElementArray::Matrices(v) => v
            .iter()
            .flat_map(|m| {
                // row-major element order
                let mut bytes = Vec::with_capacity(m.len() * 8);
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        bytes.extend_from_slice(&m[(i, j)].to_le_bytes());
                    }
                }
                bytes
            })
            .collect(),
    }
}

fn decode_array(
    variant: crate::group::GroupVariant,
    count: usize,
    bytes: &[u8],
) -> Result<ElementArray, ExperimentError> {
    use crate::group::GroupVariant;
    match variant {
        GroupVariant::Z2 => {
            if bytes.len() != count {
                return Err(ExperimentError::BadPayload(format!(
                    "expected {count} sign bytes, got {}",
                    bytes.len()
                )));
            }
            let signs: Vec<i8> = bytes.iter().map(|&b| b as i8).collect();
            if signs.iter().any(|&s| s != 1 && s != -1) {
                return Err(ExperimentError::BadPayload("sign byte outside {+1,-1}".into()));
            }
            Ok(ElementArray::Signs(signs))
        }
        GroupVariant::U1 => {
            if bytes.len() != count * 8 {
                return Err(ExperimentError::BadPayload(format!(
                    "expected {} angle bytes, got {}",
                    count * 8,
                    bytes.len()
                )));
            }
            Ok(ElementArray::Angles(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ))
        }
        GroupVariant::Orth(m) => {
            let per = m * m * 8;
            if bytes.len() != count * per {
                return Err(ExperimentError::BadPayload(format!(
                    "expected {} matrix bytes, got {}",
                    count * per,
                    bytes.len()
                )));
            }
            Ok(ElementArray::Matrices(
                bytes
                    .chunks_exact(per)
                    .map(|chunk| {
                        let vals: Vec<f64> = chunk
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect();
                        DMatrix::from_row_slice(m, m, &vals)
                    })
                    .collect(),
            ))
        }
    }
}

/// Serialize an instance to a versioned, checksummed JSON file. The same
/// instance always produces the same bytes.
pub fn save_instance(inst: &Instance, path: &Path) -> Result<(), ExperimentError> {
    let truth_bytes = encode_array(&inst.truth);
    let obs_bytes = encode_array(&inst.observations);
    let mut hasher = Sha256::new();
    hasher.update(&truth_bytes);
    hasher.update(&obs_bytes);
    let file = InstanceFile {
        version: INSTANCE_FORMAT_VERSION,
        extents: inst.graph.extents().to_vec(),
        boundary: inst.graph.boundary(),
        channel: inst.channel,
        truth_mode: inst.truth_mode,
        seed: inst.seed,
        observations_in_group: inst.observations_in_group,
        truth_b64: BASE64.encode(&truth_bytes),
        observations_b64: BASE64.encode(&obs_bytes),
        checksum: hex_string(&hasher.finalize()),
    };
    write_file(path, &serde_json::to_string(&file).unwrap())
}

/// Load an instance back, verifying version and checksum.
pub fn load_instance(path: &Path) -> Result<Instance, ExperimentError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
    let file: InstanceFile =
        serde_json::from_str(&text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
    if file.version != INSTANCE_FORMAT_VERSION {
        return Err(ExperimentError::VersionMismatch {
            got: file.version,
            want: INSTANCE_FORMAT_VERSION,
        });
    }
    let truth_bytes = BASE64
        .decode(&file.truth_b64)
        .map_err(|e| ExperimentError::BadPayload(e.to_string()))?;
    let obs_bytes = BASE64
        .decode(&file.observations_b64)
        .map_err(|e| ExperimentError::BadPayload(e.to_string()))?;
    let mut hasher = Sha256::new();
    hasher.update(&truth_bytes);
    hasher.update(&obs_bytes);
    if hex_string(&hasher.finalize()) != file.checksum {
        return Err(ExperimentError::ChecksumMismatch);
    }
    let graph = GridGraph::build(&file.extents, file.boundary).map_err(ModuleError::from)?;
    let variant = file.channel.variant();
    let truth = decode_array(variant, graph.vertex_count(), &truth_bytes)?;
    let observations = decode_array(variant, graph.edge_count(), &obs_bytes)?;
    Ok(Instance {
        graph,
        channel: file.channel,
        truth_mode: file.truth_mode,
        seed: file.seed,
        truth,
        observations,
        observations_in_group: file.observations_in_group,
    })
}
