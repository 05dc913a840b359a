//! Command-line interface: `fit`, `select`, `simulate` and `evaluate`.
//!
//! Exit codes: 0 on success, 1 for invalid input or flags, 2 for numerical
//! failures. Errors are reported on stderr as a single JSON object.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::data::{
    load_dataset, validate_fit_result, ColumnSchema, CurveSet, Dataset, FitResult, ModelConfig,
    MoeExpert, Variant,
};
use crate::engine::fit_with_restarts;
use crate::error::{MopleError, Result};
use crate::metrics::{align_labels, ami, ari, coef_mse_bias, curve_mae, EvalGrid};
use crate::selection::{default_bandwidth_grid, select, SelectionGrid};
use crate::simulation::{run_study, Scenario, ScenarioSpec, StudyConfig};

#[derive(Debug, Parser)]
#[command(name = "mople", version, about = "Mixtures of partially linear experts")]
pub struct Cli {
    /// Worker threads for restarts, grid cells and replications.
    #[arg(long, global = true, env = "MOPLE_THREADS")]
    pub threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model to a CSV file.
    Fit(FitArgs),
    /// Grid search over component counts and bandwidths by BIC.
    Select(SelectArgs),
    /// Run the Monte Carlo study.
    Simulate(SimulateArgs),
    /// Compare a fit's MAP labels with reference labels.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Moe,
    Fmplr,
    Mople,
}

impl From<ModelArg> for Variant {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Moe => Variant::Moe,
            ModelArg::Fmplr => Variant::Fmplr,
            ModelArg::Mople => Variant::Mople,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MoeExpertArg {
    Intercept,
    LinearInU,
}

impl From<MoeExpertArg> for MoeExpert {
    fn from(m: MoeExpertArg) -> Self {
        match m {
            MoeExpertArg::Intercept => MoeExpert::Intercept,
            MoeExpertArg::LinearInU => MoeExpert::LinearInU,
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Response column.
    #[arg(long, default_value = "y")]
    pub y: String,
    /// Linear covariate columns (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "x1")]
    pub x: Vec<String>,
    /// Nonparametric covariate column.
    #[arg(long, default_value = "u")]
    pub u: String,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "mople")]
    pub model: ModelArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Expert form of the MoE variant.
    #[arg(long, value_enum, default_value = "intercept")]
    pub moe_expert: MoeExpertArg,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub components: usize,
    #[arg(long, required_unless_present = "auto_bandwidth")]
    pub bandwidth: Option<f64>,
    /// Choose the bandwidth by BIC over the default grid.
    #[arg(long, conflicts_with = "bandwidth")]
    pub auto_bandwidth: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Component counts: `1..5`, `1-5` or `1,2,3`.
    #[arg(long)]
    pub components_range: String,
    #[arg(long, value_delimiter = ',', required_unless_present = "auto_grid")]
    pub bandwidths: Option<Vec<f64>>,
    /// Use 10 log-spaced bandwidths from 0.06 to 0.5 times the range of u.
    #[arg(long, conflicts_with = "bandwidths")]
    pub auto_grid: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// `1`, `2`, `3` or `all`.
    #[arg(long, default_value = "all")]
    pub case: String,
    #[arg(long, value_delimiter = ',', default_value = "500")]
    pub n_list: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub replications: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "moe,fmplr,mople")]
    pub methods: Vec<ModelArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    /// Expert form of the MoE baseline.
    #[arg(long, value_enum, default_value = "linear-in-u")]
    pub moe_expert: MoeExpertArg,
    /// 400 replications at n = 250, 500, 1000.
    #[arg(long)]
    pub full_study: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Fit JSON written by `fit` or `select`.
    #[arg(long)]
    pub fit: PathBuf,
    /// CSV holding the reference labels.
    #[arg(long)]
    pub labels: PathBuf,
    /// Label column; defaults to the first column.
    #[arg(long)]
    pub label_column: Option<String>,
    /// Scenario (`1`, `2`, `3`) or a JSON file with true parameters.
    #[arg(long)]
    pub truth: Option<String>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config: Value,
    seed: u64,
    tool_version: &'static str,
    inputs: Vec<InputDigest>,
    artifacts: Vec<String>,
    timestamp: String,
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> MopleError {
    MopleError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn digest(path: &Path) -> Result<InputDigest> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config: Value,
    seed: u64,
    inputs: Vec<InputDigest>,
    artifacts: Vec<String>,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.into(),
        config,
        seed,
        tool_version: env!("CARGO_PKG_VERSION"),
        inputs,
        artifacts,
        timestamp: chrono::Utc::now().to_rfc3339(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn load(args: &DataArgs) -> Result<Dataset> {
    let x: Vec<&str> = args.x.iter().map(String::as_str).collect();
    load_dataset(&args.data, &ColumnSchema::new(&args.y, &x, &args.u))
}

fn template(m: &ModelArgs, components: usize, bandwidth: f64) -> ModelConfig {
    let mut cfg = ModelConfig::new(m.model.into(), components, bandwidth);
    cfg.seed = m.seed;
    cfg.restarts = m.restarts;
    cfg.max_iter = m.max_iter;
    cfg.tol = m.tol;
    cfg.moe_expert = m.moe_expert.into();
    cfg
}

fn curves_csv(curves: &CurveSet) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let c = curves.values.nrows();
    let mut header = vec!["u".to_string()];
    header.extend((1..=c).map(|k| format!("g_{k}")));
    let err = |e: csv::Error| MopleError::Io {
        path: "curves".into(),
        message: e.to_string(),
    };
    w.write_record(&header).map_err(err)?;
    for (d, u) in curves.grid.iter().enumerate() {
        let mut row = vec![u.to_string()];
        row.extend((0..c).map(|k| curves.values[(k, d)].to_string()));
        w.write_record(&row).map_err(err)?;
    }
    w.into_inner().map_err(|e| MopleError::Io {
        path: "curves".into(),
        message: e.to_string(),
    })
}

fn component_curve_csv(curves: &CurveSet, k: usize) -> String {
    let mut s = String::from("u,g\n");
    for (d, u) in curves.grid.iter().enumerate() {
        s.push_str(&format!("{u},{}\n", curves.values[(k, d)]));
    }
    s
}

/// Writes `fit.json`, `curves.csv` and `curve_<c>.csv`; returns the names.
fn write_fit_outputs(dir: &Path, fit: &FitResult) -> Result<Vec<String>> {
    let mut names = vec!["fit.json".to_string(), "curves.csv".to_string()];
    write_json(&dir.join("fit.json"), fit)?;
    write_file(&dir.join("curves.csv"), &curves_csv(&fit.curves)?)?;
    for k in 0..fit.curves.values.nrows() {
        let name = format!("curve_{}.csv", k + 1);
        write_file(&dir.join(&name), component_curve_csv(&fit.curves, k).as_bytes())?;
        names.push(name);
    }
    Ok(names)
}

fn fit_summary(fit: &FitResult) -> Value {
    json!({
        "components": fit.config.components,
        "bandwidth": fit.config.bandwidth,
        "loglik": fit.loglik,
        "df": fit.df,
        "bic": fit.bic,
        "iterations": fit.iterations,
        "converged": fit.converged,
    })
}

fn cmd_fit(args: &FitArgs) -> Result<Value> {
    let data = load(&args.data)?;
    let cfg = template(&args.model, args.components, args.bandwidth.unwrap_or(1.0));
    cfg.validate()?;
    let (fit, grid) = if args.auto_bandwidth {
        let hs = default_bandwidth_grid(&data);
        let (_, grid, fit) = select(&data, &cfg, &[args.components], &hs, args.model.seed)?;
        (fit, Some(grid))
    } else {
        (fit_with_restarts(&data, &cfg)?, None)
    };
    create_dir(&args.out)?;
    let mut artifacts = write_fit_outputs(&args.out, &fit)?;
    if let Some(g) = grid {
        write_grid(&args.out, &g)?;
        artifacts.push("grid.csv".into());
    }
    write_manifest(
        &args.out,
        "fit",
        serde_json::to_value(&fit.config)?,
        args.model.seed,
        vec![digest(&args.data.data)?],
        artifacts,
    )?;
    Ok(fit_summary(&fit))
}

fn write_grid(dir: &Path, grid: &SelectionGrid) -> Result<()> {
    let path = dir.join("grid.csv");
    let file = fs::File::create(&path).map_err(|e| io_error(&path, e))?;
    grid.write_csv(io::BufWriter::new(file))
}

/// Parses `1..5`, `1..=5`, `1-5` or `1,2,3`.
pub fn parse_component_range(s: &str) -> Result<Vec<usize>> {
    let bad = || MopleError::InvalidConfig(format!("invalid component range {s:?}"));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    let t = s.trim();
    let out: Vec<usize> = if let Some((a, b)) = t.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        (num(a)?..=num(b)?).collect()
    } else if let Some((a, b)) = t.split_once('-') {
        (num(a)?..=num(b)?).collect()
    } else {
        t.split(',').map(num).collect::<Result<_>>()?
    };
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn cmd_select(args: &SelectArgs) -> Result<Value> {
    let data = load(&args.data)?;
    let counts = parse_component_range(&args.components_range)?;
    let hs = match &args.bandwidths {
        Some(b) if !args.auto_grid => b.clone(),
        _ => default_bandwidth_grid(&data),
    };
    let cfg = template(&args.model, counts[0], hs[0]);
    let (best, grid, fit) = select(&data, &cfg, &counts, &hs, args.model.seed)?;
    create_dir(&args.out)?;
    write_grid(&args.out, &grid)?;
    let mut artifacts = vec!["grid.csv".to_string()];
    artifacts.extend(write_fit_outputs(&args.out, &fit)?);
    write_manifest(
        &args.out,
        "select",
        json!({ "template": cfg, "components": counts, "bandwidths": hs }),
        args.model.seed,
        vec![digest(&args.data.data)?],
        artifacts,
    )?;
    let mut summary = fit_summary(&fit);
    summary["selected_components"] = json!(best.components);
    summary["selected_bandwidth"] = json!(best.bandwidth);
    summary["cells"] = json!(grid.cells.len());
    Ok(summary)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<Value> {
    let scenarios = if args.case.trim().eq_ignore_ascii_case("all") {
        Scenario::ALL.to_vec()
    } else {
        args.case
            .split(',')
            .map(Scenario::parse)
            .collect::<Result<Vec<_>>>()?
    };
    let (n_list, r) = if args.full_study {
        (vec![250, 500, 1000], 400)
    } else {
        (args.n_list.clone(), args.replications)
    };
    let mut cfg = StudyConfig::new(scenarios, n_list, r, args.seed);
    cfg.methods = args.methods.iter().map(|&m| m.into()).collect();
    cfg.restarts = args.restarts;
    cfg.moe_expert = args.moe_expert.into();
    let report = run_study(&cfg)?;
    create_dir(&args.out_dir)?;
    let open = |name: &str| -> Result<io::BufWriter<fs::File>> {
        let path = args.out_dir.join(name);
        Ok(io::BufWriter::new(
            fs::File::create(&path).map_err(|e| io_error(&path, e))?,
        ))
    };
    report.write_summary_csv(open("summary.csv")?)?;
    report.write_records_csv(open("records.csv")?)?;
    write_json(&args.out_dir.join("report.json"), &report)?;
    write_manifest(
        &args.out_dir,
        "simulate",
        serde_json::to_value(&cfg)?,
        args.seed,
        Vec::new(),
        vec!["summary.csv".into(), "records.csv".into(), "report.json".into()],
    )?;
    let failures: usize = report.summaries.iter().map(|s| s.failures).sum();
    Ok(json!({ "records": report.records.len(), "failures": failures, "summaries": report.summaries }))
}

/// Reads one column of labels; empty and `NA` cells become `None`.
pub fn read_labels(path: &Path, column: Option<&str>) -> Result<Vec<Option<String>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_error(path, e))?;
    let headers = rdr.headers().map_err(|e| io_error(path, e))?.clone();
    let idx = match column {
        Some(c) => headers.iter().position(|h| h == c).ok_or_else(|| {
            MopleError::InvalidData(format!("{}: no column named {c:?}", path.display()))
        })?,
        None => 0,
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io_error(path, e))?;
        let v = rec.get(idx).unwrap_or("");
        out.push((!v.is_empty() && v != "NA").then(|| v.to_string()));
    }
    Ok(out)
}

fn load_truth(s: &str) -> Result<ScenarioSpec> {
    match Scenario::parse(s) {
        Ok(sc) => Ok(sc.spec()),
        Err(_) => {
            let path = Path::new(s);
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<Value> {
    let text = fs::read_to_string(&args.fit).map_err(|e| io_error(&args.fit, e))?;
    let fit: FitResult = serde_json::from_str(&text)?;
    validate_fit_result(&fit)?;
    let reference = read_labels(&args.labels, args.label_column.as_deref())?;
    if reference.len() != fit.labels.len() {
        return Err(MopleError::LabelLengthMismatch {
            left: fit.labels.len(),
            right: reference.len(),
        });
    }
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (label, r) in fit.labels.iter().zip(&reference) {
        if let Some(r) = r {
            let next = ids.len();
            b.push(*ids.entry(r.clone()).or_insert(next));
            a.push(*label);
        }
    }
    let mut out = json!({
        "n": a.len(),
        "ignored": reference.len() - a.len(),
        "ari": ari(&a, &b)?,
        "ami": ami(&a, &b)?,
    });
    if let Some(t) = &args.truth {
        let spec = load_truth(t)?;
        if fit.experts.beta.ncols() != 1 {
            return Err(MopleError::InvalidData(
                "truth comparison needs a single linear covariate".into(),
            ));
        }
        let align = align_labels(&fit.experts, &spec.true_beta(), &spec.sigma2)?;
        let grid = EvalGrid {
            points: fit.curves.grid.clone(),
        };
        let mut comps = Vec::new();
        for c in 0..2 {
            let k = align.perm[c];
            let est = fit.experts.beta[(k, 0)];
            let mb = coef_mse_bias(&[est], spec.beta[c])?;
            let values: Vec<f64> = fit.curves.values.row(k).iter().copied().collect();
            comps.push(json!({
                "component": c + 1,
                "beta": est,
                "bias": mb.bias,
                "mse": mb.mse,
                "mae": curve_mae(&values, |u| spec.g(c, u), &grid)?,
            }));
        }
        out["truth"] = json!(spec.name.to_string());
        out["components"] = json!(comps);
    }
    if let Some(p) = &args.out {
        write_json(p, &out)?;
    }
    Ok(out)
}

pub fn execute(cli: &Cli) -> Result<Value> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Select(a) => cmd_select(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

pub fn exit_code(e: &MopleError) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn report_error(e: &MopleError) -> i32 {
    let code = exit_code(e);
    let body = json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code });
    let _ = writeln!(io::stderr(), "{body}");
    code
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            if code == 0 {
                let _ = e.print();
            } else {
                let body = json!({
                    "error": "invalid_arguments",
                    "message": e.to_string().trim_end(),
                    "exit_code": 1,
                });
                let _ = writeln!(io::stderr(), "{body}");
            }
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    if let Some(t) = cli.threads {
        if t == 0 {
            return report_error(&MopleError::InvalidConfig("--threads must be positive".into()));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match execute(&cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            0
        }
        Err(e) => report_error(&e),
    }
}
