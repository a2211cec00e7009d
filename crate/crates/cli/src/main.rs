//! `ypt`: fit, simulate and check promotion-time cure models from the
//! command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or fit error.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use yptcure::baseline::{Baseline, FamilyKind};
use yptcure::data::Dataset;
use yptcure::kernel::KernelKind;
use yptcure::km::kaplan_meier_dataset;
use yptcure::model::{fit, fit_known_gamma, FitConfig, FitResult};
use yptcure::montecarlo::{example3_rows, run_study, table_rows, StudyConfig, StudyRow};
use yptcure::simulate::{builtin_example, generate, CensoringLaw};

#[derive(Debug, Parser)]
#[command(name = "ypt", version, about = "Promotion-time cure model with a nonparametric covariate effect")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the model to a `time,status,x` CSV; writes fit.json and curves.csv.
    Fit(FitArgs),
    /// Generate a dataset from a built-in example; writes data and truth CSVs.
    Simulate(SimulateArgs),
    /// Replicated simulation study with the published table layout.
    Mc(McArgs),
    /// Kaplan-Meier curve of a dataset as `t,surv,n_risk,n_event`.
    Km(KmArgs),
    /// Predictions from a saved fit.json.
    Predict(PredictArgs),
}

/// Comma-separated numbers.
#[derive(Debug, Clone, PartialEq)]
struct List(Vec<f64>);

impl FromStr for List {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(List)
    }
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    match List::from_str(s)?.0.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err("expected `lo,hi`".into()),
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Input CSV with header `time,status,x`.
    #[arg(long)]
    input: PathBuf,
    /// Directory for fit.json and curves.csv.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Local polynomial degree.
    #[arg(long, default_value_t = 1)]
    degree: usize,
    /// Kernel function.
    #[arg(long, default_value = "epanechnikov")]
    kernel: String,
    /// Bandwidth for the baseline-estimation stage [default: range · n^-0.3].
    #[arg(long)]
    h_gamma: Option<f64>,
    /// Bandwidth for the final smoothing of m [default: the h-gamma value].
    #[arg(long)]
    h_m: Option<f64>,
    /// Number of display grid points.
    #[arg(long, default_value_t = 301)]
    grid_points: usize,
    /// Display grid as `lo,hi` [default: covariate range].
    #[arg(long, value_parser = parse_range)]
    grid_range: Option<(f64, f64)>,
    /// Follow-up time beyond which survivors count as cured.
    #[arg(long)]
    cure_threshold: Option<f64>,
    /// Baseline family (exponential or weibull).
    #[arg(long, default_value = "exponential")]
    family: String,
    /// Outer-iteration tolerance on the baseline parameters and θ.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Maximum number of outer iterations.
    #[arg(long, default_value_t = 50)]
    max_outer_iter: usize,
    /// Confidence level of the bands and standard-error intervals.
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    /// Start each local fit from its converged neighbour.
    #[arg(long)]
    warm_start: bool,
    /// Hold the baseline parameters fixed (comma list) and only smooth m.
    #[arg(long)]
    known_gamma: Option<List>,
    /// Worker threads [default: all cores].
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Built-in example (1, 2 or 3).
    #[arg(long, default_value_t = 1)]
    example: u32,
    /// Sample size.
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Upper end of the uniform censoring law [default: the example's].
    #[arg(long)]
    censor_max: Option<f64>,
    /// Output data CSV.
    #[arg(long, default_value = "simulated.csv")]
    out: PathBuf,
    /// Output truth CSV (`x,m_true,cured_true`).
    #[arg(long, default_value = "truth.csv")]
    truth: PathBuf,
}

#[derive(Debug, Args)]
struct McArgs {
    /// Built-in example (1, 2 or 3).
    #[arg(long, default_value_t = 1)]
    example: u32,
    /// Bandwidths used for both stages, comma separated [default: 0.2,0.4,0.6; example 3: see h-gamma].
    #[arg(long)]
    h: Option<List>,
    /// Baseline-stage bandwidth paired with every h-m value [example 3 default: 0.2].
    #[arg(long)]
    h_gamma: Option<f64>,
    /// Final smoothing bandwidths used with h-gamma [default: h-gamma; example 3: 0.4,0.6].
    #[arg(long)]
    h_m: Option<List>,
    /// Number of replications.
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Base seed; replication r uses a seed derived from (seed, r).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample size per replication.
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Confidence level for coverage.
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    /// Worker threads [default: all cores].
    #[arg(long)]
    threads: Option<usize>,
    /// Report CSV.
    #[arg(long, default_value = "mc_report.csv")]
    out: PathBuf,
    /// Also write the aligned text table here.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct KmArgs {
    /// Input CSV with header `time,status,x`.
    #[arg(long)]
    input: PathBuf,
    /// Classify survivors beyond this time as cured first.
    #[arg(long)]
    cure_threshold: Option<f64>,
    /// Censoring time given to cured subjects [default: cure threshold, else largest finite time].
    #[arg(long)]
    cure_at: Option<f64>,
    /// Output CSV.
    #[arg(long, default_value = "km.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// fit.json written by `ypt fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Covariate values, comma separated.
    #[arg(long)]
    x: Option<List>,
    /// Times, comma separated.
    #[arg(long)]
    t: Option<List>,
    /// Dataset whose covariates are averaged for a mean survival curve.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output CSV.
    #[arg(long, default_value = "predictions.csv")]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn read_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Dataset::from_csv_reader(file).with_context(|| format!("cannot read {}", path.display()))
}

fn set_threads(threads: Option<usize>) -> Result<(), Failure> {
    if let Some(n) = threads {
        if n == 0 {
            return usage("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(anyhow::anyhow!("cannot start thread pool: {e}")))?;
    }
    Ok(())
}

fn fit_config(a: &FitArgs) -> Result<FitConfig, Failure> {
    let kernel = KernelKind::from_str(&a.kernel).map_err(|e| Failure::Usage(e.to_string()))?;
    let family = FamilyKind::from_str(&a.family).map_err(|e| Failure::Usage(e.to_string()))?;
    let cfg = FitConfig {
        degree: a.degree,
        kernel,
        h_gamma: a.h_gamma,
        h_m: a.h_m,
        grid_points: a.grid_points,
        grid_range: a.grid_range,
        cure_threshold: a.cure_threshold,
        family,
        tol: a.tol,
        max_outer_iter: a.max_outer_iter,
        ci_level: a.ci_level,
        warm_start: a.warm_start,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_fit(a: FitArgs) -> Result<(), Failure> {
    let cfg = fit_config(&a)?;
    let known = match &a.known_gamma {
        Some(List(p)) => Some(Baseline::from_params(cfg.family, p).map_err(|e| Failure::Usage(e.to_string()))?),
        None => None,
    };
    set_threads(a.threads)?;
    let ds = read_dataset(&a.input)?;
    let result = match known {
        Some(b) => fit_known_gamma(&ds, &cfg, &b),
        None => fit(&ds, &cfg),
    }
    .context("fit failed")?;

    let json_path = a.out_dir.join("fit.json");
    let mut out = create(&json_path)?;
    serde_json::to_writer_pretty(&mut out, &result).context("cannot serialize fit")?;
    writeln!(out).and_then(|_| out.flush()).with_context(|| format!("cannot write {}", json_path.display()))?;
    let curves_path = a.out_dir.join("curves.csv");
    let mut out = create(&curves_path)?;
    result
        .write_curves_csv(&mut out)
        .and_then(|_| out.flush())
        .with_context(|| format!("cannot write {}", curves_path.display()))?;

    let names = result.gamma_hat.kind().param_names();
    let params = result.gamma_hat.params();
    for (j, name) in names.iter().enumerate() {
        match result.gamma_se.as_ref().map(|s| s.se[j]) {
            Some(se) => println!("{name} = {:.6e} (se {:.3e})", params[j], se),
            None => println!("{name} = {:.6e} (fixed)", params[j]),
        }
    }
    println!("wrote {} and {}", json_path.display(), curves_path.display());
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), Failure> {
    let mut cfg = builtin_example(a.example).map_err(|e| Failure::Usage(e.to_string()))?.with_n(a.n).with_seed(a.seed);
    if let Some(max) = a.censor_max {
        cfg.censoring_law = CensoringLaw::Uniform { max };
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let sim = generate(&cfg).context("simulation failed")?;
    let mut out = create(&a.out)?;
    sim.dataset.write_csv(&mut out).and_then(|_| out.flush()).with_context(|| format!("cannot write {}", a.out.display()))?;
    let mut out = create(&a.truth)?;
    sim.write_truth_csv(&mut out)
        .and_then(|_| out.flush())
        .with_context(|| format!("cannot write {}", a.truth.display()))?;
    println!(
        "{} subjects: cure {:.1}%, censored {:.1}%",
        sim.dataset.len(),
        100.0 * sim.cure_fraction,
        100.0 * sim.censoring_fraction
    );
    Ok(())
}

fn study_rows(a: &McArgs) -> Result<Vec<StudyRow>, Failure> {
    let rows = match (&a.h, a.h_gamma, &a.h_m) {
        (Some(_), Some(_), _) | (Some(_), _, Some(_)) => return usage("--h cannot be combined with --h-gamma or --h-m"),
        (Some(List(h)), None, None) => table_rows(h),
        (None, Some(hg), hm) => {
            let hm = hm.as_ref().map_or_else(|| vec![hg], |l| l.0.clone());
            hm.into_iter().map(|h_m| StudyRow { h_gamma: hg, h_m }).collect()
        }
        (None, None, Some(_)) if a.example != 3 => return usage("--h-m needs --h-gamma"),
        (None, None, hm) if a.example == 3 => match hm {
            Some(List(hm)) => hm.iter().map(|h_m| StudyRow { h_gamma: 0.2, h_m: *h_m }).collect(),
            None => example3_rows(),
        },
        _ => table_rows(&[0.2, 0.4, 0.6]),
    };
    if rows.iter().any(|r| !(r.h_gamma > 0.0 && r.h_m > 0.0 && r.h_gamma.is_finite() && r.h_m.is_finite())) {
        return usage("bandwidths must be positive and finite");
    }
    Ok(rows)
}

fn cmd_mc(a: McArgs) -> Result<(), Failure> {
    let sim = builtin_example(a.example).map_err(|e| Failure::Usage(e.to_string()))?.with_n(a.n);
    sim.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let rows = study_rows(&a)?;
    if a.reps == 0 {
        return usage("--reps must be at least 1");
    }
    let mut study = StudyConfig::new(&sim, rows, a.reps, a.seed);
    study.fit.ci_level = a.ci_level;
    study.fit.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    set_threads(a.threads)?;

    let report = run_study(&sim, &study).context("simulation study failed")?;
    let mut out = create(&a.out)?;
    report.write_csv(&mut out).and_then(|_| out.flush()).with_context(|| format!("cannot write {}", a.out.display()))?;
    let table = report.to_table();
    if let Some(path) = &a.table {
        let mut out = create(path)?;
        out.write_all(table.as_bytes())
            .and_then(|_| out.flush())
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    print!("{table}");
    for r in report.rows.iter().filter(|r| !r.is_valid()) {
        log::warn!("row h_gamma={} h_m={} exceeds the failure cap ({} failed)", r.h_gamma, r.h_m, r.failed);
    }
    Ok(())
}

fn cmd_km(a: KmArgs) -> Result<(), Failure> {
    if let Some(z) = a.cure_threshold {
        if !(z.is_finite() && z > 0.0) {
            return usage("--cure-threshold must be positive and finite");
        }
    }
    let mut ds = read_dataset(&a.input)?;
    if let Some(z) = a.cure_threshold {
        ds = ds.apply_cure_threshold(z).context("cannot apply cure threshold")?;
    }
    let curve = kaplan_meier_dataset(&ds, a.cure_at).context("Kaplan-Meier failed")?;
    let mut out = create(&a.out)?;
    curve.write_csv(&mut out).and_then(|_| out.flush()).with_context(|| format!("cannot write {}", a.out.display()))?;
    println!("{} event times; wrote {}", curve.times.len() - 1, a.out.display());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), Failure> {
    if a.x.is_none() && a.data.is_none() {
        return usage("predict needs --x or --data");
    }
    if a.data.is_some() && a.t.is_none() {
        return usage("--data needs --t");
    }
    let text = std::fs::read_to_string(&a.fit).with_context(|| format!("cannot open {}", a.fit.display()))?;
    let result: FitResult = serde_json::from_str(&text).with_context(|| format!("cannot parse {}", a.fit.display()))?;
    let mut out = create(&a.out)?;
    let write_err = |e: std::io::Error| anyhow::Error::new(e).context(format!("cannot write {}", a.out.display()));

    if let Some(path) = &a.data {
        let mut ds = read_dataset(path)?;
        if let Some(z) = result.config.cure_threshold {
            ds = ds.apply_cure_threshold(z).context("cannot apply the fit's cure threshold")?;
        }
        let ts = &a.t.as_ref().expect("checked above").0;
        let surv = result.mean_survival_curve(&ds, ts).context("mean survival failed")?;
        writeln!(out, "t,mean_survival").map_err(write_err)?;
        for (t, s) in ts.iter().zip(surv) {
            writeln!(out, "{t},{s}").map_err(write_err)?;
        }
    } else {
        let xs = &a.x.as_ref().expect("checked above").0;
        match &a.t {
            None => {
                writeln!(out, "x,m_hat,se_m,cure,cure_lo,cure_hi").map_err(write_err)?;
                for &x in xs {
                    let (m, se) = result.curve.interpolate(x).ok_or_else(|| match result.curve.range() {
                        Some((lo, hi)) => anyhow::anyhow!("x = {x} is outside the fitted range [{lo}, {hi}]"),
                        None => anyhow::anyhow!("the fit has no curve"),
                    })?;
                    let band = result.predict_cure_rate(x).context("prediction failed")?;
                    writeln!(out, "{x},{m},{se},{},{},{}", band.point, band.lo, band.hi).map_err(write_err)?;
                }
            }
            Some(List(ts)) => {
                writeln!(out, "x,t,survival,hazard").map_err(write_err)?;
                for &x in xs {
                    for &t in ts {
                        let s = result.predict_survival(x, t).context("prediction failed")?;
                        let h = result.predict_hazard(x, t).context("prediction failed")?;
                        writeln!(out, "{x},{t},{s},{h}").map_err(write_err)?;
                    }
                }
            }
        }
    }
    out.flush().map_err(write_err)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Mc(a) => cmd_mc(a),
        Command::Km(a) => cmd_km(a),
        Command::Predict(a) => cmd_predict(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();

    let args = match config::expand(std::env::args().collect()) {
        Ok(a) => a,
        Err(e @ config::ConfigError::MissingPath) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
