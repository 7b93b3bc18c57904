//! `smp` command-line front end.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure
//! (non-convergence included; `fit` still writes its report).

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::converter::{i_to_ii, ii_to_i_density, ii_to_i_probs, weibull_closure};
use crate::data_io::{read_dataset, read_fit, read_model_spec, write_dataset, write_fit, ModelSpec, ZeroPolicy};
use crate::error::Error;
use crate::inference::{compare, fit, fit_ii_joint, select_covariates, FitResult, REPORT_SCHEMA_VERSION};
use crate::likelihood::{decouple, Approach, Dataset};
use crate::model::{integrate_exit_density, IntensitySource, StateSpace, TransitionKey};
use crate::nonparametric::{compare_curves, nelson_aalen};
use crate::optim::OptimizerSpec;
use crate::plot::{line_plot, Series};
use crate::quadrature::{integrate, QuadratureSpec};
use crate::simulator::{simulate_i, simulate_ii, CovariateDraw, CovariateGenerator, InitialState, SimConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Environment variable holding the default worker thread count.
pub const THREADS_ENV: &str = "SMP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "smp", version, about = "Parametric semi-Markov multi-state models")]
struct Cli {
    /// Worker threads (default: $SMP_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a long-format dataset from a model spec.
    Simulate(SimulateArgs),
    /// Fit a model spec to a dataset by maximum likelihood.
    Fit(FitArgs),
    /// Convert a model spec between the two parameterizations.
    Convert(ConvertArgs),
    /// Evaluate fitted curves on a time grid.
    Predict(PredictArgs),
    /// Nelson-Aalen cumulative intensities per transition.
    Np(NpArgs),
    /// AIC table over several fit reports.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    horizon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Initial state label (default: the first state).
    #[arg(long)]
    initial: Option<String>,
    /// Covariate law `name=fixed:v`, `name=bernoulli:p` or `name=normal:mean:sd`;
    /// unlisted covariates are fixed at 0.
    #[arg(long = "covariate")]
    covariate: Vec<String>,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Replace zero transition durations by this value instead of rejecting them.
    #[arg(long, num_args = 0..=1, default_missing_value = "1e-6")]
    jitter: Option<f64>,
}

impl DataArgs {
    fn policy(&self) -> ZeroPolicy {
        match self.jitter {
            Some(eps) => ZeroPolicy::Jitter(eps),
            None => ZeroPolicy::Reject,
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    approach: Approach,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Single joint optimization over all transitions (Approach II only).
    #[arg(long)]
    joint: bool,
    /// Backward covariate elimination at this Wald p-value threshold.
    #[arg(long)]
    select: Option<f64>,
    #[arg(long, default_value_t = 1)]
    multistart: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
}

#[derive(Debug, Args)]
struct GridArgs {
    /// `start:stop:count` or a comma-separated list of times.
    #[arg(long)]
    grid: String,
    /// Comma-separated covariate vector (default: zeros).
    #[arg(long)]
    covariates: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write SVG plots.
    #[arg(long)]
    svg: bool,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    fit: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Debug, Args)]
struct NpArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model spec providing states, covariates and transitions.
    #[arg(long, required_unless_present = "fit")]
    model: Option<PathBuf>,
    /// Fit report; adds parametric comparison tables.
    #[arg(long)]
    fit: Option<PathBuf>,
    /// Comparison grid (default: 101 points up to the longest duration).
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    svg: bool,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(required = true)]
    fits: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failed command: exit code plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_data_error() { EXIT_DATA } else { EXIT_NUMERIC },
            message: e.to_string(),
        }
    }
}

trait Context<T> {
    fn context(self, what: impl fmt::Display) -> std::result::Result<T, Failure>;
}

impl<T> Context<T> for std::result::Result<T, Error> {
    fn context(self, what: impl fmt::Display) -> std::result::Result<T, Failure> {
        self.map_err(|e| {
            let mut f = Failure::from(e);
            f.message = format!("{what}: {}", f.message);
            f
        })
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

/// Runs the CLI, writing human-readable output to stdout.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    run_with(argv, &mut lock)
}

/// As [`run`] with an explicit output sink.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();

    let threads = match thread_count(cli.threads) {
        Ok(t) => t,
        Err(f) => return report(f),
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => return report(Failure::usage(format!("cannot start thread pool: {e}"))),
    };
    // commands print into a buffer so the pool never sees the caller's sink
    let mut buffer = Vec::new();
    let outcome = pool.install(|| dispatch(cli.command, &mut buffer));
    let _ = out.write_all(&buffer).and_then(|_| out.flush());
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> i32 {
    eprintln!("error: {}", f.message);
    f.code
}

/// 0 lets rayon pick the number of cores.
fn thread_count(flag: Option<usize>) -> CliResult<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::usage(format!("{THREADS_ENV}='{v}' is not a thread count"))),
        Err(_) => Ok(0),
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> CliResult {
    match command {
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Fit(a) => cmd_fit(a, out),
        Command::Convert(a) => cmd_convert(a, out),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Np(a) => cmd_np(a, out),
        Command::Compare(a) => cmd_compare(a, out),
    }
}

fn say(out: &mut dyn Write, text: impl fmt::Display) -> CliResult {
    writeln!(out, "{text}").map_err(|e| Failure::numeric(format!("cannot write output: {e}")))
}

fn load_spec(path: &Path) -> CliResult<ModelSpec> {
    read_model_spec(path).context("model spec")
}

fn parse_grid(text: &str) -> CliResult<Vec<f64>> {
    let bad = |why: &str| Failure::usage(format!("--grid '{text}': {why}"));
    let grid: Vec<f64> = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let [a, b, n] = parts.as_slice() else {
            return Err(bad("expected start:stop:count"));
        };
        let a: f64 = a.trim().parse().map_err(|_| bad("start is not a number"))?;
        let b: f64 = b.trim().parse().map_err(|_| bad("stop is not a number"))?;
        let n: usize = n.trim().parse().map_err(|_| bad("count is not an integer"))?;
        match n {
            0 => return Err(bad("count must be positive")),
            1 => vec![a],
            _ => (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect(),
        }
    } else {
        text.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad("entries must be numbers")))
            .collect::<CliResult<_>>()?
    };
    if grid.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(bad("times must be finite and nonnegative"));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(bad("times must be nondecreasing"));
    }
    Ok(grid)
}

fn parse_covariates(text: Option<&str>, names: &[String]) -> CliResult<Vec<f64>> {
    let Some(text) = text else {
        return Ok(vec![0.0; names.len()]);
    };
    let z: Vec<f64> = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Failure::usage(format!("--covariates: '{v}' is not a number")))
        })
        .collect::<CliResult<_>>()?;
    if z.len() != names.len() {
        return Err(Failure::usage(format!(
            "--covariates has {} values but the model declares {} ({})",
            z.len(),
            names.len(),
            names.join(", ")
        )));
    }
    Ok(z)
}

fn parse_draw(text: &str) -> CliResult<(String, CovariateDraw)> {
    let bad = || {
        Failure::usage(format!(
            "--covariate '{text}': expected name=fixed:v, name=bernoulli:p or name=normal:mean:sd"
        ))
    };
    let (name, law) = text.split_once('=').ok_or_else(bad)?;
    let parts: Vec<&str> = law.split(':').collect();
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let draw = match parts.as_slice() {
        ["fixed", v] => CovariateDraw::Fixed { value: num(v)? },
        ["bernoulli", p] => CovariateDraw::Bernoulli { p: num(p)? },
        ["normal", m, s] => CovariateDraw::Normal {
            mean: num(m)?,
            sd: num(s)?,
        },
        _ => return Err(bad()),
    };
    Ok((name.trim().to_string(), draw))
}

fn cmd_simulate(a: SimulateArgs, out: &mut dyn Write) -> CliResult {
    let spec = load_spec(&a.model)?;
    let mut draws: Vec<CovariateDraw> = vec![CovariateDraw::Fixed { value: 0.0 }; spec.covariates.len()];
    for text in &a.covariate {
        let (name, draw) = parse_draw(text)?;
        let k = spec
            .covariates
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Failure::usage(format!("--covariate: model declares no covariate '{name}'")))?;
        draws[k] = draw;
    }
    let space = spec.state_space().context(a.model.display())?;
    let initial = match &a.initial {
        Some(label) => space
            .index_of(label)
            .ok_or_else(|| Failure::usage(format!("--initial: unknown state '{label}'")))?,
        None => 0,
    };
    let cfg = SimConfig {
        horizon: a.horizon,
        n_subjects: a.n,
        seed: a.seed,
        initial_state: InitialState::Fixed(initial),
        covariate_names: spec.covariates.clone(),
        covariates: CovariateGenerator::Independent(draws),
    };
    let ds = match spec.approach {
        Approach::I => simulate_i(&spec.model_i().context(a.model.display())?, &cfg),
        Approach::II => simulate_ii(&spec.model_ii().context(a.model.display())?, &cfg),
    }
    .context("simulate")?;
    write_dataset(&ds, &a.out).context(a.out.display())?;
    say(out, format!("wrote {} subjects to {}", ds.len(), a.out.display()))
}

fn cmd_fit(a: FitArgs, out: &mut dyn Write) -> CliResult {
    if a.joint && a.approach != Approach::II {
        return Err(Failure::usage("--joint requires --approach II"));
    }
    if a.joint && a.select.is_some() {
        return Err(Failure::usage("--joint and --select cannot be combined"));
    }
    let spec = load_spec(&a.model)?;
    let fit_spec = spec.fit_spec().context(a.model.display())?;
    let space = spec.state_space().context(a.model.display())?;
    let ds = read_dataset(&a.data.data, &space, Some(&spec.covariates), a.data.policy())?;
    let opts = OptimizerSpec {
        max_iters: a.max_iters,
        multistart: a.multistart.max(1),
        seed: a.seed,
        ..OptimizerSpec::default()
    };
    let outcome = if let Some(threshold) = a.select {
        select_covariates(a.approach, &ds, &fit_spec, threshold, &opts).map(|s| {
            for (key, c) in &s.dropped {
                log::info!(
                    "dropped covariate {} from {}",
                    spec.covariates[*c],
                    space.key_label(*key)
                );
            }
            let mut f = s.fit;
            if !s.complete {
                f.diagnostics
                    .push("covariate selection stopped early: a refit did not converge".into());
            }
            (f, s.complete)
        })
    } else if a.joint {
        fit_ii_joint(&ds, &fit_spec, &opts).map(|f| (f, true))
    } else {
        fit(a.approach, &ds, &fit_spec, &opts).map(|f| (f, true))
    };
    let (result, complete) = match outcome {
        Ok(r) => r,
        Err(e) if e.is_data_error() => return Err(e).context("fit"),
        Err(e) => {
            write_failure_report(&a.out, a.approach, &ds, &e)?;
            return Err(Failure::numeric(format!(
                "fit failed: {e} (partial report written to {})",
                a.out.display()
            )));
        }
    };
    write_fit(&result, &a.out).context(a.out.display())?;
    print_fit(&result, out)?;
    if !result.converged() || !complete {
        let stuck: Vec<String> = result
            .transitions
            .iter()
            .filter(|t| t.convergence.as_ref().is_some_and(|c| !c.converged()))
            .map(|t| format!("{}->{}", t.from, t.to))
            .collect();
        let which = if stuck.is_empty() {
            String::new()
        } else {
            format!(" (transitions {})", stuck.join(", "))
        };
        return Err(Failure::numeric(format!(
            "optimizer did not converge{which}; report written to {}",
            a.out.display()
        )));
    }
    Ok(())
}

fn prefix(mut f: Failure, path: &Path) -> Failure {
    if !f.message.contains(&path.display().to_string()) {
        f.message = format!("{}: {}", path.display(), f.message);
    }
    f
}

#[derive(Serialize)]
struct FailureReport<'a> {
    schema_version: u32,
    approach: Approach,
    states: &'a [String],
    n_subjects: usize,
    data_fingerprint: String,
    error: String,
}

fn write_failure_report(path: &Path, approach: Approach, ds: &Dataset, e: &Error) -> CliResult {
    let partial = FailureReport {
        schema_version: REPORT_SCHEMA_VERSION,
        approach,
        states: ds.space().labels(),
        n_subjects: ds.len(),
        data_fingerprint: ds.fingerprint(),
        error: e.to_string(),
    };
    let mut text = serde_json::to_string_pretty(&partial).expect("plain report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

fn print_fit(fit: &FitResult, out: &mut dyn Write) -> CliResult {
    say(
        out,
        format!(
            "Approach {} fit: {} subjects, loglik {:.6}, k {}, AIC {:.6}, {}",
            fit.approach,
            fit.n_subjects,
            fit.loglik,
            fit.k,
            fit.aic,
            if fit.converged() { "converged" } else { "NOT converged" }
        ),
    )?;
    for t in &fit.transitions {
        let head = format!("  {}->{} {} (events {})", t.from, t.to, t.family, t.n_events);
        if !t.identifiable {
            say(out, format!("{head}: not identifiable"))?;
            continue;
        }
        let names = t.family.param_names();
        let params = t.params.as_deref().unwrap_or(&[]);
        let mut parts = Vec::new();
        for (k, v) in params.iter().enumerate() {
            let se = t.se.as_ref().map(|s| s[k]);
            parts.push(format!("{}={v:.6} (se {})", names[k], fmt_opt(se)));
        }
        say(out, format!("{head}: {}", parts.join(", ")))?;
        for (k, c) in t.covariates.iter().enumerate() {
            say(
                out,
                format!(
                    "    beta[{c}]={:.6} se {} z {} p {}",
                    t.beta[k],
                    fmt_opt(t.se_beta.as_ref().map(|s| s[k])),
                    fmt_opt(t.z[k]),
                    fmt_opt(t.p[k])
                ),
            )?;
        }
    }
    if let Some(chain) = &fit.embedded_chain {
        say(out, "  embedded chain:")?;
        for (i, row) in chain.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|p| format!("{p:.6}")).collect();
            say(out, format!("    {}: {}", fit.states[i], cells.join(" ")))?;
        }
    }
    for d in &fit.diagnostics {
        say(out, format!("  note: {d}"))?;
    }
    Ok(())
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn curve_name(kind: &str, space: &StateSpace, key: TransitionKey) -> String {
    format!(
        "{kind}_{}_{}",
        file_label(space.label(key.from)),
        file_label(space.label(key.to))
    )
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| {
        Failure::from(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult {
    let io = |e: std::io::Error| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    };
    let file = fs::File::create(path).map_err(io)?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let csv_err = |e: csv::Error| prefix(Failure::from(Error::Csv(e)), path);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(io)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    write_text(path, &text)
}

/// Formats a curve value; a vanished holding-time survival leaves the cell empty.
fn cell(v: crate::Result<f64>) -> CliResult<String> {
    match v {
        Ok(x) => Ok(x.to_string()),
        Err(Error::TailEvaluation { .. }) => Ok(String::new()),
        Err(e) => Err(e.into()),
    }
}

fn two_column(grid: &[f64], values: &[String]) -> Vec<Vec<String>> {
    grid.iter()
        .zip(values)
        .map(|(t, v)| vec![t.to_string(), v.clone()])
        .collect()
}

fn points(grid: &[f64], values: &[String]) -> Vec<(f64, f64)> {
    grid.iter()
        .zip(values)
        .filter_map(|(t, v)| v.parse().ok().map(|y| (*t, y)))
        .collect()
}

fn chain_rows(space: &StateSpace, rows: &[Vec<f64>]) -> Vec<Vec<String>> {
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            std::iter::once(space.label(i).to_string())
                .chain(row.iter().map(|p| p.to_string()))
                .collect()
        })
        .collect()
}

#[derive(Serialize)]
struct ConvertSummary {
    direction: &'static str,
    covariates: Vec<f64>,
    quadrature_rel_tol: f64,
    quadrature_abs_tol: f64,
    embedded_chain: Vec<Vec<f64>>,
    /// Quadrature error estimate per chain entry (II to I).
    chain_errors: Option<Vec<Vec<f64>>>,
    /// Row sums before renormalization (II to I).
    raw_row_sums: Option<Vec<f64>>,
    /// Per state: whether the Weibull closed form applied.
    closed_form: Vec<bool>,
    /// Largest deviation of the chain recovered from the converted intensities (I to II).
    round_trip_max_error: Option<f64>,
    files: Vec<String>,
}

fn cmd_convert(a: ConvertArgs, out: &mut dyn Write) -> CliResult {
    let spec = load_spec(&a.model)?;
    let grid = parse_grid(&a.grid.grid)?;
    let z = parse_covariates(a.grid.covariates.as_deref(), &spec.covariates)?;
    create_dir(&a.grid.out_dir)?;
    let dir = &a.grid.out_dir;
    let qspec = QuadratureSpec::default();
    let mut files = Vec::new();
    let mut emit = |name: String, header: &[&str], rows: Vec<Vec<String>>, plot: Option<(&str, Vec<(f64, f64)>)>| {
        let path = dir.join(format!("{name}.csv"));
        write_csv(&path, header, &rows)?;
        files.push(format!("{name}.csv"));
        if let (true, Some((y_label, pts))) = (a.grid.svg, plot) {
            let svg = line_plot(&name, "t", y_label, &[Series::line(y_label, pts)]);
            write_text(&dir.join(format!("{name}.svg")), &svg)?;
            files.push(format!("{name}.svg"));
        }
        CliResult::Ok(())
    };

    let summary = match spec.approach {
        Approach::I => {
            let model = spec.model_i().context(a.model.display())?;
            let space = model.space().clone();
            let ev = i_to_ii(&model);
            let mut header = vec!["from"];
            header.extend(space.labels().iter().map(String::as_str));
            emit("chain".into(), &header, chain_rows(&space, model.chain().rows()), None)?;
            for law in model.laws() {
                let key = law.key;
                let what = space.key_label(key);
                let intensity = grid
                    .iter()
                    .map(|&t| cell(ev.intensity(key.from, key.to, &z, t)))
                    .collect::<CliResult<Vec<_>>>()
                    .map_err(|f| prefix_transition(f, &what))?;
                let density = grid
                    .iter()
                    .map(|&t| cell(law.log_density(&z, t).map(f64::exp)))
                    .collect::<CliResult<Vec<_>>>()
                    .map_err(|f| prefix_transition(f, &what))?;
                let pts = points(&grid, &intensity);
                emit(
                    curve_name("intensity", &space, key),
                    &["t", "value"],
                    two_column(&grid, &intensity),
                    Some(("intensity", pts)),
                )?;
                let pts = points(&grid, &density);
                emit(
                    curve_name("density", &space, key),
                    &["t", "value"],
                    two_column(&grid, &density),
                    Some(("density", pts)),
                )?;
            }
            let mut closed = Vec::new();
            for i in 0..space.n_states() {
                closed.push(!space.is_absorbing(i) && weibull_closure(&model, i, &z).context("convert")?.is_some());
            }
            let back = ii_to_i_probs(&ev, &z, &qspec).context("convert: recovering the chain")?;
            let err = back
                .chain
                .rows()
                .iter()
                .zip(model.chain().rows())
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max);
            ConvertSummary {
                direction: "I->II",
                covariates: z.clone(),
                quadrature_rel_tol: qspec.rel_tol,
                quadrature_abs_tol: qspec.abs_tol,
                embedded_chain: model.chain().rows().to_vec(),
                chain_errors: None,
                raw_row_sums: None,
                closed_form: closed,
                round_trip_max_error: Some(err),
                files: vec![],
            }
        }
        Approach::II => {
            let model = spec.model_ii().context(a.model.display())?;
            let space = model.space().clone();
            let conv = ii_to_i_probs(&model, &z, &qspec).context("convert")?;
            let mut header = vec!["from"];
            header.extend(space.labels().iter().map(String::as_str));
            emit("chain".into(), &header, chain_rows(&space, conv.chain.rows()), None)?;
            for law in model.laws() {
                let key = law.key;
                let what = space.key_label(key);
                let intensity = grid
                    .iter()
                    .map(|&t| cell(law.hazard(&z, t)))
                    .collect::<CliResult<Vec<_>>>()
                    .map_err(|f| prefix_transition(f, &what))?;
                let pts = points(&grid, &intensity);
                emit(
                    curve_name("intensity", &space, key),
                    &["t", "value"],
                    two_column(&grid, &intensity),
                    Some(("intensity", pts)),
                )?;
                if conv.chain.p(key.from, key.to) > 0.0 {
                    let sojourn = ii_to_i_density(&model, key.from, key.to, &z, &qspec).context(&what)?;
                    let density = grid
                        .iter()
                        .map(|&t| cell(sojourn.density(t)))
                        .collect::<CliResult<Vec<_>>>()
                        .map_err(|f| prefix_transition(f, &what))?;
                    let pts = points(&grid, &density);
                    emit(
                        curve_name("density", &space, key),
                        &["t", "value"],
                        two_column(&grid, &density),
                        Some(("density", pts)),
                    )?;
                }
            }
            ConvertSummary {
                direction: "II->I",
                covariates: z.clone(),
                quadrature_rel_tol: qspec.rel_tol,
                quadrature_abs_tol: qspec.abs_tol,
                embedded_chain: conv.chain.rows().to_vec(),
                chain_errors: Some(conv.errors.clone()),
                raw_row_sums: Some(conv.raw_row_sums.clone()),
                closed_form: conv.closed_form.clone(),
                round_trip_max_error: None,
                files: vec![],
            }
        }
    };
    let summary = ConvertSummary { files, ..summary };
    write_json(&dir.join("summary.json"), &summary)?;
    say(
        out,
        format!(
            "wrote {} files and summary.json to {}",
            summary.files.len(),
            dir.display()
        ),
    )
}

fn prefix_transition(mut f: Failure, what: &str) -> Failure {
    f.message = format!("transition {what}: {}", f.message);
    f
}

/// Running integral of `f` over the grid, one panel per grid step.
fn cumulative<F: Fn(f64) -> f64>(f: F, grid: &[f64], spec: &QuadratureSpec) -> crate::Result<Vec<f64>> {
    let mut acc = 0.0;
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(grid.len());
    for &t in grid {
        if t > prev {
            acc += integrate(&f, prev, t, spec)?.value;
            prev = t;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Running exit-probability integral `CIF_ij` over the grid.
fn cumulative_incidence<S: IntensitySource + ?Sized>(
    model: &S,
    key: TransitionKey,
    z: &[f64],
    grid: &[f64],
    spec: &QuadratureSpec,
) -> crate::Result<Vec<f64>> {
    let mut acc = 0.0;
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(grid.len());
    for &t in grid {
        if t > prev {
            acc += integrate_exit_density(model, key.from, key.to, z, prev, t, spec)?.value;
            prev = t;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Evaluates `f` pointwise and reports the first failure, so quadrature
/// integrands can stay infallible.
fn guarded<'a>(
    f: impl Fn(f64) -> crate::Result<f64> + 'a,
) -> (impl Fn(f64) -> f64 + 'a, std::rc::Rc<std::cell::RefCell<Option<Error>>>) {
    let failure = std::rc::Rc::new(std::cell::RefCell::new(None));
    let slot = failure.clone();
    let g = move |t: f64| match f(t) {
        Ok(v) => v,
        Err(e) => {
            slot.borrow_mut().get_or_insert(e);
            0.0
        }
    };
    (g, failure)
}

fn cmd_predict(a: PredictArgs, out: &mut dyn Write) -> CliResult {
    let report = read_fit(&a.fit).context("fit report")?;
    let grid = parse_grid(&a.grid.grid)?;
    let z = parse_covariates(a.grid.covariates.as_deref(), &report.covariates)?;
    create_dir(&a.grid.out_dir)?;
    let dir = &a.grid.out_dir;
    let qspec = QuadratureSpec::default();
    let header = ["t", "sojourn_hazard", "intensity", "cumulative_intensity", "cif"];
    let mut written = 0;

    let mut emit = |space: &StateSpace, key: TransitionKey, columns: [Vec<String>; 4]| -> CliResult {
        let name = curve_name("predict", space, key);
        let rows: Vec<Vec<String>> = grid
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let mut row = vec![t.to_string()];
                row.extend(columns.iter().map(|c| c[k].clone()));
                row
            })
            .collect();
        write_csv(&dir.join(format!("{name}.csv")), &header, &rows)?;
        if a.grid.svg {
            let series: Vec<Series> = header[1..]
                .iter()
                .zip(&columns)
                .map(|(h, c)| Series::line(*h, points(&grid, c)))
                .collect();
            write_text(
                &dir.join(format!("{name}.svg")),
                &line_plot(&space.key_label(key), "t", "value", &series),
            )?;
        }
        written += 1;
        Ok(())
    };
    let fmt_all = |v: Vec<f64>| v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>();

    match report.approach {
        Approach::I => {
            let model = report.model_i().context(a.fit.display())?;
            let space = model.space().clone();
            let ev = i_to_ii(&model);
            for law in model.laws() {
                let key = law.key;
                let what = space.key_label(key);
                let run = || -> CliResult<[Vec<String>; 4]> {
                    let hazard = grid
                        .iter()
                        .map(|&t| cell(law.hazard(&z, t)))
                        .collect::<CliResult<Vec<_>>>()?;
                    let intensity = grid
                        .iter()
                        .map(|&t| cell(ev.intensity(key.from, key.to, &z, t)))
                        .collect::<CliResult<Vec<_>>>()?;
                    let (f, failure) = guarded(|t| ev.intensity(key.from, key.to, &z, t));
                    let cum = cumulative(f, &grid, &qspec)?;
                    if let Some(e) = failure.borrow_mut().take() {
                        return Err(e.into());
                    }
                    let cif = grid
                        .iter()
                        .map(|&t| model.cif(key.from, key.to, &z, t))
                        .collect::<crate::Result<Vec<_>>>()?;
                    Ok([hazard, intensity, fmt_all(cum), fmt_all(cif)])
                };
                let columns = run().map_err(|f| prefix_transition(f, &what))?;
                emit(&space, key, columns)?;
            }
        }
        Approach::II => {
            let model = report.model_ii().context(a.fit.display())?;
            let space = model.space().clone();
            for law in model.laws() {
                let key = law.key;
                let what = space.key_label(key);
                let run = || -> CliResult<[Vec<String>; 4]> {
                    let hazard = match ii_to_i_density(&model, key.from, key.to, &z, &qspec) {
                        Ok(sojourn) => grid
                            .iter()
                            .map(|&t| cell(sojourn.hazard(t)))
                            .collect::<CliResult<Vec<_>>>()?,
                        Err(Error::UndefinedConditional { .. }) => vec![String::new(); grid.len()],
                        Err(e) => return Err(e.into()),
                    };
                    let intensity = grid
                        .iter()
                        .map(|&t| cell(law.hazard(&z, t)))
                        .collect::<CliResult<Vec<_>>>()?;
                    let cum = grid
                        .iter()
                        .map(|&t| law.cumulative_hazard(&z, t))
                        .collect::<crate::Result<Vec<_>>>()?;
                    let cif = cumulative_incidence(&model, key, &z, &grid, &qspec)?;
                    Ok([hazard, intensity, fmt_all(cum), fmt_all(cif)])
                };
                let columns = run().map_err(|f| prefix_transition(f, &what))?;
                emit(&space, key, columns)?;
            }
        }
    }
    say(out, format!("wrote {written} curve tables to {}", dir.display()))
}

/// Parametric baseline cumulative intensity `∫₀ᵗ α̃_ij(u | 0) du`.
fn parametric_cumulative(report: &FitResult, key: TransitionKey, grid: &[f64]) -> CliResult<Vec<f64>> {
    let z = vec![0.0; report.covariates.len()];
    let qspec = QuadratureSpec::default();
    match report.approach {
        Approach::II => {
            let model = report.model_ii()?;
            let Some(law) = model.law(key) else {
                return Ok(vec![0.0; grid.len()]);
            };
            Ok(grid
                .iter()
                .map(|&t| law.cumulative_hazard(&z, t))
                .collect::<crate::Result<Vec<_>>>()?)
        }
        Approach::I => {
            let model = report.model_i()?;
            let ev = i_to_ii(&model);
            let (f, failure) = guarded(|t| ev.intensity(key.from, key.to, &z, t));
            let cum = cumulative(f, grid, &qspec)?;
            if let Some(e) = failure.borrow_mut().take() {
                return Err(e.into());
            }
            Ok(cum)
        }
    }
}

fn cmd_np(a: NpArgs, out: &mut dyn Write) -> CliResult {
    let report = a
        .fit
        .as_deref()
        .map(|p| read_fit(p).context("fit report"))
        .transpose()?;
    let spec = a.model.as_deref().map(load_spec).transpose()?;
    let (space, covariates, keys): (StateSpace, Vec<String>, Vec<TransitionKey>) = match (&spec, &report) {
        (Some(s), _) => {
            let space = s
                .state_space()
                .context(a.model.as_ref().expect("spec implies path").display())?;
            let fs = s.fit_spec()?;
            let keys = fs.transitions.iter().map(|t| t.key).collect();
            (space, s.covariates.clone(), keys)
        }
        (None, Some(r)) => {
            let idx = |l: &str| r.states.iter().position(|s| s == l);
            let absorbing: Vec<usize> = r.absorbing.iter().filter_map(|l| idx(l)).collect();
            let space = StateSpace::new(r.states.clone(), absorbing).context("fit report")?;
            let keys = r
                .transitions
                .iter()
                .filter_map(|t| {
                    Some(TransitionKey {
                        from: idx(&t.from)?,
                        to: idx(&t.to)?,
                    })
                })
                .collect();
            (space, r.covariates.clone(), keys)
        }
        (None, None) => return Err(Failure::usage("np needs --model or --fit")),
    };
    let ds = read_dataset(&a.data.data, &space, Some(&covariates), a.data.policy())?;
    if let Some(r) = &report {
        if r.data_fingerprint != ds.fingerprint() {
            log::warn!(
                "fit report was estimated on a different dataset than {}",
                a.data.data.display()
            );
        }
    }
    create_dir(&a.out_dir)?;
    let max_duration = ds
        .subjects()
        .iter()
        .flat_map(|h| h.sojourns.iter().chain(h.censored_tail.iter()))
        .fold(0.0f64, |m, &d| m.max(d));
    let grid = match &a.grid {
        Some(g) => parse_grid(g)?,
        None => (0..=100).map(|k| max_duration * k as f64 / 100.0).collect(),
    };
    for key in keys {
        let records = decouple(&ds, key.from, key.to);
        let step = nelson_aalen(&records);
        let name = curve_name("np", &space, key);
        let rows: Vec<Vec<String>> = (0..step.jump_times.len())
            .map(|k| {
                vec![
                    step.jump_times[k].to_string(),
                    step.cum_values[k].to_string(),
                    step.variance[k].to_string(),
                ]
            })
            .collect();
        write_csv(
            &a.out_dir.join(format!("{name}.csv")),
            &["t", "cumulative", "variance"],
            &rows,
        )?;
        let step_points: Vec<(f64, f64)> = step
            .jump_times
            .iter()
            .copied()
            .zip(step.cum_values.iter().copied())
            .collect();
        let mut series = vec![Series::steps("Nelson-Aalen", step_points)];
        if let Some(r) = &report {
            let what = space.key_label(key);
            let values = parametric_cumulative(r, key, &grid).map_err(|f| prefix_transition(f, &what))?;
            let lookup = |t: f64| {
                let k = grid.iter().position(|g| *g == t).expect("grid point");
                Ok(values[k])
            };
            let table = compare_curves(&step, lookup, &grid)?;
            let rows: Vec<Vec<String>> = table
                .iter()
                .map(|c| {
                    vec![
                        c.t.to_string(),
                        c.nonparametric.map(|v| v.to_string()).unwrap_or_default(),
                        c.parametric.to_string(),
                        c.difference.map(|v| v.to_string()).unwrap_or_default(),
                    ]
                })
                .collect();
            let cname = curve_name("np_compare", &space, key);
            write_csv(
                &a.out_dir.join(format!("{cname}.csv")),
                &["t", "nonparametric", "parametric", "difference"],
                &rows,
            )?;
            series.push(Series::line("parametric", grid.iter().copied().zip(values).collect()));
        }
        if a.svg {
            write_text(
                &a.out_dir.join(format!("{name}.svg")),
                &line_plot(&space.key_label(key), "t", "cumulative intensity", &series),
            )?;
        }
    }
    say(out, format!("wrote Nelson-Aalen tables to {}", a.out_dir.display()))
}

fn cmd_compare(a: CompareArgs, out: &mut dyn Write) -> CliResult {
    let fits = a
        .fits
        .iter()
        .map(|p| read_fit(p).context("fit report").map(|f| (p.display().to_string(), f)))
        .collect::<CliResult<Vec<_>>>()?;
    let named: Vec<(String, &FitResult)> = fits.iter().map(|(n, f)| (n.clone(), f)).collect();
    let rows = compare(&named)?;
    say(
        out,
        format!(
            "{:<40} {:>8} {:>16} {:>4} {:>16} {:>9}",
            "fit", "approach", "loglik", "k", "AIC", "converged"
        ),
    )?;
    for r in &rows {
        say(
            out,
            format!(
                "{:<40} {:>8} {:>16.6} {:>4} {:>16.6} {:>9}{}",
                r.name,
                r.approach.to_string(),
                r.loglik,
                r.k,
                r.aic,
                if r.converged { "yes" } else { "no" },
                if r.best { "  *" } else { "" }
            ),
        )?;
    }
    if let Some(path) = &a.out {
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.name.clone(),
                    r.approach.to_string(),
                    r.loglik.to_string(),
                    r.k.to_string(),
                    r.aic.to_string(),
                    r.converged.to_string(),
                    r.best.to_string(),
                ]
            })
            .collect();
        write_csv(
            path,
            &["fit", "approach", "loglik", "k", "aic", "converged", "best"],
            &table,
        )?;
    }
    Ok(())
}
