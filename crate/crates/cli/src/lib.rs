//! The `supcp` command-line tool as a library, so the commands can also be
//! driven in-process.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::ffi::OsString;

use clap::{Args, Parser, Subcommand};
use supcp::cp_als::{cp_fit_als, CpConfig};
use supcp::io::{
    read_matrix_csv, read_tensor, write_atomic, write_json, write_matrix_csv, write_tensor,
    CpDocument, ModelDocument, TruthDocument,
};
use supcp::model_selection::{heldout_loglik, select_rank, SelectionConfig};
use supcp::simulation::{
    generate, run_benchmark, run_init_study, BenchmarkConfig, BenchmarkReport, InitStudyConfig,
    InitStudyRow, InitVariant, Method, Scheme,
};
use supcp::supcp::{conditional_mean, fit_multistart, FitConfig, FitResult, InitMethod};
use supcp::{Error, MultiwayArray};

#[derive(Parser)]
#[command(name = "supcp", version, about = "Supervised probabilistic CP factorization")]
struct Cli {
    /// Worker threads for concurrent fits (SUPCP_JOBS overrides).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the supervised model and write a model document.
    Fit(FitCmd),
    /// Fit a least-squares CP factorization.
    Cp(CpCmd),
    /// Choose the rank by held-out log-likelihood.
    RankSelect(RankSelectCmd),
    /// Generate a simulated dataset.
    Simulate(SimulateCmd),
    /// Compare SupCP, CP and SupSVD on simulated settings.
    Bench(BenchCmd),
    /// Compare initialization and annealing strategies.
    InitStudy(InitStudyCmd),
    /// Print the log-likelihood of data under a fitted model.
    Evaluate(EvaluateCmd),
    /// Write the conditional mean array for given covariate values.
    Construct(ConstructCmd),
}

#[derive(Args, Clone)]
struct FitOptions {
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Annealing iterations.
    #[arg(long, default_value_t = 100)]
    anneal: usize,
    #[arg(long, default_value = "random")]
    init: InitMethod,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated starting seeds; the best start is kept.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Estimate an unrestricted Σ_f instead of a diagonal one.
    #[arg(long)]
    full_sigma_f: bool,
}

impl FitOptions {
    fn config(&self, rank: usize) -> FitConfig {
        FitConfig {
            rank,
            max_iters: self.max_iters,
            tol: self.tol,
            anneal_iters: self.anneal,
            init_method: self.init,
            seed: self.seed,
            diag_sigma_f: !self.full_sigma_f,
            fixed_sigma_f: None,
        }
    }

    fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![self.seed])
    }
}

#[derive(Args)]
struct FitCmd {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long)]
    rank: usize,
    #[command(flatten)]
    opts: FitOptions,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CpCmd {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    rank: usize,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the reconstructed array.
    #[arg(long)]
    signal_out: Option<PathBuf>,
}

#[derive(Args)]
struct RankSelectCmd {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    /// Inclusive range `a..b` or a comma-separated list.
    #[arg(long, default_value = "1..10")]
    ranks: String,
    #[arg(long, default_value_t = 0.5)]
    train_frac: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[command(flatten)]
    opts: FitOptions,
    /// Report document.
    #[arg(long)]
    out: PathBuf,
    /// Two-column rank,test_loglik CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateCmd {
    /// setting1..setting4, rank:<R> or init.
    #[arg(long)]
    scheme: Scheme,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes <prefix>.mway, <prefix>_y.csv and <prefix>_truth.json.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct BenchCmd {
    /// setting1..setting4.
    #[arg(long)]
    scheme: Scheme,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, value_delimiter = ',', default_value = "supcp,cp,supsvd")]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Starts per SupCP/SupSVD fit.
    #[arg(long, default_value_t = 1)]
    starts: usize,
    /// Starts per CP fit.
    #[arg(long, default_value_t = 1)]
    cp_starts: usize,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    #[arg(long, default_value_t = 100)]
    anneal: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// CSV of benchmark rows.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InitStudyCmd {
    #[arg(long, default_value_t = 100)]
    datasets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated annealing lengths, crossed with random and CP starts.
    #[arg(long, value_delimiter = ',', default_value = "0,100,500")]
    anneal: Vec<usize>,
    #[arg(long, default_value_t = 2000)]
    iters_after_anneal: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateCmd {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
}

#[derive(Args)]
struct ConstructCmd {
    #[arg(long)]
    model: PathBuf,
    /// Covariate values, centered unless --raw-y is given.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    y_values: Vec<f64>,
    /// Treat --y-values as raw covariates and subtract the stored means.
    #[arg(long)]
    raw_y: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let jobs = std::env::var("SUPCP_JOBS")
        .ok()
        .and_then(|v| v.parse().ok())
        .or(cli.jobs);
    if let Some(n) = jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not configure {n} worker threads: {e}");
        }
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() { 3 } else { 2 }
        }
    }
}

/// Prefixes I/O errors with the offending path.
fn with_path<T>(path: &Path, r: supcp::Result<T>) -> supcp::Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn load_tensor(path: &Path) -> supcp::Result<MultiwayArray> {
    with_path(path, read_tensor(path))
}

fn load_csv(path: &Path) -> supcp::Result<supcp::Matrix> {
    with_path(path, read_matrix_csv(path))
}

fn load_model(path: &Path) -> supcp::Result<ModelDocument> {
    with_path(path, ModelDocument::read(path))
}

fn run(command: Command) -> supcp::Result<()> {
    match command {
        Command::Fit(c) => cmd_fit(c),
        Command::Cp(c) => cmd_cp(c),
        Command::RankSelect(c) => cmd_rank_select(c),
        Command::Simulate(c) => cmd_simulate(c),
        Command::Bench(c) => cmd_bench(c),
        Command::InitStudy(c) => cmd_init_study(c),
        Command::Evaluate(c) => cmd_evaluate(c),
        Command::Construct(c) => cmd_construct(c),
    }
}

fn report_diagnostics(fit: &FitResult) {
    for d in &fit.diagnostics {
        eprintln!("warning: {d}");
    }
    if !fit.converged {
        eprintln!("warning: not converged after {} iterations", fit.n_iters);
    }
}

fn cmd_fit(c: FitCmd) -> supcp::Result<()> {
    let x = load_tensor(&c.x)?;
    let y = load_csv(&c.y)?;
    let config = c.opts.config(c.rank);
    let seeds = c.opts.seeds();
    let fit = fit_multistart(&x, &y, &config, &seeds)?;
    report_diagnostics(&fit);
    ModelDocument::from_fit(&fit, &config, &seeds).write(&c.out)?;
    eprintln!(
        "fit rank {} in {} iterations, log-likelihood {}",
        c.rank,
        fit.n_iters,
        fit.final_loglik()
    );
    Ok(())
}

fn cmd_cp(c: CpCmd) -> supcp::Result<()> {
    let x = load_tensor(&c.x)?;
    let config = CpConfig {
        rank: c.rank,
        max_iters: c.max_iters,
        tol: c.tol,
        seed: c.seed,
    };
    let fit = cp_fit_als(&x, &config)?;
    for d in &fit.diagnostics {
        eprintln!("warning: {d}");
    }
    write_json(&c.out, &CpDocument::from_fit(&fit, c.seed))?;
    if let Some(path) = &c.signal_out {
        write_tensor(path, &fit.signal()?)?;
    }
    eprintln!("cp rank {} in {} iterations, rss {}", c.rank, fit.n_iters, fit.rss);
    Ok(())
}

fn parse_ranks(s: &str) -> supcp::Result<Vec<usize>> {
    let bad = || Error::InvalidArgument(format!("bad rank list {s:?} (use a..b or 1,2,3)"));
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| bad()))
        .collect()
}

fn cmd_rank_select(c: RankSelectCmd) -> supcp::Result<()> {
    let x = load_tensor(&c.x)?;
    let y = load_csv(&c.y)?;
    let ranks = parse_ranks(&c.ranks)?;
    let selection = SelectionConfig {
        train_fraction: c.train_frac,
        split_seed: c.split_seed,
        fit_seeds: c.opts.seeds(),
    };
    let report = select_rank(&x, &y, &ranks, &c.opts.config(1), &selection)?;
    for (r, f) in report.candidate_ranks.iter().zip(&report.failures) {
        if let Some(msg) = f {
            eprintln!("warning: rank {r} failed: {msg}");
        }
    }
    write_json(&c.out, &report)?;
    if let Some(path) = &c.csv {
        let mut text = String::from("rank,test_loglik\n");
        for (r, ll) in report.candidate_ranks.iter().zip(&report.test_logliks) {
            let cell = ll.map_or_else(|| "NA".to_string(), |v| v.to_string());
            let _ = writeln!(text, "{r},{cell}");
        }
        write_atomic(path, text.as_bytes())?;
    }
    println!("{}", report.chosen_rank);
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_simulate(c: SimulateCmd) -> supcp::Result<()> {
    let data = generate(c.scheme, c.seed)?;
    write_tensor(with_suffix(&c.out_prefix, ".mway"), &data.x)?;
    write_matrix_csv(with_suffix(&c.out_prefix, "_y.csv"), &data.y, None)?;
    write_json(
        with_suffix(&c.out_prefix, "_truth.json"),
        &TruthDocument::new(&data.truth, &c.scheme.to_string(), c.seed),
    )?;
    eprintln!("simulated {} with dims {:?}", c.scheme, data.x.dims());
    Ok(())
}

fn bench_table(report: &BenchmarkReport, methods: &[Method]) -> String {
    let mut metrics: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
    }
    let mut out = format!("{:<12}", "metric");
    for m in methods {
        let _ = write!(out, "{:>22}", m.to_string());
    }
    out.push('\n');
    for metric in metrics {
        let _ = write!(out, "{metric:<12}");
        for &m in methods {
            let cell = report
                .row(m, metric)
                .map_or_else(|| "NA".to_string(), |r| format!("{:.2} ({:.2})", r.median, r.mad));
            let _ = write!(out, "{cell:>22}");
        }
        out.push('\n');
    }
    out
}

fn cmd_bench(c: BenchCmd) -> supcp::Result<()> {
    let Scheme::Setting(setting) = c.scheme else {
        return Err(Error::InvalidArgument("bench supports setting1..setting4".into()));
    };
    let config = BenchmarkConfig {
        fit: FitConfig {
            max_iters: c.max_iters,
            anneal_iters: c.anneal,
            tol: c.tol,
            ..FitConfig::new(1)
        },
        cp: CpConfig::new(1),
        n_starts: c.starts,
        cp_starts: c.cp_starts,
    };
    let report = run_benchmark(setting, c.runs, &c.methods, c.seed, &config)?;
    for f in &report.failures {
        if f.count > 0 {
            eprintln!(
                "warning: {} failed in {} runs (first: {})",
                f.method,
                f.count,
                f.first_error.as_deref().unwrap_or("")
            );
        }
    }
    if let Some(path) = &c.out {
        let mut text = String::from("method,metric,median,mad,n_runs\n");
        for r in &report.rows {
            let _ = writeln!(text, "{},{},{},{},{}", r.method, r.metric, r.median, r.mad, r.n_runs);
        }
        write_atomic(path, text.as_bytes())?;
    }
    print!("{}", bench_table(&report, &c.methods));
    Ok(())
}

fn init_study_csv(rows: &[InitStudyRow]) -> String {
    let mut text = String::from(
        "init,anneal_iters,n_datasets,mean_loglik,sd_loglik,mean_abs_diff,sd_abs_diff,mean_time_s,sd_time_s\n",
    );
    for r in rows {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{}",
            r.init,
            r.anneal_iters,
            r.n_datasets,
            r.mean_loglik,
            r.sd_loglik,
            r.mean_abs_diff,
            r.sd_abs_diff,
            r.mean_time_s,
            r.sd_time_s
        );
    }
    text
}

fn cmd_init_study(c: InitStudyCmd) -> supcp::Result<()> {
    let variants: Vec<InitVariant> = [InitMethod::Random, InitMethod::Cp]
        .into_iter()
        .flat_map(|init| c.anneal.iter().map(move |&a| InitVariant { init, anneal_iters: a }))
        .collect();
    let config = InitStudyConfig {
        iters_after_anneal: c.iters_after_anneal,
        tol: c.tol,
    };
    let rows = run_init_study(c.datasets, &variants, c.seed, &config)?;
    let csv = init_study_csv(&rows);
    if let Some(path) = &c.out {
        write_atomic(path, csv.as_bytes())?;
    }
    println!("{:<28}{:>24}{:>22}{:>16}", "method", "log-likelihood", "abs difference", "time (s)");
    for r in &rows {
        println!(
            "{:<28}{:>24}{:>22}{:>16}",
            format!("{} start, {} annealing", r.init, r.anneal_iters),
            format!("{:.1} ({:.1})", r.mean_loglik, r.sd_loglik),
            format!("{:.2} ({:.2})", r.mean_abs_diff, r.sd_abs_diff),
            format!("{:.2} ({:.2})", r.mean_time_s, r.sd_time_s),
        );
    }
    Ok(())
}

fn cmd_evaluate(c: EvaluateCmd) -> supcp::Result<()> {
    let doc = load_model(&c.model)?;
    let x = load_tensor(&c.x)?;
    let y = load_csv(&c.y)?;
    let ll = heldout_loglik(&x, &y, &doc.params()?, &doc.centering()?)?;
    println!("{ll}");
    Ok(())
}

fn cmd_construct(c: ConstructCmd) -> supcp::Result<()> {
    let doc = load_model(&c.model)?;
    let params = doc.params()?;
    let centering = doc.centering()?;
    if c.y_values.len() != params.n_covariates() {
        return Err(Error::InvalidArgument(format!(
            "expected {} covariate values, got {}",
            params.n_covariates(),
            c.y_values.len()
        )));
    }
    let y: Vec<f64> = if c.raw_y {
        c.y_values.iter().zip(&centering.y_mean).map(|(v, m)| v - m).collect()
    } else {
        c.y_values.clone()
    };
    let mean = conditional_mean(&y, &params)?;
    let values = mean
        .values()
        .iter()
        .zip(&centering.x_mean)
        .map(|(v, m)| v + m)
        .collect();
    write_tensor(&c.out, &MultiwayArray::new(mean.dims().to_vec(), values)?)?;
    Ok(())
}
