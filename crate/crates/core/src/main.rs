use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use gfftree::fixedpoint::{eta_full_with, laplace_full, solve_eta_plus_with, solve_gamma, PicardOptions, PICARD_TOL};
use gfftree::harness::{geometric_t_grid, run_experiment, Budgets, Experiment, ExperimentOptions, Lab};
use gfftree::measures::{Grid, GridSpec, ModelParams, MIN_NODES, MIN_TAIL_SIGMAS};
use gfftree::output::{write_gnuplot, write_json, Table};
use gfftree::simulator::{
    simulate_replicas, tail_estimate, Mode, RootLaw, SimConfig, DEFAULT_DEPTH_CAP, DEFAULT_SEED, DEFAULT_SIZE_CAP,
};
use gfftree::spectral::{assemble_operator, leading_eigenpair, CriticalData, BISECTION_TOL, EIGEN_MAX_ITER, EIGEN_TOL};

const DEFAULT_N_NODES: usize = 2001;
const DEFAULT_TAIL_SIGMAS: f64 = 12.0;
const DEFAULT_SIM_REPLICAS: u64 = 100_000;

/// Critical height, eigenfunctions, fixed points and Monte Carlo for
/// level-set percolation of the Gaussian free field on (d+1)-regular trees.
#[derive(Parser, Debug)]
#[command(name = "gfftree", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Critical height h*, eigenfunction and the constants C1, C2.
    Hstar {
        #[command(flatten)]
        common: Common,
    },
    /// Leading eigenpair of L_h at a given level.
    Eigen {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true, value_parser = finite)]
        h: f64,
    },
    /// Forward and full percolation probabilities at level h.
    Eta {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true, value_parser = finite)]
        h: f64,
    },
    /// One minus the Laplace transform of the critical cluster size.
    Gamma {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = positive)]
        s: f64,
    },
    /// Simulates clusters and writes one row per replica.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimArgs,
        /// Level.
        #[arg(long, allow_hyphen_values = true, value_parser = finite)]
        h: f64,
        #[arg(long, default_value_t = DEFAULT_SIM_REPLICAS, value_parser = clap::value_parser!(u64).range(1..))]
        replicas: u64,
    },
    /// Empirical survival function of the cluster size.
    Tail {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimArgs,
        /// Level (default: the computed h*).
        #[arg(long, allow_hyphen_values = true, value_parser = finite)]
        h: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_SIM_REPLICAS, value_parser = clap::value_parser!(u64).range(1..))]
        replicas: u64,
    },
    /// Runs an experiment and exits non-zero if any verdict fails.
    Verify {
        #[arg(value_enum)]
        experiment: ExperimentArg,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_SEED, value_parser = seed)]
        seed: u64,
        /// Overrides every Monte Carlo replica count of the experiment.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        replicas: Option<u64>,
        /// Root value for `tail` (default: h*).
        #[arg(long, allow_hyphen_values = true, value_parser = finite)]
        a: Option<f64>,
        /// δ ladder for `near-critical`, strictly decreasing.
        #[arg(long, value_delimiter = ',', value_parser = positive)]
        deltas: Option<Vec<f64>>,
        /// s ladder for `laplace`, strictly decreasing.
        #[arg(long = "s", value_delimiter = ',', value_parser = positive)]
        s_ladder: Option<Vec<f64>>,
        /// ε in the L^{2-ε}(ν) remainder norm.
        #[arg(long, value_parser = positive)]
        epsilon: Option<f64>,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Tree parameter; the tree is (d+1)-regular.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(2..))]
    d: u32,
    /// Quadrature nodes per grid.
    #[arg(long, default_value_t = DEFAULT_N_NODES, value_parser = n_nodes)]
    n_nodes: usize,
    /// Grid length above max(h, 0), in units of σ_ν.
    #[arg(long, default_value_t = DEFAULT_TAIL_SIGMAS, value_parser = tail_sigmas)]
    tail_sigmas: f64,
    /// Bisection tolerance for h*.
    #[arg(long, default_value_t = BISECTION_TOL, value_parser = positive)]
    tol: f64,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,
    /// Output root.
    #[arg(long, env = "GFFTREE_OUT", default_value = "runs")]
    out: PathBuf,
}

impl Common {
    fn grid_spec(&self) -> GridSpec {
        GridSpec {
            n_nodes: self.n_nodes,
            tail_sigmas: self.tail_sigmas,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct SimArgs {
    /// Fixed root value; omitted means a stationary N(0, σ_ν²) root.
    #[arg(long, allow_hyphen_values = true, value_parser = finite)]
    a: Option<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Forward)]
    mode: ModeArg,
    #[arg(long, default_value_t = DEFAULT_SIZE_CAP, value_parser = clap::value_parser!(u64).range(1..))]
    size_cap: u64,
    #[arg(long, default_value_t = DEFAULT_DEPTH_CAP, value_parser = clap::value_parser!(u32).range(1..))]
    depth_cap: u32,
    /// 64-bit seed, or `random`.
    #[arg(long, default_value_t = DEFAULT_SEED, value_parser = seed)]
    seed: u64,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    Forward,
    Full,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Forward => Mode::Forward,
            ModeArg::Full => Mode::Full,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ExperimentArg {
    Spectral,
    Branching,
    Tail,
    NearCritical,
    Laplace,
}

impl From<ExperimentArg> for Experiment {
    fn from(e: ExperimentArg) -> Self {
        match e {
            ExperimentArg::Spectral => Experiment::Spectral,
            ExperimentArg::Branching => Experiment::Branching,
            ExperimentArg::Tail => Experiment::Tail,
            ExperimentArg::NearCritical => Experiment::NearCritical,
            ExperimentArg::Laplace => Experiment::Laplace,
        }
    }
}

fn finite(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err("must be finite".into())
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v = finite(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err("must be positive".into())
    }
}

fn n_nodes(s: &str) -> Result<usize, String> {
    let n: usize = s.parse().map_err(|e| format!("{e}"))?;
    if n >= MIN_NODES {
        Ok(n)
    } else {
        Err(format!("need at least {MIN_NODES} nodes"))
    }
}

fn tail_sigmas(s: &str) -> Result<f64, String> {
    let v = finite(s)?;
    if v >= MIN_TAIL_SIGMAS {
        Ok(v)
    } else {
        Err(format!("need at least {MIN_TAIL_SIGMAS}"))
    }
}

fn seed(s: &str) -> Result<u64, String> {
    if s == "random" {
        return Ok(rand::random());
    }
    let parsed = match s.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    parsed.map_err(|e| format!("expected a 64-bit integer or `random`: {e}"))
}

/// Everything that determines a run's output; copied into every manifest.
#[derive(Debug, Clone, Serialize)]
struct RunConfig {
    subcommand: &'static str,
    d: u32,
    n_nodes: usize,
    tail_sigmas: f64,
    tol: f64,
    eigen_tol: f64,
    eigen_max_iter: usize,
    picard_tol: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    h: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<ModeArg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    replicas: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    size_cap: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    depth_cap: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    experiment: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    options: Option<ExperimentOptions>,
    out: PathBuf,
}

impl RunConfig {
    fn new(subcommand: &'static str, c: &Common) -> Self {
        Self {
            subcommand,
            d: c.d,
            n_nodes: c.n_nodes,
            tail_sigmas: c.tail_sigmas,
            tol: c.tol,
            eigen_tol: EIGEN_TOL,
            eigen_max_iter: EIGEN_MAX_ITER,
            picard_tol: PICARD_TOL,
            h: None,
            a: None,
            s: None,
            mode: None,
            replicas: None,
            size_cap: None,
            depth_cap: None,
            seed: None,
            experiment: None,
            options: None,
            out: c.out.clone(),
        }
    }

    fn with_sim(self, sim: &SimArgs, replicas: u64) -> Self {
        Self {
            a: sim.a,
            mode: Some(sim.mode),
            replicas: Some(replicas),
            size_cap: Some(sim.size_cap),
            depth_cap: Some(sim.depth_cap),
            seed: Some(sim.seed),
            ..self
        }
    }
}

fn run_dir(out: &Path, name: String) -> Result<PathBuf> {
    let dir = out.join(name);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn function_table(columns: &[&str], nodes: &[f64], values: &[&[f64]]) -> Table {
    let mut t = Table::new(columns.iter().copied());
    for (i, &x) in nodes.iter().enumerate() {
        let mut row = vec![x.into()];
        row.extend(values.iter().map(|v| v[i].into()));
        t.push(row);
    }
    t
}

fn print_json(v: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn sim_config(params: ModelParams, h: f64, sim: &SimArgs, replicas: u64) -> SimConfig {
    let root = match sim.a {
        Some(a) => RootLaw::Fixed { a },
        None => RootLaw::Stationary,
    };
    SimConfig::new(params, h, root, sim.mode.into())
        .with_replicas(replicas)
        .with_caps(sim.size_cap, sim.depth_cap)
        .with_seed(sim.seed)
}

fn cmd_hstar(common: &Common) -> Result<bool> {
    let params = ModelParams::new(common.d)?;
    let cd = CriticalData::solve(&params, common.grid_spec(), common.tol)?;
    let cfg = RunConfig::new("hstar", common);
    let dir = run_dir(&common.out, format!("hstar_d{}", common.d))?;
    let summary = cd.summary();
    write_json(&dir.join("critical.json"), &json!({ "run_config": cfg, "critical": summary }))?;
    function_table(&["a", "chi"], cd.chi.grid().nodes(), &[cd.chi.values()]).write_csv(&dir.join("chi.csv"))?;
    print_json(&serde_json::to_value(&summary)?)?;
    Ok(true)
}

fn cmd_eigen(common: &Common, h: f64) -> Result<bool> {
    let params = ModelParams::new(common.d)?;
    let grid = Arc::new(Grid::build(h, params, common.grid_spec())?);
    let op = assemble_operator(h, grid, &params)?;
    let eig = leading_eigenpair(&op, EIGEN_TOL, EIGEN_MAX_ITER)?;
    let cfg = RunConfig {
        h: Some(h),
        ..RunConfig::new("eigen", common)
    };
    let dir = run_dir(&common.out, format!("eigen_d{}_h{h}", common.d))?;
    let summary = json!({
        "h": h,
        "lambda": eig.lambda,
        "residual": eig.residual,
        "iterations": eig.iterations,
        "grid": op.grid().meta(),
    });
    write_json(&dir.join("manifest.json"), &json!({ "run_config": cfg, "eigen": summary }))?;
    function_table(&["a", "chi"], op.grid().nodes(), &[eig.chi.values()]).write_csv(&dir.join("chi.csv"))?;
    print_json(&summary)?;
    Ok(true)
}

fn cmd_eta(common: &Common, h: f64) -> Result<bool> {
    let params = ModelParams::new(common.d)?;
    let grid = Arc::new(Grid::build(h, params, common.grid_spec())?);
    let op = assemble_operator(h, grid, &params)?;
    let report = solve_eta_plus_with(&op, PicardOptions::default())?;
    let eta = eta_full_with(&op, &report.solution)?;
    let cfg = RunConfig {
        h: Some(h),
        ..RunConfig::new("eta", common)
    };
    let dir = run_dir(&common.out, format!("eta_d{}_h{h}", common.d))?;
    let summary = json!({
        "h": h,
        "iterations": report.iterations,
        "sup_residual": report.sup_residual,
        "converged": report.converged,
        "eta_plus_sup": report.solution.sup_norm(),
        "eta_sup": eta.sup_norm(),
        "grid": op.grid().meta(),
    });
    write_json(&dir.join("manifest.json"), &json!({ "run_config": cfg, "eta": summary }))?;
    function_table(&["a", "eta_plus", "eta"], op.grid().nodes(), &[report.solution.values(), eta.values()])
        .write_csv(&dir.join("eta.csv"))?;
    print_json(&summary)?;
    Ok(true)
}

fn cmd_gamma(common: &Common, s: f64) -> Result<bool> {
    let params = ModelParams::new(common.d)?;
    let cd = CriticalData::solve(&params, common.grid_spec(), common.tol)?;
    let grid = Arc::clone(cd.chi.grid());
    let report = solve_gamma(s, &cd, grid, PICARD_TOL)?;
    let full = laplace_full(&report.solution, s, &params)?;
    let cfg = RunConfig {
        s: Some(s),
        ..RunConfig::new("gamma", common)
    };
    let dir = run_dir(&common.out, format!("gamma_d{}_s{s}", common.d))?;
    let summary = json!({
        "s": s,
        "h_star": cd.h_star,
        "c1": cd.c1,
        "iterations": report.iterations,
        "sup_residual": report.sup_residual,
        "converged": report.converged,
    });
    write_json(&dir.join("manifest.json"), &json!({ "run_config": cfg, "gamma": summary }))?;
    function_table(&["a", "gamma", "gamma_full"], cd.chi.grid().nodes(), &[report.solution.values(), full.values()])
        .write_csv(&dir.join("gamma.csv"))?;
    print_json(&summary)?;
    Ok(true)
}

fn cmd_simulate(common: &Common, sim: &SimArgs, h: f64, replicas: u64) -> Result<bool> {
    let params = ModelParams::new(common.d)?;
    let cfg = sim_config(params, h, sim, replicas);
    let started = Instant::now();
    let samples = simulate_replicas(&cfg)?;
    let wall = started.elapsed().as_secs_f64();
    let run = RunConfig {
        h: Some(h),
        ..RunConfig::new("simulate", common).with_sim(sim, replicas)
    };
    let dir = run_dir(&common.out, format!("simulate_d{}_seed{}", common.d, sim.seed))?;
    let mut table = Table::new(["replica", "size", "max_depth", "censored"]);
    for (i, s) in samples.iter().enumerate() {
        table.push(vec![i.into(), s.size.into(), s.max_depth.into(), s.censored.into()]);
    }
    table.write_csv(&dir.join("clusters.csv"))?;
    let n_censored = samples.iter().filter(|s| s.censored).count();
    let mean = samples.iter().map(|s| s.size as f64).sum::<f64>() / samples.len() as f64;
    let summary = json!({
        "replicas": replicas,
        "mean_size": mean,
        "n_censored": n_censored,
        "wall_seconds": wall,
    });
    write_json(&dir.join("manifest.json"), &json!({ "run_config": run, "config_echo": cfg, "summary": summary }))?;
    print_json(&summary)?;
    Ok(true)
}

fn cmd_tail(common: &Common, sim: &SimArgs, h: Option<f64>, replicas: u64) -> Result<bool> {
    let params = ModelParams::new(common.d)?;
    let h = match h {
        Some(h) => h,
        None => CriticalData::solve(&params, common.grid_spec(), common.tol)?.h_star,
    };
    let cfg = sim_config(params, h, sim, replicas);
    let t_grid: Vec<u64> = geometric_t_grid(sim.size_cap)
        .into_iter()
        .filter(|&t| t <= u64::from(sim.depth_cap))
        .collect();
    let started = Instant::now();
    let est = tail_estimate(&cfg, &t_grid)?;
    let wall = started.elapsed().as_secs_f64();
    let run = RunConfig {
        h: Some(h),
        ..RunConfig::new("tail", common).with_sim(sim, replicas)
    };
    let dir = run_dir(&common.out, format!("tail_d{}_seed{}", common.d, sim.seed))?;
    let mut table = Table::new(["t", "survival", "std_err"]);
    for i in 0..est.t_grid.len() {
        table.push(vec![est.t_grid[i].into(), est.survival[i].into(), est.std_err[i].into()]);
    }
    table.write_csv(&dir.join("tail.csv"))?;
    let pts: Vec<(f64, f64)> = est.t_grid.iter().zip(&est.survival).map(|(&t, &s)| (t as f64, s)).collect();
    write_gnuplot(&dir.join("tail.dat"), "t", "P[T>t]", &pts)?;
    let summary = json!({
        "h": h,
        "replicas": replicas,
        "n_censored": est.n_censored,
        "wall_seconds": wall,
    });
    write_json(&dir.join("manifest.json"), &json!({ "run_config": run, "config_echo": cfg, "summary": summary }))?;
    print_json(&summary)?;
    Ok(true)
}

#[allow(clippy::too_many_arguments)]
fn cmd_verify(
    common: &Common,
    experiment: Experiment,
    seed: u64,
    replicas: Option<u64>,
    a: Option<f64>,
    deltas: Option<Vec<f64>>,
    s_ladder: Option<Vec<f64>>,
    epsilon: Option<f64>,
) -> Result<bool> {
    let mut budgets = Budgets::default();
    if let Some(r) = replicas {
        budgets = budgets.with_replicas(r);
    }
    let lab = Lab::new(common.d, common.grid_spec(), common.tol)?.with_budgets(budgets);
    let opts = ExperimentOptions {
        seed: Some(seed),
        a,
        deltas,
        s_ladder,
        epsilon,
    };
    let started = Instant::now();
    let report = run_experiment(experiment, &lab, &opts)?;
    let run = RunConfig {
        seed: Some(seed),
        replicas,
        experiment: Some(experiment.name()),
        options: Some(opts),
        ..RunConfig::new("verify", common)
    };
    let dir = report.write(&common.out, Some(&serde_json::to_value(&run)?))?;
    for v in &report.verdicts {
        println!("{v}");
    }
    eprintln!(
        "{}: {} in {:.1}s, artefacts in {}",
        experiment.name(),
        if report.passed() { "passed" } else { "FAILED" },
        started.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    let common = match &cli.command {
        Command::Hstar { common }
        | Command::Eigen { common, .. }
        | Command::Eta { common, .. }
        | Command::Gamma { common, .. }
        | Command::Simulate { common, .. }
        | Command::Tail { common, .. }
        | Command::Verify { common, .. } => common,
    };
    if let Some(w) = common.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w as usize)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Hstar { common } => cmd_hstar(&common),
        Command::Eigen { common, h } => cmd_eigen(&common, h),
        Command::Eta { common, h } => cmd_eta(&common, h),
        Command::Gamma { common, s } => cmd_gamma(&common, s),
        Command::Simulate { common, sim, h, replicas } => cmd_simulate(&common, &sim, h, replicas),
        Command::Tail { common, sim, h, replicas } => cmd_tail(&common, &sim, h, replicas),
        Command::Verify {
            experiment,
            common,
            seed,
            replicas,
            a,
            deltas,
            s_ladder,
            epsilon,
        } => cmd_verify(&common, experiment.into(), seed, replicas, a, deltas, s_ladder, epsilon),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            let (kind, code) = match err.downcast_ref::<gfftree::Error>() {
                Some(e @ gfftree::Error::InvalidParameter { .. }) => (e.kind(), 2),
                Some(e) => (e.kind(), 1),
                None => ("other", 1),
            };
            let body = json!({ "error": kind, "message": format!("{err:#}") });
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}
