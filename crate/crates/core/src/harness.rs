//! End-to-end experiments that set solver predictions against each other and
//! against Monte Carlo, each producing an [`ExperimentReport`] with
//! pass/fail verdicts.
//!
//! Tolerances and budgets live in [`Tolerances`] and [`Budgets`] and are
//! copied into every report.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::fixedpoint::{f_poly, laplace_full, near_critical_report, solve_gamma_with, NearCriticalOptions, PicardOptions};
use crate::measures::{inner_nu, norm_nu_p, normal_sf, FieldFunction, GridMeta, GridSpec, ModelParams};
use crate::output::{write_gnuplot, write_json, Table};
use crate::simulator::rng::replica_rng;
use crate::simulator::{
    depth_survival, martingale_paths, simulate_replicas, tail_estimate, Mode, RootLaw, SimConfig, DEFAULT_SEED,
};
use crate::spectral::{apply_operator, eigenpair_at, find_h_star, CriticalData, Eigenpair, EIGEN_MAX_ITER, EIGEN_TOL};

/// The ten acceptance criteria. Every verdict names one of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    SpectralCorrectness,
    CriticalPoint,
    Eigenfunction,
    Hypercontractivity,
    OffspringLaw,
    Martingale,
    CriticalTail,
    LaplaceScaling,
    NearCritical,
    Reproducibility,
}

impl Criterion {
    pub const ALL: [Criterion; 10] = [
        Criterion::SpectralCorrectness,
        Criterion::CriticalPoint,
        Criterion::Eigenfunction,
        Criterion::Hypercontractivity,
        Criterion::OffspringLaw,
        Criterion::Martingale,
        Criterion::CriticalTail,
        Criterion::LaplaceScaling,
        Criterion::NearCritical,
        Criterion::Reproducibility,
    ];

    pub fn number(self) -> u32 {
        Self::ALL.iter().position(|&c| c == self).unwrap() as u32 + 1
    }

    pub fn label(self) -> &'static str {
        match self {
            Criterion::SpectralCorrectness => "spectral correctness",
            Criterion::CriticalPoint => "critical point",
            Criterion::Eigenfunction => "eigenfunction properties",
            Criterion::Hypercontractivity => "hypercontractivity",
            Criterion::OffspringLaw => "offspring law",
            Criterion::Martingale => "martingale conservation",
            Criterion::CriticalTail => "critical tail",
            Criterion::LaplaceScaling => "Laplace scaling",
            Criterion::NearCritical => "near-critical scaling",
            Criterion::Reproducibility => "reproducibility",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AC{} {}", self.number(), self.label())
    }
}

/// How `measured` is compared with `target` and `tolerance`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// `measured < target`
    Below,
    /// `measured > target`
    Above,
    /// `measured <= target + tolerance`
    AtMost,
    /// `measured >= target - tolerance`
    AtLeast,
    /// `|measured - target| <= tolerance`
    AbsWithin,
    /// `|measured / target - 1| <= tolerance`
    RelWithin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub criterion: Criterion,
    pub check: String,
    pub measured: f64,
    pub target: f64,
    pub tolerance: f64,
    pub relation: Relation,
    pub passed: bool,
}

impl Verdict {
    pub fn new(
        criterion: Criterion,
        check: impl Into<String>,
        measured: f64,
        relation: Relation,
        target: f64,
        tolerance: f64,
    ) -> Self {
        let passed = match relation {
            Relation::Below => measured < target,
            Relation::Above => measured > target,
            Relation::AtMost => measured <= target + tolerance,
            Relation::AtLeast => measured >= target - tolerance,
            Relation::AbsWithin => (measured - target).abs() <= tolerance,
            Relation::RelWithin => (measured / target - 1.0).abs() <= tolerance,
        };
        Self {
            criterion,
            check: check.into(),
            measured,
            target,
            tolerance,
            relation,
            passed,
        }
    }

    /// Check that a count of violations is zero.
    pub fn none(criterion: Criterion, check: impl Into<String>, count: usize) -> Self {
        Self::new(criterion, check, count as f64, Relation::AtMost, 0.0, 0.0)
    }
}

/// Compact rendering of a threshold: six significant digits, plain or
/// exponent notation, whichever is shorter.
fn short(x: f64) -> String {
    let x: f64 = format!("{x:.5e}").parse().unwrap_or(x);
    let plain = format!("{x}");
    let sci = format!("{x:e}");
    if plain.len() <= sci.len() {
        plain
    } else {
        sci
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (t, tol) = (short(self.target), short(self.tolerance));
        let rel = match self.relation {
            Relation::Below => format!("< {t}"),
            Relation::Above => format!("> {t}"),
            Relation::AtMost if self.tolerance == 0.0 => format!("<= {t}"),
            Relation::AtMost => format!("<= {t} + {tol}"),
            Relation::AtLeast if self.tolerance == 0.0 => format!(">= {t}"),
            Relation::AtLeast => format!(">= {t} - {tol}"),
            Relation::AbsWithin => format!("within {tol} of {t}"),
            Relation::RelWithin => format!("within {}% of {t}", short(100.0 * self.tolerance)),
        };
        write!(
            f,
            "{} [{}] {}: measured {:.6e}, want {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.criterion,
            self.check,
            self.measured,
            rel
        )
    }
}

/// Pass/fail thresholds of all checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub self_adjoint: f64,
    pub lambda_at_h_star: f64,
    pub refinement_shift: f64,
    pub eigen_residual: f64,
    pub unit_norm: f64,
    pub growth_slope: f64,
    /// Growth slope of χ is fitted on `[h* + lo, h* + hi]`.
    pub growth_window: (f64, f64),
    pub hypercontractive_slack: f64,
    pub offspring_z: f64,
    pub martingale_z: f64,
    /// A survival estimate counts as zero when `estimate - z·se <= 0`.
    pub zero_survival_z: f64,
    pub tail_slope: (f64, f64),
    pub tail_window: (u64, u64),
    pub tail_plateau_t: u64,
    pub plateau_rel: f64,
    pub full_forward_rel: f64,
    pub laplace_rel: f64,
    pub base_residual: f64,
    pub eta_ratio_rel: f64,
    pub depth_mc_z: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            self_adjoint: 1e-8,
            lambda_at_h_star: 1e-8,
            refinement_shift: 2e-4,
            eigen_residual: 1e-8,
            unit_norm: 1e-10,
            growth_slope: 0.1,
            growth_window: (5.0, 15.0),
            hypercontractive_slack: 1e-6,
            offspring_z: 4.0,
            martingale_z: 3.0,
            zero_survival_z: 3.0,
            tail_slope: (-0.56, -0.44),
            tail_window: (100, 10_000),
            tail_plateau_t: 1_000,
            plateau_rel: 0.10,
            full_forward_rel: 0.05,
            laplace_rel: 0.05,
            base_residual: 1e-10,
            eta_ratio_rel: 0.02,
            depth_mc_z: 3.0,
        }
    }
}

/// Monte Carlo budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    pub tail_replicas: u64,
    pub tail_size_cap: u64,
    pub offspring_replicas: u64,
    pub martingale_replicas: u64,
    pub martingale_generations: u32,
    pub probe_replicas: u64,
    pub probe_offset: f64,
    pub depth_replicas: u64,
    pub survival_depth: u32,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            tail_replicas: 1_000_000,
            tail_size_cap: 1_000_000,
            offspring_replicas: 100_000,
            martingale_replicas: 100_000,
            martingale_generations: 10,
            probe_replicas: 20_000,
            probe_offset: 0.1,
            depth_replicas: 100_000,
            survival_depth: 200,
        }
    }
}

impl Budgets {
    /// Every replica count replaced by `replicas`.
    pub fn with_replicas(self, replicas: u64) -> Self {
        Self {
            tail_replicas: replicas,
            offspring_replicas: replicas,
            martingale_replicas: replicas,
            probe_replicas: replicas,
            depth_replicas: replicas,
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: Option<u64>,
    pub grid: GridMeta,
    pub grid_spec: GridSpec,
    pub bisection_tol: f64,
    pub eigen_tol: f64,
    pub tolerances: Tolerances,
    pub budgets: Budgets,
}

/// Two-column data series written as a gnuplot file.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    fn new(x_label: &str, y_label: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            x_label: x_label.to_string(),
            y_label: y_label.to_string(),
            points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    pub inputs: BTreeMap<String, Value>,
    pub scalars: BTreeMap<String, f64>,
    pub rows: Table,
    pub tables: BTreeMap<String, Table>,
    pub verdicts: Vec<Verdict>,
    pub provenance: Provenance,
    #[serde(skip)]
    pub series: BTreeMap<String, Series>,
}

impl ExperimentReport {
    fn new(name: &str, lab: &Lab, seed: Option<u64>) -> Self {
        Self {
            name: name.to_string(),
            inputs: BTreeMap::new(),
            scalars: BTreeMap::new(),
            rows: Table::default(),
            tables: BTreeMap::new(),
            verdicts: Vec::new(),
            provenance: lab.provenance(seed),
            series: BTreeMap::new(),
        }
    }

    fn input(&mut self, key: &str, value: Value) {
        self.inputs.insert(key.to_string(), value);
    }

    fn scalar(&mut self, key: &str, value: f64) {
        self.scalars.insert(key.to_string(), value);
    }

    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    /// `passed` per criterion, over the criteria this report checks.
    pub fn by_criterion(&self) -> BTreeMap<Criterion, bool> {
        let mut out = BTreeMap::new();
        for v in &self.verdicts {
            *out.entry(v.criterion).or_insert(true) &= v.passed;
        }
        out
    }

    /// `<root>/<name>_d<d>_seed<seed>` (no seed suffix for solver-only runs).
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        let d = self.inputs.get("d").and_then(Value::as_u64).unwrap_or(0);
        let dir = match self.provenance.seed {
            Some(seed) => format!("{}_d{d}_seed{seed}", self.name),
            None => format!("{}_d{d}", self.name),
        };
        root.join(dir)
    }

    /// Writes `report.json`, `rows.csv`, one CSV per extra table and one
    /// `.dat` file per series; returns the run directory.
    pub fn write(&self, root: &Path, config: Option<&Value>) -> Result<PathBuf> {
        let dir = self.run_dir(root);
        std::fs::create_dir_all(&dir)?;
        match config {
            Some(cfg) => write_json(&dir.join("report.json"), &json!({ "run_config": cfg, "report": self }))?,
            None => write_json(&dir.join("report.json"), self)?,
        }
        self.rows.write_csv(&dir.join("rows.csv"))?;
        for (name, table) in &self.tables {
            table.write_csv(&dir.join(format!("{name}.csv")))?;
        }
        for (name, s) in &self.series {
            write_gnuplot(&dir.join(format!("{name}.dat")), &s.x_label, &s.y_label, &s.points)?;
        }
        Ok(dir)
    }
}

/// Critical data of one `d`, shared by all experiments.
pub struct Lab {
    pub params: ModelParams,
    pub grid_spec: GridSpec,
    pub bisection_tol: f64,
    pub critical: CriticalData,
    pub tolerances: Tolerances,
    pub budgets: Budgets,
}

impl Lab {
    /// Solves for `h*` on `spec`. If the resulting grid stops short of the
    /// growth-slope window plus one `σ_ν`, `tail_sigmas` is widened and the
    /// solve repeated; the spec actually used is kept in `grid_spec`.
    pub fn new(d: u32, spec: GridSpec, bisection_tol: f64) -> Result<Self> {
        let params = ModelParams::new(d)?;
        let tolerances = Tolerances::default();
        let mut grid_spec = spec;
        let mut critical = CriticalData::solve(&params, grid_spec, bisection_tol)?;
        let reach = critical.h_star + tolerances.growth_window.1 + params.sigma_nu();
        if critical.chi.grid().a_max() < reach {
            grid_spec = spec.covering(critical.h_star, reach, &params);
            critical = CriticalData::solve(&params, grid_spec, bisection_tol)?;
        }
        Ok(Self {
            params,
            grid_spec,
            bisection_tol,
            critical,
            tolerances,
            budgets: Budgets::default(),
        })
    }

    pub fn with_budgets(self, budgets: Budgets) -> Self {
        Self { budgets, ..self }
    }

    pub fn d(&self) -> u32 {
        self.params.d()
    }

    pub fn h_star(&self) -> f64 {
        self.critical.h_star
    }

    fn provenance(&self, seed: Option<u64>) -> Provenance {
        Provenance {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            grid: self.critical.chi.grid().meta(),
            grid_spec: self.grid_spec,
            bisection_tol: self.bisection_tol,
            eigen_tol: EIGEN_TOL,
            tolerances: self.tolerances,
            budgets: self.budgets,
        }
    }

    fn critical_eigenpair(&self) -> Eigenpair {
        Eigenpair {
            lambda: self.critical.lambda_check,
            chi: self.critical.chi.clone(),
            residual: self.critical.eigen_residual,
            iterations: 0,
        }
    }
}

/// The experiments exposed through `verify`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Spectral,
    Branching,
    Tail,
    NearCritical,
    Laplace,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Spectral,
        Experiment::Branching,
        Experiment::Tail,
        Experiment::NearCritical,
        Experiment::Laplace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Spectral => "spectral",
            Experiment::Branching => "branching",
            Experiment::Tail => "tail",
            Experiment::NearCritical => "near-critical",
            Experiment::Laplace => "laplace",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == name)
    }
}

/// Free parameters of the experiments; `None` picks the default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub seed: Option<u64>,
    /// Root value for the tail experiment (default `h*`).
    pub a: Option<f64>,
    pub deltas: Option<Vec<f64>>,
    pub s_ladder: Option<Vec<f64>>,
    pub epsilon: Option<f64>,
}

pub const DEFAULT_DELTAS: [f64; 4] = [0.08, 0.04, 0.02, 0.01];
pub const DEFAULT_S_LADDER: [f64; 3] = [1e-3, 1e-4, 1e-5];

pub fn run_experiment(exp: Experiment, lab: &Lab, opts: &ExperimentOptions) -> Result<ExperimentReport> {
    let seed = opts.seed.unwrap_or(DEFAULT_SEED);
    match exp {
        Experiment::Spectral => spectral_sanity(lab, seed),
        Experiment::Branching => branching(lab, seed),
        Experiment::Tail => critical_tail(lab, opts.a.unwrap_or(lab.h_star()), seed),
        Experiment::NearCritical => near_critical(
            lab,
            opts.deltas.as_deref().unwrap_or(&DEFAULT_DELTAS),
            opts.epsilon.unwrap_or(NearCriticalOptions::default().epsilon),
            seed,
        ),
        Experiment::Laplace => laplace_scaling(lab, opts.s_ladder.as_deref().unwrap_or(&DEFAULT_S_LADDER)),
    }
}

/// Least-squares slope of `y` against `x`.
pub fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// `{1, 2, 5} × 10^k` below `cap`.
pub fn geometric_t_grid(cap: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut scale = 1u64;
    'outer: loop {
        for m in [1, 2, 5] {
            let t = m * scale;
            if t >= cap {
                break 'outer;
            }
            out.push(t);
        }
        scale *= 10;
    }
    out
}

fn count_violations(values: &[f64], ok: impl Fn(f64, f64) -> bool) -> usize {
    values.windows(2).filter(|w| !ok(w[0], w[1])).count()
}

/// Random test function number `k` on the grid of `like`.
fn test_function(like: &FieldFunction, seed: u64, k: u64) -> FieldFunction {
    let grid = Arc::clone(like.grid());
    let h = grid.h();
    let mut rng = replica_rng(seed, k);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    match k % 4 {
        0 => {
            let values = (0..grid.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            FieldFunction::new(grid, values).expect("sized to the grid")
        }
        1 => {
            let m = h + 6.0 * rng.random::<f64>();
            let w = 0.05 + 2.0 * rng.random::<f64>();
            FieldFunction::from_fn(grid, move |x| sign * (-(x - m).powi(2) / (2.0 * w * w)).exp())
        }
        2 => {
            let p = 3.0 * rng.random::<f64>();
            FieldFunction::from_fn(grid, move |x| sign * (x - h).powf(p))
        }
        _ => {
            let lo = h + 4.0 * rng.random::<f64>();
            let hi = lo + 0.1 + 3.0 * rng.random::<f64>();
            FieldFunction::from_fn(grid, move |x| if (lo..=hi).contains(&x) { sign } else { 0.0 })
        }
    }
}

const TEST_FUNCTION_KINDS: [&str; 4] = ["nodal-noise", "bump", "power", "indicator"];
const HYPERCONTRACTIVITY_FUNCTIONS: u64 = 20;
const SCAN_OFFSETS: [f64; 9] = [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0];

/// Spectral checks: λ-scan, self-adjointness, critical point and grid
/// refinement, eigenfunction properties and hypercontractivity.
pub fn spectral_sanity(lab: &Lab, seed: u64) -> Result<ExperimentReport> {
    let tol = &lab.tolerances;
    let cd = &lab.critical;
    let params = &lab.params;
    let d = params.d_f64();
    let mut rep = ExperimentReport::new(Experiment::Spectral.name(), lab, Some(seed));
    rep.input("d", json!(lab.d()));
    rep.input("scan_offsets", json!(SCAN_OFFSETS));
    rep.input("hypercontractivity_functions", json!(HYPERCONTRACTIVITY_FUNCTIONS));

    // λ-scan
    let mut scan = Table::new(["h", "lambda", "eigen_residual", "iterations", "symmetry_defect"]);
    let mut lambdas = Vec::new();
    let mut worst_defect: f64 = cd.operator.symmetry_defect();
    for off in SCAN_OFFSETS {
        let h = cd.h_star + off;
        let (op, eig) = eigenpair_at(h, params, lab.grid_spec, EIGEN_TOL, EIGEN_MAX_ITER)?;
        let defect = op.symmetry_defect();
        worst_defect = worst_defect.max(defect);
        scan.push(vec![h.into(), eig.lambda.into(), eig.residual.into(), eig.iterations.into(), defect.into()]);
        lambdas.push(eig.lambda);
    }
    rep.series.insert(
        "lambda_scan".into(),
        Series::new("h", "lambda", SCAN_OFFSETS.iter().map(|o| cd.h_star + o).zip(lambdas.iter().copied()).collect()),
    );
    rep.rows = scan;

    // ⟨Lf, g⟩ = ⟨f, Lg⟩ on random pairs
    let mut bilinear_defect: f64 = 0.0;
    for k in 0..8 {
        let f = test_function(&cd.chi, seed, 2 * k);
        let g = test_function(&cd.chi, seed, 2 * k + 1);
        let lf = apply_operator(&cd.operator, &f)?;
        let lg = apply_operator(&cd.operator, &g)?;
        let lhs = inner_nu(&lf, &g)?;
        let rhs = inner_nu(&f, &lg)?;
        let scale = norm_nu_p(&lf, 2.0)? * norm_nu_p(&g, 2.0)?;
        bilinear_defect = bilinear_defect.max((lhs - rhs).abs() / scale);
    }
    rep.scalar("matrix_symmetry_defect", worst_defect);
    rep.scalar("bilinear_symmetry_defect", bilinear_defect);
    let c = Criterion::SpectralCorrectness;
    rep.verdicts.push(Verdict::new(c, "nu-symmetry of the discretised operator (matrix, all scan levels)", worst_defect, Relation::AtMost, 0.0, tol.self_adjoint));
    rep.verdicts.push(Verdict::new(c, "<Lf,g> = <f,Lg> on random pairs (relative)", bilinear_defect, Relation::AtMost, 0.0, tol.self_adjoint));
    rep.verdicts.push(Verdict::none(c, "lambda strictly decreasing along the h-scan (violations)", count_violations(&lambdas, |a, b| b < a)));
    let out_of_range = lambdas.iter().filter(|&&l| !(l > 0.0 && l < d)).count();
    rep.verdicts.push(Verdict::none(c, "lambda inside (0, d) on the h-scan (violations)", out_of_range));

    // critical point
    let c = Criterion::CriticalPoint;
    rep.scalar("h_star", cd.h_star);
    rep.scalar("lambda_check", cd.lambda_check);
    rep.scalar("c1", cd.c1);
    rep.scalar("c2", cd.c2);
    rep.verdicts.push(Verdict::new(c, "h* > 0", cd.h_star, Relation::Above, 0.0, 0.0));
    rep.verdicts.push(Verdict::new(c, "|lambda(h*) - 1|", (cd.lambda_check - 1.0).abs(), Relation::Below, tol.lambda_at_h_star, 0.0));
    let fine = GridSpec {
        n_nodes: 2 * (lab.grid_spec.n_nodes - 1) + 1,
        ..lab.grid_spec
    };
    let refined = find_h_star(params, fine, lab.bisection_tol)?;
    let shift = (refined.h_star - cd.h_star).abs();
    rep.scalar("h_star_refined", refined.h_star);
    rep.input("refined_n_nodes", json!(fine.n_nodes));
    rep.verdicts.push(Verdict::new(c, format!("h* shift when refining to {} nodes", fine.n_nodes), shift, Relation::Below, tol.refinement_shift, 0.0));

    // eigenfunction
    let c = Criterion::Eigenfunction;
    let chi = &cd.chi;
    let lchi = apply_operator(&cd.operator, chi)?;
    let resid = norm_nu_p(&lchi.zip_with(chi, |a, b| a - b)?, 2.0)?;
    let min_chi = chi.values().iter().copied().fold(f64::INFINITY, f64::min);
    let norm = norm_nu_p(chi, 2.0)?;
    let (lo, hi) = tol.growth_window;
    let window: Vec<(f64, f64)> = chi
        .grid()
        .nodes()
        .iter()
        .zip(chi.values())
        .filter(|(&x, _)| x >= cd.h_star + lo && x <= cd.h_star + hi)
        .map(|(&x, &v)| (x.ln(), v.ln()))
        .collect();
    if window.len() < 2 || chi.grid().a_max() < cd.h_star + hi {
        return Err(Error::invalid("grid", "grid does not cover the growth-slope window"));
    }
    let slope = ols_slope(&window);
    rep.scalar("chi_residual_l2", resid);
    rep.scalar("chi_growth_slope", slope);
    rep.scalar("chi_at_h_star", chi.values()[0]);
    rep.verdicts.push(Verdict::new(c, "||L chi - chi||_L2(nu)", resid, Relation::Below, tol.eigen_residual, 0.0));
    rep.verdicts.push(Verdict::new(c, "min chi >= 0", min_chi, Relation::AtLeast, 0.0, 0.0));
    rep.verdicts.push(Verdict::new(c, "||chi||_L2(nu) = 1", norm, Relation::AbsWithin, 1.0, tol.unit_norm));
    rep.verdicts.push(Verdict::none(c, "chi non-decreasing on [h*, a_max] (violations)", count_violations(chi.values(), |a, b| b >= a)));
    rep.verdicts.push(Verdict::new(c, format!("log-log growth slope of chi on [h*+{lo}, h*+{hi}]"), slope, Relation::AbsWithin, 1.0, tol.growth_slope));
    let stride = (chi.grid().len() / 400).max(1);
    rep.series.insert(
        "chi".into(),
        Series::new("a", "chi", chi.grid().nodes().iter().zip(chi.values()).step_by(stride).map(|(&x, &v)| (x, v)).collect()),
    );

    // hypercontractivity
    let c = Criterion::Hypercontractivity;
    let p = d * d + 1.0;
    let mut hc = Table::new(["index", "kind", "norm_lf_p", "d_norm_f_2", "ratio"]);
    let mut worst: f64 = 0.0;
    for k in 0..HYPERCONTRACTIVITY_FUNCTIONS {
        let f = test_function(chi, seed ^ 0x9e37_79b9, k);
        let lf = apply_operator(&cd.operator, &f)?;
        let lhs = norm_nu_p(&lf, p)?;
        let rhs = d * norm_nu_p(&f, 2.0)?;
        let ratio = lhs / rhs;
        worst = worst.max(ratio);
        hc.push(vec![k.into(), TEST_FUNCTION_KINDS[(k % 4) as usize].into(), lhs.into(), rhs.into(), ratio.into()]);
    }
    rep.tables.insert("hypercontractivity".into(), hc);
    rep.scalar("hypercontractivity_worst_ratio", worst);
    rep.verdicts.push(Verdict::new(c, format!("max ||Lf||_L{p} / (d ||f||_L2) over {HYPERCONTRACTIVITY_FUNCTIONS} functions"), worst, Relation::AtMost, 1.0, tol.hypercontractive_slack));
    Ok(rep)
}

fn binomial_pmf(n: u32, k: u32, p: f64) -> f64 {
    let mut coeff = 1.0;
    for i in 0..k {
        coeff = coeff * f64::from(n - i) / f64::from(i + 1);
    }
    coeff * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

/// Offspring law, martingale conservation and the depth-survival probes
/// around `h*`, all at root value `h* + 1`.
pub fn branching(lab: &Lab, seed: u64) -> Result<ExperimentReport> {
    let tol = &lab.tolerances;
    let b = &lab.budgets;
    let params = lab.params;
    let h_star = lab.h_star();
    let a = h_star + 1.0;
    let mut rep = ExperimentReport::new(Experiment::Branching.name(), lab, Some(seed));
    rep.input("d", json!(lab.d()));
    rep.input("a", json!(a));
    rep.input("h", json!(h_star));

    // offspring law of the root, both modes
    let p = normal_sf((h_star - a / params.d_f64()) / params.sigma_y());
    rep.scalar("offspring_p", p);
    let mut offspring = Table::new(["mode", "k", "observed", "expected", "std_err", "z"]);
    let mut worst_z: f64 = 0.0;
    for (mode, name, n) in [(Mode::Forward, "forward", params.d()), (Mode::Full, "full", params.d() + 1)] {
        let cfg = SimConfig::new(params, h_star, RootLaw::Fixed { a }, mode)
            .with_replicas(b.offspring_replicas)
            .with_seed(seed)
            .with_caps(u64::MAX, 1);
        let samples = simulate_replicas(&cfg)?;
        let mut counts = vec![0u64; n as usize + 1];
        for s in &samples {
            counts[(s.size - 1) as usize] += 1;
        }
        let total = b.offspring_replicas as f64;
        for k in 0..=n {
            let pk = binomial_pmf(n, k, p);
            let expected = total * pk;
            let se = (total * pk * (1.0 - pk)).sqrt();
            let observed = counts[k as usize] as f64;
            let z = (observed - expected) / se;
            worst_z = worst_z.max(z.abs());
            offspring.push(vec![name.into(), k.into(), counts[k as usize].into(), expected.into(), se.into(), z.into()]);
        }
    }
    rep.rows = offspring;
    rep.verdicts.push(Verdict::new(Criterion::OffspringLaw, format!("max |z| over bins of |Z1|, {} replicas", b.offspring_replicas), worst_z, Relation::AtMost, tol.offspring_z, 0.0));

    // martingale
    let eig = lab.critical_eigenpair();
    let cfg = SimConfig::new(params, h_star, RootLaw::Fixed { a }, Mode::Forward)
        .with_replicas(b.martingale_replicas)
        .with_seed(seed);
    let mt = martingale_paths(&cfg, &eig, b.martingale_generations)?;
    let chi_a = eig.chi.eval(a);
    rep.scalar("chi_at_a", chi_a);
    let mut mtab = Table::new(["n", "mean", "std_err", "z"]);
    let mut worst_z: f64 = 0.0;
    for (i, &n) in mt.generation.iter().enumerate() {
        let z = if mt.std_err[i] > 0.0 { (mt.mean[i] - chi_a) / mt.std_err[i] } else { 0.0 };
        if n > 0 {
            worst_z = worst_z.max(z.abs());
        }
        mtab.push(vec![n.into(), mt.mean[i].into(), mt.std_err[i].into(), z.into()]);
    }
    rep.tables.insert("martingale".into(), mtab);
    rep.verdicts.push(Verdict::new(Criterion::Martingale, format!("max |mean M_n - chi(a)| / se for 1 <= n <= {}, {} replicas", b.martingale_generations, b.martingale_replicas), worst_z, Relation::AtMost, tol.martingale_z, 0.0));

    // depth-survival probes on either side of h*
    let mut probes = Table::new(["h", "depth", "estimate", "std_err", "survivors", "n_censored", "replicas"]);
    let c = Criterion::CriticalPoint;
    for (h, below) in [(h_star - b.probe_offset, true), (h_star + b.probe_offset, false)] {
        let cfg = SimConfig::new(params, h, RootLaw::Fixed { a }, Mode::Forward)
            .with_replicas(b.probe_replicas)
            .with_seed(seed);
        let ds = depth_survival(&cfg, b.survival_depth)?;
        probes.push(vec![h.into(), ds.depth.into(), ds.estimate.into(), ds.std_err.into(), ds.survivors.into(), ds.n_censored.into(), ds.replicas.into()]);
        if below {
            rep.verdicts.push(Verdict::new(c, format!("depth-{} survival at h* - {} is positive", b.survival_depth, b.probe_offset), ds.estimate, Relation::Above, 0.0, 0.0));
        } else {
            let upper = ds.estimate - tol.zero_survival_z * ds.std_err;
            rep.verdicts.push(Verdict::new(c, format!("depth-{} survival at h* + {} is statistically 0 (estimate - {} se)", b.survival_depth, b.probe_offset, tol.zero_survival_z), upper, Relation::AtMost, 0.0, 0.0));
        }
    }
    rep.tables.insert("depth_probes".into(), probes);
    Ok(rep)
}

/// Cluster-size tail at `h*` from root value `a`, forward and full.
pub fn critical_tail(lab: &Lab, a: f64, seed: u64) -> Result<ExperimentReport> {
    let tol = &lab.tolerances;
    let b = &lab.budgets;
    let params = lab.params;
    let h_star = lab.h_star();
    if a < h_star {
        return Err(Error::invalid("a", format!("root value {a} is below h* = {h_star}")));
    }
    let d = params.d_f64();
    let mut rep = ExperimentReport::new(Experiment::Tail.name(), lab, Some(seed));
    rep.input("d", json!(lab.d()));
    rep.input("a", json!(a));
    rep.input("h", json!(h_star));

    let t_grid = geometric_t_grid(b.tail_size_cap);
    let run = |mode| {
        let cfg = SimConfig::new(params, h_star, RootLaw::Fixed { a }, mode)
            .with_replicas(b.tail_replicas)
            .with_caps(b.tail_size_cap, u32::MAX)
            .with_seed(seed);
        tail_estimate(&cfg, &t_grid)
    };
    let fwd = run(Mode::Forward)?;
    let full = run(Mode::Full)?;
    let chi_a = lab.critical.chi_at(a);
    let pred_fwd = lab.critical.c1 * chi_a;
    let pred_full = pred_fwd * (d + 1.0) / d;
    rep.scalar("chi_at_a", chi_a);
    rep.scalar("c1_chi_a", pred_fwd);
    rep.scalar("c1_chi_a_full", pred_full);
    rep.scalar("n_censored_forward", fwd.n_censored as f64);
    rep.scalar("n_censored_full", full.n_censored as f64);

    let mut rows = Table::new([
        "t", "survival_forward", "std_err_forward", "survival_full", "std_err_full",
        "sqrt_t_survival_forward", "sqrt_t_survival_full", "full_over_forward",
    ]);
    for (i, &t) in t_grid.iter().enumerate() {
        let st = (t as f64).sqrt();
        rows.push(vec![
            t.into(),
            fwd.survival[i].into(),
            fwd.std_err[i].into(),
            full.survival[i].into(),
            full.std_err[i].into(),
            (st * fwd.survival[i]).into(),
            (st * full.survival[i]).into(),
            (full.survival[i] / fwd.survival[i]).into(),
        ]);
    }
    rep.rows = rows;
    rep.series.insert("tail_forward".into(), Series::new("t", "P[T>t]", t_grid.iter().zip(&fwd.survival).map(|(&t, &s)| (t as f64, s)).collect()));
    rep.series.insert("tail_full".into(), Series::new("t", "P[T>t]", t_grid.iter().zip(&full.survival).map(|(&t, &s)| (t as f64, s)).collect()));
    rep.series.insert("plateau_forward".into(), Series::new("t", "sqrt(t)P[T>t]", t_grid.iter().zip(&fwd.survival).map(|(&t, &s)| (t as f64, (t as f64).sqrt() * s)).collect()));

    let c = Criterion::CriticalTail;
    let (lo, hi) = tol.tail_window;
    let window: Vec<(f64, f64)> = t_grid
        .iter()
        .zip(&fwd.survival)
        .filter(|(&t, &s)| t >= lo && t <= hi && s > 0.0)
        .map(|(&t, &s)| ((t as f64).ln(), s.ln()))
        .collect();
    let slope = if window.len() >= 2 { ols_slope(&window) } else { f64::NAN };
    rep.scalar("tail_slope", slope);
    let (slo, shi) = tol.tail_slope;
    rep.verdicts.push(Verdict::new(c, format!("log-log slope of forward survival on [{lo}, {hi}]"), slope, Relation::AbsWithin, 0.5 * (slo + shi), 0.5 * (shi - slo)));

    let tp = tol.tail_plateau_t;
    let Some(i) = t_grid.iter().position(|&t| t == tp) else {
        return Err(Error::invalid("t_grid", format!("t = {tp} not on the tail grid")));
    };
    let plateau = (tp as f64).sqrt() * fwd.survival[i];
    let plateau_full = (tp as f64).sqrt() * full.survival[i];
    rep.scalar("plateau_forward", plateau);
    rep.scalar("plateau_full", plateau_full);
    rep.verdicts.push(Verdict::new(c, format!("sqrt(t) P[T>t] at t = {tp} vs C1 chi(a)"), plateau, Relation::RelWithin, pred_fwd, tol.plateau_rel));
    let ratio = full.survival[i] / fwd.survival[i];
    rep.scalar("full_over_forward", ratio);
    rep.verdicts.push(Verdict::new(c, format!("full / forward survival at t = {tp}"), ratio, Relation::RelWithin, (d + 1.0) / d, tol.full_forward_rel));
    Ok(rep)
}

/// `γ_s` along an `s`-ladder at three reference points.
pub fn laplace_scaling(lab: &Lab, s_ladder: &[f64]) -> Result<ExperimentReport> {
    if s_ladder.is_empty() || s_ladder.iter().any(|&s| !(s > 0.0)) || s_ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("s_ladder", "must be positive and strictly decreasing"));
    }
    let tol = &lab.tolerances;
    let cd = &lab.critical;
    let params = lab.params;
    let d = params.d_f64();
    let h_star = cd.h_star;
    let refs = [h_star + 0.5, h_star + 1.0, h_star + 2.0];
    let main_ref = 1;
    let mut rep = ExperimentReport::new(Experiment::Laplace.name(), lab, None);
    rep.input("d", json!(lab.d()));
    rep.input("s_ladder", json!(s_ladder));
    rep.input("reference_points", json!(refs));

    let mut rows = Table::new([
        "s", "a", "gamma", "ratio", "gamma_full", "full_over_forward", "iterations", "sup_residual", "base_residual",
    ]);
    let mut main_ratios = Vec::new();
    let mut worst_base: f64 = 0.0;
    let mut worst_orth: f64 = 0.0;
    let mut below: f64 = 0.0;
    for &s in s_ladder {
        let report = solve_gamma_with(s, &cd.operator, PicardOptions::default())?;
        let gamma = &report.solution;
        let full = laplace_full(gamma, s, &params)?;
        let l = apply_operator(&cd.operator, gamma)?;
        let e = (-s).exp();
        let mut base: f64 = 0.0;
        for (&g, &lg) in gamma.values().iter().zip(l.values()) {
            let r = (1.0 - e) - g + e * lg - e * f_poly(lg.clamp(0.0, d), params.d())?;
            base = base.max(r.abs());
        }
        worst_base = worst_base.max(base);
        let orth = inner_nu(&gamma.zip_with(&l, |g, lg| g - lg)?, &cd.chi)?;
        worst_orth = worst_orth.max(orth.abs());
        below = below.max(gamma.eval(h_star - 0.5).abs());
        for (j, &a) in refs.iter().enumerate() {
            let g = gamma.eval(a);
            let ratio = g / (s.sqrt() * cd.c1 * std::f64::consts::PI.sqrt() * cd.chi_at(a));
            let gf = full.eval(a);
            if j == main_ref {
                main_ratios.push(ratio);
            }
            rows.push(vec![
                s.into(), a.into(), g.into(), ratio.into(), gf.into(), (gf / g).into(),
                report.iterations.into(), report.sup_residual.into(), base.into(),
            ]);
        }
    }
    rep.rows = rows;
    rep.scalar("orthogonality_defect", worst_orth);
    rep.scalar("gamma_below_h_star", below);
    rep.series.insert(
        "laplace_ratio".into(),
        Series::new("s", "ratio", s_ladder.iter().copied().zip(main_ratios.iter().copied()).collect()),
    );

    let c = Criterion::LaplaceScaling;
    let a = refs[main_ref];
    let increasing = count_violations(&main_ratios, |x, y| y > x);
    let decreasing = count_violations(&main_ratios, |x, y| y < x);
    rep.verdicts.push(Verdict::none(c, format!("ratio at a = h*+1 = {a:.6} monotone along the s-ladder (violations)"), increasing.min(decreasing)));
    rep.verdicts.push(Verdict::new(c, format!("ratio at a = h*+1, s = {}", s_ladder[s_ladder.len() - 1]), *main_ratios.last().unwrap(), Relation::RelWithin, 1.0, tol.laplace_rel));
    rep.verdicts.push(Verdict::new(c, "max node-wise base-equation residual", worst_base, Relation::Below, tol.base_residual, 0.0));
    Ok(rep)
}

/// Near-critical table along a δ-ladder plus a Monte Carlo check of `η⁺`
/// at the largest δ.
pub fn near_critical(lab: &Lab, deltas: &[f64], epsilon: f64, seed: u64) -> Result<ExperimentReport> {
    if deltas.is_empty() || deltas.iter().any(|&x| !(x > 0.0)) || deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("deltas", "must be positive and strictly decreasing"));
    }
    let tol = &lab.tolerances;
    let b = &lab.budgets;
    let cd = &lab.critical;
    let d = lab.params.d_f64();
    let opts = NearCriticalOptions {
        epsilon,
        ..NearCriticalOptions::default()
    };
    let a_ref = cd.h_star + opts.a_ref_offset;
    let mut rep = ExperimentReport::new(Experiment::NearCritical.name(), lab, Some(seed));
    rep.input("d", json!(lab.d()));
    rep.input("deltas", json!(deltas));
    rep.input("epsilon", json!(epsilon));
    rep.input("a_ref", json!(a_ref));

    let table = near_critical_report(deltas, cd, &opts)?;
    let mut rows = Table::new([
        "delta", "h", "iterations", "sup_residual", "r_plus_norm", "r_norm", "eta_plus_at_ref", "eta_at_ref",
        "ratio_plus_at_ref", "eta_over_eta_plus_at_ref",
    ]);
    for r in &table {
        rows.push(vec![
            r.delta.into(), r.h.into(), r.iterations.into(), r.sup_residual.into(), r.r_plus_norm.into(), r.r_norm.into(),
            r.eta_plus_at_ref.into(), r.eta_at_ref.into(), r.ratio_plus_at_ref.into(), r.eta_over_eta_plus_at_ref.into(),
        ]);
    }
    rep.rows = rows;
    rep.series.insert("r_plus_norm".into(), Series::new("delta", "r_plus_norm", table.iter().map(|r| (r.delta, r.r_plus_norm)).collect()));
    rep.series.insert("eta_plus_at_ref".into(), Series::new("delta", "eta_plus", table.iter().map(|r| (r.delta, r.eta_plus_at_ref)).collect()));

    let c = Criterion::NearCritical;
    let norms: Vec<f64> = table.iter().map(|r| r.r_plus_norm).collect();
    rep.verdicts.push(Verdict::none(c, format!("||r+||_L{} strictly decreasing along the delta ladder (violations)", 2.0 - epsilon), count_violations(&norms, |x, y| y < x)));
    let last = table.last().unwrap();
    rep.verdicts.push(Verdict::new(c, format!("eta / eta+ at a = h*+1, delta = {}", last.delta), last.eta_over_eta_plus_at_ref, Relation::RelWithin, (d + 1.0) / d, tol.eta_ratio_rel));

    let first = &table[0];
    let cfg = SimConfig::new(lab.params, first.h, RootLaw::Fixed { a: a_ref }, Mode::Forward)
        .with_replicas(b.depth_replicas)
        .with_seed(seed);
    let ds = depth_survival(&cfg, b.survival_depth)?;
    let z = (ds.estimate - first.eta_plus_at_ref) / ds.std_err;
    rep.scalar("mc_depth_survival", ds.estimate);
    rep.scalar("mc_std_err", ds.std_err);
    rep.scalar("mc_n_censored", ds.n_censored as f64);
    rep.scalar("solver_eta_plus", first.eta_plus_at_ref);
    let mut mc = Table::new(["delta", "h", "a", "depth", "estimate", "std_err", "solver_eta_plus", "z", "replicas"]);
    mc.push(vec![first.delta.into(), first.h.into(), a_ref.into(), ds.depth.into(), ds.estimate.into(), ds.std_err.into(), first.eta_plus_at_ref.into(), z.into(), ds.replicas.into()]);
    rep.tables.insert("mc_cross_check".into(), mc);
    rep.verdicts.push(Verdict::new(c, format!("|MC depth-{} survival - eta+| / se at delta = {}", b.survival_depth, first.delta), z.abs(), Relation::AtMost, tol.depth_mc_z, 0.0));
    Ok(rep)
}
