//! Picard solvers for the nonlinear equations built on `L_h`:
//!
//! * forward percolation probability, `η⁺ = 1{·>=h}(1 - (1 - L_h[η⁺]/d)^d)`,
//!   solved from above (start at 1) so the iteration lands on the maximal
//!   solution;
//! * the full-cluster probability `η = 1 - (1 - L_h[η⁺]/d)^{d+1}`;
//! * `γ_s = 1 - E_a[e^{-sT}]` at `h*`, `γ_s = 1{·>=h*}(1 - e^{-s}(1 - L[γ_s]/d)^d)`,
//!   solved from below (start at 0), i.e. as the limit of depth truncations;
//! * the near-critical remainder `r⁺ = η⁺/(C2 δ) - χ` along a ladder of δ.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{simpson_weights, FieldFunction, Grid, ModelParams};
use crate::spectral::{assemble_operator, CriticalData, OperatorDisc};

pub const PICARD_TOL: f64 = 1e-12;
pub const PICARD_MAX_ITER: usize = 1_000_000;

/// Slack allowed when checking that iterates stay in `[0, 1]`.
const RANGE_SLACK: f64 = 1e-12;
/// Window (in iterations) of the contraction-rate estimate.
const RATE_WINDOW: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: PICARD_TOL,
            max_iter: PICARD_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixedPointReport {
    pub solution: FieldFunction,
    /// `max_i |f_i - Ψ(f)_i|` for the returned iterate.
    pub sup_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest step against the expected monotone direction (0 when the
    /// iteration was monotone).
    pub max_monotone_violation: f64,
}

/// `f(x) = (1 - x/d)^d - 1 + x` on `[0, d]`.
pub fn f_poly(x: f64, d: u32) -> Result<f64> {
    let df = f64::from(d);
    if !(0.0..=df).contains(&x) {
        return Err(Error::invalid("x", format!("must lie in [0, {d}], got {x}")));
    }
    Ok((1.0 - x / df).powi(d as i32) - 1.0 + x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Decreasing,
    Increasing,
}

/// Iterates `f ← Φ(L f)` node-wise until the sup change drops below `tol`.
fn picard(
    solver: &'static str,
    op: &OperatorDisc,
    init: Vec<f64>,
    phi: impl Fn(f64) -> f64 + Sync,
    direction: Direction,
    opts: PicardOptions,
) -> Result<FixedPointReport> {
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("tol", format!("must be positive, got {}", opts.tol)));
    }
    let n = op.dim();
    let mut f = init;
    let mut lf = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut worst_violation: f64 = 0.0;
    let mut change = f64::INFINITY;
    let mut window_start_change = f64::NAN;

    let step = |f: &[f64], lf: &mut [f64], next: &mut [f64]| -> Result<()> {
        op.apply_slice(f, lf);
        for (i, (nx, &l)) in next.iter_mut().zip(lf.iter()).enumerate() {
            let v = phi(l);
            if !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&v) {
                return Err(Error::OutOfRange {
                    what: solver,
                    value: v,
                    node: i,
                });
            }
            *nx = v.clamp(0.0, 1.0);
        }
        Ok(())
    };

    for iter in 1..=opts.max_iter {
        step(&f, &mut lf, &mut next)?;
        change = 0.0;
        for (&new, &old) in next.iter().zip(&f) {
            change = change.max((new - old).abs());
            let against = match direction {
                Direction::Decreasing => new - old,
                Direction::Increasing => old - new,
            };
            worst_violation = worst_violation.max(against);
        }
        std::mem::swap(&mut f, &mut next);

        if change < opts.tol {
            step(&f, &mut lf, &mut next)?;
            let sup_residual = f
                .iter()
                .zip(&next)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            return Ok(FixedPointReport {
                solution: FieldFunction::new(Arc::clone(op.grid()), f)?,
                sup_residual,
                iterations: iter,
                converged: sup_residual < opts.tol,
                max_monotone_violation: worst_violation,
            });
        }

        if iter % RATE_WINDOW == 0 {
            if window_start_change.is_finite() && change > 0.0 {
                let rate = (change / window_start_change).powf(1.0 / RATE_WINDOW as f64);
                let hopeless = if rate < 1.0 {
                    let remaining = (opts.tol / change).ln() / rate.ln();
                    iter as f64 + remaining > opts.max_iter as f64
                } else {
                    iter >= 10 * RATE_WINDOW
                };
                if hopeless {
                    return Err(Error::NotConverged {
                        solver,
                        iterations: iter,
                        last_change: change,
                    });
                }
            }
            window_start_change = change;
        }
    }
    Err(Error::NotConverged {
        solver,
        iterations: opts.max_iter,
        last_change: change,
    })
}

/// `η⁺_h` from the Picard iteration started at `f ≡ 1`, on an assembled `L_h`.
pub fn solve_eta_plus_with(op: &OperatorDisc, opts: PicardOptions) -> Result<FixedPointReport> {
    let d = op.grid().params().d();
    let df = f64::from(d);
    picard(
        "eta+ iteration",
        op,
        vec![1.0; op.dim()],
        move |l| 1.0 - (1.0 - l / df).max(0.0).powi(d as i32),
        Direction::Decreasing,
        opts,
    )
}

/// Forward percolation probability `η⁺(h, ·)` on `grid` (anchored at `h`).
pub fn solve_eta_plus(
    h: f64,
    grid: Arc<Grid>,
    params: &ModelParams,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointReport> {
    let op = assemble_operator(h, grid, params)?;
    solve_eta_plus_with(&op, PicardOptions { tol, max_iter })
}

fn check_unit_interval(what: &'static str, f: &FieldFunction) -> Result<()> {
    match f
        .values()
        .iter()
        .position(|&v| !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&v))
    {
        Some(node) => Err(Error::OutOfRange {
            what,
            value: f.values()[node],
            node,
        }),
        None => Ok(()),
    }
}

/// `η(h, a) = 1 - (1 - L_h[η⁺](a)/d)^{d+1}` on an assembled `L_h`.
pub fn eta_full_with(op: &OperatorDisc, eta_plus: &FieldFunction) -> Result<FieldFunction> {
    check_unit_interval("eta+ input", eta_plus)?;
    if !(Arc::ptr_eq(op.grid(), eta_plus.grid()) || op.grid().same_as(eta_plus.grid())) {
        return Err(Error::GridMismatch);
    }
    let d = op.grid().params().d();
    let df = f64::from(d);
    let l = op.apply_vec(eta_plus.values());
    let values = l
        .iter()
        .map(|&x| 1.0 - (1.0 - x / df).max(0.0).powi(d as i32 + 1))
        .collect();
    FieldFunction::new(Arc::clone(eta_plus.grid()), values)
}

/// Full-cluster percolation probability from the forward one.
pub fn eta_full_from_forward(eta_plus: &FieldFunction, params: &ModelParams) -> Result<FieldFunction> {
    check_unit_interval("eta+ input", eta_plus)?;
    let grid = Arc::clone(eta_plus.grid());
    let op = assemble_operator(grid.h(), grid, params)?;
    eta_full_with(&op, eta_plus)
}

/// `γ_s` on an assembled `L_{h*}`, from the iteration started at `γ ≡ 0`.
pub fn solve_gamma_with(s: f64, op: &OperatorDisc, opts: PicardOptions) -> Result<FixedPointReport> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::invalid("s", format!("must be non-negative, got {s}")));
    }
    let d = op.grid().params().d();
    let df = f64::from(d);
    let damp = (-s).exp();
    picard(
        "gamma iteration",
        op,
        vec![0.0; op.dim()],
        move |l| 1.0 - damp * (1.0 - l / df).max(0.0).powi(d as i32),
        Direction::Increasing,
        opts,
    )
}

/// `γ_s = 1 - L_·(s)` on `grid`, which must be anchored at `cd.h_star`.
pub fn solve_gamma(s: f64, cd: &CriticalData, grid: Arc<Grid>, tol: f64) -> Result<FixedPointReport> {
    if grid.h() != cd.h_star {
        return Err(Error::invalid(
            "grid",
            format!("gamma needs a grid at h* = {}, got {}", cd.h_star, grid.h()),
        ));
    }
    let opts = PicardOptions {
        tol,
        ..PicardOptions::default()
    };
    if cd.operator.grid().same_as(&grid) {
        solve_gamma_with(s, &cd.operator, opts)
    } else {
        let op = assemble_operator(cd.h_star, grid, &cd.params)?;
        solve_gamma_with(s, &op, opts)
    }
}

/// `γ̃_s(a) = 1 - e^{s/d} (1 - γ_s(a))^{(d+1)/d}`, one minus the Laplace
/// transform of the full cluster size.
pub fn laplace_full(gamma_s: &FieldFunction, s: f64, params: &ModelParams) -> Result<FieldFunction> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::invalid("s", format!("must be non-negative, got {s}")));
    }
    let d = params.d_f64();
    if let Some(node) = gamma_s.values().iter().position(|&g| 1.0 - g < 0.0) {
        return Err(Error::OutOfRange {
            what: "1 - gamma_s",
            value: 1.0 - gamma_s.values()[node],
            node,
        });
    }
    let grow = (s / d).exp();
    let expo = (d + 1.0) / d;
    Ok(gamma_s.map(|g| 1.0 - grow * (1.0 - g).powf(expo)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NearCriticalOptions {
    /// `ε` in the `L^{2-ε}(ν)` norm of the remainder.
    pub epsilon: f64,
    /// Pointwise ratios are reported at `a = h* + a_ref_offset`.
    pub a_ref_offset: f64,
    pub picard: PicardOptions,
}

impl Default for NearCriticalOptions {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            a_ref_offset: 1.0,
            picard: PicardOptions::default(),
        }
    }
}

/// One δ of the near-critical ladder. Undefined entries are NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NearCriticalRow {
    pub delta: f64,
    pub h: f64,
    pub iterations: usize,
    pub sup_residual: f64,
    /// `‖η⁺/(C2 δ) - χ‖_{L^{2-ε}(ν)}`.
    pub r_plus_norm: f64,
    /// `‖η/(C2 δ (d+1)/d) - χ‖_{L^{2-ε}(ν)}`.
    pub r_norm: f64,
    pub eta_plus_at_ref: f64,
    pub eta_at_ref: f64,
    /// `η⁺(h, a_ref) / (C2 δ χ(a_ref))`.
    pub ratio_plus_at_ref: f64,
    /// `η(h, a_ref) / η⁺(h, a_ref)`.
    pub eta_over_eta_plus_at_ref: f64,
    pub degenerate: bool,
}

/// Solutions behind a [`NearCriticalRow`].
#[derive(Debug, Clone)]
pub struct NearCriticalPoint {
    pub row: NearCriticalRow,
    pub eta_plus: Option<FieldFunction>,
    pub eta: Option<FieldFunction>,
}

/// `‖sol/scale - χ‖_{L^p(ν)}` where `sol` lives on a grid anchored below `h*`.
///
/// `χ` vanishes on `[h, h*)` and jumps at `h*`, so the two pieces are
/// integrated separately: a fine Simpson rule on `[h, h*]` and the critical
/// grid on `[h*, a_max]`.
fn remainder_norm(sol: &FieldFunction, scale: f64, cd: &CriticalData, p: f64) -> Result<f64> {
    let h = sol.grid().h();
    let chi_grid = cd.chi.grid();
    let chi = cd.chi.values();
    let below = if cd.h_star > h {
        let cells = ((cd.h_star - h) / chi_grid.spacing() * 4.0).ceil() as usize;
        let n = (2 * cells + 1).max(65);
        let dx = (cd.h_star - h) / (n - 1) as f64;
        let w = simpson_weights(n, dx)?;
        (0..n)
            .map(|k| {
                let x = if k + 1 == n { cd.h_star } else { h + k as f64 * dx };
                let left = sol.eval(x.min(cd.h_star));
                w[k] * cd.params.nu_density(x) * (left / scale).abs().powf(p)
            })
            .sum()
    } else {
        0.0
    };
    let above = chi_grid.integrate_nu(|i| {
        let x = chi_grid.nodes()[i];
        (sol.eval(x) / scale - chi[i]).abs().powf(p)
    });
    Ok((below + above).powf(p.recip()))
}

/// Solves `η⁺` and `η` at `h = h* - δ` and forms the remainder diagnostics.
pub fn near_critical_point(
    delta: f64,
    cd: &CriticalData,
    opts: &NearCriticalOptions,
) -> Result<NearCriticalPoint> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::invalid("delta", format!("must be non-negative, got {delta}")));
    }
    if !(opts.epsilon > 0.0 && opts.epsilon <= 1.0) {
        return Err(Error::invalid(
            "epsilon",
            format!("must lie in (0, 1], got {}", opts.epsilon),
        ));
    }
    let h = cd.h_star - delta;
    let a_ref = cd.h_star + opts.a_ref_offset;
    if delta == 0.0 {
        // no percolation at h*: η⁺ ≡ η ≡ 0
        return Ok(NearCriticalPoint {
            row: NearCriticalRow {
                delta,
                h,
                iterations: 0,
                sup_residual: 0.0,
                r_plus_norm: f64::NAN,
                r_norm: f64::NAN,
                eta_plus_at_ref: 0.0,
                eta_at_ref: 0.0,
                ratio_plus_at_ref: f64::NAN,
                eta_over_eta_plus_at_ref: f64::NAN,
                degenerate: true,
            },
            eta_plus: None,
            eta: None,
        });
    }

    let d = cd.params.d_f64();
    let p = 2.0 - opts.epsilon;
    let grid = Arc::new(Grid::build(h, cd.params, cd.grid_spec)?);
    let op = assemble_operator(h, grid, &cd.params)?;
    let report = solve_eta_plus_with(&op, opts.picard)?;
    let eta_plus = report.solution;
    let eta = eta_full_with(&op, &eta_plus)?;

    let scale_plus = cd.c2 * delta;
    let scale_full = scale_plus * (d + 1.0) / d;
    let eta_plus_at_ref = eta_plus.eval(a_ref);
    let eta_at_ref = eta.eval(a_ref);
    let row = NearCriticalRow {
        delta,
        h,
        iterations: report.iterations,
        sup_residual: report.sup_residual,
        r_plus_norm: remainder_norm(&eta_plus, scale_plus, cd, p)?,
        r_norm: remainder_norm(&eta, scale_full, cd, p)?,
        eta_plus_at_ref,
        eta_at_ref,
        ratio_plus_at_ref: eta_plus_at_ref / (scale_plus * cd.chi_at(a_ref)),
        eta_over_eta_plus_at_ref: eta_at_ref / eta_plus_at_ref,
        degenerate: false,
    };
    Ok(NearCriticalPoint {
        row,
        eta_plus: Some(eta_plus),
        eta: Some(eta),
    })
}

/// Near-critical table over a δ ladder; the δ solves are independent jobs.
pub fn near_critical_report(
    deltas: &[f64],
    cd: &CriticalData,
    opts: &NearCriticalOptions,
) -> Result<Vec<NearCriticalRow>> {
    deltas
        .par_iter()
        .map(|&delta| near_critical_point(delta, cd, opts).map(|pt| pt.row))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::GridSpec;
    use crate::spectral::CriticalData;
    use std::sync::OnceLock;

    fn spec() -> GridSpec {
        GridSpec {
            n_nodes: 801,
            tail_sigmas: 12.0,
        }
    }

    fn critical() -> &'static CriticalData {
        static CD: OnceLock<CriticalData> = OnceLock::new();
        CD.get_or_init(|| CriticalData::solve(&ModelParams::new(2).unwrap(), spec(), 1e-10).unwrap())
    }

    #[test]
    fn f_poly_values() {
        assert_eq!(f_poly(0.0, 3).unwrap(), 0.0);
        for d in 2..=8 {
            assert!((f_poly(f64::from(d), d).unwrap() - f64::from(d - 1)).abs() < 1e-12);
        }
        for x in [0.5, 1.0, 1.7] {
            assert!((f_poly(x, 2).unwrap() - x * x / 4.0).abs() < 1e-15);
        }
        assert!(f_poly(-0.1, 2).is_err());
        assert!(f_poly(2.1, 2).is_err());
    }

    #[test]
    fn f_poly_is_squeezed_by_quadratics() {
        for d in 2..=10 {
            let df = f64::from(d);
            let ratios: Vec<f64> = (1..=1000)
                .map(|k| {
                    let x = df * k as f64 / 1000.0;
                    f_poly(x, d).unwrap() / (x * x)
                })
                .collect();
            let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ratios.iter().cloned().fold(0.0, f64::max);
            assert!(lo > 0.0 && hi < f64::INFINITY, "d={d} lo={lo} hi={hi}");
        }
    }

    #[test]
    fn eta_plus_vanishes_above_h_star() {
        let cd = critical();
        let p = cd.params;
        let h = cd.h_star + 0.05;
        let grid = Arc::new(Grid::build(h, p, spec()).unwrap());
        let r = solve_eta_plus(h, grid, &p, PICARD_TOL, PICARD_MAX_ITER).unwrap();
        assert!(r.solution.sup_norm() < 1e-6);
        assert!(r.max_monotone_violation <= 1e-15);
    }

    #[test]
    fn eta_plus_is_positive_and_monotone_below_h_star() {
        let cd = critical();
        let p = cd.params;
        let h = cd.h_star - 0.05;
        let grid = Arc::new(Grid::build(h, p, spec()).unwrap());
        let r = solve_eta_plus(h, grid, &p, PICARD_TOL, PICARD_MAX_ITER).unwrap();
        let v = r.solution.values();
        assert!(v.iter().all(|&x| x > 0.0 && x <= 1.0));
        assert!(v.windows(2).all(|w| w[1] >= w[0] - 1e-14));
        assert!(r.converged && r.sup_residual < PICARD_TOL);
        assert!(r.max_monotone_violation <= 1e-15);

        let eta = eta_full_from_forward(&r.solution, &p).unwrap();
        for (a, b) in eta.values().iter().zip(v) {
            assert!(*a >= *b - 1e-15);
        }
    }

    #[test]
    fn eta_plus_is_almost_one_without_killing() {
        let p = ModelParams::new(2).unwrap();
        let grid = Arc::new(Grid::build(-10.0, p, spec()).unwrap());
        let r = solve_eta_plus(-10.0, grid, &p, PICARD_TOL, 10_000).unwrap();
        let g = r.solution.grid();
        for (x, v) in g.nodes().iter().zip(r.solution.values()) {
            if x.abs() < 5.0 {
                assert!(*v >= 0.99);
            }
        }
    }

    #[test]
    fn eta_full_of_zero_is_zero_and_rejects_bad_input() {
        let p = ModelParams::new(2).unwrap();
        let grid = Arc::new(Grid::build(0.3, p, spec()).unwrap());
        let zero = FieldFunction::zeros(Arc::clone(&grid));
        assert_eq!(eta_full_from_forward(&zero, &p).unwrap().sup_norm(), 0.0);
        let bad = FieldFunction::constant(grid, 1.5);
        assert!(matches!(
            eta_full_from_forward(&bad, &p),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn gamma_at_zero_s_is_zero() {
        let cd = critical();
        let r = solve_gamma(0.0, cd, Arc::clone(cd.chi.grid()), PICARD_TOL).unwrap();
        assert_eq!(r.solution.sup_norm(), 0.0);
        assert_eq!(r.solution.eval(cd.h_star - 1e-9), 0.0);
        assert!(solve_gamma(-1.0, cd, Arc::clone(cd.chi.grid()), PICARD_TOL).is_err());
    }

    #[test]
    fn gamma_identities() {
        let cd = critical();
        let s = 1e-3;
        let r = solve_gamma(s, cd, Arc::clone(cd.chi.grid()), PICARD_TOL).unwrap();
        assert!(r.max_monotone_violation <= 1e-15);
        let g = r.solution.values();
        let lg = cd.operator.apply_vec(g);
        let e = (-s).exp();
        for (gi, li) in g.iter().zip(&lg) {
            let base = (1.0 - e) - gi + e * li - e * f_poly(*li, 2).unwrap();
            assert!(base.abs() < 10.0 * PICARD_TOL, "{base}");
        }
        let grid = cd.chi.grid();
        let orth = grid.integrate_nu(|i| (g[i] - lg[i]) * cd.chi.values()[i]);
        assert!(orth.abs() < 1e-9, "{orth}");

        let full = laplace_full(&r.solution, s, &cd.params).unwrap();
        for (t, gi) in full.values().iter().zip(g) {
            assert!(*t >= gi - s / 2.0);
        }
    }

    #[test]
    fn laplace_full_edge_cases() {
        let cd = critical();
        let zero = FieldFunction::zeros(Arc::clone(cd.chi.grid()));
        assert_eq!(laplace_full(&zero, 0.0, &cd.params).unwrap().sup_norm(), 0.0);
        let bad = FieldFunction::constant(Arc::clone(cd.chi.grid()), 1.2);
        assert!(laplace_full(&bad, 0.1, &cd.params).is_err());
    }

    #[test]
    fn near_critical_degenerate_and_invalid_rows() {
        let cd = critical();
        let opts = NearCriticalOptions::default();
        let rows = near_critical_report(&[0.0], cd, &opts).unwrap();
        assert!(rows[0].degenerate);
        assert_eq!(rows[0].eta_plus_at_ref, 0.0);
        assert!(near_critical_report(&[-0.1], cd, &opts).is_err());
        let bad = NearCriticalOptions {
            epsilon: 1.5,
            ..opts
        };
        assert!(near_critical_report(&[0.05], cd, &bad).is_err());
    }

    #[test]
    fn picard_gives_up_early_when_hopeless() {
        let cd = critical();
        let opts = PicardOptions {
            tol: 1e-12,
            max_iter: 3000,
        };
        // at h* itself the iteration from 1 decays only like 1/n
        let r = solve_eta_plus_with(&cd.operator, opts);
        assert!(matches!(r, Err(Error::NotConverged { .. })));
    }
}
