//! Nyström discretisation of the killed one-step operator
//!
//! ```text
//! L_h[f](a) = 1{a >= h} · d · ∫_{[h,∞)} f(x) ρ_Y(x - a/d) dx
//! ```
//!
//! its Perron eigenpair `(λ_h, χ_h)`, the critical height `h*` (the unique
//! level with `λ_{h*} = 1`) and the tail constants `C1`, `C2`.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{
    normal_sf, FieldFunction, GaussianDensity, Grid, GridMeta, GridSpec, ModelParams,
};

/// Default relative tolerance of the power iteration.
pub const EIGEN_TOL: f64 = 1e-12;
/// Default iteration budget of the power iteration.
pub const EIGEN_MAX_ITER: usize = 10_000;
/// Default tolerance on `|λ(h) - 1|` for the critical-height bisection.
pub const BISECTION_TOL: f64 = 1e-10;
/// Limit on bracket doublings before the λ evaluator is declared broken.
pub const MAX_DOUBLINGS: u32 = 60;

/// Dense Nyström matrix of `L_h` on a grid anchored at `h`.
///
/// Row `i` computes `L_h[f](x_i) = Σ_j K[i][j] f(x_j)` with
/// `K[i][j] = d·ρ_Y(x_j - x_i/d)·w_j`.
#[derive(Debug, Clone)]
pub struct OperatorDisc {
    h: f64,
    grid: Arc<Grid>,
    kernel: Vec<f64>,
}

impl OperatorDisc {
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.len()
    }

    /// Row-major kernel matrix.
    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.kernel[i * self.dim() + j]
    }

    /// `out = K f`. Every row is an independent sequential dot product, so the
    /// result does not depend on the number of threads.
    pub fn apply_slice(&self, f: &[f64], out: &mut [f64]) {
        let n = self.dim();
        assert_eq!(f.len(), n);
        assert_eq!(out.len(), n);
        out.par_iter_mut()
            .zip(self.kernel.par_chunks_exact(n))
            .for_each(|(o, row)| *o = dot(row, f));
    }

    pub fn apply_vec(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.apply_slice(f, &mut out);
        out
    }

    /// Largest relative asymmetry of the ν-symmetrised matrix
    /// `S[i][j] = sqrt(ρ_ν(x_i) w_i) K[i][j] / sqrt(ρ_ν(x_j) w_j)`.
    pub fn symmetry_defect(&self) -> f64 {
        let n = self.dim();
        let g = &self.grid;
        let scale: Vec<f64> = (0..n)
            .map(|i| (g.nu_density()[i] * g.weights()[i]).sqrt())
            .collect();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let sij = scale[i] * self.entry(i, j) / scale[j];
                let sji = scale[j] * self.entry(j, i) / scale[i];
                let m = sij.abs().max(sji.abs());
                if m > 0.0 && m.is_finite() {
                    worst = worst.max((sij - sji).abs() / m);
                }
            }
        }
        worst
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Builds the Nyström matrix of `L_h` on `grid`.
///
/// Fails if the grid is not anchored at `h`, or if the ν-weighted ρ_Y mass
/// lost beyond `a_max` exceeds `1e-14` times the ν-mass of the grid.
pub fn assemble_operator(h: f64, grid: Arc<Grid>, params: &ModelParams) -> Result<OperatorDisc> {
    if grid.h() != h {
        return Err(Error::invalid(
            "h",
            format!("grid is anchored at {} but the operator level is {h}", grid.h()),
        ));
    }
    if grid.params() != params {
        return Err(Error::GridMismatch);
    }
    let n = grid.len();
    let d = params.d_f64();
    let rho_y = GaussianDensity::new(params.sigma_y_sq())?;
    let nodes = grid.nodes();
    let weights = grid.weights();

    let mut kernel = vec![0.0; n * n];
    kernel
        .par_chunks_exact_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            let centre = nodes[i] / d;
            for (j, k) in row.iter_mut().enumerate() {
                *k = d * rho_y.pdf(nodes[j] - centre) * weights[j];
            }
        });

    let sigma_y = params.sigma_y();
    let lost = grid.integrate_nu(|i| normal_sf((grid.a_max() - nodes[i] / d) / sigma_y));
    let limit = 1e-14 * grid.nu_mass();
    if lost > limit {
        return Err(Error::Truncation {
            what: "ρ_Y mass beyond a_max",
            mass: lost,
            limit,
        });
    }

    Ok(OperatorDisc { h, grid, kernel })
}

/// `L_h[f]` on the grid shared by `op` and `f`.
pub fn apply_operator(op: &OperatorDisc, f: &FieldFunction) -> Result<FieldFunction> {
    if !(Arc::ptr_eq(op.grid(), f.grid()) || op.grid().same_as(f.grid())) {
        return Err(Error::GridMismatch);
    }
    FieldFunction::new(Arc::clone(f.grid()), op.apply_vec(f.values()))
}

/// Leading eigenvalue and non-negative unit eigenfunction of a discretised `L_h`.
#[derive(Debug, Clone)]
pub struct Eigenpair {
    pub lambda: f64,
    pub chi: FieldFunction,
    /// `‖L χ - λ χ‖_{L²(ν)}`.
    pub residual: f64,
    pub iterations: usize,
}

fn nu_norm(grid: &Grid, v: &[f64]) -> f64 {
    grid.integrate_nu(|i| v[i] * v[i]).sqrt()
}

/// Power iteration started from the constant function, normalised in
/// `L²(ν)` after every step. Stops once the relative change of the Rayleigh
/// quotient and the residual are both below `tol`.
pub fn leading_eigenpair(op: &OperatorDisc, tol: f64, max_iter: usize) -> Result<Eigenpair> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", format!("must be positive, got {tol}")));
    }
    let grid = op.grid();
    let n = op.dim();
    let mut v = vec![1.0; n];
    let norm0 = nu_norm(grid, &v);
    v.iter_mut().for_each(|x| *x /= norm0);
    let mut u = vec![0.0; n];
    let mut lambda_prev = f64::NAN;
    let mut last_change = f64::INFINITY;

    for iter in 1..=max_iter {
        op.apply_slice(&v, &mut u);
        let lambda = grid.integrate_nu(|i| u[i] * v[i]);
        let residual = grid.integrate_nu(|i| (u[i] - lambda * v[i]).powi(2)).sqrt();
        let change = (lambda - lambda_prev).abs();
        if change <= tol * lambda.abs() && residual <= tol * lambda.max(1.0) {
            if !(lambda > 0.0) {
                return Err(Error::CorruptEigenfunction(format!(
                    "non-positive leading eigenvalue {lambda}"
                )));
            }
            if let Some(i) = v.iter().position(|&x| !(x > 0.0)) {
                return Err(Error::CorruptEigenfunction(format!(
                    "eigenfunction not strictly positive at node {i}: {}",
                    v[i]
                )));
            }
            return Ok(Eigenpair {
                lambda,
                chi: FieldFunction::new(Arc::clone(grid), v)?,
                residual,
                iterations: iter,
            });
        }
        last_change = change;
        lambda_prev = lambda;
        let norm = nu_norm(grid, &u);
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::CorruptEigenfunction(format!("iterate norm {norm}")));
        }
        for (vi, ui) in v.iter_mut().zip(&u) {
            *vi = ui / norm;
        }
    }
    Err(Error::NotConverged {
        solver: "power iteration",
        iterations: max_iter,
        last_change,
    })
}

/// Builds the grid at `h`, assembles `L_h` and solves for its eigenpair.
pub fn eigenpair_at(
    h: f64,
    params: &ModelParams,
    spec: GridSpec,
    tol: f64,
    max_iter: usize,
) -> Result<(OperatorDisc, Eigenpair)> {
    let grid = Arc::new(Grid::build(h, *params, spec)?);
    let op = assemble_operator(h, grid, params)?;
    let eig = leading_eigenpair(&op, tol, max_iter)?;
    Ok((op, eig))
}

/// Leading eigenvalue `λ_h` of the discretised operator.
pub fn lambda_of(h: f64, params: &ModelParams, spec: GridSpec) -> Result<f64> {
    Ok(eigenpair_at(h, params, spec, EIGEN_TOL, EIGEN_MAX_ITER)?.1.lambda)
}

/// Output of the critical-height bisection, before the constants are formed.
#[derive(Debug, Clone)]
pub struct CriticalPoint {
    pub params: ModelParams,
    pub grid_spec: GridSpec,
    pub h_star: f64,
    /// Final bisection bracket `[lo, hi]` with `λ(lo) > 1 > λ(hi)`.
    pub bracket: (f64, f64),
    pub bisection_tol: f64,
    pub bisection_steps: usize,
    pub operator: Arc<OperatorDisc>,
    pub eigen: Eigenpair,
}

/// Locates `h*` by bisection on `h ↦ λ_h - 1`.
///
/// The bracket starts at `[0, 2]` and is expanded geometrically until
/// `λ(lo) > 1 > λ(hi)`; bisection stops once `|λ(h) - 1| < tol`.
pub fn find_h_star(params: &ModelParams, spec: GridSpec, tol: f64) -> Result<CriticalPoint> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", format!("must be positive, got {tol}")));
    }
    let eval = |h: f64| eigenpair_at(h, params, spec, EIGEN_TOL, EIGEN_MAX_ITER);

    let (mut lo, mut hi, mut step) = (0.0f64, 2.0f64, 2.0f64);
    let mut doublings = 0;
    let mut lam_lo = eval(lo)?.1.lambda;
    while lam_lo <= 1.0 {
        doublings += 1;
        if doublings > MAX_DOUBLINGS {
            return Err(Error::BracketFailure { doublings });
        }
        hi = lo;
        lo -= step;
        step *= 2.0;
        lam_lo = eval(lo)?.1.lambda;
    }
    let mut lam_hi = eval(hi)?.1.lambda;
    while lam_hi >= 1.0 {
        doublings += 1;
        if doublings > MAX_DOUBLINGS {
            return Err(Error::BracketFailure { doublings });
        }
        lo = hi;
        hi += step;
        step *= 2.0;
        lam_hi = eval(hi)?.1.lambda;
    }
    debug_assert!(lam_lo > 1.0 && lam_hi < 1.0);

    for steps in 1..=200 {
        let mid = 0.5 * (lo + hi);
        let (op, eigen) = eval(mid)?;
        if (eigen.lambda - 1.0).abs() < tol {
            return Ok(CriticalPoint {
                params: *params,
                grid_spec: spec,
                h_star: mid,
                bracket: (lo, hi),
                bisection_tol: tol,
                bisection_steps: steps,
                operator: Arc::new(op),
                eigen,
            });
        }
        if eigen.lambda > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 4.0 * f64::EPSILON * mid.abs().max(1.0) {
            return Err(Error::NotConverged {
                solver: "h* bisection",
                iterations: steps,
                last_change: (eigen.lambda - 1.0).abs(),
            });
        }
    }
    Err(Error::NotConverged {
        solver: "h* bisection",
        iterations: 200,
        last_change: f64::NAN,
    })
}

/// The three ν-inner products entering the constants:
/// `⟨1,χ⟩`, `⟨χ,χ²⟩` and `⟨Id,χ²⟩`.
pub fn constant_inner_products(chi: &FieldFunction) -> (f64, f64, f64) {
    let g = chi.grid();
    let c = chi.values();
    let x = g.nodes();
    (
        g.integrate_nu(|i| c[i]),
        g.integrate_nu(|i| c[i] * c[i] * c[i]),
        g.integrate_nu(|i| x[i] * c[i] * c[i]),
    )
}

/// Critical bundle: `h*`, `χ = χ_{h*}` and the constants of the critical
/// tail (`C1`) and of the near-critical percolation probability (`C2`).
#[derive(Debug, Clone)]
pub struct CriticalData {
    pub params: ModelParams,
    pub grid_spec: GridSpec,
    pub h_star: f64,
    pub bracket: (f64, f64),
    pub bisection_tol: f64,
    pub lambda_check: f64,
    pub eigen_residual: f64,
    pub chi: FieldFunction,
    pub operator: Arc<OperatorDisc>,
    pub c1: f64,
    pub c2: f64,
    pub ip_1_chi: f64,
    pub ip_chi_chi2: f64,
    pub ip_id_chi2: f64,
}

/// Completes a [`CriticalPoint`] with
///
/// ```text
/// C1 = Γ(1/2)^{-1} sqrt( 2d/(d-1) · ⟨1,χ⟩ / ⟨χ,χ²⟩ )
/// C2 = 2 (d-1)/(d+1) · ⟨Id,χ²⟩ / ⟨χ,χ²⟩
/// ```
pub fn critical_constants(cp: CriticalPoint) -> Result<CriticalData> {
    let (ip_1_chi, ip_chi_chi2, ip_id_chi2) = constant_inner_products(&cp.eigen.chi);
    for (name, v) in [
        ("<1,chi>", ip_1_chi),
        ("<chi,chi^2>", ip_chi_chi2),
        ("<Id,chi^2>", ip_id_chi2),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::CorruptEigenfunction(format!("{name} = {v}")));
        }
    }
    let d = cp.params.d_f64();
    let gamma_half = PI.sqrt();
    let c1 = (2.0 * d / (d - 1.0) * ip_1_chi / ip_chi_chi2).sqrt() / gamma_half;
    let c2 = 2.0 * (d - 1.0) / (d + 1.0) * ip_id_chi2 / ip_chi_chi2;
    Ok(CriticalData {
        params: cp.params,
        grid_spec: cp.grid_spec,
        h_star: cp.h_star,
        bracket: cp.bracket,
        bisection_tol: cp.bisection_tol,
        lambda_check: cp.eigen.lambda,
        eigen_residual: cp.eigen.residual,
        chi: cp.eigen.chi,
        operator: cp.operator,
        c1,
        c2,
        ip_1_chi,
        ip_chi_chi2,
        ip_id_chi2,
    })
}

impl CriticalData {
    /// `find_h_star` followed by `critical_constants`.
    pub fn solve(params: &ModelParams, spec: GridSpec, tol: f64) -> Result<Self> {
        critical_constants(find_h_star(params, spec, tol)?)
    }

    pub fn chi_at(&self, a: f64) -> f64 {
        self.chi.eval(a)
    }

    pub fn summary(&self) -> CriticalSummary {
        CriticalSummary {
            d: self.params.d(),
            h_star: self.h_star,
            h_star_bracket_width: self.bracket.1 - self.bracket.0,
            lambda_check: self.lambda_check,
            c1: self.c1,
            c2: self.c2,
            ip_1_chi: self.ip_1_chi,
            ip_chi_chi2: self.ip_chi_chi2,
            ip_id_chi2: self.ip_id_chi2,
            chi_at_h_star: self.chi.values()[0],
            eigen_residual: self.eigen_residual,
            sigma_nu_sq: self.params.sigma_nu_sq(),
            sigma_y_sq: self.params.sigma_y_sq(),
            grid: self.chi.grid().meta(),
            grid_spec: self.grid_spec,
            tolerances: SpectralTolerances {
                bisection_tol: self.bisection_tol,
                eigen_tol: EIGEN_TOL,
                eigen_max_iter: EIGEN_MAX_ITER,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralTolerances {
    pub bisection_tol: f64,
    pub eigen_tol: f64,
    pub eigen_max_iter: usize,
}

/// JSON form of [`CriticalData`] (everything except the χ samples).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalSummary {
    pub d: u32,
    pub h_star: f64,
    pub h_star_bracket_width: f64,
    pub lambda_check: f64,
    pub c1: f64,
    pub c2: f64,
    pub ip_1_chi: f64,
    pub ip_chi_chi2: f64,
    pub ip_id_chi2: f64,
    pub chi_at_h_star: f64,
    pub eigen_residual: f64,
    pub sigma_nu_sq: f64,
    pub sigma_y_sq: f64,
    pub grid: GridMeta,
    pub grid_spec: GridSpec,
    pub tolerances: SpectralTolerances,
}
