//! Model parameters, Gaussian densities and the quadrature layer.
//!
//! Every integral over `[h, ∞)` in the crate is replaced by a composite
//! Simpson rule on a uniform node set covering `[h, a_max]`. The upper end is
//! chosen so that the discarded mass of the stationary measure `ν` is below
//! [`NU_TAIL_LIMIT`].

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Largest ν-mass allowed beyond the upper truncation point of a grid.
pub const NU_TAIL_LIMIT: f64 = 1e-14;

/// Smallest node count accepted by [`build_grid`].
pub const MIN_NODES: usize = 64;

/// Smallest `tail_sigmas` accepted by [`build_grid`].
pub const MIN_TAIL_SIGMAS: f64 = 6.0;

/// Degree parameter of the tree together with the two Gaussian variances of
/// the branching representation.
///
/// `sigma_nu_sq = d/(d-1)` is the variance of the stationary marginal and
/// `sigma_y_sq = (d+1)/d` the variance of the innovation added at each step of
/// the recursion `φ_child = φ_parent/d + Y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    d: u32,
    sigma_nu_sq: f64,
    sigma_y_sq: f64,
}

impl ModelParams {
    pub fn new(d: u32) -> Result<Self> {
        if d < 2 {
            return Err(Error::invalid("d", format!("need d >= 2, got {d}")));
        }
        let df = f64::from(d);
        Ok(Self {
            d,
            sigma_nu_sq: df / (df - 1.0),
            sigma_y_sq: (df + 1.0) / df,
        })
    }

    pub fn d(&self) -> u32 {
        self.d
    }

    pub fn d_f64(&self) -> f64 {
        f64::from(self.d)
    }

    pub fn sigma_nu_sq(&self) -> f64 {
        self.sigma_nu_sq
    }

    pub fn sigma_y_sq(&self) -> f64 {
        self.sigma_y_sq
    }

    pub fn sigma_nu(&self) -> f64 {
        self.sigma_nu_sq.sqrt()
    }

    pub fn sigma_y(&self) -> f64 {
        self.sigma_y_sq.sqrt()
    }

    /// ν-density at `x`.
    pub fn nu_density(&self, x: f64) -> f64 {
        GaussianDensity::unchecked(self.sigma_nu_sq).pdf(x)
    }

    /// `ν((x, ∞))`.
    pub fn nu_tail(&self, x: f64) -> f64 {
        normal_sf(x / self.sigma_nu())
    }
}

/// Convenience constructor mirroring [`ModelParams::new`].
pub fn make_params(d: u32) -> Result<ModelParams> {
    ModelParams::new(d)
}

/// Survival function of the standard normal law, `1 - Φ(z)`.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / SQRT_2)
}

/// Centred Gaussian density with a fixed variance.
#[derive(Debug, Clone, Copy)]
pub struct GaussianDensity {
    norm: f64,
    inv_two_var: f64,
}

impl GaussianDensity {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::invalid(
                "variance",
                format!("must be positive and finite, got {variance}"),
            ));
        }
        Ok(Self::unchecked(variance))
    }

    fn unchecked(variance: f64) -> Self {
        Self {
            norm: (2.0 * PI * variance).sqrt().recip(),
            inv_two_var: 0.5 / variance,
        }
    }

    #[inline]
    pub fn pdf(&self, x: f64) -> f64 {
        self.norm * (-x * x * self.inv_two_var).exp()
    }
}

/// `(2π·variance)^(-1/2) · exp(-x²/(2·variance))`.
pub fn gaussian_pdf(variance: f64, x: f64) -> Result<f64> {
    Ok(GaussianDensity::new(variance)?.pdf(x))
}

/// Composite Simpson weights for `n` equispaced nodes with the given spacing.
///
/// An odd number of intervals is closed with the 3/8 rule on the last three
/// intervals. All weights are positive.
pub fn simpson_weights(n: usize, spacing: f64) -> Result<Vec<f64>> {
    if n < 3 {
        return Err(Error::invalid("n_nodes", format!("need at least 3 nodes, got {n}")));
    }
    let intervals = n - 1;
    let mut w = vec![0.0; n];
    let simpson_intervals = if intervals % 2 == 0 { intervals } else { intervals - 3 };
    for k in (0..simpson_intervals).step_by(2) {
        w[k] += spacing / 3.0;
        w[k + 1] += 4.0 * spacing / 3.0;
        w[k + 2] += spacing / 3.0;
    }
    if intervals % 2 == 1 {
        let k = simpson_intervals;
        let c = 3.0 * spacing / 8.0;
        w[k] += c;
        w[k + 1] += 3.0 * c;
        w[k + 2] += 3.0 * c;
        w[k + 3] += c;
    }
    Ok(w)
}

/// Resolution of the grids built by the solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_nodes: usize,
    pub tail_sigmas: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n_nodes: 2001,
            tail_sigmas: 12.0,
        }
    }
}

impl GridSpec {
    /// Same spec with `tail_sigmas` widened, if needed, so that a grid
    /// anchored at `h` reaches at least `upto`.
    pub fn covering(self, h: f64, upto: f64, params: &ModelParams) -> Self {
        let needed = (upto - h.max(0.0)) / params.sigma_nu();
        Self {
            tail_sigmas: self.tail_sigmas.max(needed.ceil()),
            ..self
        }
    }
}

/// Uniform quadrature grid on `[h, a_max]` with Simpson weights and the
/// ν-density cached at every node.
#[derive(Debug, Clone)]
pub struct Grid {
    params: ModelParams,
    h: f64,
    a_max: f64,
    spacing: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    nu_density: Vec<f64>,
}

impl Grid {
    /// Uniform grid on `[h, a_max]` with `n_nodes` nodes.
    pub fn uniform(h: f64, a_max: f64, n_nodes: usize, params: ModelParams) -> Result<Self> {
        if !h.is_finite() || !a_max.is_finite() {
            return Err(Error::invalid("h", "grid end points must be finite"));
        }
        if a_max <= h {
            return Err(Error::invalid(
                "a_max",
                format!("degenerate grid: a_max = {a_max} <= h = {h}"),
            ));
        }
        let spacing = (a_max - h) / (n_nodes.saturating_sub(1)) as f64;
        let weights = simpson_weights(n_nodes, spacing)?;
        let mut nodes: Vec<f64> = (0..n_nodes).map(|i| h + i as f64 * spacing).collect();
        nodes[n_nodes - 1] = a_max;
        let nu = GaussianDensity::unchecked(params.sigma_nu_sq());
        let nu_density = nodes.iter().map(|&x| nu.pdf(x)).collect();
        Ok(Self {
            params,
            h,
            a_max,
            spacing,
            nodes,
            weights,
            nu_density,
        })
    }

    /// Grid anchored at `h` whose upper end leaves less than
    /// [`NU_TAIL_LIMIT`] of ν-mass uncovered.
    pub fn build(h: f64, params: ModelParams, spec: GridSpec) -> Result<Self> {
        if spec.n_nodes < MIN_NODES {
            return Err(Error::invalid(
                "n_nodes",
                format!("need at least {MIN_NODES} nodes, got {}", spec.n_nodes),
            ));
        }
        if !(spec.tail_sigmas >= MIN_TAIL_SIGMAS) || !spec.tail_sigmas.is_finite() {
            return Err(Error::invalid(
                "tail_sigmas",
                format!("need tail_sigmas >= {MIN_TAIL_SIGMAS}, got {}", spec.tail_sigmas),
            ));
        }
        if !h.is_finite() {
            return Err(Error::invalid("h", format!("must be finite, got {h}")));
        }
        let sigma = params.sigma_nu();
        let mut a_max = h.max(0.0) + spec.tail_sigmas * sigma;
        while params.nu_tail(a_max) >= NU_TAIL_LIMIT {
            a_max += 0.5 * sigma;
        }
        let grid = Self::uniform(h, a_max, spec.n_nodes, params)?;

        let mass = grid.nu_mass();
        let exact = params.nu_tail(h) - params.nu_tail(a_max);
        if mass > 1.0 + 1e-12 || (mass - exact).abs() > 1e-8 {
            return Err(Error::Truncation {
                what: "grid ν-mass",
                mass: (mass - exact).abs(),
                limit: 1e-8,
            });
        }
        Ok(grid)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn a_max(&self) -> f64 {
        self.a_max
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn nu_density(&self) -> &[f64] {
        &self.nu_density
    }

    /// Quadrature of `∫ 1 dν` over the grid.
    pub fn nu_mass(&self) -> f64 {
        self.integrate_nu(|_| 1.0)
    }

    /// `∫ g(x) dν(x)` over `[h, a_max]`, where `g` receives the node index.
    pub fn integrate_nu(&self, mut g: impl FnMut(usize) -> f64) -> f64 {
        (0..self.len())
            .map(|i| self.weights[i] * self.nu_density[i] * g(i))
            .sum()
    }

    /// `∫ g(x) dx` over `[h, a_max]` (Lebesgue measure).
    pub fn integrate(&self, mut g: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * g(x))
            .sum()
    }

    /// Whether two grids describe the same node set.
    pub fn same_as(&self, other: &Grid) -> bool {
        std::ptr::eq(self, other)
            || (self.h == other.h
                && self.a_max == other.a_max
                && self.len() == other.len()
                && self.params == other.params)
    }

    /// Metadata echoed into manifests.
    pub fn meta(&self) -> GridMeta {
        GridMeta {
            h: self.h,
            a_max: self.a_max,
            n_nodes: self.len(),
            spacing: self.spacing,
            nu_mass: self.nu_mass(),
        }
    }
}

/// Serializable summary of a [`Grid`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub h: f64,
    pub a_max: f64,
    pub n_nodes: usize,
    pub spacing: f64,
    pub nu_mass: f64,
}

/// Builds the standard solver grid at level `h`.
pub fn build_grid(h: f64, params: ModelParams, n_nodes: usize, tail_sigmas: f64) -> Result<Grid> {
    Grid::build(
        h,
        params,
        GridSpec {
            n_nodes,
            tail_sigmas,
        },
    )
}

/// A function of the field value sampled on the nodes of a [`Grid`].
///
/// Evaluation is exactly zero below `h`, piecewise linear on `[h, a_max]` and
/// clamped to the last node value above `a_max`.
#[derive(Debug, Clone)]
pub struct FieldFunction {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl FieldFunction {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(
                "values",
                format!("expected {} values, got {}", grid.len(), values.len()),
            ));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Arc<Grid>, c: f64) -> Self {
        let values = vec![c; grid.len()];
        Self { grid, values }
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.nodes().iter().map(|&x| f(x)).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Node-wise combination of two functions on the same grid.
    pub fn zip_with(&self, other: &FieldFunction, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_grid(other)?;
        Ok(Self {
            grid: Arc::clone(&self.grid),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_grid(&self, other: &FieldFunction) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub fn eval(&self, a: f64) -> f64 {
        let g = &self.grid;
        if a < g.h {
            return 0.0;
        }
        let last = self.values.len() - 1;
        if a >= g.a_max {
            return self.values[last];
        }
        let t = (a - g.h) / g.spacing;
        let i = (t.floor() as usize).min(last - 1);
        let frac = t - i as f64;
        self.values[i] + frac * (self.values[i + 1] - self.values[i])
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `∫ f·g dν` over the shared grid.
pub fn inner_nu(f: &FieldFunction, g: &FieldFunction) -> Result<f64> {
    f.check_same_grid(g)?;
    Ok(f.grid.integrate_nu(|i| f.values[i] * g.values[i]))
}

/// `(∫ |f|^p dν)^{1/p}` over the grid of `f`.
pub fn norm_nu_p(f: &FieldFunction, p: f64) -> Result<f64> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::invalid("p", format!("need 1 <= p < inf, got {p}")));
    }
    let integral = f.grid.integrate_nu(|i| f.values[i].abs().powf(p));
    Ok(integral.powf(p.recip()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_at(h: f64, d: u32) -> Arc<Grid> {
        Arc::new(Grid::build(h, ModelParams::new(d).unwrap(), GridSpec::default()).unwrap())
    }

    #[test]
    fn params_are_the_two_rationals() {
        let p = make_params(2).unwrap();
        assert_eq!(p.sigma_nu_sq(), 2.0);
        assert_eq!(p.sigma_y_sq(), 1.5);
        let p = make_params(3).unwrap();
        assert_eq!(p.sigma_nu_sq(), 1.5);
        assert!((p.sigma_y_sq() - 4.0 / 3.0).abs() < 1e-15);
        assert!(make_params(1).is_err());
        assert!(make_params(0).is_err());
    }

    #[test]
    fn params_invariants_hold_for_a_range_of_degrees() {
        for d in 2..=40 {
            let p = make_params(d).unwrap();
            assert!(p.sigma_nu_sq() > p.sigma_y_sq() && p.sigma_y_sq() > 1.0);
            let df = f64::from(d);
            let stationary = p.sigma_y_sq() / (1.0 - 1.0 / (df * df));
            assert!((stationary - p.sigma_nu_sq()).abs() < 1e-14);
        }
    }

    #[test]
    fn pdf_values() {
        assert!((gaussian_pdf(1.0, 0.0).unwrap() - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!((gaussian_pdf(1.5, 0.0).unwrap() - 1.0 / (3.0 * PI).sqrt()).abs() < 1e-15);
        assert!(gaussian_pdf(0.0, 1.0).is_err());
        assert!(gaussian_pdf(-1.0, 1.0).is_err());
    }

    #[test]
    fn simpson_weights_even_and_odd_intervals() {
        // both rules integrate cubics exactly
        for n in [5usize, 6, 7, 8, 65, 66] {
            let dx = 2.0 / (n - 1) as f64;
            let w = simpson_weights(n, dx).unwrap();
            assert!(w.iter().all(|&v| v > 0.0));
            let s: f64 = (0..n)
                .map(|i| {
                    let x = -1.0 + i as f64 * dx;
                    w[i] * (x * x * x + 2.0 * x * x + 1.0)
                })
                .sum();
            assert!((s - (4.0 / 3.0 + 2.0)).abs() < 1e-13, "n={n} s={s}");
        }
        assert!(simpson_weights(2, 1.0).is_err());
    }

    #[test]
    fn grid_layout() {
        let g = grid_at(0.7, 2);
        assert_eq!(g.nodes()[0], 0.7);
        assert_eq!(*g.nodes().last().unwrap(), g.a_max());
        assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
        assert!(g.weights().iter().all(|&w| w > 0.0));
        assert!(g.a_max() >= 0.7 + 8.0 * g.params().sigma_nu());
        assert!(g.params().nu_tail(g.a_max()) < NU_TAIL_LIMIT);
    }

    #[test]
    fn grid_rejects_degenerate_input() {
        let p = ModelParams::new(2).unwrap();
        assert!(Grid::uniform(1.0, 1.0, 101, p).is_err());
        assert!(Grid::uniform(1.0, 0.5, 101, p).is_err());
        assert!(build_grid(0.0, p, 10, 12.0).is_err());
        assert!(build_grid(0.0, p, 2001, 3.0).is_err());
        assert!(build_grid(f64::NAN, p, 2001, 12.0).is_err());
    }

    #[test]
    fn minimal_tail_sigmas_is_extended_to_the_tail_limit() {
        let p = ModelParams::new(2).unwrap();
        let g = build_grid(-3.0, p, 257, 6.0).unwrap();
        assert!(p.nu_tail(g.a_max()) < NU_TAIL_LIMIT);
    }

    #[test]
    fn evaluation_contract() {
        let g = grid_at(0.5, 2);
        let f = FieldFunction::from_fn(Arc::clone(&g), |x| 3.0 * x + 1.0);
        assert_eq!(f.eval(0.4999), 0.0);
        assert_eq!(f.eval(-100.0), 0.0);
        assert_eq!(f.eval(0.5), 2.5);
        assert_eq!(f.eval(g.a_max() + 5.0), *f.values().last().unwrap());
        // linear functions are reproduced between nodes
        for a in [0.5013, 1.0, 3.3333, 10.1] {
            assert!((f.eval(a) - (3.0 * a + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_product_basics() {
        let g = grid_at(-1.0, 2);
        let zero = FieldFunction::zeros(Arc::clone(&g));
        let one = FieldFunction::constant(Arc::clone(&g), 1.0);
        assert_eq!(inner_nu(&zero, &zero).unwrap(), 0.0);
        assert_eq!(norm_nu_p(&zero, 1.5).unwrap(), 0.0);
        let f = FieldFunction::from_fn(Arc::clone(&g), |x| x.sin());
        assert!(inner_nu(&f, &f).unwrap() > 0.0);
        let n2 = norm_nu_p(&f, 2.0).unwrap();
        assert!((n2 * n2 - inner_nu(&f, &f).unwrap()).abs() < 1e-14);
        let n1 = norm_nu_p(&f, 1.0).unwrap();
        assert!(n1 <= n2 * inner_nu(&one, &one).unwrap().sqrt() + 1e-15);
        assert!(norm_nu_p(&f, 0.5).is_err());
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let a = FieldFunction::zeros(grid_at(0.0, 2));
        let b = FieldFunction::zeros(grid_at(0.1, 2));
        assert!(matches!(inner_nu(&a, &b), Err(Error::GridMismatch)));
    }
}
