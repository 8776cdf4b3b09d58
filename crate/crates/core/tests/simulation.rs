use std::sync::{Arc, OnceLock};

use gfftree::fixedpoint::solve_eta_plus;
use gfftree::measures::{Grid, GridSpec, ModelParams};
use gfftree::simulator::rng::replica_rng;
use gfftree::simulator::{
    coupled_monotonicity, depth_survival, simulate_cluster, simulate_replicas, stationary_path_value, tail_estimate,
    Mode, RootLaw, SimConfig,
};
use gfftree::spectral::BISECTION_TOL;
use gfftree::CriticalData;
use statrs::function::erf::erfc;

fn params() -> ModelParams {
    ModelParams::new(2).unwrap()
}

fn critical() -> &'static CriticalData {
    static CD: OnceLock<CriticalData> = OnceLock::new();
    CD.get_or_init(|| {
        let spec = GridSpec {
            n_nodes: 1001,
            tail_sigmas: 12.0,
        };
        CriticalData::solve(&params(), spec, BISECTION_TOL).unwrap()
    })
}

fn choose(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1))
}

#[test]
fn first_generation_is_binomial() {
    let p = params();
    let (h, a) = (0.8, 1.1);
    let q = 0.5 * erfc((h - a / 2.0) / (p.sigma_y() * 2f64.sqrt()));
    for (mode, n) in [(Mode::Forward, 2), (Mode::Full, 3)] {
        let cfg = SimConfig::new(p, h, RootLaw::Fixed { a }, mode)
            .with_replicas(100_000)
            .with_caps(u64::MAX, 1)
            .with_seed(99);
        let samples = simulate_replicas(&cfg).unwrap();
        let total = samples.len() as f64;
        for k in 0..=n {
            let pk = choose(n, k) * q.powi(k as i32) * (1.0 - q).powi((n - k) as i32);
            let observed = samples.iter().filter(|s| s.size == 1 + u64::from(k)).count() as f64;
            let se = (total * pk * (1.0 - pk)).sqrt();
            assert!((observed - total * pk).abs() <= 4.0 * se, "{mode:?} k={k}: {observed} vs {}", total * pk);
        }
    }
}

#[test]
fn stationary_marginals_are_preserved() {
    let p = params();
    let n = 100_000u64;
    for depth in [1, 5, 30] {
        let xs: Vec<f64> = (0..n)
            .map(|i| stationary_path_value(&p, depth, &mut replica_rng(17, i)))
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 * p.sigma_nu() / (n as f64).sqrt(), "depth {depth}: mean {mean}");
        assert!((var / p.sigma_nu_sq() - 1.0).abs() < 0.02, "depth {depth}: var {var}");
    }
}

#[test]
fn results_do_not_depend_on_the_pool_size() {
    let p = params();
    let cfg = SimConfig::new(p, 1.0, RootLaw::Stationary, Mode::Full)
        .with_replicas(5_000)
        .with_caps(50_000, 1_000)
        .with_seed(3);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            (
                simulate_replicas(&cfg).unwrap(),
                tail_estimate(&cfg, &[1, 10, 100, 1000]).unwrap(),
                depth_survival(&cfg, 50).unwrap(),
            )
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn root_below_the_level_gives_nothing() {
    let cfg = SimConfig::new(params(), 11.0, RootLaw::Fixed { a: 1.0 }, Mode::Forward).with_replicas(1000);
    let t = tail_estimate(&cfg, &[1, 2, 5, 10]).unwrap();
    assert!(t.survival.iter().all(|&s| s == 0.0));
    let s = simulate_cluster(&cfg, &mut replica_rng(0, 0));
    assert_eq!(s.size, 0);
    assert!(!s.censored);
}

#[test]
fn supercritical_depth_survival_matches_the_solver() {
    let cd = critical();
    let p = params();
    let h = cd.h_star - 0.3;
    let a = cd.h_star + 1.0;
    let grid = Arc::new(Grid::build(h, p, cd.grid_spec).unwrap());
    let eta = solve_eta_plus(h, grid, &p, 1e-12, 1_000_000).unwrap();
    let cfg = SimConfig::new(p, h, RootLaw::Fixed { a }, Mode::Forward)
        .with_replicas(20_000)
        .with_seed(5);
    let ds = depth_survival(&cfg, 100).unwrap();
    let target = eta.solution.eval(a);
    assert!(
        (ds.estimate - target).abs() <= 3.0 * ds.std_err,
        "MC {} ± {} vs solver {target}",
        ds.estimate,
        ds.std_err
    );
}

#[test]
fn critical_depth_survival_decreases() {
    let cd = critical();
    let cfg = SimConfig::new(params(), cd.h_star, RootLaw::Fixed { a: cd.h_star + 1.0 }, Mode::Forward)
        .with_replicas(20_000)
        .with_seed(8);
    let s: Vec<f64> = [50, 100, 200].iter().map(|&n| depth_survival(&cfg, n).unwrap().estimate).collect();
    assert!(s[0] > s[1] && s[1] > s[2], "{s:?}");
}

#[test]
fn coupling_orders_every_replica() {
    let p = ModelParams::new(3).unwrap();
    for (a, b) in [(0.5, 0.6), (1.0, 3.0), (-1.0, 1.2)] {
        let r = coupled_monotonicity(&p, a, b, 0.6, 15, 2_000, 21, 1_000_000).unwrap();
        assert_eq!(r.violations(), 0);
        assert_eq!(r.size_order_violations, 0);
        assert_eq!(r.replicas, 2_000);
    }
}
