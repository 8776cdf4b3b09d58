use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rng::replica_rng;
use super::{ClusterSample, RootLaw, SimConfig};
use crate::error::{Error, Result};
use crate::measures::ModelParams;

#[inline]
fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub(crate) fn draw_root<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> f64 {
    match cfg.root {
        RootLaw::Fixed { a } => a,
        RootLaw::Stationary => cfg.params.sigma_nu() * normal(rng),
    }
}

/// Breadth-first exploration of the cluster of the root, reusing `queue` as
/// the frontier. Only `(depth, value)` pairs are stored.
fn explore_bfs<R: Rng + ?Sized>(
    cfg: &SimConfig,
    rng: &mut R,
    queue: &mut VecDeque<(u32, f64)>,
) -> ClusterSample {
    queue.clear();
    let root = draw_root(cfg, rng);
    if root < cfg.h {
        return ClusterSample {
            size: 0,
            max_depth: 0,
            censored: false,
        };
    }
    let d = cfg.params.d();
    let inv_d = 1.0 / cfg.params.d_f64();
    let sigma_y = cfg.params.sigma_y();
    let mut size = 1u64;
    let mut max_depth = 0u32;
    let mut censored = size >= cfg.size_cap;
    if !censored {
        queue.push_back((0, root));
    }
    'explore: while let Some((depth, value)) = queue.pop_front() {
        if depth >= cfg.depth_cap {
            censored = true;
            continue;
        }
        let children = if depth == 0 { cfg.root_children() } else { d };
        let centre = value * inv_d;
        for _ in 0..children {
            let child = centre + sigma_y * normal(rng);
            if child >= cfg.h {
                size += 1;
                max_depth = max_depth.max(depth + 1);
                if size >= cfg.size_cap {
                    censored = true;
                    break 'explore;
                }
                queue.push_back((depth + 1, child));
            }
        }
    }
    ClusterSample {
        size,
        max_depth,
        censored,
    }
}

/// Explores one cluster breadth-first until it dies out or hits a cap.
pub fn simulate_cluster<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> ClusterSample {
    let mut queue = VecDeque::new();
    explore_bfs(cfg, rng, &mut queue)
}

/// All replicas of `cfg`, in replica order.
pub fn simulate_replicas(cfg: &SimConfig) -> Result<Vec<ClusterSample>> {
    cfg.validate()?;
    Ok((0..cfg.replicas)
        .into_par_iter()
        .map_init(VecDeque::new, |queue, i| {
            explore_bfs(cfg, &mut replica_rng(cfg.seed, i), queue)
        })
        .collect())
}

/// Empirical survival function `P[T > t]` of the cluster size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub t_grid: Vec<u64>,
    pub survival: Vec<f64>,
    pub std_err: Vec<f64>,
    pub n_censored: u64,
    pub replicas: u64,
    pub config_echo: SimConfig,
}

fn binomial_se(p: f64, n: u64) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// `P[T > t]` for every `t` in `t_grid`. Censored replicas count as `T > t`,
/// which is exact because every recorded `t` is below both caps.
pub fn tail_estimate(cfg: &SimConfig, t_grid: &[u64]) -> Result<TailEstimate> {
    cfg.validate()?;
    if t_grid.is_empty() || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("t_grid", "must be non-empty and strictly increasing"));
    }
    let t_max = *t_grid.last().unwrap();
    if t_max >= cfg.size_cap {
        return Err(Error::invalid(
            "t_grid",
            format!("largest t = {t_max} must be below size_cap = {}", cfg.size_cap),
        ));
    }
    if t_max > u64::from(cfg.depth_cap) {
        return Err(Error::invalid(
            "t_grid",
            format!("largest t = {t_max} must not exceed depth_cap = {}", cfg.depth_cap),
        ));
    }

    let k = t_grid.len();
    let zero = || (vec![0u64; k], 0u64);
    let (counts, n_censored) = (0..cfg.replicas)
        .into_par_iter()
        .map_init(VecDeque::new, |queue, i| {
            explore_bfs(cfg, &mut replica_rng(cfg.seed, i), queue)
        })
        .fold(zero, |(mut counts, mut censored), s| {
            for (c, &t) in counts.iter_mut().zip(t_grid) {
                if s.censored || s.size > t {
                    *c += 1;
                }
            }
            censored += u64::from(s.censored);
            (counts, censored)
        })
        .reduce(zero, |(mut a, ca), (b, cb)| {
            a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            (a, ca + cb)
        });

    let n = cfg.replicas;
    let survival: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let std_err = survival.iter().map(|&p| binomial_se(p, n)).collect();
    Ok(TailEstimate {
        t_grid: t_grid.to_vec(),
        survival,
        std_err,
        n_censored,
        replicas: n,
        config_echo: *cfg,
    })
}

/// Fraction of replicas whose cluster reaches generation `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthSurvival {
    pub depth: u32,
    pub estimate: f64,
    pub std_err: f64,
    pub survivors: u64,
    /// Replicas that visited `size_cap` vertices without reaching depth `n`;
    /// they are counted as survivors.
    pub n_censored: u64,
    pub replicas: u64,
}

/// Depth-first search for a live vertex at depth `n`, stopping at the first hit.
fn reaches_depth<R: Rng + ?Sized>(
    cfg: &SimConfig,
    n: u32,
    rng: &mut R,
    stack: &mut Vec<(u32, f64)>,
) -> (bool, bool) {
    stack.clear();
    let root = draw_root(cfg, rng);
    if root < cfg.h {
        return (false, false);
    }
    if n == 0 {
        return (true, false);
    }
    let d = cfg.params.d();
    let inv_d = 1.0 / cfg.params.d_f64();
    let sigma_y = cfg.params.sigma_y();
    let mut visited = 1u64;
    stack.push((0, root));
    while let Some((depth, value)) = stack.pop() {
        let children = if depth == 0 { cfg.root_children() } else { d };
        let centre = value * inv_d;
        for _ in 0..children {
            let child = centre + sigma_y * normal(rng);
            if child >= cfg.h {
                if depth + 1 == n {
                    return (true, false);
                }
                visited += 1;
                if visited >= cfg.size_cap {
                    return (true, true);
                }
                stack.push((depth + 1, child));
            }
        }
    }
    (false, false)
}

pub fn depth_survival(cfg: &SimConfig, n: u32) -> Result<DepthSurvival> {
    cfg.validate()?;
    if n > cfg.depth_cap {
        return Err(Error::invalid(
            "n",
            format!("depth {n} exceeds depth_cap = {}", cfg.depth_cap),
        ));
    }
    let (survivors, n_censored) = (0..cfg.replicas)
        .into_par_iter()
        .map_init(Vec::new, |stack, i| {
            reaches_depth(cfg, n, &mut replica_rng(cfg.seed, i), stack)
        })
        .fold(
            || (0u64, 0u64),
            |(s, c), (hit, cens)| (s + u64::from(hit), c + u64::from(cens)),
        )
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let estimate = survivors as f64 / cfg.replicas as f64;
    Ok(DepthSurvival {
        depth: n,
        estimate,
        std_err: binomial_se(estimate, cfg.replicas),
        survivors,
        n_censored,
        replicas: cfg.replicas,
    })
}

/// Value at depth `depth` along a single path started from `ν`, without killing.
pub fn stationary_path_value<R: Rng + ?Sized>(params: &ModelParams, depth: u32, rng: &mut R) -> f64 {
    let inv_d = 1.0 / params.d_f64();
    let sigma_y = params.sigma_y();
    let mut v = params.sigma_nu() * normal(rng);
    for _ in 0..depth {
        v = v * inv_d + sigma_y * normal(rng);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::Mode;

    fn cfg(h: f64, a: f64, mode: Mode) -> SimConfig {
        SimConfig::new(ModelParams::new(2).unwrap(), h, RootLaw::Fixed { a }, mode)
    }

    #[test]
    fn dead_root_gives_empty_cluster() {
        let c = cfg(1.0, 0.5, Mode::Forward);
        let s = simulate_cluster(&c, &mut replica_rng(1, 0));
        assert_eq!(
            s,
            ClusterSample {
                size: 0,
                max_depth: 0,
                censored: false
            }
        );
    }

    #[test]
    fn live_root_counts_itself() {
        let c = cfg(1.0, 1.0, Mode::Forward).with_replicas(200);
        for s in simulate_replicas(&c).unwrap() {
            assert!(s.size >= 1);
            assert!(!s.censored || s.size == c.size_cap || s.max_depth == c.depth_cap);
        }
    }

    #[test]
    fn caps_censor() {
        // no killing: the cluster is the whole tree
        let c = cfg(-1e9, 0.0, Mode::Forward).with_caps(1000, 10_000);
        let s = simulate_cluster(&c, &mut replica_rng(3, 0));
        assert!(s.censored && s.size == 1000);
        let c = cfg(-1e9, 0.0, Mode::Full).with_caps(1_000_000, 3);
        let s = simulate_cluster(&c, &mut replica_rng(3, 0));
        assert!(s.censored && s.max_depth == 3);
        assert_eq!(s.size, 1 + 3 + 6 + 12);
    }

    #[test]
    fn tail_rejects_grids_beyond_the_caps() {
        let c = cfg(1.0, 1.0, Mode::Forward).with_caps(100, 10_000).with_replicas(10);
        assert!(tail_estimate(&c, &[10, 100]).is_err());
        assert!(tail_estimate(&c, &[10, 5]).is_err());
        assert!(tail_estimate(&c, &[]).is_err());
        let c = c.with_caps(1000, 50);
        assert!(tail_estimate(&c, &[10, 100]).is_err());
    }

    #[test]
    fn tail_is_zero_when_the_root_is_dead() {
        let c = cfg(11.0, 1.0, Mode::Forward).with_replicas(1000);
        let t = tail_estimate(&c, &[1, 2, 5, 10]).unwrap();
        assert!(t.survival.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn tail_is_monotone() {
        let c = cfg(0.8, 1.0, Mode::Forward).with_replicas(2000);
        let t = tail_estimate(&c, &[1, 2, 5, 10, 20, 50, 100]).unwrap();
        assert!(t.survival.windows(2).all(|w| w[1] <= w[0]));
        assert!(t.survival.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn depth_zero_survival_is_exact() {
        let c = cfg(1.0, 1.5, Mode::Forward).with_replicas(100);
        let r = depth_survival(&c, 0).unwrap();
        assert_eq!(r.estimate, 1.0);
        assert_eq!(r.std_err, 0.0);
        let c = cfg(1.0, 0.5, Mode::Forward).with_replicas(100);
        assert_eq!(depth_survival(&c, 0).unwrap().estimate, 0.0);
        assert!(depth_survival(&c.with_caps(100, 5), 6).is_err());
    }

    #[test]
    fn bfs_and_dfs_agree_on_reaching_a_depth() {
        // survival to depth n equals P[max_depth >= n] of the BFS exploration
        let c = cfg(0.9, 1.5, Mode::Forward).with_replicas(4000).with_caps(1_000_000, 10_000);
        let n = 6;
        let bfs = simulate_replicas(&c).unwrap();
        let p_bfs = bfs.iter().filter(|s| s.max_depth >= n).count() as f64 / 4000.0;
        let dfs = depth_survival(&c.with_seed(99), n).unwrap();
        let se = (dfs.std_err.powi(2) * 2.0).sqrt();
        assert!((p_bfs - dfs.estimate).abs() < 4.0 * se, "{p_bfs} vs {}", dfs.estimate);
    }
}
