use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cluster::draw_root;
use super::rng::replica_rng;
use super::{Mode, SimConfig};
use crate::error::{Error, Result};
use crate::spectral::Eigenpair;

/// Sample means of `M_n = λ^{-n} Σ_{x ∈ Z_n} χ(φ_x)` per generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleTable {
    pub generation: Vec<u32>,
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub lambda: f64,
    pub replicas: u64,
}

/// One replica: `M_0, …, M_{n_max}` on the forward tree.
fn martingale_path(cfg: &SimConfig, eigen: &Eigenpair, n_max: u32, replica: u64) -> Result<Vec<f64>> {
    let mut rng = replica_rng(cfg.seed, replica);
    let root = draw_root(cfg, &mut rng);
    let inv_d = 1.0 / cfg.params.d_f64();
    let sigma_y = cfg.params.sigma_y();
    let d = cfg.params.d();
    let chi = &eigen.chi;

    let mut path = Vec::with_capacity(n_max as usize + 1);
    let mut generation: Vec<f64> = if root >= cfg.h { vec![root] } else { Vec::new() };
    let mut next = Vec::new();
    let mut total = generation.len() as u64;
    path.push(generation.iter().map(|&v| chi.eval(v)).sum::<f64>());
    let mut scale = 1.0;
    for _ in 1..=n_max {
        next.clear();
        for &v in &generation {
            let centre = v * inv_d;
            for _ in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                let child = centre + sigma_y * z;
                if child >= cfg.h {
                    next.push(child);
                }
            }
        }
        total += next.len() as u64;
        if total > cfg.size_cap {
            return Err(Error::CapExceeded {
                what: "martingale generations",
                cap: cfg.size_cap,
            });
        }
        std::mem::swap(&mut generation, &mut next);
        scale /= eigen.lambda;
        path.push(scale * generation.iter().map(|&v| chi.eval(v)).sum::<f64>());
    }
    Ok(path)
}

/// Simulates generations `Z_0 … Z_{n_max}` of the forward cluster and
/// averages the additive martingale built from `eigen` (solved at `cfg.h`).
pub fn martingale_paths(cfg: &SimConfig, eigen: &Eigenpair, n_max: u32) -> Result<MartingaleTable> {
    cfg.validate()?;
    if cfg.mode != Mode::Forward {
        return Err(Error::invalid("mode", "the martingale lives on the forward tree"));
    }
    if eigen.chi.grid().h() != cfg.h {
        return Err(Error::invalid(
            "eigen",
            format!(
                "eigenpair solved at h = {} but the simulation uses h = {}",
                eigen.chi.grid().h(),
                cfg.h
            ),
        ));
    }
    let paths: Vec<Vec<f64>> = (0..cfg.replicas)
        .into_par_iter()
        .map(|i| martingale_path(cfg, eigen, n_max, i))
        .collect::<Result<_>>()?;

    let n = cfg.replicas as f64;
    let k = n_max as usize + 1;
    let mut mean = vec![0.0; k];
    for p in &paths {
        for (g, &m) in p.iter().enumerate() {
            mean[g] += m;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut ss = vec![0.0; k];
    for p in &paths {
        for (g, &m) in p.iter().enumerate() {
            ss[g] += (m - mean[g]).powi(2);
        }
    }
    let std_err = ss.iter().map(|&s| (s / (n - 1.0).max(1.0) / n).sqrt()).collect();
    Ok(MartingaleTable {
        generation: (0..=n_max).collect(),
        mean,
        std_err,
        lambda: eigen.lambda,
        replicas: cfg.replicas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{GridSpec, ModelParams};
    use crate::simulator::RootLaw;
    use crate::spectral::{eigenpair_at, EIGEN_MAX_ITER, EIGEN_TOL};

    fn eigen(h: f64) -> Eigenpair {
        let p = ModelParams::new(2).unwrap();
        let spec = GridSpec {
            n_nodes: 601,
            tail_sigmas: 12.0,
        };
        eigenpair_at(h, &p, spec, EIGEN_TOL, EIGEN_MAX_ITER).unwrap().1
    }

    #[test]
    fn first_term_is_chi_of_the_root() {
        let e = eigen(0.5);
        let p = ModelParams::new(2).unwrap();
        let cfg = SimConfig::new(p, 0.5, RootLaw::Fixed { a: 1.3 }, Mode::Forward).with_replicas(50);
        let t = martingale_paths(&cfg, &e, 3).unwrap();
        assert!((t.mean[0] - e.chi.eval(1.3)).abs() < 1e-13);
        assert!(t.std_err[0] < 1e-12);
    }

    #[test]
    fn dead_root_gives_zero_paths() {
        let e = eigen(0.5);
        let p = ModelParams::new(2).unwrap();
        let cfg = SimConfig::new(p, 0.5, RootLaw::Fixed { a: 0.2 }, Mode::Forward).with_replicas(50);
        let t = martingale_paths(&cfg, &e, 5).unwrap();
        assert!(t.mean.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn level_and_mode_are_checked() {
        let e = eigen(0.5);
        let p = ModelParams::new(2).unwrap();
        let cfg = SimConfig::new(p, 0.6, RootLaw::Fixed { a: 1.0 }, Mode::Forward).with_replicas(5);
        assert!(martingale_paths(&cfg, &e, 2).is_err());
        let cfg = SimConfig::new(p, 0.5, RootLaw::Fixed { a: 1.0 }, Mode::Full).with_replicas(5);
        assert!(martingale_paths(&cfg, &e, 2).is_err());
    }
}
