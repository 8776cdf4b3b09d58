use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rng::replica_rng;
use crate::error::{Error, Result};
use crate::measures::ModelParams;

/// Outcome of running the recursion from roots `a <= b` with shared noise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub replicas: u64,
    pub vertices: u64,
    /// Vertices where the `b`-field is below the `a`-field.
    pub field_violations: u64,
    /// Vertices alive in the `a`-run but dead in the `b`-run.
    pub liveness_violations: u64,
    /// Replicas where the `b`-cluster is smaller than the `a`-cluster.
    pub size_order_violations: u64,
    /// Vertices where the two runs differ at all (zero iff `a == b`).
    pub differing_vertices: u64,
    pub n_censored: u64,
}

impl CouplingReport {
    pub fn violations(&self) -> u64 {
        self.field_violations + self.liveness_violations
    }

    fn merge(self, o: Self) -> Self {
        Self {
            replicas: self.replicas + o.replicas,
            vertices: self.vertices + o.vertices,
            field_violations: self.field_violations + o.field_violations,
            liveness_violations: self.liveness_violations + o.liveness_violations,
            size_order_violations: self.size_order_violations + o.size_order_violations,
            differing_vertices: self.differing_vertices + o.differing_vertices,
            n_censored: self.n_censored + o.n_censored,
        }
    }
}

struct Node {
    depth: u32,
    va: f64,
    vb: f64,
    alive_a: bool,
    alive_b: bool,
}

fn coupled_replica(params: &ModelParams, a: f64, b: f64, h: f64, depth: u32, size_cap: u64, seed: u64, replica: u64) -> CouplingReport {
    let mut rng = replica_rng(seed, replica);
    let inv_d = 1.0 / params.d_f64();
    let sigma_y = params.sigma_y();
    let mut rep = CouplingReport {
        replicas: 1,
        ..Default::default()
    };
    let root = Node {
        depth: 0,
        va: a,
        vb: b,
        alive_a: a >= h,
        alive_b: b >= h,
    };
    let (mut size_a, mut size_b) = (u64::from(root.alive_a), u64::from(root.alive_b));
    if root.alive_a && !root.alive_b {
        rep.liveness_violations += 1;
    }
    let mut stack = Vec::new();
    if root.alive_a || root.alive_b {
        stack.push(root);
    }
    while let Some(node) = stack.pop() {
        if node.depth >= depth {
            continue;
        }
        for _ in 0..params.d() {
            let y = sigma_y * rng.sample::<f64, _>(StandardNormal);
            let va = node.va * inv_d + y;
            let vb = node.vb * inv_d + y;
            let alive_a = node.alive_a && va >= h;
            let alive_b = node.alive_b && vb >= h;
            rep.vertices += 1;
            rep.field_violations += u64::from(vb < va);
            rep.liveness_violations += u64::from(alive_a && !alive_b);
            rep.differing_vertices += u64::from(va != vb || alive_a != alive_b);
            size_a += u64::from(alive_a);
            size_b += u64::from(alive_b);
            if alive_a || alive_b {
                stack.push(Node {
                    depth: node.depth + 1,
                    va,
                    vb,
                    alive_a,
                    alive_b,
                });
            }
        }
        if rep.vertices >= size_cap {
            rep.n_censored = 1;
            break;
        }
    }
    rep.size_order_violations = u64::from(size_b < size_a);
    rep
}

/// Runs the recursion twice per replica, from roots `a` and `b`, with the same
/// innovation at every vertex, exploring the union of the two clusters down
/// to `depth`.
pub fn coupled_monotonicity(
    params: &ModelParams,
    a: f64,
    b: f64,
    h: f64,
    depth: u32,
    replicas: u64,
    seed: u64,
    size_cap: u64,
) -> Result<CouplingReport> {
    if !(a <= b) {
        return Err(Error::invalid("b", format!("need a <= b, got a = {a}, b = {b}")));
    }
    if replicas < 1 || size_cap < 1 {
        return Err(Error::invalid("replicas", "replicas and size_cap must be positive"));
    }
    Ok((0..replicas)
        .into_par_iter()
        .map(|i| coupled_replica(params, a, b, h, depth, size_cap, seed, i))
        .reduce(CouplingReport::default, CouplingReport::merge))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domination_holds_pathwise() {
        let p = ModelParams::new(2).unwrap();
        let r = coupled_monotonicity(&p, 0.8, 1.6, 1.0, 12, 500, 11, 1_000_000).unwrap();
        assert_eq!(r.violations(), 0);
        assert_eq!(r.size_order_violations, 0);
        assert!(r.vertices > 0 && r.differing_vertices > 0);
    }

    #[test]
    fn equal_roots_give_identical_runs() {
        let p = ModelParams::new(3).unwrap();
        let r = coupled_monotonicity(&p, 1.2, 1.2, 1.0, 10, 300, 5, 1_000_000).unwrap();
        assert_eq!(r.differing_vertices, 0);
        assert_eq!(r.violations(), 0);
    }

    #[test]
    fn reversed_roots_are_rejected() {
        let p = ModelParams::new(2).unwrap();
        assert!(coupled_monotonicity(&p, 2.0, 1.0, 1.0, 5, 10, 1, 100).is_err());
    }
}
