//! Monte Carlo engine for the branching-process representation of the field.
//!
//! The field on the tree is generated generation by generation through
//! `φ_child = φ_parent/d + Y` with `Y ~ N(0, σ_Y²)`; vertices with value below
//! `h` are killed together with their descendants. Every replica draws from its
//! own counter-based stream (see [`rng`]), and results are reduced in replica
//! order, so outputs depend on `(config, seed)` only and never on the size of
//! the rayon pool they run on.

mod cluster;
mod coupling;
mod martingale;
pub mod rng;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::ModelParams;

pub use cluster::{
    depth_survival, simulate_cluster, simulate_replicas, stationary_path_value, tail_estimate,
    DepthSurvival, TailEstimate,
};
pub use coupling::{coupled_monotonicity, CouplingReport};
pub use martingale::{martingale_paths, MartingaleTable};

pub const DEFAULT_SIZE_CAP: u64 = 1_000_000;
pub const DEFAULT_DEPTH_CAP: u32 = 10_000;
pub const DEFAULT_SEED: u64 = 0x6ff7_2ee5;

/// Law of the root value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum RootLaw {
    /// `P_a`: the root value is fixed to `a`.
    Fixed { a: f64 },
    /// `P`: the root value is drawn from `ν = N(0, σ_ν²)`.
    Stationary,
}

/// Forward clusters give the root `d` children, full clusters `d + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Forward,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub params: ModelParams,
    pub h: f64,
    pub root: RootLaw,
    pub mode: Mode,
    pub size_cap: u64,
    pub depth_cap: u32,
    pub replicas: u64,
    pub seed: u64,
}

impl SimConfig {
    /// Config with the default caps, `10^5` replicas and the default seed.
    pub fn new(params: ModelParams, h: f64, root: RootLaw, mode: Mode) -> Self {
        Self {
            params,
            h,
            root,
            mode,
            size_cap: DEFAULT_SIZE_CAP,
            depth_cap: DEFAULT_DEPTH_CAP,
            replicas: 100_000,
            seed: DEFAULT_SEED,
        }
    }

    pub fn with_replicas(self, replicas: u64) -> Self {
        Self { replicas, ..self }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn with_caps(self, size_cap: u64, depth_cap: u32) -> Self {
        Self {
            size_cap,
            depth_cap,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size_cap < 1 {
            return Err(Error::invalid("size_cap", "must be at least 1"));
        }
        if self.depth_cap < 1 {
            return Err(Error::invalid("depth_cap", "must be at least 1"));
        }
        if self.replicas < 1 {
            return Err(Error::invalid("replicas", "must be at least 1"));
        }
        if !self.h.is_finite() {
            return Err(Error::invalid("h", format!("must be finite, got {}", self.h)));
        }
        if let RootLaw::Fixed { a } = self.root {
            if !a.is_finite() {
                return Err(Error::invalid("a", format!("must be finite, got {a}")));
            }
        }
        Ok(())
    }

    pub(crate) fn root_children(&self) -> u32 {
        match self.mode {
            Mode::Forward => self.params.d(),
            Mode::Full => self.params.d() + 1,
        }
    }
}

/// One simulated cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSample {
    /// Number of live vertices found (including the root).
    pub size: u64,
    pub max_depth: u32,
    /// The exploration hit `size_cap` or found a live vertex at `depth_cap`.
    pub censored: bool,
}
