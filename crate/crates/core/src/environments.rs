//! Benchmark environments: random walks on a ring and a torus under a fixed
//! smooth policy, and random walks on dense or sparse random digraphs.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mdp::{induce_policy_model, InducedModel, Policy, TabularMdp};
use crate::sampling::RandomStream;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Circle,
    Torus,
    RandomDense,
    RandomSparse,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Circle => "circle",
            Family::Torus => "torus",
            Family::RandomDense => "random_dense",
            Family::RandomSparse => "random_sparse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "circle" => Some(Family::Circle),
            "torus" => Some(Family::Torus),
            "random_dense" => Some(Family::RandomDense),
            "random_sparse" => Some(Family::RandomSparse),
            _ => None,
        }
    }
}

/// Parameters of one environment instance.
///
/// `size` is the ring length for [`Family::Circle`], the side of the grid for
/// [`Family::Torus`] (so `size²` states) and the vertex count for the graph
/// families. `sigma` and `delta` are ignored by the graph families, `seed` by
/// the geometric ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvConfig {
    pub family: Family,
    pub size: usize,
    pub sigma: usize,
    pub delta: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl EnvConfig {
    pub fn circle(sigma: usize, delta: f64) -> Self {
        Self {
            family: Family::Circle,
            size: 64,
            sigma,
            delta,
            gamma: 0.9,
            seed: 0,
        }
    }

    pub fn torus(sigma: usize, delta: f64) -> Self {
        Self {
            family: Family::Torus,
            size: 8,
            sigma,
            delta,
            gamma: 0.9,
            seed: 0,
        }
    }

    pub fn random_dense(size: usize, seed: u64) -> Self {
        Self {
            family: Family::RandomDense,
            size,
            sigma: 0,
            delta: 0.0,
            gamma: 0.9,
            seed,
        }
    }

    pub fn random_sparse(size: usize, seed: u64) -> Self {
        Self {
            family: Family::RandomSparse,
            ..Self::random_dense(size, seed)
        }
    }

    pub fn num_states(&self) -> usize {
        match self.family {
            Family::Torus => self.size * self.size,
            _ => self.size,
        }
    }

    /// The policy-induced model for every family.
    pub fn build<T: Real>(&self) -> Result<InducedModel<T>> {
        match self.family {
            Family::Circle => {
                let (mdp, policy) = circle_env(self)?;
                induce_policy_model(&mdp, &policy)
            }
            Family::Torus => {
                let (mdp, policy) = torus_env(self)?;
                induce_policy_model(&mdp, &policy)
            }
            Family::RandomDense => random_dense_env(self.size, self.gamma, self.seed),
            Family::RandomSparse => random_sparse_env(self.size, self.gamma, self.seed),
        }
    }
}

fn check_geometric(cfg: &EnvConfig) -> Result<()> {
    if cfg.size == 0 {
        return Err(Error::InvalidArgument("environment size must be positive".into()));
    }
    if cfg.sigma == 0 {
        return Err(Error::InvalidArgument("sigma must be at least 1".into()));
    }
    if !(cfg.delta >= 0.0 && cfg.delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("delta must be nonnegative, got {}", cfg.delta)));
    }
    Ok(())
}

/// Uniform mass over `(s + (1 + z)·step) mod n` for `z ∈ {−σ, …, σ}`;
/// colliding offsets accumulate.
fn spread_targets(s: i64, step: i64, sigma: i64, n: i64) -> Vec<(usize, f64)> {
    let w = 1.0 / (2 * sigma + 1) as f64;
    (-sigma..=sigma)
        .map(|z| ((s + (1 + z) * step).rem_euclid(n) as usize, w))
        .collect()
}

fn to_matrix<T: Real>(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> DMatrix<T> {
    DMatrix::from_fn(rows, cols, |i, j| T::lit(f(i, j)))
}

/// Ring of `size` states with actions `±1`.
pub fn circle_env<T: Real>(cfg: &EnvConfig) -> Result<(TabularMdp<T>, Policy<T>)> {
    check_geometric(cfg)?;
    let n = cfg.size;
    let actions = [1i64, -1];
    let kernels = actions
        .iter()
        .map(|&a| {
            let mut k = DMatrix::<T>::zeros(n, n);
            for s in 0..n {
                for (t, w) in spread_targets(s as i64, a, cfg.sigma as i64, n as i64) {
                    k[(s, t)] += T::lit(w);
                }
            }
            k
        })
        .collect();
    let phase = |s: usize| TAU * s as f64 / n as f64;
    let reward = to_matrix(n, 2, |s, a| phase(s).sin() + actions[a] as f64 * phase(s).cos() / 10.0);
    let noise = to_matrix(n, 2, |_, _| cfg.delta);
    let policy = to_matrix(n, 2, |s, a| 0.5 + actions[a] as f64 * phase(s).sin() / 5.0);
    Ok((
        TabularMdp::new(kernels, reward, noise, T::lit(cfg.gamma))?,
        Policy::new(policy)?,
    ))
}

/// Action set of the torus: `(1,0), (−1,0), (0,1), (0,−1)`.
pub const TORUS_ACTIONS: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

/// `size × size` torus; state `(i, j)` has index `i·size + j`.
pub fn torus_env<T: Real>(cfg: &EnvConfig) -> Result<(TabularMdp<T>, Policy<T>)> {
    check_geometric(cfg)?;
    let n = cfg.size;
    let states = n * n;
    let sigma = cfg.sigma as i64;
    let kernels = TORUS_ACTIONS
        .iter()
        .map(|&(a1, a2)| {
            let mut k = DMatrix::<T>::zeros(states, states);
            for s in 0..states {
                let (i, j) = ((s / n) as i64, (s % n) as i64);
                let rows = spread_targets(i, a1, sigma, n as i64);
                let cols = spread_targets(j, a2, sigma, n as i64);
                // The same z moves both coordinates.
                for ((ti, w), (tj, _)) in rows.into_iter().zip(cols) {
                    k[(s, ti * n + tj)] += T::lit(w);
                }
            }
            k
        })
        .collect();
    let phase = |x: usize| TAU * x as f64 / n as f64;
    let reward = to_matrix(states, 4, |s, _| 2.0 + phase(s / n).sin() + phase(s % n).cos());
    let noise = to_matrix(states, 4, |_, _| cfg.delta);
    let policy = to_matrix(states, 4, |s, a| {
        let (a1, a2) = TORUS_ACTIONS[a];
        0.25 + (a1 as f64 * phase(s / n).cos() + a2 as f64 * phase(s % n).sin()) / 20.0
    });
    Ok((
        TabularMdp::new(kernels, reward, noise, T::lit(cfg.gamma))?,
        Policy::new(policy)?,
    ))
}

fn normalize_weights<T: Real>(w: DMatrix<f64>) -> DMatrix<T> {
    let sums: Vec<f64> = w.row_iter().map(|r| r.sum()).collect();
    to_matrix(w.nrows(), w.ncols(), |i, j| w[(i, j)] / sums[i])
}

fn gaussian_reward<T: Real>(size: usize, rng: &mut impl Rng) -> DVector<T> {
    DVector::from_fn(size, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Random walk on the complete digraph with `U(0,1)` edge weights (self-loops
/// included) and a standard-normal reward; rewards are observed exactly.
pub fn random_dense_env<T: Real>(size: usize, gamma: f64, seed: u64) -> Result<InducedModel<T>> {
    if size < 2 {
        return Err(Error::InvalidArgument("dense graph needs at least 2 vertices".into()));
    }
    let mut rng = RandomStream::new(seed).rng();
    // Strictly positive, so every row sum is too.
    let weights = DMatrix::from_fn(size, size, |_, _| loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    });
    let p = normalize_weights(weights);
    let b = gaussian_reward(size, &mut rng);
    InducedModel::new(p, b, T::lit(gamma))
}

/// Random walk on a sparse digraph: every vertex `v` draws two distinct
/// vertices `v₁, v₂ ≠ v` and adds the edges `v₁ → v` and `v → v₂`. Repeated
/// edges collapse onto one unit weight.
pub fn random_sparse_env<T: Real>(size: usize, gamma: f64, seed: u64) -> Result<InducedModel<T>> {
    if size < 3 {
        return Err(Error::InvalidArgument("sparse graph needs at least 3 vertices".into()));
    }
    let mut rng = RandomStream::new(seed).rng();
    let mut adjacency = DMatrix::<f64>::zeros(size, size);
    for v in 0..size {
        let picks = sample(&mut rng, size - 1, 2);
        let other = |k: usize| if k >= v { k + 1 } else { k };
        let (v1, v2) = (other(picks.index(0)), other(picks.index(1)));
        adjacency[(v1, v)] = 1.0;
        adjacency[(v, v2)] = 1.0;
    }
    let p = normalize_weights(adjacency);
    let b = gaussian_reward(size, &mut rng);
    InducedModel::new(p, b, T::lit(gamma))
}
