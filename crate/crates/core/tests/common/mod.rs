#![allow(dead_code)]

use fdrecon::grid::{DomainGrid, Interval};
use fdrecon::reconstruct::{ModelConfig, ReconstructionModel};
use fdrecon::scores::Quadrature;
use fdrecon::smoothing::{Bandwidths, CovarianceEstimate, MeanEstimate, NoiseVariance};
use fdrecon::{Curve, ObservationPair};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn unit_grid(len: usize) -> DomainGrid {
    DomainGrid::new(Interval::new(0.0, 1.0).unwrap(), len).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Model built from a known mean and covariance instead of estimates.
pub fn oracle_model(
    grid: &DomainGrid,
    mean: impl Fn(f64) -> f64,
    cov: impl Fn(f64, f64) -> f64,
    sigma2: f64,
    quadrature: Quadrature,
    complete: Vec<Curve>,
) -> ReconstructionModel {
    let mean = MeanEstimate::from_values(grid.clone(), grid.points().iter().map(|&u| mean(u)).collect(), 0.1);
    let cov = CovarianceEstimate::from_fn(grid, cov);
    let config = ModelConfig {
        quadrature,
        ..ModelConfig::default()
    };
    let bw = Bandwidths {
        h_x: 0.05,
        h_mu: 0.05,
        h_gamma: 0.05,
    };
    ReconstructionModel::from_parts(mean, cov, NoiseVariance { sigma2 }, bw, complete, config).unwrap()
}

/// Curve sampled from `f` at the given abscissae.
pub fn sampled(id: &str, us: &[f64], f: impl Fn(f64) -> f64) -> Curve {
    Curve::new(id, us.iter().map(|&u| ObservationPair::new(u, f(u))).collect()).unwrap()
}

/// `√2 sin(kπu)`, orthonormal on [0, 1].
pub fn sine(k: usize, u: f64) -> f64 {
    std::f64::consts::SQRT_2 * (k as f64 * std::f64::consts::PI * u).sin()
}

/// Finite-rank covariance `Σ λₖ ψₖ(u) ψₖ(v)` with sine/cosine components.
pub struct FiniteRank {
    pub lambdas: Vec<f64>,
}

impl FiniteRank {
    pub fn basis(&self, k: usize, u: f64) -> f64 {
        // Mix of even and odd shapes so the components are not supported
        // symmetrically around the domain centre.
        match k {
            0 => 1.0,
            1 => std::f64::consts::SQRT_2 * (std::f64::consts::PI * u).cos(),
            _ => sine(k - 1, u),
        }
    }

    pub fn cov(&self, u: f64, v: f64) -> f64 {
        self.lambdas
            .iter()
            .enumerate()
            .map(|(k, l)| l * self.basis(k, u) * self.basis(k, v))
            .sum()
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.lambdas.iter().map(|l| l.sqrt() * normal(rng)).collect()
    }

    pub fn eval(&self, xi: &[f64], u: f64) -> f64 {
        xi.iter().enumerate().map(|(k, x)| x * self.basis(k, u)).sum()
    }
}
