//! Uniform evaluation grids and the small amount of quadrature and
//! interpolation machinery built on top of them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::InvalidArgument(format!(
                "interval [{lo}, {hi}] must be finite with hi > lo"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, u: f64) -> bool {
        u >= self.lo && u <= self.hi
    }

    pub fn contains_tol(&self, u: f64, tol: f64) -> bool {
        u >= self.lo - tol && u <= self.hi + tol
    }
}

/// `L` equally spaced points from `a` to `b` inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainGrid {
    points: Vec<f64>,
    spacing: f64,
}

impl DomainGrid {
    pub fn new(domain: Interval, len: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 2 points, got {len}"
            )));
        }
        let spacing = domain.len() / (len - 1) as f64;
        let mut points: Vec<f64> = (0..len)
            .map(|r| domain.lo + r as f64 * spacing)
            .collect();
        points[len - 1] = domain.hi;
        Ok(Self { points, spacing })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn a(&self) -> f64 {
        self.points[0]
    }

    pub fn b(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn domain(&self) -> Interval {
        Interval {
            lo: self.a(),
            hi: self.b(),
        }
    }

    /// Tolerance used when deciding whether an abscissa sits on a grid point.
    pub fn tol(&self) -> f64 {
        1e-9 * (self.b() - self.a())
    }

    /// Cell index `r` and fraction `t` with `u = (1-t) u_r + t u_{r+1}`.
    /// Points outside the grid are clamped to the end cells.
    pub fn locate(&self, u: f64) -> (usize, f64) {
        let last = self.len() - 1;
        let pos = ((u - self.a()) / self.spacing).clamp(0.0, last as f64);
        let r = (pos.floor() as usize).min(last - 1);
        (r, pos - r as f64)
    }

    /// Index of the grid point nearest to `u`.
    pub fn nearest(&self, u: f64) -> usize {
        let pos = ((u - self.a()) / self.spacing).round();
        pos.clamp(0.0, (self.len() - 1) as f64) as usize
    }

    /// Linear interpolation of gridded `values` at `u`.
    pub fn interpolate(&self, values: &[f64], u: f64) -> f64 {
        let (r, t) = self.locate(u);
        if t == 0.0 {
            return values[r];
        }
        (1.0 - t) * values[r] + t * values[r + 1]
    }

    /// Indices `r` with `u_r` in the interval (grid-tolerant at both ends).
    pub fn indices_in(&self, iv: Interval) -> std::ops::Range<usize> {
        let tol = self.tol();
        let lo = ((iv.lo - tol - self.a()) / self.spacing).ceil().max(0.0) as usize;
        let hi = ((iv.hi + tol - self.a()) / self.spacing).floor();
        if hi < 0.0 {
            return 0..0;
        }
        let hi = (hi as usize).min(self.len() - 1);
        if lo > hi {
            lo..lo
        } else {
            lo..hi + 1
        }
    }

    /// Index range of grid points `u_r` with `|u_r - u| < h`.
    pub fn window(&self, u: f64, h: f64) -> std::ops::Range<usize> {
        let n = self.len();
        let guess = ((u - h - self.a()) / self.spacing).floor();
        let mut lo = guess.clamp(0.0, n as f64) as usize;
        while lo > 0 && u - self.points[lo - 1] < h {
            lo -= 1;
        }
        while lo < n && u - self.points[lo] >= h {
            lo += 1;
        }
        let mut hi = lo;
        while hi < n && self.points[hi] - u < h {
            hi += 1;
        }
        lo..hi
    }
}

/// Trapezoid weights over a run of `n` consecutive grid points.
/// A single isolated point receives the full spacing.
pub fn trapezoid_weights(n: usize, spacing: f64) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![spacing],
        _ => {
            let mut w = vec![spacing; n];
            w[0] *= 0.5;
            w[n - 1] *= 0.5;
            w
        }
    }
}

/// Trapezoid integral of gridded values over the whole grid.
pub fn integrate(grid: &DomainGrid, values: &[f64]) -> f64 {
    trapezoid_weights(grid.len(), grid.spacing())
        .iter()
        .zip(values)
        .map(|(w, v)| w * v)
        .sum()
}
