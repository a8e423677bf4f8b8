//! Eigen-analysis of the smoothed covariance restricted to an observed
//! subdomain, and the extension of the eigenfunctions to the whole grid.
//!
//! The integral operator `x ↦ ∫_O γ(·,v) x(v) dv` is discretized with
//! trapezoid weights `w` on the grid points inside `O`. Its eigenproblem is
//! solved in the symmetric form `W^{1/2} G W^{1/2}`, so that
//! `φ = W^{-1/2} e` is orthonormal under the same quadrature.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{trapezoid_weights, DomainGrid, Interval};
use crate::reconstruct::fmt_opt;
use crate::smoothing::{write_comment, CovarianceEstimate};
use std::io::Write;

pub const DEFAULT_LAMBDA_REL_FLOOR: f64 = 1e-8;

/// Relative eigengap below which a pair is reported as near-degenerate.
const DEGENERATE_GAP: f64 = 1e-10;

/// Union of disjoint intervals together with the grid points it contains.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Subdomain {
    intervals: Vec<Interval>,
    grid_indices: Vec<usize>,
    /// Grid index ranges, one per interval that contains grid points.
    blocks: Vec<(usize, usize)>,
}

impl Subdomain {
    pub fn new(mut intervals: Vec<Interval>, grid: &DomainGrid) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::InvalidArgument("subdomain without intervals".into()));
        }
        intervals.sort_by(|p, q| p.lo.total_cmp(&q.lo));
        for w in intervals.windows(2) {
            if w[1].lo <= w[0].hi {
                return Err(Error::InvalidArgument(format!(
                    "subdomain intervals [{}, {}] and [{}, {}] overlap",
                    w[0].lo, w[0].hi, w[1].lo, w[1].hi
                )));
            }
        }
        let mut grid_indices = Vec::new();
        let mut blocks = Vec::new();
        for iv in &intervals {
            let range = grid.indices_in(*iv);
            if range.is_empty() {
                continue;
            }
            let start = match grid_indices.last() {
                Some(&last) if range.start <= last => last + 1,
                _ => range.start,
            };
            if start < range.end {
                blocks.push((start, range.end));
                grid_indices.extend(start..range.end);
            }
        }
        if grid_indices.is_empty() {
            return Err(Error::InvalidArgument(
                "subdomain contains no grid points".into(),
            ));
        }
        Ok(Self {
            intervals,
            grid_indices,
            blocks,
        })
    }

    pub fn single(iv: Interval, grid: &DomainGrid) -> Result<Self> {
        Self::new(vec![iv], grid)
    }

    pub fn full(grid: &DomainGrid) -> Self {
        Self::new(vec![grid.domain()], grid).expect("grid domain is a valid subdomain")
    }

    /// The subdomain spanned by grid points `lo..=hi`.
    pub fn from_index_range(lo: usize, hi: usize, grid: &DomainGrid) -> Result<Self> {
        let pts = grid.points();
        if hi >= pts.len() || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "invalid grid index range {lo}..={hi}"
            )));
        }
        if lo == hi {
            let half = 0.25 * grid.spacing();
            return Self::new(vec![Interval::new(pts[lo] - half, pts[lo] + half)?], grid);
        }
        Self::new(vec![Interval::new(pts[lo], pts[hi])?], grid)
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn grid_indices(&self) -> &[usize] {
        &self.grid_indices
    }

    pub fn blocks(&self) -> &[(usize, usize)] {
        &self.blocks
    }

    pub fn contains_index(&self, r: usize) -> bool {
        self.grid_indices.binary_search(&r).is_ok()
    }

    pub fn contains(&self, u: f64, tol: f64) -> bool {
        self.intervals.iter().any(|iv| iv.contains_tol(u, tol))
    }

    /// True when every grid point belongs to the subdomain.
    pub fn is_full(&self, grid: &DomainGrid) -> bool {
        self.grid_indices.len() == grid.len()
    }

    /// Trapezoid weights, one per subdomain grid point, computed blockwise.
    pub fn weights(&self, spacing: f64) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|&(s, e)| trapezoid_weights(e - s, spacing))
            .collect()
    }

    /// Cache key: the grid blocks fully determine the discretized operator.
    pub fn key(&self) -> Vec<(usize, usize)> {
        self.blocks.clone()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EigenSystem {
    pub subdomain: Subdomain,
    pub grid: DomainGrid,
    /// Quadrature weights on the subdomain grid points.
    pub weights: Vec<f64>,
    /// Retained eigenvalues, nonincreasing and positive.
    pub eigenvalues: Vec<f64>,
    /// `eigenfunctions[k][p]` at the `p`-th subdomain grid point.
    pub eigenfunctions: Vec<Vec<f64>>,
    /// `extrapolated[k][r]` on the full grid (`NaN` where not estimable).
    /// Empty until [`extrapolate_basis`] has run.
    pub extrapolated: Vec<Vec<f64>>,
    /// Per full-grid point: whether the extrapolated basis is estimable.
    pub extrapolable: Vec<bool>,
    /// Components `k` whose gap to `k+1` is below `1e-10·λ₁`.
    pub near_degenerate: Vec<usize>,
    /// Largest `|φ̃ₖ - φₖ|` over subdomain grid points.
    pub identity_gap: f64,
}

impl EigenSystem {
    /// Eigen-decomposition followed by basis extrapolation.
    pub fn fit(cov: &CovarianceEstimate, subdomain: &Subdomain, lambda_rel_floor: f64) -> Result<Self> {
        let eig = eigen_on_subdomain(cov, subdomain, lambda_rel_floor)?;
        Ok(extrapolate_basis(eig, cov))
    }

    pub fn k_available(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `φₖ` as a full-grid vector: subdomain values inside, extrapolated
    /// values outside, `NaN` where neither exists.
    fn full_grid(&self, k: usize) -> Vec<f64> {
        if !self.extrapolated.is_empty() {
            let mut v = self.extrapolated[k].clone();
            for (p, &r) in self.subdomain.grid_indices.iter().enumerate() {
                if !v[r].is_finite() {
                    v[r] = self.eigenfunctions[k][p];
                }
            }
            return v;
        }
        let mut v = vec![f64::NAN; self.grid.len()];
        for (p, &r) in self.subdomain.grid_indices.iter().enumerate() {
            v[r] = self.eigenfunctions[k][p];
        }
        v
    }

    /// Evaluates the (extrapolated) basis function `k` at an arbitrary `u`
    /// by linear interpolation. Cells with a non-estimable end fall back to
    /// the nearest subdomain grid value.
    pub fn basis_at(&self, k: usize, u: f64) -> f64 {
        let (r, t) = self.grid.locate(u);
        let value = |idx: usize| -> f64 {
            if !self.extrapolated.is_empty() && self.extrapolable[idx] {
                self.extrapolated[k][idx]
            } else {
                match self.subdomain.grid_indices.binary_search(&idx) {
                    Ok(p) => self.eigenfunctions[k][p],
                    Err(_) => f64::NAN,
                }
            }
        };
        let left = value(r);
        let v = if t == 0.0 {
            left
        } else {
            (1.0 - t) * left + t * value(r + 1)
        };
        if v.is_finite() {
            return v;
        }
        let idx = &self.subdomain.grid_indices;
        let target = self.grid.nearest(u);
        let p = match idx.binary_search(&target) {
            Ok(p) => p,
            Err(p) => {
                if p == 0 {
                    0
                } else if p >= idx.len() {
                    idx.len() - 1
                } else if target - idx[p - 1] <= idx[p] - target {
                    p - 1
                } else {
                    p
                }
            }
        };
        self.eigenfunctions[k][p]
    }

    /// Full-grid basis vectors for the first `k` components.
    pub fn basis_on_grid(&self, k: usize) -> Vec<Vec<f64>> {
        (0..k).map(|j| self.full_grid(j)).collect()
    }

    /// Header `u,phi_1,…,phi_K`, a `lambda` row of eigenvalues, then one row
    /// per grid point with the (extrapolated) basis; empty where undefined.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> std::io::Result<()> {
        write_comment(&mut out, comment)?;
        let k = self.k_available();
        write!(out, "u")?;
        for j in 1..=k {
            write!(out, ",phi_{j}")?;
        }
        writeln!(out)?;
        write!(out, "lambda")?;
        for l in &self.eigenvalues {
            write!(out, ",{l}")?;
        }
        writeln!(out)?;
        let basis = self.basis_on_grid(k);
        for (r, u) in self.grid.points().iter().enumerate() {
            write!(out, "{u}")?;
            for b in &basis {
                write!(out, ",{}", fmt_opt(b[r]))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Trapezoid inner product of two subdomain vectors.
    pub fn inner(&self, x: &[f64], y: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(x.iter().zip(y))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }
}

/// Eigenpairs of the covariance operator restricted to `subdomain`.
pub fn eigen_on_subdomain(
    cov: &CovarianceEstimate,
    subdomain: &Subdomain,
    lambda_rel_floor: f64,
) -> Result<EigenSystem> {
    let idx = subdomain.grid_indices();
    let n = idx.len();
    let grid = &cov.grid;
    let weights = subdomain.weights(grid.spacing());
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();

    let mut a = DMatrix::<f64>::zeros(n, n);
    for p in 0..n {
        for q in p..n {
            let g = cov
                .get(idx[p], idx[q])
                .ok_or(Error::CovarianceNotEstimable)?;
            let v = sqrt_w[p] * g * sqrt_w[q];
            a[(p, q)] = v;
            a[(q, p)] = v;
        }
    }
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let top = eig.eigenvalues[order[0]].max(0.0);
    if top <= 0.0 || !top.is_finite() {
        return Err(Error::DegenerateCovariance);
    }
    let threshold = lambda_rel_floor * top;

    let mut eigenvalues = Vec::new();
    let mut eigenfunctions = Vec::new();
    for &i in &order {
        let lambda = eig.eigenvalues[i].max(0.0);
        if lambda <= threshold || lambda <= 0.0 {
            break;
        }
        let mut phi: Vec<f64> = (0..n)
            .map(|p| eig.eigenvectors[(p, i)] / sqrt_w[p])
            .collect();
        orient(&mut phi);
        eigenvalues.push(lambda);
        eigenfunctions.push(phi);
    }
    let near_degenerate = eigenvalues
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] - w[1] < DEGENERATE_GAP * top)
        .map(|(k, _)| k)
        .collect();

    Ok(EigenSystem {
        subdomain: subdomain.clone(),
        grid: grid.clone(),
        weights,
        eigenvalues,
        eigenfunctions,
        extrapolated: Vec::new(),
        extrapolable: vec![false; grid.len()],
        near_degenerate,
        identity_gap: f64::NAN,
    })
}

/// Sign convention: positive coordinate sum, or, when that sum vanishes,
/// a positive first nonzero coordinate.
fn orient(phi: &mut [f64]) {
    let sum: f64 = phi.iter().sum();
    let flip = if sum.abs() > 1e-12 {
        sum < 0.0
    } else {
        phi.iter().find(|v| v.abs() > 1e-12).is_some_and(|&v| v < 0.0)
    };
    if flip {
        phi.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Fills `φ̃ₖ(u_r) = Σ_s γ̂(u_r, v_s) φₖ(v_s) w_s / λₖ` on every grid point
/// whose covariance row is estimable across the whole subdomain.
pub fn extrapolate_basis(mut eig: EigenSystem, cov: &CovarianceEstimate) -> EigenSystem {
    let idx = eig.subdomain.grid_indices().to_vec();
    let l = cov.len();
    let k = eig.k_available();
    let mut extrapolated = vec![vec![f64::NAN; l]; k];
    let mut extrapolable = vec![false; l];
    let mut row = vec![0.0; idx.len()];
    for r in 0..l {
        let mut ok = true;
        for (p, &s) in idx.iter().enumerate() {
            match cov.get(r, s) {
                Some(g) => row[p] = g * eig.weights[p],
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        extrapolable[r] = true;
        for j in 0..k {
            let dot: f64 = row.iter().zip(&eig.eigenfunctions[j]).map(|(a, b)| a * b).sum();
            extrapolated[j][r] = dot / eig.eigenvalues[j];
        }
    }
    let mut gap: f64 = 0.0;
    for (p, &r) in idx.iter().enumerate() {
        for j in 0..k {
            if extrapolable[r] {
                gap = gap.max((extrapolated[j][r] - eig.eigenfunctions[j][p]).abs());
            }
        }
    }
    eig.extrapolated = extrapolated;
    eig.extrapolable = extrapolable;
    eig.identity_gap = gap;
    eig
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(len: usize) -> DomainGrid {
        DomainGrid::new(Interval::new(0.0, 1.0).unwrap(), len).unwrap()
    }

    #[test]
    fn rank_one_sine() {
        let g = grid(101);
        let cov = CovarianceEstimate::from_fn(&g, |u, v| 2.0 * (PI * u).sin() * (PI * v).sin());
        let eig = EigenSystem::fit(&cov, &Subdomain::full(&g), DEFAULT_LAMBDA_REL_FLOOR).unwrap();
        assert_eq!(eig.k_available(), 1);
        assert!((eig.eigenvalues[0] - 1.0).abs() < 1e-2);
        for (p, &u) in g.points().iter().enumerate() {
            assert!((eig.eigenfunctions[0][p] - 2f64.sqrt() * (PI * u).sin()).abs() < 1e-2);
        }
    }

    #[test]
    fn zero_covariance_is_degenerate() {
        let g = grid(21);
        let cov = CovarianceEstimate::from_fn(&g, |_, _| 0.0);
        assert_eq!(
            eigen_on_subdomain(&cov, &Subdomain::full(&g), 1e-8).unwrap_err(),
            Error::DegenerateCovariance
        );
    }

    #[test]
    fn unmasked_entry_inside_subdomain_is_rejected() {
        let g = grid(21);
        let cov = CovarianceEstimate::from_fn(&g, |u, v| u.min(v)).restrict(|u, v| (u - v).abs() < 0.3);
        let sub = Subdomain::single(Interval::new(0.0, 0.5).unwrap(), &g).unwrap();
        assert_eq!(
            eigen_on_subdomain(&cov, &sub, 1e-8).unwrap_err(),
            Error::CovarianceNotEstimable
        );
        let small = Subdomain::single(Interval::new(0.0, 0.25).unwrap(), &g).unwrap();
        let eig = EigenSystem::fit(&cov, &small, 1e-8).unwrap();
        // Extension needs the whole row over [0, 0.25] inside the band.
        assert!(eig.extrapolable[5]);
        assert!(!eig.extrapolable[7]);
    }

    #[test]
    fn multi_interval_weights_are_blockwise() {
        let g = grid(11);
        let sub = Subdomain::new(
            vec![Interval::new(0.6, 1.0).unwrap(), Interval::new(0.0, 0.3).unwrap()],
            &g,
        )
        .unwrap();
        assert_eq!(sub.grid_indices(), &[0, 1, 2, 3, 6, 7, 8, 9, 10]);
        let w = sub.weights(0.1);
        let expect = [0.05, 0.1, 0.1, 0.05, 0.05, 0.1, 0.1, 0.1, 0.05];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sign_convention_is_input_only() {
        let mut v = vec![-1.0, 0.5, -0.2];
        orient(&mut v);
        assert_eq!(v, vec![1.0, -0.5, 0.2]);
        let mut z = vec![0.0, -1.0, 1.0];
        orient(&mut z);
        assert_eq!(z, vec![0.0, 1.0, -1.0]);
    }
}
