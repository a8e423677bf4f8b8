//! Local-linear kernel smoothers: individual curves, the pooled mean, the
//! covariance surface, and the measurement-error variance.
//!
//! All smoothers use the Epanechnikov kernel. Local designs are expressed in
//! bandwidth units (`(U - u)/h`) before the normal equations are formed; the
//! kernel normalization `1/h` cancels in every weighted fit and is omitted.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Curve, FunctionalDataset};
use crate::error::{Error, Result};
use crate::grid::DomainGrid;
use crate::reconstruct::fmt_opt;
use std::io::Write;

pub const DEFAULT_MIN_PAIRS: usize = 5;
pub const DEFAULT_TRIM_FRACTION: f64 = 0.25;
/// Multiplier applied to the pooled standard deviation of the abscissae in
/// the rate-based bandwidth defaults.
pub const BANDWIDTH_CONSTANT: f64 = 1.5;

/// Hadamard-ratio threshold below which a local design counts as singular.
const SINGULAR_RATIO: f64 = 1e-10;

/// `0.75 (1 - v²)` on `[-1, 1]`, zero elsewhere.
pub fn epanechnikov(v: f64) -> f64 {
    if v.abs() <= 1.0 {
        0.75 * (1.0 - v * v)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bandwidths {
    pub h_x: f64,
    pub h_mu: f64,
    pub h_gamma: f64,
}

impl Bandwidths {
    /// Rate-based defaults `h_X ∝ m^{-1/5}`, `h_μ ∝ (nm)^{-1/5}`,
    /// `h_γ ∝ (n(m²-m))^{-1/6}` with constant `1.5·sd(U)`; `m` is the median
    /// number of observations per curve.
    pub fn rule_of_thumb(dataset: &FunctionalDataset) -> Self {
        let us: Vec<f64> = dataset
            .curves()
            .iter()
            .flat_map(|c| c.points().iter().map(|p| p.u))
            .collect();
        let n_obs = us.len() as f64;
        let mean = us.iter().sum::<f64>() / n_obs;
        let var = us.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (n_obs - 1.0).max(1.0);
        let c = BANDWIDTH_CONSTANT * var.sqrt();

        let mut counts: Vec<usize> = dataset.curves().iter().map(Curve::len).collect();
        counts.sort_unstable();
        let m = counts[counts.len() / 2].max(2) as f64;
        let n = dataset.curves().len() as f64;
        let width = dataset.domain().len();
        let cap = 0.5 * width;
        Self {
            h_x: (c * m.powf(-0.2)).min(cap),
            h_mu: (c * (n * m).powf(-0.2)).min(cap),
            h_gamma: (c * (n * (m * m - m)).powf(-1.0 / 6.0)).min(cap),
        }
    }

    pub fn validate(&self, domain_len: f64) -> Result<()> {
        for (name, h) in [("h_x", self.h_x), ("h_mu", self.h_mu), ("h_gamma", self.h_gamma)] {
            if !(h > 0.0 && h < domain_len) {
                return Err(Error::InvalidArgument(format!(
                    "{name}={h} must lie in (0, {domain_len})"
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of a one-dimensional local-linear fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LocalFit {
    Linear(f64),
    /// The design was singular; the local-constant value is returned.
    Constant(f64),
    /// Fewer than two observations carry positive weight.
    Insufficient(usize),
}

#[derive(Default, Clone, Copy)]
struct Moments1 {
    count: usize,
    s0: f64,
    s1: f64,
    s2: f64,
    t0: f64,
    t1: f64,
}

impl Moments1 {
    fn add(&mut self, d: f64, y: f64) {
        let w = epanechnikov(d);
        if w <= 0.0 {
            return;
        }
        self.count += 1;
        self.s0 += w;
        self.s1 += w * d;
        self.s2 += w * d * d;
        self.t0 += w * y;
        self.t1 += w * d * y;
    }

    fn solve(&self) -> LocalFit {
        if self.count < 2 {
            return LocalFit::Insufficient(self.count);
        }
        let det = self.s0 * self.s2 - self.s1 * self.s1;
        if det <= SINGULAR_RATIO * self.s0 * self.s2 {
            return LocalFit::Constant(self.t0 / self.s0);
        }
        LocalFit::Linear((self.s2 * self.t0 - self.s1 * self.t1) / det)
    }
}

/// Local-linear intercept at `u` from `(U, Y)` pairs sorted by `U`.
pub fn local_linear_sorted(points: &[(f64, f64)], u: f64, h: f64) -> LocalFit {
    let start = points.partition_point(|p| p.0 <= u - h);
    let mut m = Moments1::default();
    for &(x, y) in points[start..].iter().take_while(|p| p.0 < u + h) {
        m.add((x - u) / h, y);
    }
    m.solve()
}

/// Local-linear estimate of an individual curve at `u` with bandwidth `h_x`.
pub fn llk_curve(curve: &Curve, u: f64, h_x: f64) -> Result<f64> {
    let pts = curve.points();
    let start = pts.partition_point(|p| p.u <= u - h_x);
    let mut m = Moments1::default();
    for p in pts[start..].iter().take_while(|p| p.u < u + h_x) {
        m.add((p.u - u) / h_x, p.y);
    }
    match m.solve() {
        LocalFit::Linear(v) => Ok(v),
        LocalFit::Constant(_) => Err(Error::InsufficientLocalData {
            u,
            effective: m.count,
        }),
        LocalFit::Insufficient(effective) => Err(Error::InsufficientLocalData { u, effective }),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanEstimate {
    pub grid: DomainGrid,
    pub values: Vec<f64>,
    pub bandwidth: f64,
    /// Grid points where a singular design forced a local-constant fit.
    pub fallbacks: usize,
}

impl MeanEstimate {
    pub fn from_values(grid: DomainGrid, values: Vec<f64>, bandwidth: f64) -> Self {
        Self {
            grid,
            values,
            bandwidth,
            fallbacks: 0,
        }
    }

    /// Linear interpolation between grid values.
    pub fn at(&self, u: f64) -> f64 {
        self.grid.interpolate(&self.values, u)
    }

    /// Columns `u,mean`.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> std::io::Result<()> {
        write_comment(&mut out, comment)?;
        writeln!(out, "u,mean")?;
        for (u, v) in self.grid.points().iter().zip(&self.values) {
            writeln!(out, "{u},{v}")?;
        }
        Ok(())
    }
}

pub(crate) fn write_comment<W: Write>(out: &mut W, comment: Option<&str>) -> std::io::Result<()> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    Ok(())
}

/// Pooled local-linear mean on `grid`.
pub fn llk_mean(dataset: &FunctionalDataset, grid: &DomainGrid, h_mu: f64) -> Result<MeanEstimate> {
    let mut pooled: Vec<(f64, f64)> = dataset
        .curves()
        .iter()
        .flat_map(|c| c.points().iter().map(|p| (p.u, p.y)))
        .collect();
    pooled.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut fallbacks = 0;
    let values = grid
        .points()
        .iter()
        .map(|&u| match local_linear_sorted(&pooled, u, h_mu) {
            LocalFit::Linear(v) => Ok(v),
            LocalFit::Constant(v) => {
                fallbacks += 1;
                Ok(v)
            }
            LocalFit::Insufficient(_) => Err(Error::MeanNotEstimable { u }),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MeanEstimate {
        grid: grid.clone(),
        values,
        bandwidth: h_mu,
        fallbacks,
    })
}

/// Smoothed covariance surface on `grid × grid` with its estimability mask.
#[derive(Debug, Clone, Serialize)]
pub struct CovarianceEstimate {
    pub grid: DomainGrid,
    /// Row-major `L×L`; `NaN` wherever the mask is false.
    pub surface: Vec<f64>,
    pub mask: Vec<bool>,
    pub bandwidth: f64,
    pub min_pairs: usize,
    /// Masked grid pairs where a singular design forced a local-constant fit.
    pub fallbacks: usize,
}

impl CovarianceEstimate {
    /// Tabulates an analytic covariance; every entry is estimable.
    pub fn from_fn(grid: &DomainGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let pts = grid.points();
        let l = pts.len();
        let mut surface = vec![0.0; l * l];
        for r in 0..l {
            for s in r..l {
                let v = 0.5 * (f(pts[r], pts[s]) + f(pts[s], pts[r]));
                surface[r * l + s] = v;
                surface[s * l + r] = v;
            }
        }
        Self {
            grid: grid.clone(),
            surface,
            mask: vec![true; l * l],
            bandwidth: f64::NAN,
            min_pairs: 0,
            fallbacks: 0,
        }
    }

    /// Restricts an estimate to the entries where `keep(u, v)` holds.
    pub fn restrict(mut self, keep: impl Fn(f64, f64) -> bool) -> Self {
        let pts = self.grid.points().to_vec();
        let l = pts.len();
        for r in 0..l {
            for s in 0..l {
                if !keep(pts[r], pts[s]) {
                    self.mask[r * l + s] = false;
                    self.surface[r * l + s] = f64::NAN;
                }
            }
        }
        self
    }

    /// Surface as a matrix: header `u` then one column per grid value `v`;
    /// unmasked entries are empty.
    pub fn write_surface_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> std::io::Result<()> {
        self.write_matrix(&mut out, comment, |r| fmt_opt(self.surface[r]))
    }

    /// Estimability mask as a 0/1 matrix in the layout of the surface.
    pub fn write_mask_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> std::io::Result<()> {
        self.write_matrix(&mut out, comment, |r| u8::from(self.mask[r]).to_string())
    }

    fn write_matrix<W: Write>(&self, out: &mut W, comment: Option<&str>, cell: impl Fn(usize) -> String) -> std::io::Result<()> {
        write_comment(out, comment)?;
        let pts = self.grid.points();
        let l = pts.len();
        write!(out, "u")?;
        for v in pts {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
        for (r, u) in pts.iter().enumerate() {
            write!(out, "{u}")?;
            for s in 0..l {
                write!(out, ",{}", cell(r * l + s))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn is_estimable(&self, r: usize, s: usize) -> bool {
        self.mask[r * self.len() + s]
    }

    pub fn get(&self, r: usize, s: usize) -> Option<f64> {
        let idx = r * self.len() + s;
        self.mask[idx].then(|| self.surface[idx])
    }

    /// Bilinear interpolation using the estimable corners of the enclosing
    /// cell; `None` if no corner is estimable.
    pub fn at(&self, u: f64, v: f64) -> Option<f64> {
        let (r, tu) = self.grid.locate(u);
        let (s, tv) = self.grid.locate(v);
        let corners = [
            (r, s, (1.0 - tu) * (1.0 - tv)),
            (r + 1, s, tu * (1.0 - tv)),
            (r, s + 1, (1.0 - tu) * tv),
            (r + 1, s + 1, tu * tv),
        ];
        let mut num = 0.0;
        let mut den = 0.0;
        let mut any = false;
        for (i, j, w) in corners {
            if let Some(g) = self.get(i, j) {
                any = true;
                if w > 0.0 {
                    num += w * g;
                    den += w;
                }
            }
        }
        if !any {
            return None;
        }
        if den > 0.0 {
            Some(num / den)
        } else {
            // Only zero-weight corners are estimable; use the nearest one.
            self.get(self.grid.nearest(u), self.grid.nearest(v))
        }
    }

    /// Fraction of grid pairs that are estimable.
    pub fn coverage(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

#[derive(Default, Clone, Copy)]
struct Moments2 {
    count: usize,
    s: [f64; 6], // w, w du, w dv, w du², w du dv, w dv²
    t: [f64; 3], // w c, w c du, w c dv
}

impl Moments2 {
    #[inline]
    fn add(&mut self, w: f64, du: f64, dv: f64, c: f64) {
        self.count += 1;
        self.s[0] += w;
        self.s[1] += w * du;
        self.s[2] += w * dv;
        self.s[3] += w * du * du;
        self.s[4] += w * du * dv;
        self.s[5] += w * dv * dv;
        self.t[0] += w * c;
        self.t[1] += w * c * du;
        self.t[2] += w * c * dv;
    }

    /// Intercept of the bivariate local-linear fit, and whether the
    /// local-constant fallback was used.
    fn solve(&self) -> (f64, bool) {
        let s = &self.s;
        let a = Matrix3::new(s[0], s[1], s[2], s[1], s[3], s[4], s[2], s[4], s[5]);
        let diag = s[0] * s[3] * s[5];
        let det = a.determinant();
        if diag > 0.0 && det > SINGULAR_RATIO * diag {
            if let Some(beta) = a.lu().solve(&Vector3::new(self.t[0], self.t[1], self.t[2])) {
                return (beta[0], false);
            }
        }
        (self.t[0] / s[0], true)
    }
}

/// Per-curve data used by the covariance smoother.
struct Centered {
    u: Vec<f64>,
    res: Vec<f64>,
}

fn center(dataset: &FunctionalDataset, mean: &MeanEstimate) -> Vec<Centered> {
    dataset
        .curves()
        .iter()
        .map(|c| Centered {
            u: c.points().iter().map(|p| p.u).collect(),
            res: c.points().iter().map(|p| p.y - mean.at(p.u)).collect(),
        })
        .collect()
}

/// Bivariate local-linear smoother of the off-diagonal raw covariances
/// `(Y_ij - μ̂(U_ij))(Y_il - μ̂(U_il))`, `j ≠ l`.
///
/// Grid pairs with fewer than `min_pairs` raw points inside the product
/// kernel window are left unmasked. Only the upper triangle is fitted; the
/// lower triangle is its mirror image, which is exactly the average of the
/// two one-sided fits since the raw-point set is symmetric.
pub fn llk_covariance(
    dataset: &FunctionalDataset,
    mean: &MeanEstimate,
    grid: &DomainGrid,
    h_gamma: f64,
    min_pairs: usize,
) -> CovarianceEstimate {
    let l = grid.len();
    let pts = grid.points();
    let data = center(dataset, mean);
    let min_pairs = min_pairs.max(1);

    let rows: Vec<(Vec<Option<f64>>, usize)> = (0..l)
        .into_par_iter()
        .map(|r| {
            let ur = pts[r];
            let mut acc = vec![Moments2::default(); l];
            for c in &data {
                let start = c.u.partition_point(|&x| x <= ur - h_gamma);
                for j in start..c.u.len() {
                    let du = (c.u[j] - ur) / h_gamma;
                    if du >= 1.0 {
                        break;
                    }
                    let wr = epanechnikov(du);
                    if wr <= 0.0 {
                        continue;
                    }
                    for (l_idx, (&ul, &rl)) in c.u.iter().zip(&c.res).enumerate() {
                        if l_idx == j {
                            continue;
                        }
                        let raw = c.res[j] * rl;
                        for s in grid.window(ul, h_gamma) {
                            if s < r {
                                continue;
                            }
                            let dv = (ul - pts[s]) / h_gamma;
                            let wv = epanechnikov(dv);
                            if wv > 0.0 {
                                acc[s].add(wr * wv, du, dv, raw);
                            }
                        }
                    }
                }
            }
            let mut fallbacks = 0;
            let row = acc
                .iter()
                .enumerate()
                .map(|(s, m)| {
                    if s < r || m.count < min_pairs {
                        return None;
                    }
                    let (v, fb) = m.solve();
                    fallbacks += usize::from(fb);
                    Some(v)
                })
                .collect();
            (row, fallbacks)
        })
        .collect();

    let mut surface = vec![f64::NAN; l * l];
    let mut mask = vec![false; l * l];
    let mut fallbacks = 0;
    for (r, (row, fb)) in rows.into_iter().enumerate() {
        fallbacks += fb;
        for (s, v) in row.into_iter().enumerate() {
            if let Some(v) = v {
                surface[r * l + s] = v;
                surface[s * l + r] = v;
                mask[r * l + s] = true;
                mask[s * l + r] = true;
            }
        }
    }
    CovarianceEstimate {
        grid: grid.clone(),
        surface,
        mask,
        bandwidth: h_gamma,
        min_pairs,
        fallbacks,
    }
}

/// `γ(u,u)` from the off-diagonal raw covariances by a local fit that is
/// linear along the diagonal and quadratic across it, in the coordinates
/// `m = (U_j + U_l)/2`, `d = U_j - U_l`. The fit along the diagonal uses the
/// same kernel as the one-dimensional smooth of the squared residuals, so
/// their leading smoothing biases cancel in the difference.
fn diagonal_covariance(data: &[Centered], u: f64, h: f64) -> Option<f64> {
    let mut a = Matrix3::<f64>::zeros();
    let mut b = Vector3::<f64>::zeros();
    let mut count = 0usize;
    for c in data {
        for j in 0..c.u.len() {
            for l in j + 1..c.u.len() {
                let dm = (0.5 * (c.u[j] + c.u[l]) - u) / h;
                let dd = (c.u[j] - c.u[l]) / h;
                let w = epanechnikov(dm) * epanechnikov(dd);
                if w <= 0.0 {
                    continue;
                }
                count += 1;
                let x = Vector3::new(1.0, dm, dd * dd);
                a += w * x * x.transpose();
                b += w * c.res[j] * c.res[l] * x;
            }
        }
    }
    if count < 3 {
        return None;
    }
    a.lu().solve(&b).map(|beta| beta[0]).filter(|v| v.is_finite())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseVariance {
    pub sigma2: f64,
}

/// Measurement-error variance from the gap between a one-dimensional smooth
/// of the squared residuals and the diagonal of the covariance, averaged
/// over the interior `[a + t(b-a), b - t(b-a)]` and clamped at zero.
pub fn estimate_noise_variance(
    dataset: &FunctionalDataset,
    mean: &MeanEstimate,
    cov: &CovarianceEstimate,
    trim_fraction: f64,
) -> Result<NoiseVariance> {
    if !(0.0..0.5).contains(&trim_fraction) {
        return Err(Error::InvalidArgument(format!(
            "trim fraction {trim_fraction} must lie in [0, 0.5)"
        )));
    }
    let mut diag: Vec<(f64, f64)> = dataset
        .curves()
        .iter()
        .flat_map(|c| {
            c.points().iter().map(|p| {
                let r = p.y - mean.at(p.u);
                (p.u, r * r)
            })
        })
        .collect();
    diag.sort_by(|p, q| p.0.total_cmp(&q.0));

    let data = center(dataset, mean);
    let grid = &cov.grid;
    let d = grid.domain();
    let lo = d.lo + trim_fraction * d.len();
    let hi = d.hi - trim_fraction * d.len();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (r, &u) in grid.points().iter().enumerate() {
        if u < lo || u > hi {
            continue;
        }
        if cov.get(r, r).is_none() {
            continue;
        }
        let Some(g) = diagonal_covariance(&data, u, cov.bandwidth) else { continue };
        let v = match local_linear_sorted(&diag, u, cov.bandwidth) {
            LocalFit::Linear(v) | LocalFit::Constant(v) => v,
            LocalFit::Insufficient(_) => continue,
        };
        sum += (v - g).max(0.0);
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoiseNotIdentifiable);
    }
    Ok(NoiseVariance {
        sigma2: (sum / count as f64).max(0.0),
    })
}
