//! Principal-component scores of individual curves: Riemann-sum integrals
//! of the centered observations against the eigenfunctions, and
//! conditional expectations given the noisy discrete observations.

use serde::Serialize;

use crate::data::{Curve, ObservationPair};
use crate::eigen::EigenSystem;
use crate::error::{Error, Result};
use crate::smoothing::{CovarianceEstimate, MeanEstimate, NoiseVariance};

/// Relative pivot size below which a Cholesky factorization is rejected.
const PIVOT_RATIO: f64 = 1e-12;
/// Ridge added, relative to the mean diagonal, when the first attempt fails.
const JITTER_RATIO: f64 = 1e-8;
/// Condition estimate above which a solve is reported as ill-conditioned.
pub const CONDITION_THRESHOLD: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    Integral,
    ConditionalExpectation,
}

impl ScoreMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Integral => "integral",
            Self::ConditionalExpectation => "conditional_expectation",
        }
    }
}

/// Riemann rule for integral scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    /// `Σ_{j≥2} f(U_(j)) (U_(j) - U_(j-1))`.
    #[default]
    Backward,
    Trapezoid,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScoreDiagnostics {
    /// Some observed segment held a single point and contributed nothing.
    pub insufficient_points: bool,
    pub jitter_applied: bool,
    /// Squared ratio of extreme Cholesky pivots; a lower bound on the
    /// spectral condition number.
    pub condition: Option<f64>,
    pub ill_conditioned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreVector {
    pub curve_id: String,
    pub values: Vec<f64>,
    pub method: ScoreMethod,
    pub diagnostics: ScoreDiagnostics,
}

/// Long-format score table `curve_id,k,value,method`.
pub fn write_scores_csv<W: std::io::Write>(
    mut out: W,
    scores: &[ScoreVector],
    comment: Option<&str>,
) -> std::io::Result<()> {
    crate::smoothing::write_comment(&mut out, comment)?;
    writeln!(out, "curve_id,k,value,method")?;
    for s in scores {
        for (k, v) in s.values.iter().enumerate() {
            writeln!(out, "{},{},{},{}", s.curve_id, k + 1, v, s.method.as_str())?;
        }
    }
    Ok(())
}

fn check_k(eig: &EigenSystem, k: usize) -> Result<()> {
    if k > eig.k_available() {
        return Err(Error::TooManyComponents {
            requested: k,
            available: eig.k_available(),
        });
    }
    Ok(())
}

fn check_support(curve: &Curve, eig: &EigenSystem) -> Result<()> {
    let tol = eig.grid.spacing() * (1.0 + 1e-9);
    if let Some(p) = curve
        .points()
        .iter()
        .find(|p| !eig.subdomain.contains(p.u, tol))
    {
        return Err(Error::InvalidArgument(format!(
            "curve {}: observation at u={} lies outside the eigen subdomain",
            curve.id(),
            p.u
        )));
    }
    Ok(())
}

/// Integral scores `ξ̂ₖ ≈ ∫_O φ̂ₖ (X - μ̂)` from the ordered observations.
/// Multi-segment curves are integrated segment by segment.
pub fn integral_scores(
    curve: &Curve,
    eig: &EigenSystem,
    mean: &MeanEstimate,
    k: usize,
    quadrature: Quadrature,
) -> Result<ScoreVector> {
    check_k(eig, k)?;
    check_support(curve, eig)?;
    let mut values = vec![0.0; k];
    let mut insufficient = false;
    let segs = curve.segments();
    let tol = 1e-12 * (1.0 + curve.observed_interval().len());
    let mut rest = curve.points();
    for (i, seg) in segs.iter().enumerate() {
        let take = if i + 1 == segs.len() {
            rest.len()
        } else {
            rest.partition_point(|p| p.u <= seg.hi + tol)
        };
        let (block, tail) = rest.split_at(take);
        rest = tail;
        if block.len() < 2 {
            insufficient = true;
            continue;
        }
        accumulate(block, eig, mean, quadrature, &mut values);
    }
    Ok(ScoreVector {
        curve_id: curve.id().to_string(),
        values,
        method: ScoreMethod::Integral,
        diagnostics: ScoreDiagnostics {
            insufficient_points: insufficient,
            ..Default::default()
        },
    })
}

fn accumulate(
    block: &[ObservationPair],
    eig: &EigenSystem,
    mean: &MeanEstimate,
    quadrature: Quadrature,
    values: &mut [f64],
) {
    let resid: Vec<f64> = block.iter().map(|p| p.y - mean.at(p.u)).collect();
    for (j, v) in values.iter_mut().enumerate() {
        let f: Vec<f64> = block
            .iter()
            .zip(&resid)
            .map(|(p, r)| eig.basis_at(j, p.u) * r)
            .collect();
        *v += (1..block.len())
            .map(|i| {
                let du = block[i].u - block[i - 1].u;
                match quadrature {
                    Quadrature::Backward => f[i] * du,
                    Quadrature::Trapezoid => 0.5 * (f[i] + f[i - 1]) * du,
                }
            })
            .sum::<f64>();
    }
}

/// Scores of a gridded pseudo-curve given on the subdomain grid points of
/// `eig`, integrated with the subdomain trapezoid weights.
pub fn grid_scores(values_on_subdomain: &[f64], eig: &EigenSystem, mean: &MeanEstimate, k: usize) -> Result<Vec<f64>> {
    check_k(eig, k)?;
    let idx = eig.subdomain.grid_indices();
    if values_on_subdomain.len() != idx.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} subdomain values, got {}",
            idx.len(),
            values_on_subdomain.len()
        )));
    }
    let resid: Vec<f64> = values_on_subdomain
        .iter()
        .zip(idx)
        .map(|(x, &r)| x - mean.values[r])
        .collect();
    Ok((0..k).map(|j| eig.inner(&eig.eigenfunctions[j], &resid)).collect())
}

/// Conditional-expectation scores `λ̂ₖ φ̂ₖᵀ Σ̂⁻¹ (Y - μ̂)`.
pub fn ce_scores(
    curve: &Curve,
    eig: &EigenSystem,
    cov: &CovarianceEstimate,
    sigma2: NoiseVariance,
    mean: &MeanEstimate,
    k: usize,
) -> Result<ScoreVector> {
    check_k(eig, k)?;
    check_support(curve, eig)?;
    if !(sigma2.sigma2 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise variance {} must be nonnegative",
            sigma2.sigma2
        )));
    }
    let pts = curve.points();
    let m = pts.len();
    // γ̂ through its retained eigenpairs on the subdomain: the positive part
    // of the smoothed surface, so Σ̂ is semidefinite before the noise.
    let basis_values: Vec<Vec<f64>> = (0..eig.k_available())
        .map(|j| pts.iter().map(|p| eig.basis_at(j, p.u)).collect())
        .collect();
    let mut sigma = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            if cov.at(pts[i].u, pts[j].u).is_none() {
                return Err(Error::CovarianceNotEstimable);
            }
            let g: f64 = basis_values
                .iter()
                .zip(&eig.eigenvalues)
                .map(|(b, l)| l * b[i] * b[j])
                .sum();
            sigma[i * m + j] = g;
            sigma[j * m + i] = g;
        }
        sigma[i * m + i] += sigma2.sigma2;
    }
    let resid: Vec<f64> = pts.iter().map(|p| p.y - mean.at(p.u)).collect();
    let solved = solve_spd(&sigma, m, &resid)?;
    let values = (0..k)
        .map(|j| {
            eig.eigenvalues[j]
                * pts
                    .iter()
                    .zip(&solved.x)
                    .map(|(p, x)| eig.basis_at(j, p.u) * x)
                    .sum::<f64>()
        })
        .collect();
    Ok(ScoreVector {
        curve_id: curve.id().to_string(),
        values,
        method: ScoreMethod::ConditionalExpectation,
        diagnostics: ScoreDiagnostics {
            insufficient_points: false,
            jitter_applied: solved.jitter_applied,
            condition: Some(solved.condition),
            ill_conditioned: solved.condition > CONDITION_THRESHOLD,
        },
    })
}

/// CE scores against the full-domain eigensystem.
pub fn pace_scores(
    curve: &Curve,
    full_eig: &EigenSystem,
    cov: &CovarianceEstimate,
    sigma2: NoiseVariance,
    mean: &MeanEstimate,
    k: usize,
) -> Result<ScoreVector> {
    if !full_eig.subdomain.is_full(&full_eig.grid) {
        return Err(Error::InvalidArgument(
            "PACE scores require the full-domain eigensystem".into(),
        ));
    }
    ce_scores(curve, full_eig, cov, sigma2, mean, k)
}

#[derive(Debug, Clone)]
pub(crate) struct SpdSolution {
    pub x: Vec<f64>,
    pub jitter_applied: bool,
    pub condition: f64,
}

/// Solves `A x = b` for symmetric `A` (row-major, `n×n`) by Cholesky, with
/// one ridge retry when a pivot is not safely positive.
pub(crate) fn solve_spd(a: &[f64], n: usize, b: &[f64]) -> Result<SpdSolution> {
    let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
    let scale = trace / n as f64;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::IllConditioned {
            condition: f64::INFINITY,
        });
    }
    let floor = PIVOT_RATIO * scale;
    if let Some((l, cond)) = cholesky(a, n, 0.0, floor) {
        return Ok(SpdSolution {
            x: cholesky_solve(&l, n, b),
            jitter_applied: false,
            condition: cond,
        });
    }
    match cholesky(a, n, JITTER_RATIO * scale, floor) {
        Some((l, cond)) => Ok(SpdSolution {
            x: cholesky_solve(&l, n, b),
            jitter_applied: true,
            condition: cond,
        }),
        None => Err(Error::IllConditioned {
            condition: f64::INFINITY,
        }),
    }
}

/// Lower Cholesky factor of `A + ridge·I`, or `None` when a squared pivot
/// falls to `floor` or below. Also returns `(max pivot / min pivot)²`.
fn cholesky(a: &[f64], n: usize, ridge: f64, floor: f64) -> Option<(Vec<f64>, f64)> {
    let mut l = vec![0.0; n * n];
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for j in 0..n {
        let mut d = a[j * n + j] + ridge;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > floor) {
            return None;
        }
        let pivot = d.sqrt();
        lo = lo.min(pivot);
        hi = hi.max(pivot);
        l[j * n + j] = pivot;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / pivot;
        }
    }
    Some((l, (hi / lo).powi(2)))
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}
