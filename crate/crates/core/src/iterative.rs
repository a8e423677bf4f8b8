//! Completion of curves whose covariance is only estimable near the
//! diagonal: reconstruct as far as the estimability mask allows, then treat
//! part of the reconstruction as a new observed interval and repeat.

use std::str::FromStr;

use serde::Serialize;

use crate::data::Curve;
use crate::eigen::{EigenSystem, Subdomain};
use crate::error::{Error, Result};
use crate::grid::{DomainGrid, Interval};
use crate::reconstruct::{
    expand, fve_truncation, Method, Observed, Provenance, ReconstructedCurve, ReconstructionModel,
    Truncation,
};
use crate::scores::grid_scores;
use crate::simulation::Process;
use crate::smoothing::CovarianceEstimate;

pub const DEFAULT_R_MAX: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Widest interval at the coverage edge that still extends coverage,
    /// balancing its width against the reach it buys.
    GreedyBand,
    /// Original fragment, then the upper and the lower half of the coverage.
    App3,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy-band" => Ok(Self::GreedyBand),
            "app3" | "application-3-step" => Ok(Self::App3),
            _ => Err(Error::InvalidArgument(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationPlan {
    pub strategy: Strategy,
    pub r_max: usize,
    pub truncation: Truncation,
}

impl IterationPlan {
    pub fn new(strategy: Strategy, r_max: usize, truncation: Truncation) -> Result<Self> {
        if r_max < 1 {
            return Err(Error::InvalidArgument("r_max must be at least 1".into()));
        }
        Ok(Self {
            strategy,
            r_max,
            truncation,
        })
    }
}

/// Reconstruction together with the observed interval used at every step.
#[derive(Debug, Clone, Serialize)]
pub struct IterativeResult {
    pub curve: ReconstructedCurve,
    pub steps: Vec<Subdomain>,
    /// Step at which coverage stopped growing before the domain was full.
    pub stalled_at: Option<usize>,
}

/// Contiguous covered grid range `lo..=hi` containing `seed`.
fn coverage_run(covered: &[bool], seed: usize) -> (usize, usize) {
    let mut lo = seed;
    while lo > 0 && covered[lo - 1] {
        lo -= 1;
    }
    let mut hi = seed;
    while hi + 1 < covered.len() && covered[hi + 1] {
        hi += 1;
    }
    (lo, hi)
}

fn block_estimable(cov: &CovarianceEstimate, lo: usize, hi: usize) -> bool {
    (lo..=hi).all(|r| (r..=hi).all(|s| cov.is_estimable(r, s)))
}

/// Farthest index reachable from the block `lo..=hi` in direction `step`,
/// starting beyond `edge`: every row must be estimable across the block.
fn reach(cov: &CovarianceEstimate, lo: usize, hi: usize, edge: usize, right: bool) -> usize {
    let l = cov.len();
    let ok = |r: usize| (lo..=hi).all(|s| cov.is_estimable(r, s));
    let mut t = edge;
    if right {
        while t + 1 < l && ok(t + 1) {
            t += 1;
        }
        t - edge
    } else {
        while t > 0 && ok(t - 1) {
            t -= 1;
        }
        edge - t
    }
}

/// Next observed interval given the current coverage `lo..=hi` (grid
/// indices). Returns `None` when no candidate can be analysed.
pub fn choose_next_interval(
    coverage: (usize, usize),
    cov: &CovarianceEstimate,
    strategy: Strategy,
    step: usize,
    original: &Subdomain,
) -> Result<Option<Subdomain>> {
    let grid = &cov.grid;
    let (lo, hi) = coverage;
    let last = grid.len() - 1;
    if lo == 0 && hi == last {
        return Err(Error::InvalidArgument("coverage already spans the domain".into()));
    }
    match strategy {
        Strategy::App3 => {
            let mid = (lo + hi).div_ceil(2);
            let (a, b) = match step {
                1 => return Ok(Some(original.clone())),
                s if s % 2 == 0 => (mid, hi),
                _ => (lo, mid),
            };
            if b <= a {
                return Ok(None);
            }
            Subdomain::from_index_range(a, b, grid).map(Some)
        }
        Strategy::GreedyBand => {
            let right = hi < last;
            let remaining = if right { last - hi } else { lo };
            // Score: min(width, reach capped at what is left), ties to wider.
            let mut best: Option<(usize, usize, usize, usize)> = None;
            let span = hi - lo;
            for width in 1..=span {
                let (a, b) = if right { (hi - width, hi) } else { (lo, lo + width) };
                if !block_estimable(cov, a, b) {
                    continue;
                }
                let edge = if right { hi } else { lo };
                let got = reach(cov, a, b, edge, right).min(remaining);
                if got == 0 {
                    continue;
                }
                let score = width.min(got);
                let better = match best {
                    None => true,
                    Some((s, w, _, _)) => score > s || (score == s && width > w),
                };
                if better {
                    best = Some((score, width, a, b));
                }
            }
            match best {
                Some((_, _, a, b)) => Subdomain::from_index_range(a, b, grid).map(Some),
                None => Ok(None),
            }
        }
    }
}

fn truncation_for(
    model: &ReconstructionModel,
    method: Method,
    eig: &EigenSystem,
    sub: &Subdomain,
    truncation: Truncation,
) -> Result<usize> {
    Ok(match truncation {
        Truncation::Fixed(k) => k.min(eig.k_available()),
        Truncation::Fve(tau) => fve_truncation(&eig.eigenvalues, tau),
        Truncation::Gcv => model.gcv(method, sub)?.chosen as usize,
    })
}

/// Iterative reconstruction. Step 1 uses the raw curve; later steps use the
/// joined reconstruction on the chosen interval as gridded data with
/// integral scores. Values fixed at earlier steps are never changed.
pub fn iterative_reconstruct(
    curve: &Curve,
    model: &ReconstructionModel,
    method: Method,
    plan: &IterationPlan,
) -> Result<IterativeResult> {
    if matches!(method, Method::Pace | Method::Kraus) {
        return Err(Error::InvalidArgument(format!(
            "iterative reconstruction supports ano, anoce, ayes and ayesce, not {method}"
        )));
    }
    let grid = model.grid().clone();
    let original = model.curve_subdomain(curve)?;
    let mut result = model.reconstruct(curve, method, plan.truncation)?;
    let mut steps = vec![original.clone()];
    let mut stalled_at = None;
    let seed = original.grid_indices()[0];

    for step in 2..=plan.r_max {
        let covered: Vec<bool> = result.values.iter().map(|v| v.is_finite()).collect();
        let (lo, hi) = coverage_run(&covered, seed);
        if covered.iter().all(|&c| c) {
            break;
        }
        if lo == 0 && hi == grid.len() - 1 {
            // Covered run is full; other uncovered points cannot exist.
            break;
        }
        let next = choose_next_interval((lo, hi), &model.cov, plan.strategy, step, &original)?;
        let Some(sub) = next else {
            stalled_at = Some(step);
            break;
        };
        let gained = match step_once(&mut result, model, method, &sub, plan.truncation, step, &grid) {
            Ok(g) => g,
            Err(Error::CovarianceNotEstimable) => 0,
            Err(e) => return Err(e),
        };
        steps.push(sub);
        if gained == 0 {
            stalled_at = Some(step);
            break;
        }
    }
    if let Some(r) = stalled_at {
        result.flags.push(format!("coverage stalled at {r}"));
    }
    Ok(IterativeResult {
        curve: result,
        steps,
        stalled_at,
    })
}

fn step_once(
    result: &mut ReconstructedCurve,
    model: &ReconstructionModel,
    method: Method,
    sub: &Subdomain,
    truncation: Truncation,
    step: usize,
    grid: &DomainGrid,
) -> Result<usize> {
    let eig = model.eigensystem(sub)?;
    let k = truncation_for(model, method, &eig, sub, truncation)?;
    let values = result.values.clone();
    let obs = Observed::Gridded {
        id: &result.curve_id,
        values: &values,
    };
    let intervals: Vec<Interval> = sub.intervals().to_vec();
    let exp = expand(obs, model, method, &eig, &intervals, k)?;
    let new = exp.evaluate(k);
    let mut gained = 0;
    for r in 0..grid.len() {
        if !result.values[r].is_finite() && new[r].is_finite() {
            result.values[r] = new[r];
            result.provenance[r] = Provenance::Iteration(step);
            gained += 1;
        }
    }
    Ok(gained)
}

/// Geometry of the two-step error check: a band-limited estimability mask,
/// the first observed interval, the second observed interval, and the
/// region reconstructed at the second step.
#[derive(Debug, Clone, Serialize)]
pub struct AccumulationSetup {
    pub band: f64,
    pub first: Interval,
    pub second: Interval,
    pub target: Interval,
    pub grid_len: usize,
    pub replications: usize,
    pub seed: u64,
}

impl Default for AccumulationSetup {
    fn default() -> Self {
        Self {
            band: 0.6,
            first: Interval { lo: 0.0, hi: 0.3 },
            second: Interval { lo: 0.3, hi: 0.6 },
            target: Interval { lo: 0.6, hi: 0.9 },
            grid_len: 101,
            replications: 500,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AccumulationReport {
    pub u: Vec<f64>,
    /// Two-step error `E[(X - L_{O₂}(X̃^{O₂}))²]`.
    pub two_step: Vec<f64>,
    /// `E[(X - L_{O₂}(X^{O₂}))²]` with full information.
    pub one_step_second: Vec<f64>,
    /// `E[(X - L_{O₁}(X^{O₁}))²]` with full information.
    pub one_step_first: Vec<f64>,
    /// Standard error of the paired difference bound − two-step.
    pub standard_error: Vec<f64>,
    pub holds: Vec<bool>,
    pub fraction_holding: f64,
}

/// Optimal linear reconstruction `Σₖ ⟨x, φₖ⟩ φ̃ₖ` of a centered gridded
/// curve from its values on `sub`, using every retained component.
fn operator(eig: &EigenSystem, zero: &crate::smoothing::MeanEstimate, x: &[f64]) -> Result<Vec<f64>> {
    let k = eig.k_available();
    let on_sub: Vec<f64> = eig.subdomain.grid_indices().iter().map(|&r| x[r]).collect();
    let xi = grid_scores(&on_sub, eig, zero, k)?;
    let basis = eig.basis_on_grid(k);
    Ok((0..x.len())
        .map(|r| xi.iter().zip(&basis).map(|(s, b)| s * b[r]).sum())
        .collect())
}

/// Monte-Carlo check, at the operator level with the true covariance, that
/// the second-step error is bounded by the sum of the two full-information
/// one-step errors.
pub fn check_error_accumulation(process: &Process, setup: &AccumulationSetup) -> Result<AccumulationReport> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    let grid = DomainGrid::new(Interval::new(0.0, 1.0)?, setup.grid_len)?;
    let full = CovarianceEstimate::from_fn(&grid, |u, v| process.covariance(u, v));
    let band = full.clone().restrict(|u, v| (u - v).abs() <= setup.band + grid.tol());
    let floor = crate::eigen::DEFAULT_LAMBDA_REL_FLOOR;
    let o1 = Subdomain::single(setup.first, &grid)?;
    let o2 = Subdomain::single(setup.second, &grid)?;
    let e1_band = EigenSystem::fit(&band, &o1, floor)?;
    let e2_band = EigenSystem::fit(&band, &o2, floor)?;
    let e1_full = EigenSystem::fit(&full, &o1, floor)?;
    let e2_full = EigenSystem::fit(&full, &o2, floor)?;
    let zero = crate::smoothing::MeanEstimate::from_values(grid.clone(), vec![0.0; grid.len()], 0.0);

    // Eigen-decomposition of the grid covariance to sample X exactly.
    let l = grid.len();
    let g = nalgebra::DMatrix::from_fn(l, l, |r, s| full.surface[r * l + s]);
    let eig = nalgebra::SymmetricEigen::new(g);
    let factors: Vec<(f64, Vec<f64>)> = (0..l)
        .filter(|&i| eig.eigenvalues[i] > 0.0)
        .map(|i| (eig.eigenvalues[i].sqrt(), eig.eigenvectors.column(i).iter().copied().collect()))
        .collect();

    let idx: Vec<usize> = grid.indices_in(setup.target).collect();
    let idx: Vec<usize> = idx.into_iter().filter(|&r| grid.points()[r] > setup.target.lo + grid.tol()).collect();
    let n = setup.replications as f64;
    let mut sums = vec![[0.0f64; 4]; idx.len()];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(setup.seed);
    for _ in 0..setup.replications {
        let mut x = vec![0.0; l];
        for (s, v) in &factors {
            let z: f64 = StandardNormal.sample(&mut rng);
            for r in 0..l {
                x[r] += s * z * v[r];
            }
        }
        let step1 = operator(&e1_band, &zero, &x)?;
        let mut tilde = x.clone();
        for &r in o2.grid_indices() {
            tilde[r] = step1[r];
        }
        let two = operator(&e2_band, &zero, &tilde)?;
        let one2 = operator(&e2_full, &zero, &x)?;
        let one1 = operator(&e1_full, &zero, &x)?;
        for (p, &r) in idx.iter().enumerate() {
            let a = (x[r] - two[r]).powi(2);
            let b = (x[r] - one2[r]).powi(2) + (x[r] - one1[r]).powi(2);
            let d = b - a;
            sums[p][0] += a;
            sums[p][1] += (x[r] - one2[r]).powi(2);
            sums[p][2] += (x[r] - one1[r]).powi(2);
            sums[p][3] += d * d;
        }
    }
    let mut report = AccumulationReport {
        u: idx.iter().map(|&r| grid.points()[r]).collect(),
        two_step: Vec::new(),
        one_step_second: Vec::new(),
        one_step_first: Vec::new(),
        standard_error: Vec::new(),
        holds: Vec::new(),
        fraction_holding: 0.0,
    };
    for s in &sums {
        let a = s[0] / n;
        let b2 = s[1] / n;
        let b1 = s[2] / n;
        let mean_d = b2 + b1 - a;
        let var_d = (s[3] / n - mean_d * mean_d).max(0.0) * n / (n - 1.0).max(1.0);
        let se = (var_d / n).sqrt();
        report.two_step.push(a);
        report.one_step_second.push(b2);
        report.one_step_first.push(b1);
        report.standard_error.push(se);
        report.holds.push(a <= b2 + b1 + 2.0 * se);
    }
    let held = report.holds.iter().filter(|&&h| h).count();
    report.fraction_holding = held as f64 / report.holds.len().max(1) as f64;
    Ok(report)
}
